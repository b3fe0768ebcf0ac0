"""Focal loss, weighted BCE, auxiliary cross-entropy and their multi-task combination.

Public semantics are stated on probabilities; internally every loss is computed
from logits through fused log-sigmoid / log-sum-exp forms so that nothing
overflows or produces -inf for finite logits. Each ``*_from_logits`` function
returns ``(loss, d_loss/d_logits)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import log_sigmoid, logsumexp, sigmoid, softmax

MAIN_LOSS_KINDS = ("focal", "weighted_bce")


@dataclass
class LossConfig:
    """Hyperparameters of the combined training objective."""

    alpha: float = 0.7
    gamma: float = 3.0
    w_main: float = 0.9
    main_loss_kind: str = "focal"
    class_weights: np.ndarray | None = None
    aux_class_weights: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 <= self.w_main <= 1.0:
            raise ValueError(f"w_main must be in [0, 1], got {self.w_main}")
        if self.main_loss_kind not in MAIN_LOSS_KINDS:
            raise ValueError(f"unknown main_loss_kind {self.main_loss_kind!r}")
        for name in ("class_weights", "aux_class_weights"):
            w = getattr(self, name)
            if w is not None:
                w = np.asarray(w, dtype=np.float64)
                if np.any(w <= 0.0):
                    raise ValueError(f"{name} must be strictly positive")
                setattr(self, name, w)

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "gamma": self.gamma,
            "w_main": self.w_main,
            "main_loss_kind": self.main_loss_kind,
            "class_weights": None if self.class_weights is None else list(map(float, self.class_weights)),
            "aux_class_weights": None if self.aux_class_weights is None else list(map(float, self.aux_class_weights)),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            alpha=d["alpha"],
            gamma=d["gamma"],
            w_main=d["w_main"],
            main_loss_kind=d["main_loss_kind"],
            class_weights=None if d.get("class_weights") is None else np.asarray(d["class_weights"]),
            aux_class_weights=None if d.get("aux_class_weights") is None else np.asarray(d["aux_class_weights"]),
        )


def _check_binary(y, name="target"):
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError(f"{name} must be binary 0/1")
    return y


def focal_loss(p, y, alpha, gamma):
    """-alpha * (1 - p_t)^gamma * log(p_t) with p_t = p if y == 1 else 1 - p.

    Probability-facing form; ``p`` must lie strictly inside (0, 1).
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must be in (0, 1), got {p}")
    y = int(y)
    if y not in (0, 1):
        raise ValueError(f"target must be 0 or 1, got {y}")
    p_t = p if y == 1 else 1.0 - p
    return -alpha * (1.0 - p_t) ** gamma * np.log(p_t)


def focal_loss_from_logit(logit, y, alpha, gamma):
    """Fused focal loss on a single logit; returns (loss, d_loss/d_logit)."""
    z = float(logit) if int(y) == 1 else -float(logit)
    s = sigmoid(z)                 # p_t
    one_minus = sigmoid(-z)        # 1 - p_t
    log_s = log_sigmoid(z)         # log(p_t), finite for any finite logit
    loss = -alpha * one_minus**gamma * log_s
    d_z = alpha * gamma * s * one_minus**gamma * log_s - alpha * one_minus ** (gamma + 1.0)
    d_logit = d_z if int(y) == 1 else -d_z
    return loss, d_logit


def focal_loss_multi(probs, targets, alpha, gamma):
    """Mean over classes of the per-class focal loss."""
    probs = np.asarray(probs, dtype=np.float64)
    targets = _check_binary(targets)
    if probs.shape != targets.shape:
        raise ValueError(f"probs shape {probs.shape} != targets shape {targets.shape}")
    return float(np.mean([focal_loss(p, y, alpha, gamma) for p, y in zip(probs, targets)]))


def focal_loss_multi_from_logits(logits, targets, alpha, gamma, class_mask=None):
    """Mean focal loss over (unmasked) classes from logits; returns (loss, grad).

    ``class_mask`` selects the classes that enter the mean; the gradient is zero
    for excluded classes.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = _check_binary(targets)
    if logits.shape != targets.shape:
        raise ValueError(f"logits shape {logits.shape} != targets shape {targets.shape}")
    z = np.where(targets == 1.0, logits, -logits)
    s = sigmoid(z)
    one_minus = sigmoid(-z)
    log_s = log_sigmoid(z)
    losses = -alpha * one_minus**gamma * log_s
    d_z = alpha * gamma * s * one_minus**gamma * log_s - alpha * one_minus ** (gamma + 1.0)
    d_logits = np.where(targets == 1.0, d_z, -d_z)
    return _masked_mean(losses, d_logits, class_mask)


def weighted_bce(probs, targets, class_weights):
    """Mean over classes of weight_c * [-y log p - (1-y) log(1-p)]."""
    probs = np.asarray(probs, dtype=np.float64)
    targets = _check_binary(targets)
    w = np.asarray(class_weights, dtype=np.float64)
    if np.any(w <= 0.0):
        raise ValueError("class weights must be strictly positive")
    if probs.shape != targets.shape or w.shape != probs.shape:
        raise ValueError("probs, targets and class_weights must share one shape")
    if np.any((probs <= 0.0) | (probs >= 1.0)):
        raise ValueError("probabilities must be in (0, 1)")
    per_class = w * (-targets * np.log(probs) - (1.0 - targets) * np.log(1.0 - probs))
    return float(np.mean(per_class))


def weighted_bce_from_logits(logits, targets, class_weights=None, class_mask=None):
    """Fused weighted BCE from logits; returns (loss, grad)."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = _check_binary(targets)
    if class_weights is None:
        w = np.ones_like(logits)
    else:
        w = np.asarray(class_weights, dtype=np.float64)
        if np.any(w <= 0.0):
            raise ValueError("class weights must be strictly positive")
    # -y log s(l) - (1-y) log s(-l) = y*softplus(-l) + (1-y)*softplus(l)
    per_class = w * (-targets * log_sigmoid(logits) - (1.0 - targets) * log_sigmoid(-logits))
    d_logits = w * (sigmoid(logits) - targets)
    return _masked_mean(per_class, d_logits, class_mask)


def _masked_mean(per_class, d_per_class, class_mask):
    if class_mask is None:
        n = per_class.size
        return float(np.mean(per_class)), d_per_class / n
    class_mask = np.asarray(class_mask, dtype=bool)
    n = int(class_mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(d_per_class)
    grad = np.where(class_mask, d_per_class / n, 0.0)
    return float(per_class[class_mask].sum() / n), grad


def aux_cross_entropy(aux_logits, target, aux_class_weights=None):
    """Weighted negative log-softmax probability of ``target`` (0 or 1)."""
    loss, _ = aux_cross_entropy_from_logits(aux_logits, target, aux_class_weights)
    return loss


def aux_cross_entropy_from_logits(aux_logits, target, aux_class_weights=None):
    """Auxiliary-branch cross-entropy via log-sum-exp; returns (loss, grad)."""
    logits = np.asarray(aux_logits, dtype=np.float64)
    target = int(target)
    if target not in (0, 1):
        raise ValueError(f"auxiliary target must be 0 or 1, got {target}")
    if aux_class_weights is None:
        w_t = 1.0
    else:
        w = np.asarray(aux_class_weights, dtype=np.float64)
        if np.any(w <= 0.0):
            raise ValueError("aux class weights must be strictly positive")
        w_t = float(w[target])
    loss = w_t * (logsumexp(logits) - logits[target])
    grad = softmax(logits)
    grad[target] -= 1.0
    return float(loss), w_t * grad


def mtl_loss(l_main, l_aux, w_main):
    """w_main * l_main + (1 - w_main) * l_aux."""
    if not 0.0 <= w_main <= 1.0:
        raise ValueError(f"w_main must be in [0, 1], got {w_main}")
    return w_main * l_main + (1.0 - w_main) * l_aux


def main_loss_from_logits(config: LossConfig, logits, targets, class_mask=None):
    """Dispatch the configured main loss; returns (loss, d_loss/d_logits)."""
    if config.main_loss_kind == "focal":
        return focal_loss_multi_from_logits(logits, targets, config.alpha, config.gamma, class_mask)
    return weighted_bce_from_logits(logits, targets, config.class_weights, class_mask)
