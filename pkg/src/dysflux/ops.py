"""Differentiable numeric primitives with analytic gradients and a finite-difference oracle.

Everything here is a pure function on float64 numpy arrays. Each primitive that
participates in training exposes its gradient (or a backward function) so the head
can be trained without a general-purpose autodiff graph, and every analytic gradient
can be checked against :func:`finite_difference_check`.
"""

from __future__ import annotations

import numpy as np


def _match_rank(out, like):
    return float(out) if np.ndim(like) == 0 else out


def sigmoid(x):
    """Numerically stable logistic function, elementwise.

    Uses the two-branch form so neither exp() overflows: for x >= 0 computes
    1/(1+exp(-x)), otherwise exp(x)/(1+exp(x)).
    """
    arr = np.asarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _match_rank(out, x)


def sigmoid_grad(x):
    """d sigmoid / dx = sigmoid(x) * (1 - sigmoid(x))."""
    s = np.asarray(sigmoid(x))
    return _match_rank(s * (1.0 - s), x)


def softplus(x):
    """log(1 + exp(x)) without overflow: max(x, 0) + log1p(exp(-|x|))."""
    arr = np.asarray(x, dtype=np.float64)
    return _match_rank(np.maximum(arr, 0.0) + np.log1p(np.exp(-np.abs(arr))), x)


def log_sigmoid(x):
    """log(sigmoid(x)) = -softplus(-x); finite for any finite x (never -inf)."""
    arr = np.asarray(x, dtype=np.float64)
    return _match_rank(-(np.maximum(-arr, 0.0) + np.log1p(np.exp(-np.abs(arr)))), x)


def softmax(v, axis=-1):
    """Max-shifted softmax along ``axis``; rows sum to 1 for entries up to +-1e4."""
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_vjp(s, upstream, axis=-1):
    """Vector-Jacobian product of softmax given its output ``s`` and ``upstream``.

    d/dv = s * (upstream - sum(upstream * s)) along ``axis``.
    """
    s = np.asarray(s, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    inner = np.sum(upstream * s, axis=axis, keepdims=True)
    return s * (upstream - inner)


def logsumexp(v, axis=-1):
    """Max-shifted log(sum(exp(v))) along ``axis``."""
    v = np.asarray(v, dtype=np.float64)
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def attention_forward(q, k, v):
    """Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.

    q: (n_q, d), k: (n_k, d), v: (n_k, d_v). Returns (output, weights) where
    output is (n_q, d_v) and weights is the (n_q, n_k) row-stochastic matrix.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("attention expects 2-D q, k, v")
    if q.shape[1] != k.shape[1]:
        raise ValueError(
            f"query dim {q.shape[1]} does not match key dim {k.shape[1]}"
        )
    if k.shape[0] != v.shape[0]:
        raise ValueError(
            f"key count {k.shape[0]} does not match value count {v.shape[0]}"
        )
    scale = 1.0 / np.sqrt(q.shape[1])
    scores = (q @ k.T) * scale
    weights = softmax(scores, axis=-1)
    return weights @ v, weights


def attention(q, k, v):
    """Attention output only; see :func:`attention_forward`."""
    out, _ = attention_forward(q, k, v)
    return out


def attention_backward(q, k, v, weights, d_out):
    """Gradients of scaled dot-product attention w.r.t. q, k and v.

    ``weights`` is the forward's softmax output; ``d_out`` is the upstream
    gradient on the attention output.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d_out = np.asarray(d_out, dtype=np.float64)
    scale = 1.0 / np.sqrt(q.shape[1])
    d_v = weights.T @ d_out
    d_weights = d_out @ v.T
    d_scores = softmax_vjp(weights, d_weights, axis=-1)
    d_q = (d_scores @ k) * scale
    d_k = (d_scores.T @ q) * scale
    return d_q, d_k, d_v


def finite_difference_check(f, x, analytic, eps=1e-5):
    """Max relative error between ``analytic`` and central differences of ``f`` at ``x``.

    ``f`` maps an array shaped like ``x`` to a scalar; ``analytic`` is the claimed
    gradient, shaped like ``x``. Error per coordinate is
    |analytic - central| / max(1e-8, |central|); the max over coordinates is returned.
    Raises ValueError if ``f`` produces a non-finite value at any probe point.
    """
    x = np.asarray(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError(f"analytic gradient shape {analytic.shape} != input shape {x.shape}")
    flat = x.ravel().copy()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(flat.reshape(x.shape)))
        flat[i] = orig - eps
        f_minus = float(f(flat.reshape(x.shape)))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"non-finite objective value at coordinate {i}")
        central = (f_plus - f_minus) / (2.0 * eps)
        err = abs(analytic.ravel()[i] - central) / max(1e-8, abs(central))
        worst = max(worst, err)
    return worst
