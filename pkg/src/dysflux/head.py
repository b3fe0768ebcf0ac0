"""Classification head over frozen backbone hidden states.

The head combines the backbone's L per-layer hidden-state sequences with one
trainable weight per layer, pools the resulting T x D sequence to a single
vector with scaled dot-product attention (query = projected time-mean, keys and
values = projected sequence), and feeds the pooled vector to a sigmoid
multi-label main branch plus a 2-way auxiliary branch.

The backbone is an input, never a parameter: hidden states receive no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .ops import attention_backward, attention_forward, sigmoid

# Canonical parameter order; checkpoint serialization and the optimizer rely on it.
PARAM_FIELDS = (
    "layer_weights",
    "q_weight", "q_bias",
    "k_weight", "k_bias",
    "v_weight", "v_bias",
    "main_weight", "main_bias",
    "aux_weight", "aux_bias",
)


@dataclass
class HeadParams:
    """All trainable parameters.

    Projections act on row vectors as x @ W.T + b, except that the key
    projection is linear only (see _attention_pool_full for why its bias
    cannot matter).
    """

    layer_weights: np.ndarray          # (L,)
    q_weight: np.ndarray               # (D, D)
    q_bias: np.ndarray                 # (D,)
    k_weight: np.ndarray               # (D, D)
    k_bias: np.ndarray                 # (D,)
    v_weight: np.ndarray               # (D, D)
    v_bias: np.ndarray                 # (D,)
    main_weight: np.ndarray            # (C, D)
    main_bias: np.ndarray              # (C,)
    aux_weight: np.ndarray             # (2, D)
    aux_bias: np.ndarray               # (2,)
    use_projections: bool = True       # ablation flag: False pools raw WLS directly

    @property
    def num_layers(self):
        return self.layer_weights.shape[0]

    @property
    def feature_dim(self):
        return self.q_weight.shape[0]

    @property
    def num_classes(self):
        return self.main_weight.shape[0]

    def copy(self):
        return replace(self, **{name: getattr(self, name).copy() for name in PARAM_FIELDS})


def param_items(params: HeadParams):
    """(name, array) pairs in canonical order."""
    return [(name, getattr(params, name)) for name in PARAM_FIELDS]


def param_count(params: HeadParams):
    return sum(arr.size for _, arr in param_items(params))


def init_params(seed, num_layers, feature_dim, num_classes, use_projections=True):
    """Deterministic initialization: layer weights 1/L, weights uniform
    +-sqrt(1/fan_in) with fan_in = feature_dim, biases zero."""
    if min(num_layers, feature_dim, num_classes) < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    d = feature_dim
    bound = np.sqrt(1.0 / d)

    def linear(rows):
        return rng.uniform(-bound, bound, size=(rows, d)), np.zeros(rows)

    q_w, q_b = linear(d)
    k_w, k_b = linear(d)
    v_w, v_b = linear(d)
    main_w, main_b = linear(num_classes)
    aux_w, aux_b = linear(2)
    return HeadParams(
        layer_weights=np.full(num_layers, 1.0 / num_layers),
        q_weight=q_w, q_bias=q_b,
        k_weight=k_w, k_bias=k_b,
        v_weight=v_w, v_bias=v_b,
        main_weight=main_w, main_bias=main_b,
        aux_weight=aux_w, aux_bias=aux_b,
        use_projections=use_projections,
    )


@dataclass
class HeadCache:
    """Intermediate values of one forward pass, consumed by head_backward."""

    wls: np.ndarray
    mean: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn_weights: np.ndarray


@dataclass
class HeadOutput:
    main_probs: np.ndarray             # (C,), sigmoid of main_logits
    main_logits: np.ndarray            # (C,)
    aux_logits: np.ndarray             # (2,)
    pooled: np.ndarray                 # (D,)
    cache: HeadCache | None = None


def weighted_layer_sum(hidden, layer_weights):
    """WLS[t, d] = sum_l w_l * hidden[l, t, d]."""
    hidden = np.asarray(hidden, dtype=np.float64)
    w = np.asarray(layer_weights, dtype=np.float64)
    if hidden.ndim != 3:
        raise ValueError(f"hidden states must be L x T x D, got shape {hidden.shape}")
    if w.ndim != 1 or w.shape[0] != hidden.shape[0]:
        raise ValueError(
            f"layer-weight count {w.shape} does not match layer count {hidden.shape[0]}"
        )
    return np.einsum("l,ltd->td", w, hidden)


def attention_pool(wls, params: HeadParams):
    """Collapse a T x D sequence to one D-vector; time-mean is the (single) query."""
    pooled, _ = _attention_pool_full(np.asarray(wls, dtype=np.float64), params)
    return pooled


def _attention_pool_full(wls, params):
    # The key bias is omitted from the score path: softmax scores are invariant
    # to a shift shared by every key, so an added k_bias could never influence
    # the output or receive gradient. The parameter field still exists for
    # shape/count compatibility.
    mean = wls.mean(axis=0)
    if params.use_projections:
        q = params.q_weight @ mean + params.q_bias
        k = wls @ params.k_weight.T
        v = wls @ params.v_weight.T + params.v_bias
    else:
        q, k, v = mean, wls, wls
    out, weights = attention_forward(q[None, :], k, v)
    return out[0], HeadCache(wls=wls, mean=mean, q=q, k=k, v=v, attn_weights=weights)


def head_forward(hidden, params: HeadParams):
    """Full forward pass; the returned output carries the cache for backward."""
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.shape[2] != params.feature_dim:
        raise ValueError(
            f"hidden feature dim {hidden.shape[2]} != parameter dim {params.feature_dim}"
        )
    wls = weighted_layer_sum(hidden, params.layer_weights)
    pooled, cache = _attention_pool_full(wls, params)
    main_logits = params.main_weight @ pooled + params.main_bias
    aux_logits = params.aux_weight @ pooled + params.aux_bias
    return HeadOutput(
        main_probs=sigmoid(main_logits),
        main_logits=main_logits,
        aux_logits=aux_logits,
        pooled=pooled,
        cache=cache,
    )


def head_backward(hidden, params: HeadParams, d_main_logits, d_aux_logits, output: HeadOutput):
    """Gradients for every parameter given upstream gradients on the two logit vectors.

    Requires the HeadOutput of a forward pass over the same (hidden, params).
    Hidden states receive no gradient.
    """
    if output.cache is None:
        raise RuntimeError("head_backward requires the cache of a completed forward pass")
    hidden = np.asarray(hidden, dtype=np.float64)
    c = output.cache
    d_main = np.asarray(d_main_logits, dtype=np.float64)
    d_aux = np.asarray(d_aux_logits, dtype=np.float64)
    t_frames = c.wls.shape[0]

    grads = {
        "main_weight": np.outer(d_main, output.pooled),
        "main_bias": d_main.copy(),
        "aux_weight": np.outer(d_aux, output.pooled),
        "aux_bias": d_aux.copy(),
    }
    d_pooled = params.main_weight.T @ d_main + params.aux_weight.T @ d_aux

    d_q_row, d_k, d_v = attention_backward(
        c.q[None, :], c.k, c.v, c.attn_weights, d_pooled[None, :]
    )
    d_q = d_q_row[0]
    if params.use_projections:
        grads["v_weight"] = d_v.T @ c.wls
        grads["v_bias"] = d_v.sum(axis=0)
        grads["k_weight"] = d_k.T @ c.wls
        grads["k_bias"] = np.zeros_like(params.k_bias)  # not on the score path
        grads["q_weight"] = np.outer(d_q, c.mean)
        grads["q_bias"] = d_q.copy()
        d_wls = d_v @ params.v_weight + d_k @ params.k_weight
        d_mean = params.q_weight.T @ d_q
    else:
        for name in ("q_weight", "q_bias", "k_weight", "k_bias", "v_weight", "v_bias"):
            grads[name] = np.zeros_like(getattr(params, name))
        d_wls = d_v + d_k
        d_mean = d_q
    d_wls = d_wls + d_mean[None, :] / t_frames

    grads["layer_weights"] = np.einsum("td,ltd->l", d_wls, hidden)
    return grads


def zero_grads(params: HeadParams):
    return {name: np.zeros_like(arr) for name, arr in param_items(params)}
