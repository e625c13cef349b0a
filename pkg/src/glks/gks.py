"""Global knowledge selection: which background span to talk about next.

The background and context states are fused with the last context state by
highway layers, scored against each other in a matching matrix, max-pooled
to per-token transition weights and then summed over non-overlapping
``m``-token windows ("semantic units"). A softmax over the window scores
weights the attention-pooled window vectors into the topic transition vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigError, Module, ParamFactory, Tensor


class AdditiveAttention(Module):
    """score(q, k) = v . tanh(q Wq + k Wk)"""

    def __init__(self, pf: ParamFactory, d_query: int, d_key: int, d_attn: int):
        self.w_query = pf.weight(d_query, d_attn)
        self.w_key = pf.weight(d_key, d_attn)
        self.v = pf.weight(d_attn, 1)

    def project_keys(self, keys: Tensor) -> Tensor:
        return T.linear(keys, self.w_key)

    def scores(self, query: Tensor, projected_keys: Tensor) -> Tensor:
        B, L, _ = projected_keys.shape
        q = T.expand(T.linear(query, self.w_query), 1, L)
        s = T.matmul(T.tanh(q + projected_keys), self.v)
        return T.reshape(s, (B, L))

    def __call__(self, query: Tensor, keys: Tensor, mask: np.ndarray, projected_keys: Tensor | None = None):
        """Masked attention of ``query`` (B, dq) over ``keys`` (B, L, dk).

        Returns the weighted sum (B, dk) and the weights (B, L).
        """
        if projected_keys is None:
            projected_keys = self.project_keys(keys)
        weights = T.masked_softmax(self.scores(query, projected_keys), mask)
        B, L = weights.shape
        summary = T.matmul(T.reshape(weights, (B, 1, L)), keys)
        return T.reshape(summary, (B, keys.shape[-1])), weights


class Highway(Module):
    """One fusion layer: gate * linear([h, c]) + (1 - gate) * tanh(nonlinear([h, c]))."""

    def __init__(self, pf: ParamFactory, d: int):
        self.w_linear = pf.weight(2 * d, d)
        self.b_linear = pf.bias(d)
        self.w_nonlinear = pf.weight(2 * d, d)
        self.b_nonlinear = pf.bias(d)
        self.w_gate = pf.weight(2 * d, d)
        self.b_gate = pf.bias(d)

    def __call__(self, h: Tensor, last_ctx: Tensor) -> Tensor:
        inp = T.concat([h, T.expand(last_ctx, 1, h.shape[1])], axis=-1)
        gate = T.sigmoid(T.linear(inp, self.w_gate, self.b_gate))
        lin = T.linear(inp, self.w_linear, self.b_linear)
        nonlin = T.tanh(T.linear(inp, self.w_nonlinear, self.b_nonlinear))
        return gate * lin + (1.0 - gate) * nonlin


def highway_aggregate(h: Tensor, last_ctx: Tensor, layers) -> Tensor:
    if len(layers) < 1:
        raise ConfigError("highway depth must be >= 1")
    for layer in layers:
        h = layer(h, last_ctx)
    return h


def matching_matrix(
    hk: Tensor, hx: Tensor, w_m1: Tensor, w_m2: Tensor, v_m: Tensor,
    k_mask: np.ndarray | None = None, x_mask: np.ndarray | None = None,
) -> Tensor:
    """M[b, i, j] = v . tanh(hk_i W1 + hx_j W2); padded pairs hold -inf."""
    B, K, _ = hk.shape
    X = hx.shape[1]
    a = T.expand(T.linear(hk, w_m1), 2, X)
    b = T.expand(T.linear(hx, w_m2), 1, K)
    m = T.reshape(T.matmul(T.tanh(a + b), v_m), (B, K, X))
    if k_mask is not None and x_mask is not None:
        pair = k_mask[:, :, None] & x_mask[:, None, :]
        if not pair.all():
            m = T.masked_fill(m, ~pair, -np.inf)
    return m


def transition_weights(m: Tensor) -> Tensor:
    """Max-pool the matching matrix over the context axis."""
    return T.max_over_axis(m, axis=-1)


def _pad_to_windows(x: Tensor, m: int, axis: int) -> Tensor:
    length = x.shape[axis]
    extra = -length % m
    if not extra:
        return x
    shape = list(x.shape)
    shape[axis] = extra
    return T.concat([x, T.zeros(shape, dtype=x.dtype)], axis=axis)


def _window_validity(valid: np.ndarray, m: int) -> np.ndarray:
    extra = -valid.shape[-1] % m
    if extra:
        valid = np.concatenate([valid, np.zeros(valid.shape[:-1] + (extra,), dtype=bool)], axis=-1)
    return valid.reshape(valid.shape[:-1] + (-1, m))


def unfold_sum(w: Tensor, m: int) -> Tensor:
    """Sum ``w`` over non-overlapping stride-``m`` windows of its last axis.

    -inf entries are left out of the sums; a window with nothing else is -inf.
    """
    if m < 1:
        raise ConfigError(f"window size must be >= 1, got {m}")
    valid = np.isfinite(w.data)
    x = T.masked_fill(w, ~valid, 0.0) if not valid.all() else w
    x = _pad_to_windows(x, m, axis=-1)
    sums = T.sum_(T.reshape(x, x.shape[:-1] + (-1, m)), axis=-1)
    live = _window_validity(valid, m).any(axis=-1)
    if not live.all():
        sums = T.masked_fill(sums, ~live, -np.inf)
    return sums


def unfold_attention(
    hk: Tensor, last_ctx: Tensor, m: int, attention: AdditiveAttention, k_mask: np.ndarray
) -> tuple[Tensor, Tensor]:
    """Attention-pool each window of ``hk`` with a softmax local to the window.

    Returns unit vectors (B, W, d) and the local weights (B, W, m). Windows
    made only of padding get zero weights everywhere.
    """
    B, K, d = hk.shape
    scores = attention.scores(last_ctx, attention.project_keys(hk))
    scores = _pad_to_windows(scores, m, axis=-1)
    local_mask = _window_validity(k_mask, m)
    n_win = local_mask.shape[1]
    weights = T.masked_softmax(T.reshape(scores, (B, n_win, m)), local_mask, allow_empty=True)
    keys = T.reshape(_pad_to_windows(hk, m, axis=1), (B, n_win, m, d))
    units = T.matmul(T.reshape(weights, (B, n_win, 1, m)), keys)
    return T.reshape(units, (B, n_win, d)), weights


def topic_transition(unit_weights: Tensor, units: Tensor, window_mask: np.ndarray | None = None):
    """Softmax over window scores and the probability-weighted unit average."""
    dist = T.masked_softmax(unit_weights, window_mask)
    B, W = dist.shape
    vec = T.reshape(T.matmul(T.reshape(dist, (B, 1, W)), units), (B, units.shape[-1]))
    return dist, vec


@dataclass
class TopicTransition:
    unit_weights: Tensor      # (B, W) summed transition weights, -inf on padding windows
    unit_dist: Tensor         # (B, W)
    vector: Tensor            # (B, d)
    units: Tensor             # (B, W, d)
    local_weights: Tensor     # (B, W, m)
    window_mask: np.ndarray   # (B, W)
    background: Tensor        # aggregated background states
    context: Tensor           # aggregated context states


class GKS(Module):
    def __init__(self, pf: ParamFactory, d: int, depth: int = 1, d_attn: int | None = None):
        if depth < 1:
            raise ConfigError(f"gks_depth must be >= 1, got {depth}")
        d_attn = d_attn or d
        self.background_highway = [Highway(pf, d) for _ in range(depth)]
        self.context_highway = [Highway(pf, d) for _ in range(depth)]
        self.w_m1 = pf.weight(d, d_attn)
        self.w_m2 = pf.weight(d, d_attn)
        self.v_m = pf.weight(d_attn, 1)
        self.unit_attention = AdditiveAttention(pf, d, d, d_attn)

    def __call__(self, hk: Tensor, hx: Tensor, last_ctx: Tensor,
                 k_mask: np.ndarray, x_mask: np.ndarray, m: int) -> TopicTransition:
        hk2 = highway_aggregate(hk, last_ctx, self.background_highway)
        hx2 = highway_aggregate(hx, last_ctx, self.context_highway)
        mm = matching_matrix(hk2, hx2, self.w_m1, self.w_m2, self.v_m, k_mask, x_mask)
        w = transition_weights(mm)
        unit_weights = unfold_sum(w, m)
        units, local = unfold_attention(hk2, last_ctx, m, self.unit_attention, k_mask)
        window_mask = _window_validity(k_mask, m).any(axis=-1)
        dist, vec = topic_transition(unit_weights, units, window_mask)
        return TopicTransition(unit_weights, dist, vec, units, local, window_mask, hk2, hx2)
