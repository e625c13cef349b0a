"""State tracker and local knowledge selection (pointer-generator decoding)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import UNK_ID
from .encoders import GRU
from .gks import AdditiveAttention
from .tensor import Module, ParamFactory, Tensor


@dataclass
class StepOutput:
    vocab_dist: Tensor    # (B, V)
    pointer_dist: Tensor  # (B, K)
    gate: Tensor          # (B, 1)
    mixed_dist: Tensor    # (B, V + n_oov)
    state: Tensor         # (B, d) decoder state after this step


@dataclass
class DecoderInputs:
    """Per-batch tensors the decoder reads at every step."""

    topic: Tensor          # h_{X->K}, (B, d)
    background: Tensor     # (B, K, d)
    context: Tensor        # (B, X, d)
    k_mask: np.ndarray
    x_mask: np.ndarray
    k_ext: np.ndarray      # extended ids of background tokens
    ext_size: int
    k_proj: Tensor | None = None
    x_proj: Tensor | None = None
    p_proj: Tensor | None = None


def guidance_vector(topic: Tensor, state: Tensor, prev_emb: Tensor) -> Tensor:
    """Fixed layout [topic | state | previous-token embedding]."""
    return T.concat([topic, state, prev_emb], axis=-1)


def mix(vocab_dist: Tensor, pointer_dist: Tensor, gate: Tensor, k_ext: np.ndarray, ext_size: int) -> Tensor:
    """gate * P_vocab (zero on OOV ids) + (1 - gate) * copy mass summed per token id."""
    B, V = vocab_dist.shape
    if ext_size > V:
        vocab_dist = T.concat([vocab_dist, T.zeros((B, ext_size - V), dtype=vocab_dist.dtype)], axis=-1)
    g = T.expand(T.reshape(gate, (B,)), 1, ext_size)
    copy = T.scatter_add(pointer_dist, k_ext, ext_size)
    return g * vocab_dist + (1.0 - g) * copy


class Decoder(Module):
    def __init__(self, pf: ParamFactory, vocab_size: int, d_emb: int, d: int, d_attn: int | None = None):
        d_attn = d_attn or d
        d_guide = 2 * d + d_emb
        self.w_s = pf.weight(2 * d, d)
        self.b_s = pf.bias(d)
        self.gru = GRU(pf, d_emb, d)
        self.background_attention = AdditiveAttention(pf, d_guide, d, d_attn)
        self.context_attention = AdditiveAttention(pf, d_guide, d, d_attn)
        self.pointer_attention = AdditiveAttention(pf, d_guide, d, d_attn)
        self.w_r = pf.weight(d_emb + 4 * d, d)
        self.b_r = pf.bias(d)
        self.w_v = pf.weight(d, vocab_size)
        self.w_gate = pf.weight(d, 1)
        self.b_gate = pf.bias(1)

    def init_state(self, last_ctx: Tensor, topic: Tensor) -> Tensor:
        return T.linear(T.concat([last_ctx, topic], axis=-1), self.w_s, self.b_s)

    def step_state(self, state: Tensor, prev_emb: Tensor) -> Tensor:
        return self.gru.cell(prev_emb, state)

    def readout(self, prev_emb, state, topic, bg_summary, ctx_summary) -> Tensor:
        feats = T.concat([prev_emb, state, topic, bg_summary, ctx_summary], axis=-1)
        return T.linear(feats, self.w_r, self.b_r)

    def vocab_dist(self, feature: Tensor) -> Tensor:
        return T.softmax(T.linear(feature, self.w_v))

    def gate(self, state: Tensor) -> Tensor:
        return T.sigmoid(T.linear(state, self.w_gate, self.b_gate))

    def prepare(self, inp: DecoderInputs) -> DecoderInputs:
        inp.k_proj = self.background_attention.project_keys(inp.background)
        inp.x_proj = self.context_attention.project_keys(inp.context)
        inp.p_proj = self.pointer_attention.project_keys(inp.background)
        return inp

    def step(self, state: Tensor, prev_emb: Tensor, inp: DecoderInputs) -> StepOutput:
        """Advance the state with the previous token and emit this step's distributions."""
        state = self.step_state(state, prev_emb)
        guide = guidance_vector(inp.topic, state, prev_emb)
        bg_summary, _ = self.background_attention(guide, inp.background, inp.k_mask, inp.k_proj)
        ctx_summary, _ = self.context_attention(guide, inp.context, inp.x_mask, inp.x_proj)
        pointer = T.masked_softmax(self.pointer_attention.scores(guide, inp.p_proj), inp.k_mask)
        p_vocab = self.vocab_dist(self.readout(prev_emb, state, inp.topic, bg_summary, ctx_summary))
        g = self.gate(state)
        mixed = mix(p_vocab, pointer, g, inp.k_ext, inp.ext_size)
        return StepOutput(p_vocab, pointer, g, mixed, state)


def base_ids(ext_ids: np.ndarray, vocab_size: int) -> np.ndarray:
    """Extended ids with copied OOVs mapped to UNK, for embedding lookups."""
    return np.where(ext_ids >= vocab_size, UNK_ID, ext_ids)
