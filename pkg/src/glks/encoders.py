"""Bidirectional GRU encoders for background and context."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Vocabulary
from .tensor import Module, ParamFactory, Tensor


class GRU(Module):
    def __init__(self, pf: ParamFactory, d_in: int, d_hidden: int):
        self.w_input = pf.weight(d_in, 3 * d_hidden)
        self.w_hidden = pf.weight(d_hidden, 3 * d_hidden)
        self.bias = pf.bias(3 * d_hidden)
        self.d_hidden = d_hidden

    def cell(self, x: Tensor, h: Tensor) -> Tensor:
        return T.gru_cell(x, h, self.w_input, self.w_hidden, self.bias)

    def run(self, xs: Tensor, mask: np.ndarray, reverse: bool = False) -> list[Tensor]:
        """Run over ``xs`` (B, L, d_in); padded steps carry the previous state through."""
        B, L = mask.shape
        h = T.zeros((B, self.d_hidden), dtype=xs.dtype)
        states: list[Tensor | None] = [None] * L
        steps = range(L - 1, -1, -1) if reverse else range(L)
        for t in steps:
            new = self.cell(xs[:, t], h)
            h = new if mask[:, t].all() else T.where(mask[:, t, None], new, h)
            states[t] = h
        return states


class BiGRUEncoder(Module):
    """Forward and backward GRU states, concatenated then projected to ``d_hidden``."""

    def __init__(self, pf: ParamFactory, d_emb: int, d_hidden: int):
        self.fwd = GRU(pf, d_emb, d_hidden)
        self.bwd = GRU(pf, d_emb, d_hidden)
        self.proj_w = pf.weight(2 * d_hidden, d_hidden)
        self.proj_b = pf.bias(d_hidden)

    def __call__(self, emb: Tensor, mask: np.ndarray) -> Tensor:
        if mask.shape[1] == 0 or not mask.any(axis=1).all():
            raise T.ContractError("cannot encode an empty sequence")
        f = T.stack(self.fwd.run(emb, mask), axis=1)
        b = T.stack(self.bwd.run(emb, mask, reverse=True), axis=1)
        h = T.linear(T.concat([f, b], axis=-1), self.proj_w, self.proj_b)
        return T.masked_fill(h, ~mask[:, :, None], 0.0)


class Encoders(Module):
    """Shared embedding table with separate background and context BiGRUs."""

    def __init__(self, pf: ParamFactory, vocab_size: int, d_emb: int, d_hidden: int):
        self.embedding = pf.weight(vocab_size, d_emb)
        self.background = BiGRUEncoder(pf, d_emb, d_hidden)
        self.context = BiGRUEncoder(pf, d_emb, d_hidden)

    def embed(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.embedding, ids)

    def encode(self, ids: np.ndarray, mask: np.ndarray, which: str) -> Tensor:
        if which == "background":
            enc = self.background
        elif which == "context":
            enc = self.context
        else:
            raise ValueError(f"unknown encoder {which!r}")
        return enc(self.embed(ids), mask)


def last_state(h: Tensor, mask: np.ndarray) -> Tensor:
    """The output at each sequence's final unmasked position."""
    return T.gather_rows(h, mask.sum(axis=1) - 1)


def load_embeddings(path: str | Path, vocab: Vocabulary, table: np.ndarray) -> int:
    """Overwrite rows of ``table`` from a "token v1 ... vd" text file; returns rows loaded."""
    loaded = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split(" ")
            if len(parts) != table.shape[1] + 1:
                continue
            idx = vocab.stoi.get(parts[0])
            if idx is None:
                continue
            table[idx] = np.asarray(parts[1:], dtype=table.dtype)
            loaded += 1
    return loaded
