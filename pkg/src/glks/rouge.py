"""ROUGE-1/2/L on token lists (no stemming, no stopword removal)."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: int, n_cand: int, n_ref: int) -> "RougeScore":
        p = overlap / n_cand if n_cand else 0.0
        r = overlap / n_ref if n_ref else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return cls(p, r, f)

    def as_dict(self) -> dict:
        return {"p": self.precision, "r": self.recall, "f1": self.f1}


ZERO = RougeScore(0.0, 0.0, 0.0)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> RougeScore:
    if n not in (1, 2):
        raise ValueError(f"rouge_n supports n in {{1, 2}}, got {n}")
    if not reference:
        return ZERO
    cand, ref = ngrams(candidate, n), ngrams(reference, n)
    overlap = sum((cand & ref).values())
    return RougeScore.from_counts(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> RougeScore:
    if not reference:
        return ZERO
    return RougeScore.from_counts(lcs_length(candidate, reference), len(candidate), len(reference))


METRICS = ("rouge1", "rouge2", "rougeL")


def score_all(candidate: Sequence[str], reference: Sequence[str]) -> dict[str, RougeScore]:
    return {
        "rouge1": rouge_n(candidate, reference, 1),
        "rouge2": rouge_n(candidate, reference, 2),
        "rougeL": rouge_l(candidate, reference),
    }
