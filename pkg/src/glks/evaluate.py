"""Corpus-level ROUGE with single (SR) or multiple (MR) references."""

from __future__ import annotations

from typing import Sequence

from .data import Episode, Vocabulary
from .rouge import METRICS, RougeScore, score_all


def episode_scores(candidate: Sequence[str], references: Sequence[Sequence[str]]) -> dict[str, RougeScore]:
    """Per metric, the score against the best-matching reference (by F1)."""
    best: dict[str, RougeScore] = {}
    for ref in references:
        for name, s in score_all(candidate, ref).items():
            if name not in best or s.f1 > best[name].f1:
                best[name] = s
    return best


def score_predictions(predictions: Sequence[Sequence[str]], episodes: Sequence[Episode], mode: str = "SR") -> dict:
    """Mean precision/recall/F1 per metric over the corpus."""
    if mode not in ("SR", "MR"):
        raise ValueError(f"mode must be SR or MR, got {mode!r}")
    if len(predictions) != len(episodes):
        raise ValueError("one prediction per episode required")
    totals = {k: [0.0, 0.0, 0.0] for k in METRICS}
    for pred, ep in zip(predictions, episodes):
        refs = ep.all_references() if mode == "MR" else [ep.response]
        for name, s in episode_scores(pred, refs).items():
            acc = totals[name]
            acc[0] += s.precision
            acc[1] += s.recall
            acc[2] += s.f1
    n = max(len(episodes), 1)
    return {k: {"p": v[0] / n, "r": v[1] / n, "f1": v[2] / n} for k, v in totals.items()}


def evaluate_corpus(model, episodes: Sequence[Episode], vocab: Vocabulary, mode: str = "SR",
                    max_len: int = 60, beam_width: int = 1) -> dict:
    """Decode every episode with ``model.generate`` and score the outputs."""
    outputs = model.generate(list(episodes), vocab, max_len=max_len, beam_width=beam_width)
    return score_predictions([tokens for tokens, _ in outputs], episodes, mode)


class EchoModel:
    """Returns each episode's gold response; the upper bound fixture for scoring."""

    def generate(self, episodes, vocab=None, max_len: int = 60, beam_width: int = 1):
        return [(list(ep.response), None) for ep in episodes]


def percent_f1(scores: dict) -> dict:
    return {k: round(100.0 * scores[k]["f1"], 2) for k in METRICS}
