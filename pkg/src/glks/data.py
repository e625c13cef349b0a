"""Episodes, vocabulary, batching and distant-supervision targets."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import ConfigError

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
RESERVED = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
SEP = "<eou>"

CONTEXT_LIMIT = 65

_TOKEN_RE = re.compile(r"'\w+|\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace, detaching punctuation and clitics."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Episode:
    background: list[str]
    context: list[str]
    response: list[str]
    gold_span: tuple[int, int] | None = None
    references: list[list[str]] = field(default_factory=list)

    def all_references(self) -> list[list[str]]:
        return self.references or [self.response]


def flatten_context(utterances: Sequence[Sequence[str]], limit: int = CONTEXT_LIMIT) -> list[str]:
    """Join utterances (oldest first) with a separator and keep the most recent ``limit`` tokens."""
    flat: list[str] = []
    for i, utt in enumerate(utterances):
        if i:
            flat.append(SEP)
        flat.extend(utt)
    return flat[-limit:]


def make_episode(
    background: str | Sequence[str],
    context: Sequence[str] | Sequence[Sequence[str]],
    response: str | Sequence[str],
    background_limit: int = 256,
    span=None,
    references=(),
) -> Episode:
    bg = tokenize(background) if isinstance(background, str) else [t.lower() for t in background]
    if context and isinstance(context[0], str):
        utts = [tokenize(u) for u in context]
    else:
        utts = [[t.lower() for t in u] for u in context]
    resp = tokenize(response) if isinstance(response, str) else [t.lower() for t in response]
    refs = [tokenize(r) if isinstance(r, str) else list(r) for r in references]
    ep = Episode(
        background=bg[:background_limit],
        context=flatten_context(utts),
        response=resp,
        gold_span=tuple(span) if span is not None else None,
        references=refs,
    )
    if not ep.background or not ep.context or not ep.response:
        raise ValueError("episode has an empty background, context or response")
    return ep


def load_jsonl(path: str | Path, background_limit: int = 256) -> list[Episode]:
    episodes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                episodes.append(
                    make_episode(
                        rec["background"],
                        rec["context"],
                        rec["response"],
                        background_limit=background_limit,
                        span=rec.get("span"),
                        references=rec.get("references", ()),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return episodes


def episode_to_record(ep: Episode, context_utterances: Sequence[Sequence[str]] | None = None) -> dict:
    if context_utterances is None:
        context_utterances = _split_context(ep.context)
    rec = {
        "background": " ".join(ep.background),
        "context": [" ".join(u) for u in context_utterances],
        "response": " ".join(ep.response),
    }
    if ep.gold_span is not None:
        rec["span"] = list(ep.gold_span)
    if ep.references:
        rec["references"] = [" ".join(r) for r in ep.references]
    return rec


def _split_context(flat: Sequence[str]) -> list[list[str]]:
    utts: list[list[str]] = [[]]
    for tok in flat:
        if tok == SEP:
            utts.append([])
        else:
            utts[-1].append(tok)
    return utts


def save_jsonl(episodes: Iterable[Episode], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_to_record(ep)) + "\n")


# ----------------------------------------------------------------------
# vocabulary
# ----------------------------------------------------------------------

class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token: str):
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        return cls([t for t in lines if t])

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos


def build_vocab(corpus: Sequence[Episode], cap: int) -> Vocabulary:
    """Keep the ``cap - 4`` most frequent tokens; ties broken lexicographically."""
    if cap < 5:
        raise ConfigError(f"vocabulary cap must be at least 5, got {cap}")
    if not corpus:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for ep in corpus:
        counts.update(ep.background)
        counts.update(ep.context)
        counts.update(ep.response)
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([tok for tok, _ in ranked[: cap - len(RESERVED)]])


# ----------------------------------------------------------------------
# distant supervision
# ----------------------------------------------------------------------

def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    sa, sb = set(a), set(b)
    union = sa | sb
    if not union:
        return 0.0
    return len(sa & sb) / len(union)


def unfold(tokens: Sequence, m: int) -> list:
    """Non-overlapping windows of size ``m``; the last one may be shorter."""
    if m < 1:
        raise ConfigError(f"window size must be >= 1, got {m}")
    return [tokens[i : i + m] for i in range(0, len(tokens), m)]


def num_windows(length: int, m: int) -> int:
    return math.ceil(length / m)


def build_ds_targets(episode: Episode, m: int, temperature: float = 1.0) -> np.ndarray:
    """Softmax over per-window Jaccard similarity with the response."""
    scores = np.array([jaccard(w, episode.response) for w in unfold(episode.background, m)])
    z = scores / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


# ----------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------

@dataclass
class Batch:
    episodes: list[Episode]
    k_ids: np.ndarray      # (B, Kp) base-vocabulary ids, OOV -> UNK
    k_ext: np.ndarray      # (B, Kp) extended ids, OOV -> |V| + j
    k_mask: np.ndarray
    x_ids: np.ndarray
    x_mask: np.ndarray
    y_in: np.ndarray       # (B, T) decoder inputs: BOS, y1 .. y_{T-1}
    y_out: np.ndarray      # (B, T) extended-id targets: y1 .. y_T, EOS
    y_mask: np.ndarray
    oovs: list[list[str]]  # per-episode extended-vocabulary tokens
    q: np.ndarray          # (B, W) distant-supervision targets, zero-padded
    window_mask: np.ndarray
    m: int
    vocab_size: int

    def __len__(self):
        return len(self.episodes)

    @property
    def ext_size(self) -> int:
        return self.vocab_size + max((len(o) for o in self.oovs), default=0)


def _pad(rows: Sequence[Sequence[int]], width: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    width = width or max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
    return ids, _mask(rows, width)


def _mask(rows, width):
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        mask[i, : len(r)] = True
    return mask


def extend_ids(tokens: Sequence[str], vocab: Vocabulary) -> tuple[list[int], list[str]]:
    """Map tokens to ids, giving each distinct OOV token its own id beyond ``len(vocab)``."""
    oovs: list[str] = []
    ids = []
    for t in tokens:
        if t in vocab.stoi:
            ids.append(vocab.stoi[t])
        else:
            if t not in oovs:
                oovs.append(t)
            ids.append(len(vocab) + oovs.index(t))
    return ids, oovs


def target_ids(tokens: Sequence[str], vocab: Vocabulary, oovs: Sequence[str]) -> list[int]:
    out = []
    for t in tokens:
        if t in vocab.stoi:
            out.append(vocab.stoi[t])
        elif t in oovs:
            out.append(len(vocab) + list(oovs).index(t))
        else:
            out.append(UNK_ID)
    return out


def make_batch(episodes: Sequence[Episode], vocab: Vocabulary, m: int, ds_temperature: float = 1.0) -> Batch:
    episodes = list(episodes)
    bg_ext, oovs = [], []
    for ep in episodes:
        ids, o = extend_ids(ep.background, vocab)
        bg_ext.append(ids)
        oovs.append(o)
    k_ext, k_mask = _pad(bg_ext)
    k_ids = np.where(k_ext >= len(vocab), UNK_ID, k_ext)
    x_ids, x_mask = _pad([vocab.encode(ep.context) for ep in episodes])
    y_in, y_mask = _pad([[BOS_ID] + vocab.encode(ep.response) for ep in episodes])
    y_out, _ = _pad([target_ids(ep.response, vocab, o) + [EOS_ID] for ep, o in zip(episodes, oovs)])
    n_win = num_windows(k_ext.shape[1], m)
    q = np.zeros((len(episodes), n_win))
    w_mask = np.zeros((len(episodes), n_win), dtype=bool)
    for i, ep in enumerate(episodes):
        row = build_ds_targets(ep, m, ds_temperature)
        q[i, : len(row)] = row
        w_mask[i, : len(row)] = True
    return Batch(
        episodes=episodes, k_ids=k_ids, k_ext=k_ext, k_mask=k_mask, x_ids=x_ids, x_mask=x_mask,
        y_in=y_in, y_out=y_out, y_mask=y_mask, oovs=oovs, q=q, window_mask=w_mask, m=m,
        vocab_size=len(vocab),
    )


def make_batches(
    corpus: Sequence[Episode],
    vocab: Vocabulary,
    batch_size: int,
    m: int,
    rng: np.random.Generator | int | None = None,
    shuffle: bool = True,
    ds_temperature: float = 1.0,
) -> list[Batch]:
    """One epoch of batches. ``rng`` may be a seed or a generator reused across epochs."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(corpus))
    if shuffle:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        order = rng.permutation(len(corpus))
    return [
        make_batch([corpus[i] for i in order[s : s + batch_size]], vocab, m, ds_temperature)
        for s in range(0, len(corpus), batch_size)
    ]


def decode_ids(ids: Sequence[int], vocab: Vocabulary, oovs: Sequence[str]) -> list[str]:
    """Inverse of ``target_ids``: extended ids resolve through the episode's OOV list."""
    out = []
    for i in ids:
        out.append(vocab.itos[i] if i < len(vocab) else oovs[i - len(vocab)])
    return out


# ----------------------------------------------------------------------
# synthetic corpus
# ----------------------------------------------------------------------

SYNTH_PREFIX = ["well", "actually"]
SYNTH_CHAT = ["hi", "there", "what", "about", "tell", "me", "more", "ok"]


def synth_corpus(
    seed: int,
    n_episodes: int,
    vocab_size: int = 60,
    window_m: int = 4,
    n_windows: tuple[int, int] = (4, 6),
) -> list[Episode]:
    """Episodes whose response copies the one background window holding the context's topic.

    The token pool (``vocab_size`` tokens beyond the fixed chat/prefix words) is
    split into topic tokens and filler tokens. Each window carries one distinct
    topic token at a random offset among ``window_m - 1`` fillers. The context
    ends by naming one of those topics; the response is a fixed prefix followed
    by that window verbatim. ``gold_span`` holds the window's token offsets.
    """
    if vocab_size < 20:
        raise ConfigError(f"synthetic vocab_size must be >= 20, got {vocab_size}")
    rng = np.random.default_rng(seed)
    n_topics = vocab_size // 3
    topics = [f"t{i}" for i in range(n_topics)]
    fillers = [f"w{i}" for i in range(vocab_size - n_topics)]
    episodes = []
    for _ in range(n_episodes):
        w = int(rng.integers(n_windows[0], n_windows[1] + 1))
        window_topics = rng.choice(n_topics, size=w, replace=False)
        background: list[str] = []
        for t in window_topics:
            win = [fillers[j] for j in rng.choice(len(fillers), size=window_m - 1, replace=False)]
            win.insert(int(rng.integers(window_m)), topics[t])
            background.extend(win)
        gold = int(rng.integers(w))
        opener = [SYNTH_CHAT[j] for j in rng.choice(len(SYNTH_CHAT), size=2, replace=False)]
        context = [opener, ["what", "about", topics[window_topics[gold]]]]
        start = gold * window_m
        response = SYNTH_PREFIX + background[start : start + window_m]
        episodes.append(
            Episode(
                background=background,
                context=flatten_context(context),
                response=response,
                gold_span=(start, start + window_m),
            )
        )
    return episodes


def gold_window(episode: Episode, m: int) -> int | None:
    if episode.gold_span is None:
        return None
    return episode.gold_span[0] // m
