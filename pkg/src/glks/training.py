"""Losses, Adam with global-norm clipping, checkpoints and the two-phase trainer."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Episode, Vocabulary, build_vocab, make_batches
from .evaluate import evaluate_corpus
from .model import GLKS, ModelConfig
from .tensor import ConfigError, Parameter, Tensor

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------

def mle_loss(step_dists: Tensor, gold_ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """-(1/M) sum over episodes and unmasked steps of log P(gold token)."""
    B, L, V = step_dists.shape
    picked = T.gather_rows(T.reshape(step_dists, (B * L, V)), np.asarray(gold_ids).reshape(-1))
    logp = T.masked_fill(T.log(T.reshape(picked, (B, L))), ~mask, 0.0)
    return T.sum_(logp) * (-1.0 / B)


def ds_loss(unit_dist: Tensor, q: np.ndarray, window_mask: np.ndarray | None = None) -> Tensor:
    """(1/M) sum of KL(P || Q) per episode; Q is floored so the log stays finite."""
    B = unit_dist.shape[0]
    log_q = np.log(np.maximum(q, T.LOG_FLOOR)).astype(unit_dist.dtype)
    terms = unit_dist * (T.log(unit_dist) - T.Tensor(log_q, dtype=unit_dist.dtype))
    if window_mask is not None:
        terms = T.masked_fill(terms, ~window_mask, 0.0)
    return T.sum_(terms) * (1.0 / B)


def mce_loss(step_dists: Tensor, mask: np.ndarray) -> Tensor:
    """(1/M) sum over episodes, unmasked steps and tokens of P log P."""
    B = step_dists.shape[0]
    terms = step_dists * T.log(step_dists)
    terms = T.masked_fill(terms, ~mask[:, :, None], 0.0)
    return T.sum_(terms) * (1.0 / B)


@dataclass
class LossBreakdown:
    mle: Tensor | None
    ds: Tensor | None
    mce: Tensor | None
    total: Tensor

    def values(self) -> dict:
        return {k: (None if v is None else float(v.data)) for k, v in
                (("mle", self.mle), ("ds", self.ds), ("mce", self.mce), ("total", self.total))}


def total_loss(mle=None, ds=None, mce=None, use_mle=True, use_ds=True, use_mce=True,
               weights=(1.0, 1.0, 1.0)) -> LossBreakdown:
    """Weighted sum of the enabled parts; disabled parts are dropped from the graph."""
    parts = []
    for value, on, w in ((mle, use_mle, weights[0]), (ds, use_ds, weights[1]), (mce, use_mce, weights[2])):
        if on and value is not None:
            parts.append(value if w == 1.0 else value * w)
    if not parts:
        raise ConfigError("every loss part is disabled")
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return LossBreakdown(mle if use_mle else None, ds if use_ds else None, mce if use_mce else None, total)


def batch_losses(model: GLKS, batch, use_ds: bool = True, use_mce: bool = True,
                 weights=(1.0, 1.0, 1.0), mce_sign: float = 1.0) -> LossBreakdown:
    out = model.forward(batch)
    mle = mle_loss(out.mixed, batch.y_out, batch.y_mask)
    ds = None
    if use_ds and out.topic is not None:
        ds = ds_loss(out.topic.unit_dist, batch.q, out.topic.window_mask)
    mce = None
    if use_mce:
        mce = mce_loss(out.mixed, batch.y_mask)
        if mce_sign != 1.0:
            mce = mce * mce_sign
    return total_loss(mle, ds, mce, True, ds is not None, use_mce, weights)


# ----------------------------------------------------------------------
# optimisation
# ----------------------------------------------------------------------

def clip_gradients(grads: Sequence[np.ndarray], max_norm: float = 2.0) -> tuple[list[np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, norm before)."""
    norm = T.global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)
    step: int = 0


class Adam:
    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm: float | None = 2.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.state = OptimizerState()

    def step(self, params: Sequence[Parameter]) -> float:
        """Clip then apply one bias-corrected update to every parameter holding a gradient."""
        live = [p for p in params if p.grad is not None]
        for p in live:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
        grads = [p.grad for p in live]
        norm = T.global_norm(grads)
        if self.clip_norm is not None:
            grads, norm = clip_gradients(grads, self.clip_norm)
        self.state.step += 1
        for p, g in zip(live, grads):
            adam_update(p, g, self.state, self.lr, self.beta1, self.beta2, self.eps)
        return norm


def adam_update(p: Parameter, g: np.ndarray, state: OptimizerState, lr, beta1, beta2, eps) -> None:
    key = p.name or id(p)  # unnamed parameters (standalone use) keyed by identity
    if key not in state.m:
        state.m[key] = np.zeros_like(p.data)
        state.v[key] = np.zeros_like(p.data)
        state.steps[key] = 0
    state.steps[key] += 1
    t = state.steps[key]
    m = state.m[key] = beta1 * state.m[key] + (1 - beta1) * g
    v = state.v[key] = beta2 * state.v[key] + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 2.0
    pretrain_epochs: int = 10
    epochs: int = 20
    m: int = 4
    batch_size: int = 32
    seed: int = 0
    use_gks: bool = True
    use_ds: bool = True
    use_mce: bool = True
    mle_weight: float = 1.0
    ds_weight: float = 1.0
    mce_weight: float = 1.0
    mce_sign: float = 1.0
    ds_temperature: float = 1.0
    emb_dim: int = 300
    hidden: int = 256
    attn_dim: int = 0
    gks_depth: int = 1
    decoder_aggregated: bool = False
    vocab_cap: int = 26000
    background_limit: int = 256
    max_len: int = 60
    eval_every: int = 1
    dtype: str = "float32"
    log_timing: bool = False

    def validate(self) -> None:
        positive = ("lr", "eps", "clip_norm", "m", "batch_size", "emb_dim", "hidden", "gks_depth",
                    "vocab_cap", "background_limit", "max_len", "eval_every", "ds_temperature")
        bad = [name for name in positive if not getattr(self, name) > 0]
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                bad.append(name)
        for name in ("pretrain_epochs", "epochs"):
            if getattr(self, name) < 0:
                bad.append(name)
        if bad:
            raise ConfigError(f"invalid config values: {', '.join(bad)}")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, emb_dim=self.emb_dim, hidden=self.hidden, attn_dim=self.attn_dim,
            m=self.m, gks_depth=self.gks_depth, use_gks=self.use_gks,
            decoder_aggregated=self.decoder_aggregated, dtype=self.dtype, seed=self.seed,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(names))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

MAGIC = b"GLKSCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, model: GLKS, vocab: Vocabulary, meta: dict | None = None) -> None:
    """Magic + version + JSON header (config, vocab, tensor index) + raw little-endian tensors."""
    index, blobs, offset = [], [], 0
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<")).tobytes()
        index.append({"name": name, "dtype": p.data.dtype.str.lstrip("<>|="), "shape": list(p.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "model_config": model.config.to_dict(),
        "vocab": vocab.itos,
        "meta": meta or {},
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path) -> tuple[GLKS, Vocabulary, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a GLKS checkpoint")
    version, head_len = struct.unpack("<II", raw[len(MAGIC) : len(MAGIC) + 8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 8
    header = json.loads(raw[start : start + head_len].decode("utf-8"))
    body = start + head_len
    config = ModelConfig.from_dict(header["model_config"])
    model = GLKS(config)
    params = dict(model.named_parameters())
    for entry in header["tensors"]:
        if entry["name"] not in params:
            raise CheckpointError(f"{path}: unexpected tensor {entry['name']}")
        p = params[entry["name"]]
        data = np.frombuffer(raw, dtype=np.dtype("<" + entry["dtype"]), count=int(np.prod(entry["shape"])),
                             offset=body + entry["offset"]).reshape(entry["shape"])
        if tuple(entry["shape"]) != p.shape:
            raise CheckpointError(f"{path}: shape mismatch for {entry['name']}")
        p.data = data.astype(p.dtype)
    vocab = Vocabulary(header["vocab"][4:])
    if vocab.itos != header["vocab"]:
        raise CheckpointError(f"{path}: corrupt vocabulary")
    return model, vocab, header["meta"]


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

def snapshot(model: GLKS) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def restore(model: GLKS, snap: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        p.data = snap[name].copy()


def pretrain_parameters(model: GLKS) -> list[Parameter]:
    return model.encoders.parameters() + model.gks.parameters()


@dataclass
class TrainResult:
    model: GLKS
    vocab: Vocabulary
    history: list[dict]
    best_epoch: int | None
    best_score: float
    best_params: dict[str, np.ndarray]
    initial_params: dict[str, np.ndarray]


def ds_epoch(model: GLKS, batches, opt: Adam, params) -> float:
    total, count = 0.0, 0
    for batch in batches:
        model.zero_grad()
        topic = model.select(batch)
        loss = ds_loss(topic.unit_dist, batch.q, topic.window_mask)
        value = float(loss.data)
        assert value >= -1e-6, f"negative ds loss {value}"
        loss.backward()
        opt.step(params)
        total += value * len(batch)
        count += len(batch)
    return total / count


def joint_epoch(model: GLKS, batches, opt: Adam, cfg: TrainConfig) -> dict:
    sums = {"mle": 0.0, "ds": 0.0, "mce": 0.0, "total": 0.0, "tokens": 0.0}
    count = 0
    params = model.parameters()
    weights = (cfg.mle_weight, cfg.ds_weight, cfg.mce_weight)
    for batch in batches:
        model.zero_grad()
        parts = batch_losses(model, batch, cfg.use_ds, cfg.use_mce, weights, cfg.mce_sign)
        vals = parts.values()
        assert vals["mle"] >= 0, f"negative mle loss {vals['mle']}"
        if vals["ds"] is not None:
            assert vals["ds"] >= -1e-6, f"negative ds loss {vals['ds']}"
        parts.total.backward()
        opt.step(params)
        for k in ("mle", "ds", "mce", "total"):
            if vals[k] is not None:
                sums[k] += vals[k] * len(batch)
        sums["tokens"] += float(batch.y_mask.sum())
        count += len(batch)
    out = {k: (sums[k] / count if k != "tokens" else sums[k]) for k in sums}
    out["mle_per_token"] = sums["mle"] / max(sums["tokens"], 1.0)
    if not cfg.use_ds or not cfg.use_gks:
        out["ds"] = None
    if not cfg.use_mce:
        out["mce"] = None
    return out


def _round(x):
    return None if x is None else float(f"{x:.10g}")


def train(
    train_set: Sequence[Episode],
    valid_set: Sequence[Episode],
    cfg: TrainConfig,
    vocab: Vocabulary | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """DS-only pretraining of encoders + GKS, then joint training with validation selection."""
    cfg.validate()
    if not train_set or not valid_set:
        raise ConfigError("train and validation splits must be non-empty")
    if vocab is None:
        vocab = build_vocab(train_set, cfg.vocab_cap)
    rng = np.random.default_rng(cfg.seed)
    model = GLKS(cfg.model_config(len(vocab)), rng)
    initial = snapshot(model)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip_norm)
    history: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    if log_fh:
        log_fh.write(json.dumps({"header": {"seed": cfg.seed, "config": cfg.to_dict(),
                                            "vocab_size": len(vocab)}}, sort_keys=True) + "\n")

    def emit(rec: dict) -> None:
        history.append(rec)
        log.info("epoch %s", rec)
        if log_fh:
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()

    best_score, best_epoch, best = -1.0, None, snapshot(model)
    epoch = 0
    try:
        if cfg.use_gks and cfg.use_ds:
            params = pretrain_parameters(model)
            for _ in range(cfg.pretrain_epochs):
                epoch += 1
                t0 = time.perf_counter()
                batches = make_batches(train_set, vocab, cfg.batch_size, cfg.m, rng, ds_temperature=cfg.ds_temperature)
                ds = ds_epoch(model, batches, opt, params)
                emit({"epoch": epoch, "phase": "pretrain", "mle": None, "ds": _round(ds), "mce": None,
                      "total": _round(ds), "val_rouge_l": None,
                      "seconds": round(time.perf_counter() - t0, 3) if cfg.log_timing else None})
        for j in range(cfg.epochs):
            epoch += 1
            t0 = time.perf_counter()
            batches = make_batches(train_set, vocab, cfg.batch_size, cfg.m, rng, ds_temperature=cfg.ds_temperature)
            stats = joint_epoch(model, batches, opt, cfg)
            val = None
            if (j + 1) % cfg.eval_every == 0 or j == cfg.epochs - 1:
                scores = evaluate_corpus(model, valid_set, vocab, "SR", max_len=cfg.max_len)
                val = scores["rougeL"]["f1"]
                if val > best_score:
                    best_score, best_epoch, best = val, epoch, snapshot(model)
            emit({"epoch": epoch, "phase": "joint", "mle": _round(stats["mle"]), "ds": _round(stats["ds"]),
                  "mce": _round(stats["mce"]), "total": _round(stats["total"]),
                  "mle_per_token": _round(stats["mle_per_token"]), "val_rouge_l": _round(val),
                  "seconds": round(time.perf_counter() - t0, 3) if cfg.log_timing else None})
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_dir is not None:
        ckpt = Path(checkpoint_dir)
        ckpt.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt / "last.ckpt", model, vocab, {"epoch": epoch, "kind": "last"})
        last = snapshot(model)
        restore(model, best)
        save_checkpoint(ckpt / "best.ckpt", model, vocab,
                        {"epoch": best_epoch, "kind": "best", "val_rouge_l": _round(best_score)})
        restore(model, last)
    return TrainResult(model, vocab, history, best_epoch, best_score, best, initial)


def select_best(history: Sequence[dict]) -> int | None:
    """Epoch with the highest validation ROUGE-L (earliest on ties)."""
    best, best_epoch = None, None
    for rec in history:
        v = rec.get("val_rouge_l")
        if v is not None and (best is None or v > best):
            best, best_epoch = v, rec["epoch"]
    return best_epoch
