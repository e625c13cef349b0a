"""The full GLKS network: encoders, global selection and the copy decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .data import BOS_ID, EOS_ID, Batch, Vocabulary, decode_ids, make_batch
from .decoder import Decoder, DecoderInputs, StepOutput, base_ids
from .encoders import Encoders, last_state
from .gks import GKS, TopicTransition
from .trace import KSTrace
from .tensor import Module, ParamFactory, Tensor, no_grad


@dataclass
class ModelConfig:
    vocab_size: int
    emb_dim: int = 300
    hidden: int = 256
    attn_dim: int = 0            # 0 -> same as hidden
    m: int = 4
    gks_depth: int = 1
    use_gks: bool = True
    decoder_aggregated: bool = False  # decoder attends over highway-aggregated states
    init_scale: float = 0.1
    dtype: str = "float32"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardResult:
    steps: list[StepOutput]
    mixed: Tensor                      # (B, T, V_ext) teacher-forced step distributions
    topic: TopicTransition | None


class GLKS(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        dtype = np.dtype(config.dtype)
        if rng is None:
            rng = np.random.default_rng(config.seed)
        pf = ParamFactory(rng, dtype=dtype, scale=config.init_scale)
        d_attn = config.attn_dim or config.hidden
        self.encoders = Encoders(pf, config.vocab_size, config.emb_dim, config.hidden)
        self.gks = GKS(pf, config.hidden, config.gks_depth, d_attn)
        self.decoder = Decoder(pf, config.vocab_size, config.emb_dim, config.hidden, d_attn)
        T.name_parameters(self)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    # -- building blocks ------------------------------------------------
    def encode(self, batch: Batch):
        hk = self.encoders.encode(batch.k_ids, batch.k_mask, "background")
        hx = self.encoders.encode(batch.x_ids, batch.x_mask, "context")
        return hk, hx, last_state(hx, batch.x_mask)

    def select(self, batch: Batch, hk=None, hx=None, last_ctx=None) -> TopicTransition:
        if hk is None:
            hk, hx, last_ctx = self.encode(batch)
        return self.gks(hk, hx, last_ctx, batch.k_mask, batch.x_mask, self.config.m)

    def _decoder_inputs(self, batch: Batch):
        hk, hx, last_ctx = self.encode(batch)
        topic = None
        if self.config.use_gks:
            topic = self.select(batch, hk, hx, last_ctx)
            vector = topic.vector
        else:
            vector = T.zeros((len(batch), self.config.hidden), dtype=self.dtype)
        if self.config.decoder_aggregated and topic is not None:
            bg, ctx = topic.background, topic.context
        else:
            bg, ctx = hk, hx
        inp = DecoderInputs(vector, bg, ctx, batch.k_mask, batch.x_mask, batch.k_ext, batch.ext_size)
        state = self.decoder.init_state(last_ctx, vector)
        return self.decoder.prepare(inp), state, topic

    # -- training forward -------------------------------------------------
    def forward(self, batch: Batch) -> ForwardResult:
        """Teacher-forced pass producing every step's mixed distribution."""
        inp, state, topic = self._decoder_inputs(batch)
        steps = []
        for t in range(batch.y_in.shape[1]):
            emb = self.encoders.embed(batch.y_in[:, t])
            out = self.decoder.step(state, emb, inp)
            steps.append(out)
            state = out.state
        mixed = T.stack([s.mixed_dist for s in steps], axis=1)
        return ForwardResult(steps, mixed, topic)

    # -- inference ------------------------------------------------------
    def greedy(self, batch: Batch, max_len: int = 60) -> list[tuple[list[int], KSTrace]]:
        """Batched greedy decoding; returns extended ids (EOS stripped) and a trace per episode."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        B = len(batch)
        V = self.config.vocab_size
        with no_grad():
            inp, state, topic = self._decoder_inputs(batch)
            prev = np.full(B, BOS_ID, dtype=np.int64)
            ids: list[list[int]] = [[] for _ in range(B)]
            alphas: list[list[np.ndarray]] = [[] for _ in range(B)]
            gates: list[list[float]] = [[] for _ in range(B)]
            done = np.zeros(B, dtype=bool)
            for _ in range(max_len):
                out = self.decoder.step(state, self.encoders.embed(base_ids(prev, V)), inp)
                state = out.state
                nxt = out.mixed_dist.data.argmax(axis=-1)
                for b in np.flatnonzero(~done):
                    if nxt[b] == EOS_ID:
                        done[b] = True
                        continue
                    ids[b].append(int(nxt[b]))
                    k_len = int(batch.k_mask[b].sum())
                    alphas[b].append(out.pointer_dist.data[b, :k_len].astype(np.float64))
                    gates[b].append(float(out.gate.data[b, 0]))
                if done.all():
                    break
                prev = nxt
        results = []
        for b, ep in enumerate(batch.episodes):
            k_len = len(ep.background)
            if topic is not None:
                n_win = int(topic.window_mask[b].sum())
                unit = topic.unit_dist.data[b, :n_win].astype(np.float64)
            else:
                unit = np.zeros(0)
            alpha = np.stack(alphas[b]) if alphas[b] else np.zeros((0, k_len))
            trace = KSTrace(
                background=list(ep.background),
                alpha=alpha,
                gate=np.asarray(gates[b], dtype=np.float64),
                unit_dist=unit,
                m=self.config.m,
                gold_span=ep.gold_span,
            )
            results.append((ids[b], trace))
        return results

    def beam_search(self, episode, vocab: Vocabulary, width: int, max_len: int = 60) -> list[int]:
        """Beam search over one episode; returns the best extended-id sequence (EOS stripped)."""
        rep = make_batch([episode] * width, vocab, self.config.m)
        V = self.config.vocab_size
        with no_grad():
            inp, state, _ = self._decoder_inputs(rep)
            beams = [([], 0.0)]
            finished: list[tuple[list[int], float]] = []
            prev = np.full(width, BOS_ID, dtype=np.int64)
            for _ in range(max_len):
                out = self.decoder.step(state, self.encoders.embed(base_ids(prev, V)), inp)
                logp = np.log(np.maximum(out.mixed_dist.data.astype(np.float64), T.LOG_FLOOR))
                cands = []
                for i, (seq, score) in enumerate(beams):
                    for tok in np.argsort(-logp[i], kind="stable")[:width]:
                        cands.append((score + logp[i, tok], i, int(tok)))
                cands.sort(key=lambda c: -c[0])
                new_beams, rows = [], []
                for score, i, tok in cands:
                    if tok == EOS_ID:
                        finished.append((beams[i][0], score))
                    else:
                        new_beams.append((beams[i][0] + [tok], score))
                        rows.append(i)
                    if len(new_beams) == width:
                        break
                if not new_beams or (finished and max(s for _, s in finished) >= new_beams[0][1]):
                    break
                pad = width - len(rows)
                rows += [rows[0]] * pad
                new_beams += [new_beams[0]] * pad
                state = T.Tensor(out.state.data[rows], dtype=out.state.dtype)
                prev = np.array([seq[-1] for seq, _ in new_beams], dtype=np.int64)
                beams = new_beams
            pool = finished or beams
            return max(pool, key=lambda c: c[1])[0]

    def generate(self, episodes, vocab: Vocabulary, max_len: int = 60, beam_width: int = 1, batch_size: int = 32):
        """Decode episodes to token lists plus KS traces (traces only for greedy)."""
        out = []
        for s in range(0, len(episodes), batch_size):
            batch = make_batch(episodes[s : s + batch_size], vocab, self.config.m)
            if beam_width <= 1:
                for (ids, trace), oovs in zip(self.greedy(batch, max_len), batch.oovs):
                    out.append((decode_ids(ids, vocab, oovs), trace))
            else:
                for ep, oovs in zip(batch.episodes, batch.oovs):
                    ids = self.beam_search(ep, vocab, beam_width, max_len)
                    out.append((decode_ids(ids, vocab, oovs), None))
        return out
