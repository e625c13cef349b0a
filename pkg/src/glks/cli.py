"""Command line entry point: synth, train, eval, generate, trace, sweep-m.

Run settings come from a flat ``key = value`` file (``--config``) and are
overridden by flags. Exit status is 0 on success, 2 on usage or configuration
errors and 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import ConfigError, Vocabulary, episode_to_record, gold_window, load_jsonl, save_jsonl, synth_corpus
from .evaluate import percent_f1, score_predictions
from .trace import export_trace
from .training import CheckpointError, TrainConfig, load_checkpoint, restore, train

log = logging.getLogger("glks")

PATH_KEYS = ("train", "valid", "test", "vocab", "out")
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_DEFAULTS = TrainConfig()


class UsageError(Exception):
    """Bad arguments, missing inputs or invalid configuration (exit status 2)."""


# ----------------------------------------------------------------------
# run configuration
# ----------------------------------------------------------------------

@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)

    def path(self, key: str, required: bool = True) -> Path | None:
        value = self.paths.get(key)
        if value is None:
            if required:
                raise UsageError(f"missing required path '{key}'")
            return None
        return Path(value)

    def existing(self, key: str, required: bool = True) -> Path | None:
        p = self.path(key, required)
        if p is not None and not p.exists():
            raise UsageError(f"{key} path does not exist: {p}")
        return p


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(name: str, text: str):
    kind = type(getattr(_DEFAULTS, name))
    try:
        if kind is bool:
            return _parse_bool(text)
        return kind(text)
    except ValueError as exc:
        raise UsageError(f"bad value for {name}: {exc}") from exc


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` pairs; blank lines and ``#`` comments ignored."""
    values = {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file does not exist: {p}")
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def build_run_config(args: argparse.Namespace) -> RunConfig:
    raw = read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = sorted(set(raw) - set(_TRAIN_FIELDS) - set(PATH_KEYS))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    settings = {k: _convert(k, v) for k, v in raw.items() if k in _TRAIN_FIELDS}
    paths = {k: raw[k] for k in PATH_KEYS if k in raw}
    for name in _TRAIN_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            settings[name] = value
    for key in PATH_KEYS:
        value = getattr(args, f"{key}_path", None)
        if value is not None:
            paths[key] = value
    cfg = TrainConfig.from_dict(settings)
    cfg.validate()
    return RunConfig(cfg, paths)


def add_train_flags(parser: argparse.ArgumentParser) -> None:
    # SUPPRESS keeps unset flags out of the namespace so the config file can supply them
    parser.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value settings file (default: none)")
    for key in PATH_KEYS:
        parser.add_argument(f"--{key}", dest=f"{key}_path", metavar="PATH", default=argparse.SUPPRESS,
                            help=f"{key} path, overrides the config file (default: none)")
    group = parser.add_argument_group("training settings")
    for name, f in _TRAIN_FIELDS.items():
        default = getattr(_DEFAULTS, name)
        kind = _parse_bool if isinstance(default, bool) else type(default)
        group.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind, default=argparse.SUPPRESS,
                           metavar=type(default).__name__.upper(), help=f"(default: {default})")


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def _load_episodes(path: Path, background_limit: int):
    if not path.exists():
        raise UsageError(f"data file does not exist: {path}")
    episodes = load_jsonl(path, background_limit)
    if not episodes:
        raise UsageError(f"no episodes in {path}")
    return episodes


def _load_model(path: str, vocab_path: str | None = None):
    if not Path(path).exists():
        raise UsageError(f"checkpoint does not exist: {path}")
    model, vocab, meta = load_checkpoint(path)
    if vocab_path is not None and Vocabulary.load(vocab_path) != vocab:
        raise UsageError(f"vocabulary {vocab_path} does not match checkpoint {path}")
    return model, vocab, meta


def cmd_synth(args) -> int:
    episodes = synth_corpus(args.seed, args.n, args.vocab_size, args.window_m, (args.min_windows, args.max_windows))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(episodes, out)
    manifest = {"seed": args.seed, "window_m": args.window_m,
                "gold_windows": [gold_window(ep, args.window_m) for ep in episodes]}
    out.with_suffix(".manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(episodes)} episodes to {out}")
    return 0


def cmd_train(args) -> int:
    run = build_run_config(args)
    cfg = run.train
    train_set = _load_episodes(run.existing("train"), cfg.background_limit)
    valid_set = _load_episodes(run.existing("valid"), cfg.background_limit)
    vocab_path = run.existing("vocab", required=False)
    vocab = Vocabulary.load(vocab_path) if vocab_path else None
    out = run.path("out")
    out.mkdir(parents=True, exist_ok=True)
    result = train(train_set, valid_set, cfg, vocab=vocab, log_path=out / "epochs.jsonl", checkpoint_dir=out)
    result.vocab.save(out / "vocab.txt")
    print(json.dumps({"best_epoch": result.best_epoch, "best_val_rouge_l": round(result.best_score, 6),
                      "out": str(out)}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    model, vocab, _ = _load_model(args.checkpoint, args.vocab)
    episodes = _load_episodes(Path(args.test), args.background_limit)
    outputs = model.generate(episodes, vocab, max_len=args.max_len, beam_width=args.beam)
    scores = score_predictions([toks for toks, _ in outputs], episodes, args.mode)
    print(format_scores(scores))
    return 0


def format_scores(scores: dict) -> str:
    """F1 means as percentages with two decimals, e.g. {"rouge1": "44.52", ...}."""
    return json.dumps({k: f"{v:.2f}" for k, v in percent_f1(scores).items()}, sort_keys=True)


def cmd_generate(args) -> int:
    model, vocab, _ = _load_model(args.checkpoint, args.vocab)
    episodes = _load_episodes(Path(args.input), args.background_limit)
    outputs = model.generate(episodes, vocab, max_len=args.max_len, beam_width=args.beam)
    lines = [" ".join(toks) for toks, _ in outputs]
    if args.out:
        Path(args.out).write_text("".join(s + "\n" for s in lines), encoding="utf-8")
    else:
        for s in lines:
            print(s)
    return 0


def cmd_trace(args) -> int:
    model, vocab, _ = _load_model(args.checkpoint, args.vocab)
    episodes = _load_episodes(Path(args.data), args.background_limit)
    if not 0 <= args.index < len(episodes):
        raise UsageError(f"episode index {args.index} out of range [0, {len(episodes)})")
    (tokens, trace), = model.generate([episodes[args.index]], vocab, max_len=args.max_len)
    csv_path, pgm_path = export_trace(trace, args.out_dir, stem=f"trace_{args.index}")
    print(json.dumps({"response": " ".join(tokens), "csv": str(csv_path), "pgm": str(pgm_path)}))
    return 0


def sweep_m(run: RunConfig, values, train_set, valid_set) -> list[tuple[int, float | None, str]]:
    """Train one model per window size; validation ROUGE-1 F1 of each best checkpoint."""
    rows = []
    base = run.train.to_dict()
    for m in sorted(set(values)):
        try:
            cfg = TrainConfig.from_dict({**base, "m": m})
            result = train(train_set, valid_set, cfg)
            restore(result.model, result.best_params)
            outputs = result.model.generate(valid_set, result.vocab, max_len=cfg.max_len)
            score = score_predictions([t for t, _ in outputs], valid_set)["rouge1"]["f1"]
            rows.append((m, score, ""))
        except Exception as exc:  # a failed cell is reported and the sweep goes on
            log.error("m=%d failed: %s", m, exc)
            rows.append((m, None, f"{type(exc).__name__}: {exc}"))
    return rows


def format_sweep(rows) -> str:
    lines = [f"{'m':>3}  {'val_rouge1':>10}", f"{'-' * 3}  {'-' * 10}"]
    for m, score, err in rows:
        lines.append(f"{m:>3}  {score * 100:>10.2f}" if score is not None else f"{m:>3}  {'error':>10}  {err}")
    return "\n".join(lines)


def cmd_sweep_m(args) -> int:
    run = build_run_config(args)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be comma separated integers: {exc}") from exc
    if not values or min(values) < 1:
        raise UsageError("--values must list positive window sizes")
    train_set = _load_episodes(run.existing("train"), run.train.background_limit)
    valid_set = _load_episodes(run.existing("valid"), run.train.background_limit)
    print(format_sweep(sweep_m(run, values, train_set, valid_set)))
    return 0


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--vocab", default=None, help="vocabulary file to check against the checkpoint")
    p.add_argument("--max-len", type=int, default=60, help="maximum response length")
    p.add_argument("--background-limit", type=int, default=256, help="background truncation")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="glks", description=__doc__.split("\n")[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=7, help="generator seed")
    p.add_argument("--n", type=int, default=200, help="number of episodes")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--vocab-size", type=int, default=60, help="topic + filler token pool")
    p.add_argument("--window-m", type=int, default=4, help="planted window size")
    p.add_argument("--min-windows", type=int, default=4, help="fewest windows per background")
    p.add_argument("--max-windows", type=int, default=6, help="most windows per background")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="pretrain and jointly train a model", formatter_class=fmt)
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ROUGE F1 (x100) of a checkpoint on a test file", formatter_class=fmt)
    _model_flags(p)
    p.add_argument("--test", required=True, help="test JSONL")
    p.add_argument("--mode", choices=("SR", "MR"), default="SR", help="single or multiple references")
    p.add_argument("--beam", type=int, default=1, help="beam width (1 = greedy)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="decode responses for a JSONL file", formatter_class=fmt)
    _model_flags(p)
    p.add_argument("--input", required=True, help="episodes JSONL")
    p.add_argument("--out", default=None, help="write responses here instead of stdout")
    p.add_argument("--beam", type=int, default=1, help="beam width (1 = greedy)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("trace", help="export one episode's knowledge-selection trace", formatter_class=fmt)
    _model_flags(p)
    p.add_argument("--data", required=True, help="episodes JSONL")
    p.add_argument("--index", type=int, default=0, help="episode index")
    p.add_argument("--out-dir", required=True, help="directory for the CSV and PGM")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("sweep-m", help="validation ROUGE-1 for each window size", formatter_class=fmt)
    add_train_flags(p)
    p.add_argument("--values", default="1,2,3,4,5,6", help="comma separated window sizes")
    p.set_defaults(func=cmd_sweep_m)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError) as exc:
        print(f"glks {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"glks {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
