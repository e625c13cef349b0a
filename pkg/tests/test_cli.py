import json

import pytest

from glks import cli
from glks.data import load_jsonl, save_jsonl, synth_corpus
from glks.evaluate import EchoModel, score_predictions
from glks.trace import parse_trace, read_pgm


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


TINY = {"hidden": 8, "emb_dim": 8, "epochs": 1, "pretrain_epochs": 1, "batch_size": 4, "vocab_cap": 200,
        "max_len": 8}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    save_jsonl(synth_corpus(1, 12), root / "train.jsonl")
    save_jsonl(synth_corpus(2, 4), root / "valid.jsonl")
    cfg = root / "run.cfg"
    lines = [f"train = {root / 'train.jsonl'}", f"valid = {root / 'valid.jsonl'}", f"out = {root / 'run'}",
             "# comment line", ""] + [f"{k} = {v}" for k, v in TINY.items()]
    cfg.write_text("\n".join(lines) + "\n")
    assert cli.main(["train", "--config", str(cfg)]) == 0
    return root


def test_synth_writes_corpus_and_manifest(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--seed", 7, "--n", 15, "--out", tmp_path / "s.jsonl")
    assert code == 0
    eps = load_jsonl(tmp_path / "s.jsonl")
    assert len(eps) == 15
    manifest = json.loads((tmp_path / "s.manifest.json").read_text())
    assert manifest["gold_windows"] == [e.gold_span[0] // 4 for e in synth_corpus(7, 15)]


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    assert sorted(p.name for p in run_dir.iterdir()) == ["best.ckpt", "epochs.jsonl", "last.ckpt", "vocab.txt"]


def test_train_missing_path_and_bad_config(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--valid", workspace / "valid.jsonl", "--out", tmp_path / "o")
    assert code == 2 and "train" in err
    code, _, err = run(capsys, "train", "--config", workspace / "run.cfg", "--train", tmp_path / "missing.jsonl")
    assert code == 2 and "does not exist" in err
    code, _, err = run(capsys, "train", "--config", workspace / "run.cfg", "--lr", "-1", "--batch-size", "0")
    assert code == 2 and "lr" in err and "batch_size" in err
    bad = tmp_path / "bad.cfg"
    bad.write_text("learning_rate = 0.1\n")
    code, _, err = run(capsys, "train", "--config", bad)
    assert code == 2 and "learning_rate" in err
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--no-such-flag"])
    assert exc.value.code == 2


def test_flags_override_config(workspace):
    parser = cli.build_parser()
    args = parser.parse_args(["train", "--config", str(workspace / "run.cfg"), "--hidden", "16",
                              "--use-mce", "false"])
    run_cfg = cli.build_run_config(args)
    assert run_cfg.train.hidden == 16 and run_cfg.train.emb_dim == 8 and run_cfg.train.use_mce is False
    assert run_cfg.paths["out"].endswith("run")


def help_entries(text):
    """Option entries of an argparse help page, wrapped lines joined."""
    body = text.split("options:", 1)[1]
    entries = []
    for line in body.splitlines():
        if line.startswith("  -"):
            entries.append(line.strip())
        elif line.startswith("   ") and entries:
            entries[-1] += " " + line.strip()
    return entries


def test_help_lists_defaults(capsys):
    for command in ("synth", "train", "eval", "generate", "trace", "sweep-m"):
        with pytest.raises(SystemExit):
            cli.main([command, "--help"])
        entries = [e for e in help_entries(capsys.readouterr().out) if not e.startswith("-h")]
        assert entries
        for entry in entries:
            assert "default" in entry, (command, entry)


def test_eval_and_modes(workspace, capsys):
    ckpt = workspace / "run" / "best.ckpt"
    code, out, _ = run(capsys, "eval", "--checkpoint", ckpt, "--test", workspace / "valid.jsonl")
    assert code == 0
    scores = json.loads(out)
    assert set(scores) == {"rouge1", "rouge2", "rougeL"}
    assert all(len(v.split(".")[1]) == 2 for v in scores.values())
    code, out_mr, _ = run(capsys, "eval", "--checkpoint", ckpt, "--test", workspace / "valid.jsonl", "--mode", "MR")
    assert code == 0 and json.loads(out_mr) == scores  # no extra references: MR equals SR
    (workspace / "empty.jsonl").write_text("")
    code, _, _ = run(capsys, "eval", "--checkpoint", ckpt, "--test", workspace / "empty.jsonl")
    assert code == 2
    other = workspace / "other_vocab.txt"
    other.write_text("zzz\n")
    code, _, err = run(capsys, "eval", "--checkpoint", ckpt, "--test", workspace / "valid.jsonl", "--vocab", other)
    assert code == 2 and "does not match" in err
    code, _, _ = run(capsys, "eval", "--checkpoint", workspace / "none.ckpt", "--test", workspace / "valid.jsonl")
    assert code == 2


def test_echo_scores_format():
    eps = synth_corpus(3, 5)
    outputs = EchoModel().generate(eps)
    scores = score_predictions([t for t, _ in outputs], eps)
    assert json.loads(cli.format_scores(scores)) == {"rouge1": "100.00", "rouge2": "100.00", "rougeL": "100.00"}


def test_generate(workspace, capsys, tmp_path):
    ckpt = workspace / "run" / "best.ckpt"
    code, out, _ = run(capsys, "generate", "--checkpoint", ckpt, "--input", workspace / "valid.jsonl")
    assert code == 0 and len(out.splitlines()) == 4
    code, _, _ = run(capsys, "generate", "--checkpoint", ckpt, "--input", workspace / "valid.jsonl",
                     "--out", tmp_path / "g.txt", "--beam", 2)
    assert code == 0 and len((tmp_path / "g.txt").read_text().splitlines()) == 4


def test_trace(workspace, capsys, tmp_path):
    ckpt = workspace / "run" / "best.ckpt"
    code, out, _ = run(capsys, "trace", "--checkpoint", ckpt, "--data", workspace / "valid.jsonl",
                       "--index", 1, "--out-dir", tmp_path / "tr")
    assert code == 0
    files = sorted((tmp_path / "tr").iterdir())
    assert len(files) == 2
    info = json.loads(out)
    decoded = len(info["response"].split()) if info["response"] else 0
    img = read_pgm(info["pgm"])
    trace = parse_trace(info["csv"])
    assert img.shape == (decoded, len(trace.background))
    assert (tmp_path / "tr" / "trace_1.csv").read_text().splitlines()[0].endswith(",gold")
    code, _, err = run(capsys, "trace", "--checkpoint", ckpt, "--data", workspace / "valid.jsonl",
                       "--index", 99, "--out-dir", tmp_path / "tr2")
    assert code == 2 and "out of range" in err


def test_sweep_table(workspace, capsys, monkeypatch):
    real_train = cli.train

    def flaky(train_set, valid_set, cfg, **kw):
        if cfg.m == 2:
            raise RuntimeError("boom")
        return real_train(train_set, valid_set, cfg, **kw)

    monkeypatch.setattr(cli, "train", flaky)
    code, out, _ = run(capsys, "sweep-m", "--config", workspace / "run.cfg", "--values", "3,1,2")
    assert code == 0
    rows = out.splitlines()[2:]
    assert [int(r.split()[0]) for r in rows] == [1, 2, 3]
    assert "error" in rows[1] and "boom" in rows[1]
    assert float(rows[0].split()[1]) >= 0
    code, _, _ = run(capsys, "sweep-m", "--config", workspace / "run.cfg", "--values", "a,b")
    assert code == 2
