"""Knowledge-selection traces and their CSV / PGM export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CSV_HEADER = ["step", "position", "token", "alpha", "gate"]


@dataclass
class KSTrace:
    background: list[str]
    alpha: np.ndarray            # (T, K) pointer distribution per decoding step
    gate: np.ndarray             # (T,) generation gate per step
    unit_dist: np.ndarray        # (W,) global distribution over background windows
    m: int
    gold_span: tuple[int, int] | None = None

    @property
    def steps(self) -> int:
        return self.alpha.shape[0]

    def windows(self) -> list[list[str]]:
        if not self.m:
            return []
        return [self.background[i : i + self.m] for i in range(0, len(self.background), self.m)]

    def close_to(self, other: "KSTrace", tol: float = 1e-6) -> bool:
        return (
            self.background == other.background
            and self.alpha.shape == other.alpha.shape
            and np.allclose(self.alpha, other.alpha, atol=tol, rtol=0)
            and np.allclose(self.gate, other.gate, atol=tol, rtol=0)
            and self.unit_dist.shape == other.unit_dist.shape
            and np.allclose(self.unit_dist, other.unit_dist, atol=tol, rtol=0)
            and self.gold_span == other.gold_span
        )


def _in_gold(trace: KSTrace, pos: int) -> int:
    lo, hi = trace.gold_span
    return int(lo <= pos < hi)


def export_trace(trace: KSTrace, out_dir: str | Path, stem: str = "trace") -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (per step/position pointer mass plus one row per window) and ``<stem>.pgm``.

    The PGM has one row per decoding step and one column per background
    position; brightness is proportional to pointer probability.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    pgm_path = out_dir / f"{stem}.pgm"
    gold = trace.gold_span is not None
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER + (["gold"] if gold else []))
        for t in range(trace.steps):
            for i, tok in enumerate(trace.background):
                row = [t, i, tok, repr(float(trace.alpha[t, i])), repr(float(trace.gate[t]))]
                w.writerow(row + ([_in_gold(trace, i)] if gold else []))
        for j, win in enumerate(trace.windows()[: len(trace.unit_dist)]):
            row = ["global", j, " ".join(win), repr(float(trace.unit_dist[j])), ""]
            w.writerow(row + ([int(_in_gold(trace, j * trace.m))] if gold else []))
    write_pgm(trace.alpha, pgm_path)
    return csv_path, pgm_path


def parse_trace(csv_path: str | Path) -> KSTrace:
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    has_gold = len(header) > len(CSV_HEADER)
    steps: dict[int, dict[int, tuple[str, float, float, int]]] = {}
    windows: list[tuple[str, float, int]] = []
    for row in body:
        g = int(row[5]) if has_gold else 0
        if row[0] == "global":
            windows.append((row[2], float(row[3]), g))
        else:
            steps.setdefault(int(row[0]), {})[int(row[1])] = (row[2], float(row[3]), float(row[4]), g)
    if steps:
        first = steps[min(steps)]
        background = [first[i][0] for i in range(len(first))]
        gold_pos = [i for i in range(len(first)) if first[i][3]]
    else:
        background = [tok for win, _, _ in windows for tok in win.split(" ")]
        gold_pos = []
    alpha = np.array([[steps[t][i][1] for i in range(len(background))] for t in sorted(steps)])
    alpha = alpha.reshape(len(steps), len(background))
    gate = np.array([steps[t][0][2] for t in sorted(steps)])
    unit = np.array([p for _, p, _ in windows])
    m = len(windows[0][0].split(" ")) if windows else 0
    if has_gold and not gold_pos and windows:
        gold_pos = [j * m + k for j, (win, _, g) in enumerate(windows) if g for k in range(len(win.split(" ")))]
    gold_span = (min(gold_pos), max(gold_pos) + 1) if gold_pos else None
    return KSTrace(background, alpha, gate, unit, m, gold_span)


def write_pgm(alpha: np.ndarray, path: str | Path) -> None:
    """Binary (P5) graymap, width = positions, height = steps, 255 = largest probability."""
    alpha = np.asarray(alpha, dtype=np.float64)
    height, width = alpha.shape
    top = alpha.max() if alpha.size else 0.0
    pixels = np.zeros_like(alpha) if top <= 0 else np.rint(255.0 * alpha / top)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.astype(np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw[pos + 1 : pos + 1 + width * height], dtype=np.uint8)
    return data.reshape(height, width)
