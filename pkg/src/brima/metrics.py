"""Evaluation metrics, Fisher-z averaging, forgetting and report files."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError, UndefinedMetricError

FISHER_CLAMP = 1.0 - 1e-12
CSV_COLUMNS = ("variant", "seed", "session", "task", "srcc", "mse", "rl2")


def _pair(y, y_hat, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ShapeError(f"length mismatch: {y.size} targets vs {y_hat.size} predictions")
    if y.size < min_len:
        raise ShapeError(f"need at least {min_len} values, got {y.size}")
    return y, y_hat


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size)
    # boundaries of runs of equal values in sorted order
    starts = np.flatnonzero(np.r_[True, sx[1:] != sx[:-1]])
    ends = np.r_[starts[1:], x.size]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e - 1) + 1.0
    return ranks


def srcc(y, y_hat) -> float:
    """Spearman correlation: Pearson correlation of average ranks."""
    y, y_hat = _pair(y, y_hat, 2)
    if np.all(y == y[0]) or np.all(y_hat == y_hat[0]):
        raise UndefinedMetricError("rank correlation is undefined for a constant sequence")
    r, rh = average_ranks(y), average_ranks(y_hat)
    r -= r.mean()
    rh -= rh.mean()
    value = float((r * rh).sum() / math.sqrt((r * r).sum() * (rh * rh).sum()))
    return min(1.0, max(-1.0, value))


def mse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat, 1)
    d = y - y_hat
    return float(np.mean(d * d))


def rl2(y, y_hat) -> float:
    """Mean squared error over the squared target range, times 100."""
    y, y_hat = _pair(y, y_hat, 1)
    span = float(y.max() - y.min())
    if span <= 0:
        raise UndefinedMetricError("relative L2 needs a non-degenerate target range")
    d = y - y_hat
    denom = span * span
    if denom == 0.0 or not math.isfinite(denom):
        # extreme ranges: normalise first so the square cannot under/overflow
        d = d / span
        return float(np.mean(d * d) * 100.0)
    return float(np.mean(d * d) / denom * 100.0)


def fisher_z_average(values: Sequence[float], flags: Optional[list] = None) -> float:
    """``tanh(mean(atanh(v)))``; values at +-1 are clamped and noted in ``flags``."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("cannot average an empty set of correlations")
    zs = []
    for v in vals:
        if abs(v) > 1.0:
            raise ValueError(f"correlation {v} outside [-1, 1]")
        if abs(v) >= FISHER_CLAMP:
            if flags is not None:
                flags.append(f"clamped correlation {v!r} before Fisher-z transform")
            v = math.copysign(FISHER_CLAMP, v)
        zs.append(math.atanh(v))
    return _tanh(sum(zs) / len(zs))


def _tanh(z: float) -> float:
    # expm1 form: exact on rational points such as tanh(ln(3)/2) = 1/2
    if abs(z) > 350.0:
        return math.copysign(1.0, z)
    t = math.expm1(2.0 * abs(z))
    return math.copysign(t / (t + 2.0), z)


def forgetting(matrix: Sequence[Sequence[Optional[float]]]) -> Optional[float]:
    """Mean drop from each earlier task's best SRCC to its final SRCC.

    ``matrix[t][k]`` is the SRCC on task k after session t (``None`` when
    absent). Tasks without a final value, and the last task, are skipped.
    Negative values mean backward transfer.
    """
    T = len(matrix)
    drops = []
    for k in range(T - 1):
        final = matrix[T - 1][k]
        history = [matrix[t][k] for t in range(k, T) if matrix[t][k] is not None]
        if final is None or not history:
            continue
        drops.append(max(history) - final)
    return float(np.mean(drops)) if drops else None


def forgetting_matrix(per_session_per_task: Sequence[Sequence[Optional[float]]]) -> dict:
    matrix = [list(row) for row in per_session_per_task]
    return {"matrix": matrix, "average_forgetting": forgetting(matrix)}


def safe_metrics(y, y_hat) -> dict:
    """SRCC/MSE/RL2 with undefined values recorded as ``None``."""
    out = {}
    for name, fn in (("srcc", srcc), ("mse", mse), ("rl2", rl2)):
        try:
            out[name] = fn(y, y_hat)
        except UndefinedMetricError:
            out[name] = None
    return out


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass
class SessionReport:
    variant: str
    seed: int
    n_tasks: int
    config_hash: str = ""
    mask_hash: str = ""
    sessions: list = field(default_factory=list)  # cumulative-union metrics per session
    cells: list = field(default_factory=list)  # T x T, None for unseen tasks
    flags: list = field(default_factory=list)

    def matrix(self, metric: str = "srcc") -> list[list[Optional[float]]]:
        return [[None if c is None else c[metric] for c in row] for row in self.cells]

    def final_row(self) -> list[dict]:
        for row in reversed(self.cells):
            if any(c is not None for c in row):
                return [c for c in row if c is not None]
        return []

    def summary(self) -> dict:
        flags: list = []
        row = self.final_row()
        srccs = [c["srcc"] for c in row if c["srcc"] is not None]
        per_session = [s["srcc"] for s in self.sessions if s["srcc"] is not None]
        out = {
            "final_srcc": fisher_z_average(srccs, flags) if srccs else None,
            "final_mse": _mean([c["mse"] for c in row]),
            "final_rl2": _mean([c["rl2"] for c in row]),
            "session_avg_srcc": fisher_z_average(per_session, flags) if per_session else None,
            "forgetting": forgetting(self.matrix("srcc")),
        }
        self.flags = sorted(set(self.flags) | set(flags))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["summary"] = self.summary()
        d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SessionReport":
        keys = ("variant", "seed", "n_tasks", "config_hash", "mask_hash", "sessions", "cells", "flags")
        return cls(**{k: d[k] for k in keys})

    def to_json(self) -> str:
        return dumps(self.to_dict())

    def csv_rows(self) -> list[dict]:
        rows = []
        for t, row in enumerate(self.cells):
            for k, cell in enumerate(row):
                if cell is None:
                    continue
                rows.append({"variant": self.variant, "seed": self.seed, "session": t + 1, "task": k + 1, **{m: cell[m] for m in ("srcc", "mse", "rl2")}})
        return rows


def _mean(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _float_text(v: float) -> str:
    text = format(v, ".17g")
    return text if any(c in text for c in ".e") else text + ".0"


def _fmt_json_value(v):
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError("non-finite value in report")
        return _Raw(_float_text(v))
    if isinstance(v, dict):
        return {k: _fmt_json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_fmt_json_value(x) for x in v]
    if isinstance(v, np.floating):
        return _fmt_json_value(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


class _Raw(str):
    pass


def dumps(obj) -> str:
    """JSON text with every float written to 17 significant digits."""

    def enc(v, indent):
        pad, inner = " " * indent, " " * (indent + 2)
        if isinstance(v, _Raw):
            return str(v)
        if isinstance(v, dict):
            if not v:
                return "{}"
            items = [f"{inner}{json.dumps(k)}: {enc(x, indent + 2)}" for k, x in v.items()]
            return "{\n" + ",\n".join(items) + "\n" + pad + "}"
        if isinstance(v, list):
            if all(not isinstance(x, (dict, list)) for x in v):
                return "[" + ", ".join(enc(x, indent) for x in v) + "]"
            return "[\n" + ",\n".join(inner + enc(x, indent + 2) for x in v) + "\n" + pad + "]"
        return json.dumps(v)

    return enc(_fmt_json_value(obj), 0) + "\n"


def csv_text(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (_float_text(r[k]) if isinstance(r[k], float) else ("" if r[k] is None else r[k])) for k in CSV_COLUMNS})
    return buf.getvalue()


def write_report(report: SessionReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.csv").write_text(csv_text(report.csv_rows()), encoding="utf-8")


def read_report(path) -> SessionReport:
    return SessionReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
