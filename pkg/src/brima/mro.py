"""Modality-aware replay: memory construction, replay priorities, score consistency."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import FORMAT_VERSION, MultiModalSample, iter_records, parse_sample, read_header, sample_line
from .errors import ContractError, ShapeError
from .mbi import ExemplarBank
from .model import ScoringModel, predict

PRIORITY_FLOOR = 1e-6


@dataclass
class MemoryEntry:
    sample: MultiModalSample
    predicted_score: float
    insertion_session: int
    insertion_order: int
    priority: float = 0.0
    distortion: float = 0.0
    drift: float = 0.0


class MemoryBuffer:
    """Capacity-bounded store of modality-complete exemplars, kept in insertion order."""

    def __init__(self, capacity: int = 50):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.entries: list[MemoryEntry] = []
        self._next_order = 0
        self._bank: Optional[ExemplarBank] = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def add(self, sample: MultiModalSample, predicted_score: float, session: int) -> MemoryEntry:
        if not sample.is_complete:
            raise ContractError(f"sample {sample.id} is not modality-complete")
        entry = MemoryEntry(sample, float(predicted_score), session, self._next_order)
        self._next_order += 1
        self.entries.append(entry)
        self._bank = None
        return entry

    def remove(self, entry: MemoryEntry) -> None:
        self.entries.remove(entry)
        self._bank = None

    def bank(self) -> ExemplarBank:
        if self._bank is None:
            self._bank = ExemplarBank([e.sample for e in self.entries])
        return self._bank

    def priorities(self) -> np.ndarray:
        return np.array([e.priority for e in self.entries])

    def check_invariants(self) -> None:
        if len(self.entries) > self.capacity:
            raise ContractError(f"buffer holds {len(self.entries)} entries, capacity {self.capacity}")
        for e in self.entries:
            if not e.sample.is_complete:
                raise ContractError(f"buffer entry {e.sample.id} is missing modalities")
            if not (math.isfinite(e.priority) and e.priority >= 0):
                raise ContractError(f"buffer entry {e.sample.id} has invalid priority {e.priority}")


def _bin_quotas(capacity: int, n_bins: int) -> list[int]:
    base, extra = divmod(capacity, n_bins)
    return [base + (1 if b < extra else 0) for b in range(n_bins)]


def select_indices(complete: Sequence[bool], predictions, Q: int, capacity: int, rng: np.random.Generator) -> list[int]:
    """Quantile-binned selection of modality-complete samples.

    Samples are ranked by predicted score and split into ``Q`` equal-count
    bins. Each bin contributes at most ``ceil(capacity / Q)`` complete samples
    drawn uniformly at random. Unfilled slots are refilled by re-ranking and
    re-binning whatever is left, until the quota is met or no complete
    sample remains.
    """
    if Q < 1:
        raise ValueError("Q must be >= 1")
    predictions = np.asarray(predictions, dtype=np.float64)
    complete = np.asarray(complete, dtype=bool)
    if predictions.shape != complete.shape:
        raise ShapeError("predictions and completeness flags are not aligned")
    pool = np.arange(predictions.size)
    chosen: list[int] = []
    while len(chosen) < capacity:
        available = pool[complete[pool]]
        if available.size == 0:
            break
        remaining = capacity - len(chosen)
        if available.size <= remaining:
            chosen += sorted(available.tolist())
            break
        ranked = pool[np.argsort(predictions[pool], kind="stable")]
        bins = np.array_split(ranked, min(Q, ranked.size))
        picked = []
        for members, quota in zip(bins, _bin_quotas(remaining, len(bins))):
            cands = members[complete[members]]
            if quota and cands.size:
                take = rng.choice(cands, size=min(quota, cands.size), replace=False)
                picked += sorted(take.tolist())
        if not picked:
            picked = sorted(rng.choice(available, size=remaining, replace=False).tolist())
        chosen += picked
        pool = np.setdiff1d(pool, picked)
    return chosen


def select_memory(
    task_samples: Sequence[MultiModalSample],
    predictions,
    Q: int,
    capacity: int,
    rng: np.random.Generator,
    previous: Optional[MemoryBuffer] = None,
    session: int = 1,
) -> MemoryBuffer:
    """Build the buffer after ``session`` (1-based) and merge it with ``previous``.

    The session contributes up to ``ceil(capacity / session)`` new entries.
    Older entries are evicted one at a time from whichever earlier session
    currently holds the most, lowest priority first, until the total fits.
    """
    share = math.ceil(capacity / session) if capacity else 0
    picks = select_indices([s.is_complete for s in task_samples], predictions, Q, share, rng)
    buf = MemoryBuffer(capacity)
    if previous is not None:
        buf._next_order = previous._next_order
        buf.entries = list(previous.entries)
    old = list(buf.entries)
    overflow = len(old) + len(picks) - capacity
    while overflow > 0 and old:
        counts: dict[int, int] = {}
        for e in old:
            counts[e.insertion_session] = counts.get(e.insertion_session, 0) + 1
        heavy = max(counts, key=lambda s: (counts[s], -s))
        victim = min((e for e in old if e.insertion_session == heavy), key=lambda e: (e.priority, e.insertion_order))
        old.remove(victim)
        overflow -= 1
    buf.entries = old
    for i in picks:
        buf.add(task_samples[i], float(predictions[i]), session)
    buf._bank = None
    buf.check_invariants()
    return buf


def modality_distortion(imputed, truth) -> float:
    """Squared distance, averaged over slots when given lists of vectors."""
    if isinstance(imputed, (list, tuple)):
        if len(imputed) != len(truth) or not imputed:
            raise ShapeError("imputed and truth slot lists differ")
        return float(np.mean([modality_distortion(a, b) for a, b in zip(imputed, truth)]))
    a = np.asarray(imputed, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"imputed shape {a.shape} != truth shape {b.shape}")
    d = a - b
    return float((d * d).sum())


Scorer = Callable[[Sequence[np.ndarray]], float]


def _score(model, features) -> float:
    if isinstance(model, ScoringModel):
        return predict(model, features)
    return float(model(features))


def score_drift(model_new, model_prev, entry: MemoryEntry) -> float:
    """Absolute change in predicted score on a stored exemplar; 0 without a snapshot."""
    if model_prev is None:
        return 0.0
    feats = entry.sample.features
    return abs(_score(model_new, feats) - _score(model_prev, feats))


def replay_priority(d, dy, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * d + (1.0 - alpha) * dy


def replay_probabilities(priorities) -> np.ndarray:
    p = np.asarray(priorities, dtype=np.float64) + PRIORITY_FLOOR
    return p / p.sum()


def sample_replay(buffer, batch: int, rng: np.random.Generator, uniform: bool = False) -> list[int]:
    """Draw replay indices without replacement, proportional to priority."""
    n = len(buffer)
    if n == 0:
        raise ContractError("cannot sample from an empty buffer")
    if batch >= n:
        return list(range(n))
    if uniform:
        return rng.choice(n, size=batch, replace=False).tolist()
    prios = buffer.priorities() if isinstance(buffer, MemoryBuffer) else buffer
    return rng.choice(n, size=batch, replace=False, p=replay_probabilities(prios)).tolist()


def consistency_loss(model_new, model_prev, batch: Sequence[MemoryEntry]) -> float:
    """Mean squared gap between current and snapshot scores on stored features."""
    if model_prev is None or not batch:
        return 0.0
    gaps = [_score(model_new, e.sample.features) - _score(model_prev, e.sample.features) for e in batch]
    return float(np.mean(np.square(gaps)))


def save_buffer(buffer: MemoryBuffer, path, feature_dims, score_range) -> None:
    header = {
        "format": "brima-buffer",
        "version": FORMAT_VERSION,
        "T": len({e.insertion_session for e in buffer}),
        "M": len(feature_dims),
        "feature_dims": list(feature_dims),
        "score_range": [float(v) for v in score_range],
        "capacity": buffer.capacity,
    }
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for e in buffer:
            extra = {
                "yhat": e.predicted_score,
                "q": e.priority,
                "insertion_session": e.insertion_session,
                "insertion_order": e.insertion_order,
            }
            fh.write(sample_line(e.sample, extra) + "\n")



def load_buffer(path) -> MemoryBuffer:
    with Path(path).open("r", encoding="utf-8") as fh:
        header = read_header(fh.readline(), kind="brima-buffer")
    buf = MemoryBuffer(int(header["capacity"]))
    for index, rec in iter_records(path):
        if index == 0:
            continue
        entry = MemoryEntry(
            parse_sample(rec, index, header["feature_dims"]),
            float(rec["yhat"]),
            int(rec["insertion_session"]),
            int(rec["insertion_order"]),
            priority=float(rec["q"]),
        )
        buf.entries.append(entry)
        buf._next_order = max(buf._next_order, entry.insertion_order + 1)
    buf.check_invariants()
    return buf
