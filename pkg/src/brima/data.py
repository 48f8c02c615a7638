"""Samples, task streams, the synthetic curriculum generator and dataset files."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ParseError, SchemaError

FORMAT_NAME = "brima-stream"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class MultiModalSample:
    id: str
    task_index: int
    features: tuple  # one entry per modality, None where missing
    score: float
    split: str = "train"

    def __post_init__(self):
        feats = tuple(None if f is None else _frozen(f) for f in self.features)
        object.__setattr__(self, "features", feats)
        if all(f is None for f in feats):
            raise ContractError(f"sample {self.id}: observed set is empty")

    @property
    def n_modalities(self) -> int:
        return len(self.features)

    @property
    def observed(self) -> tuple[int, ...]:
        return tuple(m for m, f in enumerate(self.features) if f is not None)

    @property
    def missing(self) -> tuple[int, ...]:
        return tuple(m for m, f in enumerate(self.features) if f is None)

    @property
    def mask(self) -> np.ndarray:
        """Binary indicator, 1 where the modality is missing."""
        return np.array([f is None for f in self.features], dtype=np.int8)

    @property
    def is_complete(self) -> bool:
        return all(f is not None for f in self.features)

    def with_missing(self, missing: Iterable[int]) -> "MultiModalSample":
        drop = set(missing)
        return replace(self, features=tuple(None if m in drop else f for m, f in enumerate(self.features)))


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass
class TaskData:
    index: int
    train: list[MultiModalSample]
    eval: list[MultiModalSample]

    def samples(self) -> Iterator[MultiModalSample]:
        yield from self.train
        yield from self.eval


@dataclass
class TaskStream:
    tasks: list[TaskData]
    feature_dims: tuple[int, ...]
    score_range: tuple[float, float]

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_modalities(self) -> int:
        return len(self.feature_dims)

    def samples(self) -> Iterator[MultiModalSample]:
        for task in self.tasks:
            yield from task.samples()

    def validate(self) -> "TaskStream":
        if not self.tasks:
            raise SchemaError("a stream needs at least one task")
        lo, hi = self.score_range
        for pos, task in enumerate(self.tasks):
            if task.index != pos:
                raise SchemaError(f"task at position {pos} carries index {task.index}")
            train_ids = {s.id for s in task.train}
            if train_ids & {s.id for s in task.eval}:
                raise SchemaError(f"task {pos}: train and eval splits overlap")
            for s in task.samples():
                if s.task_index != pos:
                    raise SchemaError(f"sample {s.id} has task_index {s.task_index}, expected {pos}")
                if s.n_modalities != self.n_modalities:
                    raise SchemaError(f"sample {s.id} has {s.n_modalities} modality slots")
                for m, f in enumerate(s.features):
                    if f is not None and f.shape != (self.feature_dims[m],):
                        raise SchemaError(f"sample {s.id}: modality {m} has length {f.size}, expected {self.feature_dims[m]}")
                if not lo <= s.score <= hi:
                    raise SchemaError(f"sample {s.id}: score {s.score} outside [{lo}, {hi}]")
        return self

    def mask_hash(self) -> str:
        h = hashlib.sha256()
        for s in self.samples():
            h.update(f"{s.task_index}|{s.split}|{s.id}|".encode())
            h.update(s.mask.tobytes())
        return h.hexdigest()


@dataclass
class StreamConfig:
    n_tasks: int = 5
    n_modalities: int = 3
    train_per_task: int = 200
    eval_per_task: int = 50
    feature_dims: Optional[tuple[int, ...]] = None
    score_range: tuple[float, float] = (0.0, 25.0)
    beta: float = 0.0
    latent_dim: int = 8
    noise: float = 0.3
    region_shift: float = 4.0
    map_drift: float = 0.2
    drift_angle: float = 1.2
    drift_shift: float = 0.5
    modality_rank: Optional[int] = None
    feature_offset: float = 2.0
    feature_scale: float = 1.0
    score_bend: float = 0.0
    score_frequency: float = 1.0
    view_hidden: int = 0
    eval_missing: bool = False
    seed: int = 0
    mask_seed: Optional[int] = None

    def __post_init__(self):
        if self.feature_dims is None:
            self.feature_dims = (32,) * self.n_modalities
        self.feature_dims = tuple(int(d) for d in self.feature_dims)
        self.score_range = tuple(float(v) for v in self.score_range)

    def validate(self) -> "StreamConfig":
        if self.n_tasks < 1 or self.n_modalities < 1:
            raise ConfigError("n_tasks and n_modalities must be >= 1")
        if self.train_per_task < 1 or self.eval_per_task < 0:
            raise ConfigError("train_per_task must be >= 1 and eval_per_task >= 0")
        if len(self.feature_dims) != self.n_modalities or min(self.feature_dims) < 1:
            raise ConfigError("feature_dims must give one positive size per modality")
        if not self.score_range[0] < self.score_range[1]:
            raise ConfigError("score_range must satisfy min < max")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"missing rate beta={self.beta} must lie in [0, 1)")
        if self.latent_dim < 2:
            raise ConfigError("latent_dim must be >= 2")
        if self.view_hidden < 0:
            raise ConfigError("view_hidden must be >= 0")
        if self.feature_scale <= 0:
            raise ConfigError("feature_scale must be positive")
        if self.modality_rank is not None and not 1 <= self.modality_rank <= self.latent_dim:
            raise ConfigError("modality_rank must lie in [1, latent_dim]")
        for name in ("noise", "region_shift", "map_drift", "drift_angle", "drift_shift", "feature_offset", "score_bend", "score_frequency"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        return self


def _rotate(w: np.ndarray, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate unit vector ``w`` by ``angle`` inside a random plane containing it."""
    d = rng.standard_normal(w.size)
    d -= (d @ w) * w
    d /= np.linalg.norm(d)
    return math.cos(angle) * w + math.sin(angle) * d


def generate_synthetic_stream(cfg: StreamConfig) -> TaskStream:
    """Draw a drifting multi-modal regression curriculum.

    Each task has its own latent region; every modality is a noisy
    task-perturbed view of the latent (linear, or a random tanh encoder when
    ``view_hidden > 0``). The score is a linear read-out whose direction
    rotates between tasks, plus an optional smooth bend shared by all tasks. Missingness (``cfg.beta``)
    is applied to training splits, and to eval splits if ``cfg.eval_missing``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    L = cfg.latent_dim
    lo, hi = cfg.score_range
    center, scale = 0.5 * (lo + hi), (hi - lo) / 8.0

    H = cfg.view_hidden
    if H:
        # each modality is a random one-hidden-layer tanh encoder of the latent
        encoders = [(rng.standard_normal((H, L)) / math.sqrt(L), 0.5 * rng.standard_normal(H)) for _ in cfg.feature_dims]
        base_maps = [rng.standard_normal((d, H)) * math.sqrt(2.0 / H) for d in cfg.feature_dims]
    else:
        encoders = [None] * cfg.n_modalities
        base_maps = [rng.standard_normal((d, L)) / math.sqrt(L) for d in cfg.feature_dims]
    if cfg.modality_rank is not None:
        # each modality only sees a random rank-r slice of the latent
        for A in base_maps:
            q, _ = np.linalg.qr(rng.standard_normal((L, cfg.modality_rank)))
            A[...] = A @ q @ q.T * math.sqrt(L / cfg.modality_rank)
    offsets = []
    for d in cfg.feature_dims:
        o = rng.standard_normal(d)
        offsets.append(o * cfg.feature_offset / np.linalg.norm(o) * math.sqrt(d))
    # smooth nonlinear score component shared by every task
    n_waves = 8
    freqs = cfg.score_frequency * rng.standard_normal((n_waves, L))
    phases = rng.uniform(0.0, 2.0 * math.pi, n_waves)
    amps = cfg.score_bend * rng.standard_normal(n_waves) / math.sqrt(n_waves)

    def bend(u):
        return np.sin(u @ freqs.T + phases) @ amps

    w = rng.standard_normal(L)
    w /= np.linalg.norm(w)

    tasks = []
    for t in range(cfg.n_tasks):
        if t:
            w = _rotate(w, cfg.drift_angle * rng.uniform(0.5, 1.0), rng)
        offset = cfg.drift_shift * rng.standard_normal() if t else 0.0
        region = rng.standard_normal(L)
        region *= cfg.region_shift / np.linalg.norm(region)
        maps = [A + cfg.map_drift * rng.standard_normal(A.shape) / math.sqrt(A.shape[1]) for A in base_maps]
        base = bend(region[None, :])[0]

        def view(u, A, enc):
            return u @ A.T if enc is None else np.tanh(u @ enc[0].T + enc[1]) @ A.T

        def draw(n, split):
            u = region + rng.standard_normal((n, L))
            y = np.clip(center + scale * ((u - region) @ w + bend(u) - base + offset), lo, hi)
            views = [cfg.feature_scale * (o + view(u, A, enc) + cfg.noise * rng.standard_normal((n, A.shape[0]))) for A, o, enc in zip(maps, offsets, encoders)]
            return [
                MultiModalSample(
                    id=f"t{t}-{split}-{i:05d}",
                    task_index=t,
                    features=tuple(v[i] for v in views),
                    score=float(y[i]),
                    split=split,
                )
                for i in range(n)
            ]

        tasks.append(TaskData(t, draw(cfg.train_per_task, "train"), draw(cfg.eval_per_task, "eval")))

    stream = TaskStream(tasks, cfg.feature_dims, cfg.score_range)
    if cfg.beta > 0:
        mask_seed = cfg.seed if cfg.mask_seed is None else cfg.mask_seed
        stream = apply_missing_pattern(stream, cfg.beta, mask_seed, include_eval=cfg.eval_missing)
    return stream


def draw_missing_flags(rng: np.random.Generator, n: int, n_modalities: int, beta: float) -> np.ndarray:
    """Independent Bernoulli(beta) missing flags, before the keep-one correction."""
    return rng.random((n, n_modalities)) < beta


def apply_missing_pattern(stream: TaskStream, beta: float, seed: int, include_eval: bool = False) -> TaskStream:
    """Drop modalities independently with probability ``beta``.

    A sample whose draw would remove every modality keeps modality 0.
    """
    if not 0.0 <= beta < 1.0:
        raise ConfigError(f"missing rate beta={beta} must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    M = stream.n_modalities
    tasks = []
    for task in stream.tasks:
        splits = {}
        for split in ("train", "eval"):
            samples = getattr(task, split)
            if split == "eval" and not include_eval:
                splits[split] = list(samples)
                continue
            if any(not s.is_complete for s in samples):
                raise ContractError(f"task {task.index}: missingness can only be applied to complete samples")
            flags = draw_missing_flags(rng, len(samples), M, beta)
            flags[flags.all(axis=1), 0] = False
            splits[split] = [s.with_missing(np.flatnonzero(f)) if f.any() else s for s, f in zip(samples, flags)]
        tasks.append(TaskData(task.index, splits["train"], splits["eval"]))
    return TaskStream(tasks, stream.feature_dims, stream.score_range)


# --------------------------------------------------------------------------
# Line-delimited files
# --------------------------------------------------------------------------


def fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot serialise non-finite value {x}")
    return format(float(x), ".17g")


def _fmt_array(a: Sequence[float]) -> str:
    return "[" + ",".join(fmt_float(v) for v in a) + "]"


def sample_line(s: MultiModalSample, extra: Optional[dict] = None) -> str:
    feats = ",".join(f'"{m}":{_fmt_array(f)}' for m, f in enumerate(s.features) if f is not None)
    parts = [
        f'"id":{json.dumps(s.id)}',
        f'"task_index":{s.task_index}',
        f'"split":{json.dumps(s.split)}',
        f'"score":{fmt_float(s.score)}',
        f'"mask":[{",".join(str(int(b)) for b in s.mask)}]',
        f'"features":{{{feats}}}',
    ]
    for key, value in (extra or {}).items():
        parts.append(f"{json.dumps(key)}:{fmt_float(value) if isinstance(value, float) else json.dumps(value)}")
    return "{" + ",".join(parts) + "}"


def header_line(stream: TaskStream, kind: str = FORMAT_NAME, **extra) -> str:
    header = {
        "format": kind,
        "version": FORMAT_VERSION,
        "T": stream.n_tasks,
        "M": stream.n_modalities,
        "feature_dims": list(stream.feature_dims),
        "score_range": [float(v) for v in stream.score_range],
    }
    header.update(extra)
    return json.dumps(header)


def save_stream(stream: TaskStream, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(header_line(stream) + "\n")
        for s in stream.samples():
            fh.write(sample_line(s) + "\n")


def parse_sample(rec: dict, index: int, feature_dims: Sequence[int]) -> MultiModalSample:
    try:
        mask = [int(b) for b in rec["mask"]]
        feats_raw = rec["features"]
        sid, t, split, score = str(rec["id"]), int(rec["task_index"]), str(rec["split"]), float(rec["score"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed sample record ({exc})", index) from exc
    M = len(feature_dims)
    if len(mask) != M:
        raise SchemaError(f"record {index}: mask has {len(mask)} bits, header declares M={M}")
    if split not in ("train", "eval"):
        raise ParseError(f"unknown split {split!r}", index)
    features = []
    for m in range(M):
        raw = feats_raw.get(str(m))
        if mask[m]:
            if raw is not None:
                raise SchemaError(f"record {index}: modality {m} is masked but carries features")
            features.append(None)
            continue
        if raw is None:
            raise SchemaError(f"record {index}: modality {m} is observed but has no features")
        if len(raw) != feature_dims[m]:
            raise SchemaError(f"record {index}: modality {m} has length {len(raw)}, header declares {feature_dims[m]}")
        features.append(np.array(raw, dtype=np.float64))
    try:
        return MultiModalSample(sid, t, tuple(features), score, split)
    except ContractError as exc:
        raise SchemaError(f"record {index}: {exc}") from exc


def read_header(line: str, kind: str = FORMAT_NAME) -> dict:
    try:
        header = json.loads(line)
        T, M = int(header["T"]), int(header["M"])
        dims = [int(d) for d in header["feature_dims"]]
        lo, hi = (float(v) for v in header["score_range"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed header ({exc})", 0) from exc
    if header.get("format") != kind:
        raise SchemaError(f"expected a {kind!r} file, found {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported format version {header.get('version')!r}")
    if len(dims) != M:
        raise SchemaError(f"header declares M={M} but lists {len(dims)} feature dims")
    header.update(T=T, M=M, feature_dims=dims, score_range=(lo, hi))
    return header


def iter_records(path) -> Iterator[tuple[int, dict]]:
    with Path(path).open("r", encoding="utf-8") as fh:
        for index, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                yield index, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", index) from exc


def load_stream(path) -> TaskStream:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline()
    if not first.strip():
        raise ParseError("missing header", 0)
    header = read_header(first)
    T, dims = header["T"], header["feature_dims"]
    buckets = [{"train": [], "eval": []} for _ in range(T)]
    for index, rec in iter_records(path):
        if index == 0:
            continue
        s = parse_sample(rec, index, dims)
        if not 0 <= s.task_index < T:
            raise SchemaError(f"record {index}: task_index {s.task_index} outside header T={T}")
        buckets[s.task_index][s.split].append(s)
    present = sum(1 for b in buckets if b["train"] or b["eval"])
    if present != T:
        raise SchemaError(f"header declares T={T} but the file holds {present} task sections")
    tasks = [TaskData(t, b["train"], b["eval"]) for t, b in enumerate(buckets)]
    return TaskStream(tasks, tuple(dims), header["score_range"]).validate()
