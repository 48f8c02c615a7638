"""Continual training loop, method variants and ablation grids.

Each session runs three stages: complete the task's missing modalities,
optimise the scorer and imputer jointly while replaying prioritised memory
against a frozen snapshot of the previous scorer, then snapshot the scorer
and refresh the memory buffer.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .data import MultiModalSample, TaskData, TaskStream
from .errors import ConfigError, ContractError
from .mbi import ExemplarBank, Imputer, observed_summary
from .metrics import SessionReport, safe_metrics, fisher_z_average
from .model import ObjectiveWeights, ScoringModel, total_objective
from .mro import MemoryBuffer, replay_priority, sample_replay, select_memory
from .numeric import AdamState, ParameterSet, PerceptronParams, adam_step, cosine_lr, perceptron_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    imputer: bool  # False: zero-fill missing slots
    retrieval: bool = True
    bridge: bool = True
    weighting: str = "softmax"
    memory: bool = True  # buffer, replay and consistency loss
    replay: str = "priority"
    joint: bool = False


VARIANTS = {
    "brima": Variant(imputer=True),
    "sequential": Variant(imputer=False, memory=False),
    "joint": Variant(imputer=True, memory=False, joint=True),
    "zero-impute": Variant(imputer=False),
    "retrieval-impute": Variant(imputer=True, bridge=False, weighting="uniform"),
    "uniform-replay": Variant(imputer=True, replay="uniform"),
    "no-mbi": Variant(imputer=False),
    "no-bridge": Variant(imputer=True, bridge=False),
    "no-candidate": Variant(imputer=True, retrieval=False),
    "no-mro": Variant(imputer=True, memory=False),
}


@dataclass
class TrainerConfig:
    epochs: int = 50
    batch_size: int = 4
    replay_batch: int = 2
    lr: float = 3e-4
    weight_decay: float = 1e-4
    lr_floor: float = 0.01
    K: int = 5
    Q: int = 10
    capacity: int = 50
    alpha: float = 0.5
    lambda_mem: float = 1.0
    lambda_rec: float = 1.0
    hidden: tuple = (256,)
    bridge_hidden: tuple = (256,)
    pool_dim: int = 16
    cond_dim: int = 16
    cond_hidden: tuple = (32,)
    simulate_prob: float = 0.5
    reimpute: str = "session"
    bridge_source: str = "complete"
    variant: str = "brima"
    seed: int = 0

    def __post_init__(self):
        for name in ("hidden", "bridge_hidden", "cond_hidden"):
            setattr(self, name, tuple(int(h) for h in getattr(self, name)))

    def validate(self) -> "TrainerConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.replay_batch < 0:
            raise ConfigError("batch_size must be >= 1 and replay_batch >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.K < 0 or self.Q < 1 or self.capacity < 0:
            raise ConfigError("K must be >= 0, Q >= 1 and capacity >= 0")
        if self.lambda_mem < 0 or self.lambda_rec < 0:
            raise ConfigError("objective weights must be non-negative")
        if self.reimpute not in ("session", "epoch"):
            raise ConfigError("reimpute must be 'session' or 'epoch'")
        if self.bridge_source not in ("complete", "observed"):
            raise ConfigError("bridge_source must be 'complete' or 'observed'")
        if not 0.0 <= self.simulate_prob <= 1.0:
            raise ConfigError("simulate_prob must lie in [0, 1]")
        return self

    @property
    def spec(self) -> Variant:
        return VARIANTS[self.variant]

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown trainer settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainerState:
    store: ParameterSet
    model: ScoringModel
    imputer: Optional[Imputer]
    buffer: Optional[MemoryBuffer]
    feature_dims: tuple
    task_stats: dict = field(default_factory=dict)
    snapshot: Optional[PerceptronParams] = None
    session: int = 0  # completed sessions
    rngs: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def bank(self) -> Optional[ExemplarBank]:
        if self.buffer is None or len(self.buffer) == 0:
            return None
        return self.buffer.bank()


def init_state(feature_dims: Sequence[int], cfg: TrainerConfig) -> TrainerState:
    cfg.validate()
    spec = cfg.spec
    streams = np.random.SeedSequence(cfg.seed).spawn(5)
    rngs = dict(zip(("init", "order", "replay", "simulate", "memory"), (np.random.default_rng(s) for s in streams)))
    store = ParameterSet()
    model = ScoringModel(store, feature_dims, rngs["init"], hidden=cfg.hidden)
    imputer = None
    if spec.imputer:
        imputer = Imputer(
            store if spec.bridge else None,
            feature_dims,
            rngs["init"],
            K=cfg.K,
            pool_dim=cfg.pool_dim,
            cond_dim=cfg.cond_dim,
            hidden=cfg.bridge_hidden,
            cond_hidden=cfg.cond_hidden,
            use_retrieval=spec.retrieval and spec.memory,
            use_bridge=spec.bridge,
            weighting=spec.weighting,
        )
    store.finalize()
    model.bind()
    if imputer is not None:
        imputer.bind()
    buffer = MemoryBuffer(cfg.capacity) if spec.memory else None
    return TrainerState(store, model, imputer, buffer, tuple(feature_dims), rngs=rngs)


# --------------------------------------------------------------------------
# Feature completion
# --------------------------------------------------------------------------


def complete_features(state: TrainerState, sample: MultiModalSample, bank=None, exclude=None) -> np.ndarray:
    """Fused feature row with every missing slot imputed (or zero-filled)."""
    if sample.is_complete or state.imputer is None:
        return observed_summary(sample, state.feature_dims)
    return np.concatenate(state.imputer.impute(sample, bank, exclude))


def _standardize(state: TrainerState, task_index: int, y: np.ndarray) -> np.ndarray:
    mu, sd = state.task_stats[task_index]
    return (y - mu) / sd


def _destandardize(state: TrainerState, task_index: int, out: np.ndarray) -> np.ndarray:
    mu, sd = state.task_stats[task_index]
    return mu + sd * out


def _register_stats(state: TrainerState, task: TaskData) -> None:
    y = np.array([s.score for s in task.train])
    sd = float(y.std())
    state.task_stats[task.index] = (float(y.mean()), sd if sd > 0 else 1.0)


@dataclass
class _SlotTable:
    """Precomputed bridge inputs for simulated-missing training slots."""

    base: np.ndarray  # (N, M, in)
    truth: np.ndarray  # (N, M, Dmax)
    eligible: np.ndarray  # (N, M) bool


def _min_observed(cfg: TrainerConfig, M: int) -> int:
    """Fewest observed modalities a sample needs to supervise the bridge."""
    return M if cfg.bridge_source == "complete" else 2


def _slot_table(imputer: Imputer, samples: Sequence[MultiModalSample], bank, loo: bool = False, min_observed: int = 2) -> _SlotTable:
    N, M = len(samples), imputer.M
    width = imputer.summary_dim + imputer.prior_dim
    base = np.zeros((N, M, width))
    truth = np.zeros((N, M, imputer.prior_dim))
    eligible = np.zeros((N, M), dtype=bool)
    for i, s in enumerate(samples):
        obs = s.observed
        if len(obs) < max(2, min_observed):
            continue
        for m in obs:
            base[i, m] = imputer.slot_input(s.with_missing([m]), m, bank, exclude=i if loo else None)
            truth[i, m, : s.features[m].size] = s.features[m]
            eligible[i, m] = True
    return _SlotTable(base, truth, eligible)


@dataclass
class _MissingSlots:
    """Bridge inputs for the genuinely missing slots of a session's samples."""

    rows: np.ndarray
    ms: np.ndarray
    base: np.ndarray

    @classmethod
    def build(cls, imputer: Imputer, samples: Sequence[MultiModalSample], bank) -> "_MissingSlots":
        pairs = [(i, m) for i, s in enumerate(samples) for m in s.missing]
        width = imputer.summary_dim + imputer.prior_dim
        base = np.stack([imputer.slot_input(samples[i], m, bank) for i, m in pairs]) if pairs else np.zeros((0, width))
        rows = np.array([i for i, _ in pairs], dtype=np.intp)
        return cls(rows, np.array([m for _, m in pairs], dtype=np.intp), base)

    def write(self, imputer: Imputer, X: np.ndarray) -> None:
        """Overwrite the missing blocks of ``X`` with current imputations."""
        if not self.rows.size:
            return
        imputed, _ = imputer.forward_slots(self.base, self.ms)
        offsets = np.cumsum((0,) + imputer.feature_dims)
        for m, d in enumerate(imputer.feature_dims):
            sel = self.ms == m
            X[self.rows[sel], offsets[m] : offsets[m] + d] = imputed[sel, :d]


def _draw_slots(rng: np.random.Generator, eligible: np.ndarray, prob: float):
    """Pick at most one simulated-missing modality per row, each with probability ``prob``."""
    scores = rng.random(eligible.shape)
    keep = rng.random(eligible.shape[0]) < prob
    scores[~eligible] = -1.0
    rows = np.flatnonzero(keep & eligible.any(axis=1))
    return rows, scores[rows].argmax(axis=1)


# --------------------------------------------------------------------------
# Sessions
# --------------------------------------------------------------------------


def train_session(state: TrainerState, task: TaskData, cfg: TrainerConfig, tasks: Optional[Sequence[TaskData]] = None) -> TrainerState:
    """Train on one task. ``tasks`` pools several tasks into a single session (joint variant)."""
    spec = cfg.spec
    pooled = list(tasks) if tasks is not None else [task]
    if tasks is None and task.index != state.session:
        raise ContractError(f"session {state.session + 1} expects task index {state.session}, got {task.index}")
    for t in pooled:
        _register_stats(state, t)
    samples = [s for t in pooled for s in t.train]
    y = np.concatenate([_standardize(state, t.index, np.array([s.score for s in t.train])) for t in pooled])
    N = len(samples)
    imputer, rngs = state.imputer, state.rngs
    bank = state.bank()

    # Stage 1: complete missing modalities with memory retrieval + bridge
    X = np.stack([observed_summary(s, state.feature_dims) for s in samples])
    # with retrieval on and an empty buffer the missing slots stay zero and the bridge rests
    active = imputer is not None and not imputer.cold(bank)
    if active:
        fill = _MissingSlots.build(imputer, samples, bank)
        fill.write(imputer, X)
    train_bridge = active and imputer.use_bridge and cfg.lambda_rec > 0
    slots = _slot_table(imputer, samples, bank, min_observed=_min_observed(cfg, len(state.feature_dims))) if train_bridge else None

    # replay material from the previous buffer
    replay_on = spec.memory and state.snapshot is not None and len(state.buffer) > 0 and cfg.replay_batch > 0
    if replay_on:
        entries = state.buffer.entries
        X_buf = np.stack([observed_summary(e.sample, state.feature_dims) for e in entries])
        snap_out = perceptron_forward(state.snapshot, X_buf)[0][:, 0]
        buf_slots = _slot_table(imputer, [e.sample for e in entries], bank, loo=True) if imputer is not None else None
        buf_truth = np.stack([[_pad_to(e.sample.features[m], _dmax(state)) for m in range(len(state.feature_dims))] for e in entries])

    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    weights = ObjectiveWeights(cfg.lambda_mem, cfg.lambda_rec)
    store, model = state.store, state.model
    losses = []

    # Stage 2: joint optimisation with modality-aware replay
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(cfg.lr, epoch, cfg.epochs, cfg.lr_floor)
        if cfg.reimpute == "epoch" and epoch and active:
            fill.write(imputer, X)
        if replay_on:
            _refresh_priorities(state, cfg, X_buf, snap_out, buf_slots, buf_truth, epoch)
        order = rngs["order"].permutation(N)
        epoch_loss = 0.0
        for start in range(0, N, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            store.zero_grad()
            Xb = X[idx]
            X_rep = snap_rep = None
            if replay_on:
                ridx = sample_replay(state.buffer, cfg.replay_batch, rngs["replay"], uniform=spec.replay == "uniform")
                X_rep, snap_rep = X_buf[ridx], snap_out[ridx]
            rec = None
            if train_bridge:
                rows, ms = _draw_slots(rngs["simulate"], slots.eligible[idx], cfg.simulate_prob)
                base, truth = slots.base[idx[rows], ms], slots.truth[idx[rows], ms]
                if replay_on:
                    brow, bms = _draw_slots(rngs["simulate"], buf_slots.eligible[ridx], cfg.simulate_prob)
                    rsel = np.asarray(ridx)[brow]
                    base = np.concatenate([base, buf_slots.base[rsel, bms]])
                    truth = np.concatenate([truth, buf_slots.truth[rsel, bms]])
                    ms = np.concatenate([ms, bms])
                if len(ms):
                    rec = (base, ms, truth)
            parts = step_objective(model, imputer, Xb, y[idx], X_rep, snap_rep, rec, weights)
            adam_step(opt, store, None)
            epoch_loss += parts["total"]
        losses.append(epoch_loss / max(1, -(-N // cfg.batch_size)))

    # Stage 3: snapshot the scorer and update memory
    state.snapshot = model.net.copy()
    if spec.memory and not spec.joint:
        preds = model.predict_batch(X)
        preds = _destandardize(state, task.index, preds)
        state.buffer = select_memory(samples, preds, cfg.Q, cfg.capacity, rngs["memory"], previous=state.buffer, session=state.session + 1)
    state.session = pooled[-1].index + 1
    state.history.append({"session": state.session, "epoch_loss": losses})
    return state


def step_objective(
    model: ScoringModel,
    imputer: Optional[Imputer],
    X: np.ndarray,
    y: np.ndarray,
    X_rep: Optional[np.ndarray] = None,
    snap_rep: Optional[np.ndarray] = None,
    rec: Optional[tuple] = None,
    weights: ObjectiveWeights = ObjectiveWeights(),
) -> dict:
    """Score + weighted consistency + weighted reconstruction loss for one step.

    Gradients of the total are accumulated into the parameter store (the
    caller zeroes them). ``X_rep``/``snap_rep`` hold replayed features and
    frozen snapshot scores; ``rec`` is ``(base, ms, truth)`` for simulated
    missing slots.
    """
    nb = len(X)
    Xall = X if X_rep is None else np.concatenate([X, X_rep])
    out, cache = model.forward(Xall)
    diff = out[:nb] - y
    g = np.empty_like(out)
    g[:nb] = 2.0 * diff / nb
    score_l = float(diff @ diff) / nb
    mem_l = rec_l = 0.0
    if X_rep is not None and len(X_rep):
        rdiff = out[nb:] - snap_rep
        mem_l = float(rdiff @ rdiff) / len(rdiff)
        g[nb:] = weights.mem * 2.0 * rdiff / len(rdiff)
    model.backward(cache, g)
    if rec is not None:
        rec_l = imputer.rec_loss(*rec, weight=weights.rec)
    total = total_objective(score_l, mem_l, rec_l, weights)
    return {"score": score_l, "mem": mem_l, "rec": rec_l, "total": total}


def _dmax(state: TrainerState) -> int:
    return max(state.feature_dims)


def _pad_to(v: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n)
    out[: v.size] = v
    return out



def _refresh_priorities(state, cfg, X_buf, snap_out, buf_slots, buf_truth, epoch) -> None:
    """Recompute distortion, drift and priority for every buffer entry."""
    entries = state.buffer.entries
    M = len(state.feature_dims)
    drift = np.abs(state.model.predict_batch(X_buf) - snap_out)
    ms = np.array([(e.insertion_order + epoch) % M for e in entries])
    rows = np.arange(len(entries))
    truth = buf_truth[rows, ms]
    if buf_slots is None:
        imputed = np.zeros_like(truth)
    else:
        imputed, _ = state.imputer.forward_slots(buf_slots.base[rows, ms], ms)
    diff = imputed - truth
    distortion = (diff * diff).sum(axis=1)
    for e, d, dy in zip(entries, distortion, drift):
        e.distortion, e.drift = float(d), float(dy)
        e.priority = float(replay_priority(e.distortion, e.drift, cfg.alpha))


# --------------------------------------------------------------------------
# Evaluation and full runs
# --------------------------------------------------------------------------


def evaluate_task(state: TrainerState, task: TaskData) -> tuple[np.ndarray, np.ndarray]:
    bank = state.bank()
    X = np.stack([complete_features(state, s, bank) for s in task.eval])
    pred = _destandardize(state, task.index, state.model.predict_batch(X))
    return np.array([s.score for s in task.eval]), pred


def _evaluate(state: TrainerState, tasks: Sequence[TaskData], upto: int, T: int):
    row = [None] * T
    ys, ps = [], []
    for t in tasks[:upto]:
        if not t.eval:
            continue
        y, p = evaluate_task(state, t)
        row[t.index] = safe_metrics(y, p)
        ys.append(y)
        ps.append(p)
    union = safe_metrics(np.concatenate(ys), np.concatenate(ps)) if ys else {"srcc": None, "mse": None, "rl2": None}
    return row, union


def run_stream(stream: TaskStream, cfg: TrainerConfig, return_state: bool = False):
    """Train over every task in order and report metrics after each session."""
    cfg.validate()
    stream.validate()
    state = init_state(stream.feature_dims, cfg)
    T = stream.n_tasks
    report = SessionReport(cfg.variant, cfg.seed, T, cfg.config_hash(), stream.mask_hash())
    if cfg.spec.joint:
        train_session(state, stream.tasks[-1], cfg, tasks=stream.tasks)
        report.cells = [[None] * T for _ in range(T - 1)]
        row, union = _evaluate(state, stream.tasks, T, T)
        report.cells.append(row)
        report.sessions.append({"session": T, **union})
    else:
        for task in stream.tasks:
            train_session(state, task, cfg)
            row, union = _evaluate(state, stream.tasks, task.index + 1, T)
            report.cells.append(row)
            report.sessions.append({"session": task.index + 1, **union})
            log.debug("%s seed=%d session %d srcc=%s", cfg.variant, cfg.seed, task.index + 1, union["srcc"])
    report.summary()
    return (report, state) if return_state else report


def _run_one(args):
    stream, cfg = args
    return run_stream(stream, cfg)


def run_ablation_grid(stream: TaskStream, base_cfg: TrainerConfig, variants: Sequence[str], seeds: Sequence[int], workers: int = 1) -> dict:
    """Run every (variant, seed) pair on one shared stream and aggregate.

    All runs read the same stream object, so they see identical
    missing-modality masks. Rows are ordered by variant, then seed.
    """
    if not variants:
        raise ConfigError("at least one variant is required")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    jobs = []
    for v in sorted(set(variants)):
        for s in sorted(set(seeds)):
            cfg = TrainerConfig(**{**asdict(base_cfg), "variant": v, "seed": s})
            jobs.append((stream, cfg))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_one, jobs))
    else:
        reports = [_run_one(j) for j in jobs]
    return aggregate(reports, variants)


def aggregate(reports: Sequence[SessionReport], variants: Optional[Sequence[str]] = None) -> dict:
    by_variant: dict[str, list[SessionReport]] = {}
    for r in sorted(reports, key=lambda r: (r.variant, r.seed)):
        by_variant.setdefault(r.variant, []).append(r)
    rows = []
    order = list(dict.fromkeys(variants)) if variants else sorted(by_variant)
    for v in order:
        reps = by_variant.get(v, [])
        summaries = [r.summary() for r in reps]
        row = {"variant": v, "seeds": [r.seed for r in reps], "mask_hashes": sorted({r.mask_hash for r in reps})}
        for key in ("final_srcc", "final_mse", "final_rl2", "forgetting", "session_avg_srcc"):
            vals = [s[key] for s in summaries if s[key] is not None]
            row[f"{key}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{key}_std"] = float(np.std(vals)) if vals else None
        srccs = [s["final_srcc"] for s in summaries if s["final_srcc"] is not None]
        row["final_srcc_fisher"] = fisher_z_average(srccs) if srccs else None
        rows.append(row)
    return {"rows": rows, "reports": [r.to_dict() for r in sorted(reports, key=lambda r: (r.variant, r.seed))]}
