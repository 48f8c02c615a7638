"""Acceptance gate. Each test prints one PASS/FAIL line at the stated tolerance.

The training criteria (3, 6, 7, 8, 9) share one grid of runs on the default
synthetic stream, computed once per module.
"""

import math
import time

import numpy as np
import pytest

import brima.trainer as trainer_mod
from brima.data import StreamConfig, generate_synthetic_stream
from brima.mbi import ExemplarBank, Imputer, cosine, observed_summary, retrieve_candidates
from brima.metrics import fisher_z_average, mse, rl2, srcc
from brima.model import ObjectiveWeights, ScoringModel
from brima.mro import select_indices
from brima.numeric import ParameterSet, gradient_check
from brima.trainer import VARIANTS, TrainerConfig, init_state, run_ablation_grid, run_stream, step_objective, train_session

from conftest import make_sample

SEEDS = [0, 1, 2, 3, 4]
BETAS = [0.10, 0.25, 0.50]
ABLATIONS = ["no-mbi", "no-bridge", "no-candidate", "no-mro"]


def report(request, n: int, ok: bool, detail: str) -> None:
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
    with request.config.pluginmanager.getplugin("capturemanager").global_and_fixture_disabled():
        print("\n" + line)


@pytest.fixture(scope="module")
def grids():
    """Every variant x seed on the default stream at each missing rate."""
    out = {}
    for beta in BETAS:
        stream = generate_synthetic_stream(StreamConfig(beta=beta))
        t0 = time.perf_counter()
        table = run_ablation_grid(stream, TrainerConfig(), sorted(VARIANTS), SEEDS)
        out[beta] = {"stream": stream, "table": table, "rows": {r["variant"]: r for r in table["rows"]}, "seconds": time.perf_counter() - t0}
    return out


# ---------------------------------------------------------------------------
# 1. gradient check of the full objective
# ---------------------------------------------------------------------------


def _toy_objective(seed: int):
    rng = np.random.default_rng(seed)
    dims = (4, 4, 4)
    store = ParameterSet()
    model = ScoringModel(store, dims, rng, hidden=(6,))
    imp = Imputer(store, dims, rng, K=2, pool_dim=3, cond_dim=3, hidden=(5,), cond_hidden=(4,))
    store.finalize()
    model.bind()
    imp.bind()
    # move away from the zero-initialised residual layer so every block is exercised
    store.flat[:] = rng.standard_normal(store.flat.size) * 0.5
    X = rng.standard_normal((3, 12))
    y = rng.standard_normal(3)
    X_rep = rng.standard_normal((2, 12))
    snap = rng.standard_normal(2)
    base = rng.standard_normal((3, imp.summary_dim + imp.prior_dim))
    ms = np.array([0, 2, 1])
    truth = rng.standard_normal((3, imp.prior_dim))
    weights = ObjectiveWeights(0.7, 1.3)

    def loss():
        store.zero_grad()
        parts = step_objective(model, imp, X, y, X_rep, snap, (base, ms, truth), weights)
        return parts["total"], [store.grad_flat]

    return loss, store


def test_c1_full_objective_gradient(request):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        loss, store = _toy_objective(seed)
        worst = max(worst, gradient_check(loss, [store.flat], eps=1e-6))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 10.0
    report(request, 1, ok, f"max relative error {worst:.2e} (< 1e-4) over 20 instances in {elapsed:.2f}s (< 10s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. retrieval against brute force
# ---------------------------------------------------------------------------


def _brute_topk(query, pool, m, K):
    obs = [j for j in range(len(query.features)) if j != m and query.features[j] is not None]
    scored = []
    for i, s in enumerate(pool):
        sim = sum(cosine(query.features[j], s.features[j]) for j in obs) / len(obs)
        scored.append((-sim, i))
    return [i for _, i in sorted(scored)[:K]]


def test_c2_retrieval_matches_brute_force(request):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    agree = 0
    for case in range(100):
        M = int(rng.integers(2, 5))
        dims = [int(d) for d in rng.integers(1, 6, M)]
        n = int(rng.integers(1, 65))
        pool = [make_sample([rng.standard_normal(d) for d in dims], sid=f"b{i}") for i in range(n)]
        m = int(rng.integers(M))
        feats = [rng.standard_normal(d) for d in dims]
        feats[m] = None
        query = make_sample(feats, sid="q")
        K = int(rng.integers(1, 9))
        got = retrieve_candidates(query, ExemplarBank(pool), m, K).indices
        agree += list(got) == _brute_topk(query, pool, m, min(K, n))
    elapsed = time.perf_counter() - t0
    ok = agree == 100 and elapsed < 5.0
    report(request, 2, ok, f"{agree}/100 exact index agreement in {elapsed:.2f}s (< 5s)")
    assert ok


# ---------------------------------------------------------------------------
# 3. buffer invariants across a full run
# ---------------------------------------------------------------------------


def _coverage_holds(complete, preds, Q, capacity, chosen) -> bool:
    complete = np.asarray(complete)
    if complete.sum() < capacity:
        return True
    order = np.argsort(preds, kind="stable")
    bins = np.array_split(order, Q)
    need = math.ceil(capacity / Q)
    if any(complete[b].sum() < need for b in bins):
        return True
    chosen = set(chosen)
    return all(chosen & set(b.tolist()) for b in bins)


@pytest.mark.slow
def test_c3_buffer_invariants(request, monkeypatch):
    stream = generate_synthetic_stream(StreamConfig(beta=0.25))
    cfg = TrainerConfig()
    calls = []
    real = trainer_mod.select_memory

    def spy(samples, preds, Q, capacity, rng, previous=None, session=1):
        state = rng.bit_generator.state
        buf = real(samples, preds, Q, capacity, rng, previous=previous, session=session)
        probe = np.random.default_rng()
        probe.bit_generator.state = state
        share = math.ceil(capacity / session)
        complete = [s.is_complete for s in samples]
        chosen = select_indices(complete, preds, Q, share, probe)
        calls.append(_coverage_holds(complete, preds, Q, share, chosen) and {samples[i].id for i in chosen} == {e.sample.id for e in buf if e.insertion_session == session})
        return buf

    monkeypatch.setattr(trainer_mod, "select_memory", spy)
    state = init_state(stream.feature_dims, cfg)
    sizes, complete_frac = [], []
    for task in stream.tasks:
        train_session(state, task, cfg)
        state.buffer.check_invariants()
        sizes.append(len(state.buffer))
        complete_frac.append(np.mean([e.sample.is_complete for e in state.buffer]))
    ok = max(sizes) <= 50 and min(complete_frac) == 1.0 and len(calls) == 5 and all(calls)
    report(request, 3, ok, f"sizes {sizes} (<= 50), complete fraction {min(complete_frac):.0%}, bin coverage {sum(calls)}/{len(calls)} sessions")
    assert ok


# ---------------------------------------------------------------------------
# 4. zero-residual identity
# ---------------------------------------------------------------------------


def test_c4_zero_residual_identity(request):
    rng = np.random.default_rng(4)
    dims = (4, 6, 3)
    store = ParameterSet()
    imp = Imputer(store, dims, rng, K=3)
    store.finalize()
    imp.bind()
    bank = ExemplarBank([make_sample([rng.standard_normal(d) for d in dims], sid=f"b{i}") for i in range(12)])
    exact = 0
    for i in range(50):
        feats = [rng.standard_normal(d) for d in dims]
        m = i % 3
        feats[m] = None
        q = make_sample(feats)
        prior = imp.prior(q, m, bank)
        imputed, _ = imp.forward_slots(imp.slot_input(q, m, bank)[None, :], np.array([m]))
        exact += np.array_equal(imputed[0, : dims[m]], prior)
    ok = exact == 50
    report(request, 4, ok, f"bridged output equals exemplar prior bitwise in {exact}/50 slots")
    assert ok


# ---------------------------------------------------------------------------
# 5. metric oracles
# ---------------------------------------------------------------------------


def _oracle_srcc(y, p):
    def ranks(v):
        out = np.empty(len(v))
        for i, x in enumerate(v):
            out[i] = sum(w < x for w in v) + (sum(w == x for w in v) + 1) / 2
        return out

    a, b = ranks(y), ranks(p)
    a, b = a - a.mean(), b - b.mean()
    return float(np.sum(a * b) / math.sqrt(np.sum(a * a) * np.sum(b * b)))


def test_c5_metric_oracles(request):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 30))
        y = np.round(rng.uniform(0, 10, n), 1)
        p = np.round(y + rng.normal(0, 2, n), 1)
        if np.ptp(y) == 0 or np.ptp(p) == 0:
            p[0] += 1.0
            y[-1] += 1.0
        worst = max(worst, abs(srcc(y, p) - _oracle_srcc(y, p)))
        worst = max(worst, abs(mse(y, p) - sum((a - b) ** 2 for a, b in zip(y, p)) / n))
        worst = max(worst, abs(rl2(y, p) - 100 * sum((a - b) ** 2 for a, b in zip(y, p)) / n / (max(y) - min(y)) ** 2))
    closed = (srcc([1, 2, 3], [1, 3, 2]) == 0.5, rl2([0, 10], [1, 9]) == 1.0, fisher_z_average([0.0, 0.8]) == 0.5)
    ok = worst < 1e-9 and all(closed)
    report(request, 5, ok, f"max oracle gap {worst:.1e} (< 1e-9); closed forms Spearman 0.5 / RL2 1.0 / Fisher-z 0.5 exact: {closed}")
    assert ok


# ---------------------------------------------------------------------------
# 6-9. directional results on the default stream
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c6_beats_sequential(request, grids):
    g = grids[0.25]
    stream = g["stream"]
    t0 = time.perf_counter()
    reps = {v: [run_stream(stream, TrainerConfig(variant=v, seed=s)).summary() for s in SEEDS] for v in ("brima", "sequential")}
    elapsed = time.perf_counter() - t0
    fz = {v: fisher_z_average([r["final_srcc"] for r in reps[v]]) for v in reps}
    fg = {v: float(np.mean([r["forgetting"] for r in reps[v]])) for v in reps}
    gap = fz["brima"] - fz["sequential"]
    ok = gap >= 0.05 and fg["brima"] < fg["sequential"] and elapsed < 300
    report(
        request,
        6,
        ok,
        f"final SRCC brima {fz['brima']:.4f} vs sequential {fz['sequential']:.4f} (gap {gap:+.4f}, need >= 0.05); "
        f"forgetting {fg['brima']:.4f} vs {fg['sequential']:.4f}; {elapsed:.0f}s (< 300s)",
    )
    assert ok


@pytest.mark.slow
def test_c7_ablation_ordering(request, grids):
    rows = grids[0.25]["rows"]
    mean = {v: rows[v]["final_srcc_mean"] for v in rows}
    beats = {v: mean["brima"] >= mean[v] for v in ABLATIONS}
    chain = mean["zero-impute"] < mean["retrieval-impute"] < mean["brima"]
    ok = all(beats.values()) and chain
    detail = ", ".join(f"{v} {mean[v]:.4f}" for v in ["brima", *ABLATIONS, "zero-impute", "retrieval-impute"])
    report(request, 7, ok, f"{detail}; brima >= each ablation: {beats}; zero < retrieval < bridged: {chain}")
    assert ok


@pytest.mark.slow
def test_c8_monotone_in_missing_rate(request, grids):
    bad = []
    for v in sorted(VARIANTS):
        r = [grids[b]["rows"][v] for b in BETAS]
        for lo, hi, b_lo, b_hi in zip(r, r[1:], BETAS, BETAS[1:]):
            pooled = math.sqrt((lo["final_srcc_std"] ** 2 + hi["final_srcc_std"] ** 2) / 2)
            if lo["final_srcc_mean"] < hi["final_srcc_mean"] - pooled:
                bad.append(f"{v} beta {b_lo:.2f}->{b_hi:.2f}: {lo['final_srcc_mean']:.4f} < {hi['final_srcc_mean']:.4f} - {pooled:.4f}")
    ok = not bad
    report(request, 8, ok, f"{2 * len(VARIANTS) - len(bad)}/{2 * len(VARIANTS)} adjacent pairs within one pooled std" + ("; " + "; ".join(bad) if bad else ""))
    assert ok


@pytest.mark.slow
def test_c9_determinism_and_parity(request, grids):
    g = grids[0.25]
    cfg = TrainerConfig(variant="brima", seed=3)
    again = run_stream(g["stream"], cfg).to_json()
    in_grid = next(r for r in g["table"]["reports"] if r["variant"] == "brima" and r["seed"] == 3)
    from brima.metrics import dumps

    identical = again == run_stream(g["stream"], cfg).to_json() and dumps(in_grid) == again
    hashes = {b: {h for r in grids[b]["table"]["rows"] for h in r["mask_hashes"]} for b in BETAS}
    parity = all(len(h) == 1 for h in hashes.values())
    ok = identical and parity
    report(request, 9, ok, f"bitwise-identical reports: {identical}; one mask hash per grid: {parity} ({ {b: len(h) for b, h in hashes.items()} })")
    assert ok
