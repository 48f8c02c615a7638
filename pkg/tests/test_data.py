import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brima.data import (
    StreamConfig,
    TaskData,
    TaskStream,
    apply_missing_pattern,
    draw_missing_flags,
    generate_synthetic_stream,
    load_stream,
    save_stream,
)
from brima.errors import ConfigError, ContractError, ParseError, SchemaError

from conftest import make_sample


def _streams_equal(a: TaskStream, b: TaskStream) -> bool:
    if a.feature_dims != b.feature_dims or a.score_range != b.score_range or a.n_tasks != b.n_tasks:
        return False
    for sa, sb in zip(a.samples(), b.samples()):
        if (sa.id, sa.task_index, sa.split, sa.score) != (sb.id, sb.task_index, sb.split, sb.score):
            return False
        if not np.array_equal(sa.mask, sb.mask):
            return False
        for fa, fb in zip(sa.features, sb.features):
            if (fa is None) != (fb is None) or (fa is not None and not np.array_equal(fa, fb)):
                return False
    return sum(1 for _ in a.samples()) == sum(1 for _ in b.samples())


def test_sample_mask_duality():
    s = make_sample([[1.0, 2.0], None, [3.0]])
    assert s.observed == (0, 2) and s.missing == (1,)
    assert s.mask.tolist() == [0, 1, 0]
    assert not s.is_complete
    assert s.with_missing([0]).observed == (2,)


def test_sample_needs_an_observed_modality():
    with pytest.raises(ContractError):
        make_sample([None, None])


def test_sample_features_are_read_only():
    s = make_sample([[1.0, 2.0]])
    with pytest.raises(ValueError):
        s.features[0][0] = 5.0


def test_generator_is_deterministic():
    cfg = StreamConfig(n_tasks=2, train_per_task=10, eval_per_task=5, beta=0.25, seed=3)
    assert _streams_equal(generate_synthetic_stream(cfg), generate_synthetic_stream(cfg))


def test_generator_default_shape():
    stream = generate_synthetic_stream(StreamConfig())
    assert stream.n_tasks == 5 and stream.n_modalities == 3
    assert all(len(t.train) == 200 and len(t.eval) == 50 for t in stream.tasks)
    assert stream.feature_dims == (32, 32, 32)
    lo, hi = stream.score_range
    assert all(lo <= s.score <= hi for s in stream.samples())
    stream.validate()


def test_generator_without_drift_shares_score_function():
    cfg = StreamConfig(n_tasks=3, train_per_task=50, eval_per_task=0, drift_angle=0.0, drift_shift=0.0, region_shift=0.0, map_drift=0.0, noise=0.0, seed=2)
    stream = generate_synthetic_stream(cfg)
    # a single least-squares read-out from modality 0 fits every task
    X = np.stack([s.features[0] for t in stream.tasks for s in t.train])
    y = np.array([s.score for t in stream.tasks for s in t.train])
    A = np.c_[X, np.ones(len(X))]
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    inside = (y > 0) & (y < 25)
    np.testing.assert_allclose((A @ coef)[inside], y[inside], atol=1e-6)


@pytest.mark.parametrize(
    "bad",
    [dict(beta=1.0), dict(beta=-0.1), dict(n_tasks=0), dict(feature_dims=(4, 4)), dict(score_range=(5.0, 5.0)), dict(noise=-1.0), dict(modality_rank=99)],
)
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        generate_synthetic_stream(StreamConfig(**bad))


def test_missing_pattern_beta_zero_is_identity():
    base = generate_synthetic_stream(StreamConfig(n_tasks=2, train_per_task=20, eval_per_task=5, seed=1))
    assert _streams_equal(apply_missing_pattern(base, 0.0, seed=9), base)


def test_missing_flags_binomial_rate():
    flags = draw_missing_flags(np.random.default_rng(0), 10_000, 3, 0.25)
    assert 0.24 <= flags.mean() <= 0.26


def test_missing_pattern_keep_one_and_determinism():
    base = generate_synthetic_stream(StreamConfig(n_tasks=2, train_per_task=300, eval_per_task=20, seed=1))
    a = apply_missing_pattern(base, 0.9, seed=5)
    b = apply_missing_pattern(base, 0.9, seed=5)
    assert a.mask_hash() == b.mask_hash()
    for s in a.samples():
        assert s.observed
        if s.split == "eval":
            assert s.is_complete
    # with beta=0.9 the keep-one rule must fire, always on modality 0
    forced = [s for s in a.samples() if s.observed == (0,)]
    assert forced
    assert apply_missing_pattern(base, 0.9, seed=6).mask_hash() != a.mask_hash()


def test_missing_pattern_on_eval_when_requested():
    base = generate_synthetic_stream(StreamConfig(n_tasks=1, train_per_task=50, eval_per_task=50, seed=1))
    out = apply_missing_pattern(base, 0.5, seed=0, include_eval=True)
    assert any(not s.is_complete for s in out.tasks[0].eval)


def test_missing_pattern_requires_complete_input():
    stream = generate_synthetic_stream(StreamConfig(n_tasks=1, train_per_task=50, eval_per_task=5, beta=0.5, seed=1))
    with pytest.raises(ContractError):
        apply_missing_pattern(stream, 0.5, seed=0)
    with pytest.raises(ConfigError):
        apply_missing_pattern(stream, 1.0, seed=0)


def test_round_trip(tmp_path, tiny_stream):
    path = tmp_path / "s.jsonl"
    save_stream(tiny_stream, path)
    back = load_stream(path)
    assert _streams_equal(back, tiny_stream)
    assert back.mask_hash() == tiny_stream.mask_hash()


@settings(max_examples=20)
@given(
    seed=st.integers(0, 10_000),
    beta=st.sampled_from([0.0, 0.1, 0.5, 0.8]),
    dims=st.lists(st.integers(1, 4), min_size=1, max_size=3),
)
def test_round_trip_property(tmp_path_factory, seed, beta, dims):
    cfg = StreamConfig(n_tasks=2, n_modalities=len(dims), feature_dims=tuple(dims), train_per_task=5, eval_per_task=2, beta=beta, seed=seed, eval_missing=True)
    stream = generate_synthetic_stream(cfg)
    path = tmp_path_factory.mktemp("rt") / "s.jsonl"
    save_stream(stream, path)
    assert _streams_equal(load_stream(path), stream)


def _write(path, lines):
    path.write_text("\n".join(json.dumps(x) if not isinstance(x, str) else x for x in lines) + "\n", encoding="utf-8")


def _header(T=1, dims=(2, 2)):
    return {"format": "brima-stream", "version": 1, "T": T, "M": len(dims), "feature_dims": list(dims), "score_range": [0.0, 25.0]}


def _record(i=0, task=0, feats=None, mask=(0, 0)):
    return {"id": f"r{i}", "task_index": task, "split": "train", "score": 3.0, "mask": list(mask), "features": feats or {"0": [1.0, 2.0], "1": [3.0, 4.0]}}


def test_dimension_mismatch_names_modality(tmp_path):
    path = tmp_path / "bad.jsonl"
    _write(path, [_header(), _record(feats={"0": [1.0, 2.0], "1": [3.0]})])
    with pytest.raises(SchemaError, match="modality 1"):
        load_stream(path)


def test_malformed_record_reports_index(tmp_path):
    path = tmp_path / "bad.jsonl"
    _write(path, [_header(), _record(0), "{not json"])
    with pytest.raises(ParseError, match="record 2"):
        load_stream(path)
    _write(path, [_header(), {"id": "x"}])
    with pytest.raises(ParseError, match="record 1"):
        load_stream(path)


def test_task_count_mismatch(tmp_path):
    path = tmp_path / "bad.jsonl"
    _write(path, [_header(T=5)] + [_record(i, task=i) for i in range(4)])
    with pytest.raises(SchemaError, match="T=5"):
        load_stream(path)


def test_stream_validate_rejects_misplaced_task():
    s = make_sample([[1.0]], task=1)
    with pytest.raises(SchemaError):
        TaskStream([TaskData(0, [s], [])], (1,), (0.0, 25.0)).validate()
