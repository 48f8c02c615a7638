import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from brima.data import MultiModalSample, StreamConfig, generate_synthetic_stream

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_sample(features, score=1.0, sid="s", task=0, split="train"):
    feats = tuple(None if f is None else np.asarray(f, dtype=np.float64) for f in features)
    return MultiModalSample(id=sid, task_index=task, features=feats, score=float(score), split=split)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_stream():
    cfg = StreamConfig(n_tasks=3, train_per_task=24, eval_per_task=12, feature_dims=(4, 5, 3), beta=0.3, seed=7)
    return generate_synthetic_stream(cfg)
