"""Fusion scorer, score loss, the combined objective and checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, SchemaError, ShapeError
from .numeric import ParameterSet, PerceptronParams, build_perceptron, perceptron_backward, perceptron_forward

CHECKPOINT_FORMAT = "brima-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ObjectiveWeights:
    mem: float = 1.0
    rec: float = 1.0

    def __post_init__(self):
        if self.mem < 0 or self.rec < 0:
            raise ValueError("objective weights must be non-negative")


class ScoringModel:
    """Concatenation fusion followed by a perceptron producing one score.

    Encoders are identities: features arrive precomputed.
    """

    def __init__(self, store: ParameterSet, feature_dims: Sequence[int], rng: np.random.Generator, hidden: Sequence[int] = (256,), prefix: str = "f.scorer"):
        self.feature_dims = tuple(feature_dims)
        self.prefix = prefix
        self.store = store
        self._bind = build_perceptron(store, prefix, [sum(self.feature_dims), *hidden, 1], rng)
        self.net: Optional[PerceptronParams] = None

    def bind(self) -> "ScoringModel":
        self.net = self._bind()
        return self

    @property
    def in_dim(self) -> int:
        return sum(self.feature_dims)

    def forward(self, X: np.ndarray):
        out, cache = perceptron_forward(self.net, X)
        return out[:, 0], cache

    def backward(self, cache, g: np.ndarray) -> None:
        grads, _ = perceptron_backward(self.net, cache, g[:, None])
        for k, (dw, db) in enumerate(grads):
            self.store.grad(f"{self.prefix}.{k}.weight")[...] += dw
            self.store.grad(f"{self.prefix}.{k}.bias")[...] += db

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        return perceptron_forward(self.net, X)[0][:, 0]


def fuse(features: Sequence, feature_dims: Sequence[int]) -> np.ndarray:
    """Concatenate a filled set of modality features in index order."""
    if len(features) != len(feature_dims):
        raise ShapeError(f"expected {len(feature_dims)} modality slots, got {len(features)}")
    for m, (f, d) in enumerate(zip(features, feature_dims)):
        if f is None:
            raise ContractError(f"modality slot {m} is unfilled")
        if np.shape(f) != (d,):
            raise ShapeError(f"modality {m} has shape {np.shape(f)}, expected ({d},)")
    return np.concatenate([np.asarray(f, dtype=np.float64) for f in features])


def predict(model: ScoringModel, features: Sequence) -> float:
    return float(model.predict_batch(fuse(features, model.feature_dims)[None, :])[0])


def score_loss(y_hat, y) -> float:
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ShapeError("prediction and target batches differ in length")
    if y.size == 0:
        raise ContractError("score loss of an empty batch")
    d = y_hat - y
    return float(np.mean(d * d))


def total_objective(score_l: float, mem_l: float, rec_l: float, w: ObjectiveWeights) -> float:
    for name, v in (("score", score_l), ("mem", mem_l), ("rec", rec_l)):
        if not math.isfinite(v):
            raise NumericError(f"{name} loss is not finite")
        if v < 0:
            raise ContractError(f"{name} loss is negative")
    return score_l + w.mem * mem_l + w.rec * rec_l


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path, store: ParameterSet, meta: Optional[dict] = None) -> None:
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "blocks": store.names, "meta": meta or {}}
    arrays = {f"block_{i}": np.array(store[name]) for i, name in enumerate(store.names)}
    with Path(path).open("wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(blocks, meta)`` with blocks keyed by parameter name."""
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
            raise SchemaError("not a supported checkpoint file")
        blocks = {name: data[f"block_{i}"].copy() for i, name in enumerate(header["blocks"])}
    return blocks, header["meta"]


def restore_checkpoint(store: ParameterSet, blocks: dict[str, np.ndarray]) -> None:
    if set(blocks) != set(store.names):
        raise SchemaError("checkpoint blocks do not match the model layout")
    for name, value in blocks.items():
        if store[name].shape != value.shape:
            raise SchemaError(f"block {name!r} has shape {value.shape}, expected {store[name].shape}")
        store[name][...] = value
