"""Dense numeric substrate: perceptrons with hand-written backprop, Adam, grad checks.

All arithmetic is float64. Parameters of a model live in a single flat
vector (:class:`ParameterSet`) and every weight/bias is a reshaped view
into it, so the optimizer updates a whole model in one fused pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

from .errors import ContractError, NumericError, ShapeError

ACTIVATIONS = ("identity", "relu", "tanh")


def as_matrix(data, rows=None, cols=None) -> np.ndarray:
    """Build a finite float64 matrix, optionally checking its shape."""
    a = np.array(data, dtype=np.float64)
    if a.ndim == 1 and rows is not None and cols is not None:
        if a.size != rows * cols:
            raise ShapeError(f"{a.size} values cannot fill a {rows}x{cols} matrix")
        a = a.reshape(rows, cols)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got {a.ndim} dims")
    if rows is not None and a.shape[0] != rows or cols is not None and a.shape[1] != cols:
        raise ShapeError(f"expected {rows}x{cols}, got {a.shape[0]}x{a.shape[1]}")
    if not np.all(np.isfinite(a)):
        raise NumericError("matrix contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


# --------------------------------------------------------------------------
# Flat parameter storage
# --------------------------------------------------------------------------


class ParameterSet:
    """Named parameter blocks backed by one contiguous vector.

    ``add`` must be called for every block before ``finalize``; after that
    ``self[name]`` returns a view into ``flat`` and ``grad(name)`` the
    matching view into ``grad_flat``.
    """

    def __init__(self):
        self._pending: list[tuple[str, np.ndarray]] = []
        self._slices: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        self.flat = np.zeros(0)
        self.grad_flat = np.zeros(0)
        self._views: dict[str, np.ndarray] = {}
        self._grad_views: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if self._views:
            raise ContractError("parameter set already finalized")
        if name in {n for n, _ in self._pending}:
            raise ContractError(f"duplicate parameter block {name!r}")
        self._pending.append((name, np.asarray(value, dtype=np.float64)))

    def finalize(self) -> "ParameterSet":
        total = sum(v.size for _, v in self._pending)
        self.flat = np.zeros(total)
        self.grad_flat = np.zeros(total)
        offset = 0
        for name, value in self._pending:
            end = offset + value.size
            self._slices[name] = (offset, end, value.shape)
            self.flat[offset:end] = value.ravel()
            self._views[name] = self.flat[offset:end].reshape(value.shape)
            self._grad_views[name] = self.grad_flat[offset:end].reshape(value.shape)
            offset = end
        self._pending = []
        return self

    @property
    def names(self) -> list[str]:
        return list(self._slices)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __contains__(self, name: str) -> bool:
        return name in self._views

    def grad(self, name: str) -> np.ndarray:
        return self._grad_views[name]

    def segment(self, prefix: str) -> slice:
        """Contiguous slice of ``flat`` covering every block whose name starts with ``prefix``."""
        spans = [(s, e) for n, (s, e, _) in self._slices.items() if n.startswith(prefix)]
        if not spans:
            raise KeyError(prefix)
        return slice(min(s for s, _ in spans), max(e for _, e in spans))

    def block_at(self, flat_index: int) -> str:
        for name, (s, e, _) in self._slices.items():
            if s <= flat_index < e:
                return name
        raise IndexError(flat_index)

    def zero_grad(self) -> None:
        self.grad_flat[:] = 0.0

    def as_dict(self) -> dict[str, np.ndarray]:
        return {n: self._views[n] for n in self._slices}


# --------------------------------------------------------------------------
# Perceptrons
# --------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


@dataclass
class PerceptronParams:
    """Stack of affine layers; ``weights[k]`` has shape (in_dim, out_dim)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ShapeError("weights, biases and activations must be non-empty and aligned")
        for k, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ShapeError(f"layer {k}: unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {k}: bias shape {b.shape} does not match weight {w.shape}")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {k}: in-dim {w.shape[0]} != previous out-dim {self.weights[k - 1].shape[1]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def blocks(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "PerceptronParams":
        return PerceptronParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], list(self.activations))


def build_perceptron(
    store: ParameterSet | None,
    prefix: str,
    sizes: Sequence[int],
    rng: np.random.Generator,
    hidden_activation: str = "relu",
    out_activation: str = "identity",
    zero_last: bool = False,
):
    """Register a perceptron's blocks on ``store``.

    Returns a callable that, once the store is finalized, yields the
    :class:`PerceptronParams` viewing the stored blocks. With ``store=None``
    a standalone parameter object is returned directly.
    """
    if len(sizes) < 2:
        raise ShapeError("a perceptron needs at least an input and an output size")
    names, acts, values = [], [], []
    n_layers = len(sizes) - 1
    for k in range(n_layers):
        w = glorot_uniform(rng, sizes[k], sizes[k + 1])
        if zero_last and k == n_layers - 1:
            w = np.zeros_like(w)
        values.append((w, np.zeros(sizes[k + 1])))
        names.append((f"{prefix}.{k}.weight", f"{prefix}.{k}.bias"))
        acts.append(out_activation if k == n_layers - 1 else hidden_activation)
    if store is None:
        return PerceptronParams([w for w, _ in values], [b for _, b in values], acts)
    for (wn, bn), (w, b) in zip(names, values):
        store.add(wn, w)
        store.add(bn, b)

    def bind() -> PerceptronParams:
        return PerceptronParams([store[wn] for wn, _ in names], [store[bn] for _, bn in names], acts)

    return bind


@dataclass
class ForwardCache:
    owner: int
    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    squeeze: bool = False


def perceptron_forward(p: PerceptronParams, x) -> tuple[np.ndarray, ForwardCache]:
    """Apply every layer to ``x`` (a vector or a batch of row vectors)."""
    h = np.asarray(x, dtype=np.float64)
    squeeze = h.ndim == 1
    if squeeze:
        h = h[None, :]
    if h.ndim != 2 or h.shape[1] != p.in_dim:
        raise ShapeError(f"perceptron expects input dim {p.in_dim}, got shape {np.shape(x)}")
    cache = ForwardCache(owner=id(p.weights[0]), squeeze=squeeze)
    for w, b, act in zip(p.weights, p.biases, p.activations):
        cache.inputs.append(h)
        h = h @ w + b
        if act == "relu":
            h = np.maximum(h, 0.0)
        elif act == "tanh":
            h = np.tanh(h)
        cache.outputs.append(h)
    return (h[0] if squeeze else h), cache


def perceptron_backward(p: PerceptronParams, cache: ForwardCache, upstream):
    """Gradients of ``sum(output * upstream)``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is a list of
    ``(dW, db)`` pairs in layer order.
    """
    if cache.owner != id(p.weights[0]) or len(cache.inputs) != len(p.weights):
        raise ContractError("forward cache was produced by a different perceptron")
    g = np.asarray(upstream, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.outputs[-1].shape:
        raise ShapeError(f"upstream shape {g.shape} != output shape {cache.outputs[-1].shape}")
    grads = [None] * len(p.weights)
    for k in range(len(p.weights) - 1, -1, -1):
        act, out = p.activations[k], cache.outputs[k]
        if act == "relu":
            g = g * (out > 0.0)
        elif act == "tanh":
            g = g * (1.0 - out * out)
        grads[k] = (cache.inputs[k].T @ g, g.sum(axis=0))
        g = g @ p.weights[k].T
    return grads, (g[0] if cache.squeeze else g)


# --------------------------------------------------------------------------
# Optimisation
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _blocks(params) -> dict[str, np.ndarray]:
    if isinstance(params, ParameterSet):
        return {"__flat__": params.flat}
    if isinstance(params, dict):
        return params
    return {str(i): a for i, a in enumerate(params)}


@numba.njit(cache=True, error_model="numpy")
def _adam_kernel(theta, g, m, v, lr, b1, b2, c1, c2, eps, wd):
    # single fused pass; the same arithmetic as the textbook update
    for i in range(theta.size):
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        theta[i] -= lr * ((m[i] / c1) / (math.sqrt(v[i] / c2) + eps) + wd * theta[i])


def adam_step(state: AdamState, params, grads):
    """One Adam update with bias correction and decoupled weight decay.

    ``params`` is a ParameterSet (``grads`` ignored, its ``grad_flat`` is
    used), a dict of named arrays, or a list of arrays. Arrays are updated
    in place; ``(params, state)`` is returned for convenience.
    """
    blocks = _blocks(params)
    if isinstance(params, ParameterSet):
        gblocks = {"__flat__": params.grad_flat}
    else:
        gblocks = _blocks(grads)
    for name, g in gblocks.items():
        # a finite sum implies finite entries; only scan when it is not
        if not np.isfinite(g.sum()) and not np.all(np.isfinite(g)):
            if isinstance(params, ParameterSet):
                bad = int(np.flatnonzero(~np.isfinite(g))[0])
                name = params.block_at(bad)
            raise NumericError(f"non-finite gradient in parameter block {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, theta in blocks.items():
        g = gblocks[name]
        if theta.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(theta.size)
            state.v[name] = np.zeros(theta.size)
        flat = theta.reshape(-1) if theta.flags.c_contiguous else np.ascontiguousarray(theta).reshape(-1)
        gflat = np.ascontiguousarray(g, dtype=np.float64).reshape(-1)
        _adam_kernel(flat, gflat, m, state.v[name], state.lr, b1, b2, c1, c2, state.eps, state.weight_decay)
        if not theta.flags.c_contiguous:
            theta[...] = flat.reshape(theta.shape)
    return params, state


def cosine_lr(base_lr: float, epoch: int, epochs: int, floor: float = 0.01) -> float:
    """Cosine decay from ``base_lr`` at epoch 0 to ``floor * base_lr`` at the last epoch."""
    if epochs <= 1:
        return base_lr
    frac = min(max(epoch / (epochs - 1), 0.0), 1.0)
    return base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def gradient_check(
    loss_fn: Callable[[], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``loss_fn()`` must read ``params`` (arrays perturbed in place here) and
    return ``(loss, grads)`` with ``grads`` aligned to ``params``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss, analytic = loss_fn()
    if not math.isfinite(loss):
        raise NumericError("loss is not finite")
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn()[0]
            flat[i] = orig - eps
            lm = loss_fn()[0]
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NumericError("loss became non-finite under perturbation")
            num = (lp - lm) / (2.0 * eps)
            ana = gflat[i]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst
