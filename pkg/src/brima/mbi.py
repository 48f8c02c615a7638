"""Memory-guided bridging imputation of missing modality embeddings.

A missing modality is reconstructed in two parts: a prior formed as the
softmax-weighted average of the most similar exemplars in memory, and a
residual predicted by a small network conditioned on the observed features,
that prior, and a learned per-modality embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import MultiModalSample
from .errors import BufferEmptyError, ContractError, ShapeError
from .numeric import ParameterSet, PerceptronParams, build_perceptron, perceptron_backward, perceptron_forward


def observed_summary(sample: MultiModalSample, feature_dims: Sequence[int]) -> np.ndarray:
    """Concatenate modality slots in index order, zero-filling missing ones."""
    parts = []
    for m, d in enumerate(feature_dims):
        f = sample.features[m]
        parts.append(np.zeros(d) if f is None else f)
    return np.concatenate(parts)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float((a * b).sum() / (na * nb))


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.sqrt((a * a).sum(axis=1, keepdims=True))
    return np.divide(a, norms, out=np.zeros_like(a), where=norms > 0)


class ExemplarBank:
    """Read-only view of modality-complete exemplars for retrieval.

    Rows follow insertion order, which is also the tie-break order.
    """

    def __init__(self, samples: Sequence[MultiModalSample]):
        if any(not s.is_complete for s in samples):
            raise ContractError("exemplar bank only accepts modality-complete samples")
        self.samples = list(samples)
        M = samples[0].n_modalities if samples else 0
        self.features = [np.stack([s.features[m] for s in samples]) for m in range(M)]
        self.unit = [_unit_rows(f) for f in self.features]

    def __len__(self) -> int:
        return len(self.samples)

    def similarities(self, query: MultiModalSample) -> np.ndarray:
        obs = query.observed
        if not obs:
            raise ContractError("query has no observed modality")
        total = np.zeros(len(self))
        for m in obs:
            q = query.features[m]
            n = np.sqrt((q * q).sum())
            if n > 0:
                total += (self.unit[m] * (q / n)).sum(axis=1)
        return total / len(obs)


@dataclass
class RetrievalResult:
    indices: np.ndarray  # bank rows, best first
    exemplars: np.ndarray  # (K, D_m) features of the target modality
    similarities: np.ndarray
    weights: np.ndarray


def _as_bank(buffer) -> ExemplarBank:
    if isinstance(buffer, ExemplarBank):
        return buffer
    return buffer.bank()


def retrieve_candidates(
    query: MultiModalSample,
    buffer,
    m: int,
    K: int,
    exclude: Optional[int] = None,
    weighting: str = "softmax",
) -> RetrievalResult:
    """Top-``K`` exemplars by mean per-modality cosine over the query's observed set.

    Ties keep insertion order (older first). ``exclude`` drops one bank row,
    used when the query itself lives in the buffer.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    bank = _as_bank(buffer)
    if len(bank) == 0 or (exclude is not None and len(bank) == 1):
        raise BufferEmptyError("no exemplars available for retrieval")
    sims = bank.similarities(query)
    order = np.argsort(-sims, kind="stable")
    if exclude is not None:
        order = order[order != exclude]
    idx = order[:K]
    top = sims[idx]
    if weighting == "softmax":
        w = softmax(top)
    elif weighting == "uniform":
        w = np.full(idx.size, 1.0 / idx.size)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    return RetrievalResult(idx, bank.features[m][idx], top, w)


def exemplar_prior(r: RetrievalResult) -> np.ndarray:
    return r.weights @ r.exemplars


def reconstruction_loss(imputed, truth) -> float:
    imputed = np.asarray(imputed, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if imputed.shape != truth.shape:
        raise ShapeError(f"imputed shape {imputed.shape} != truth shape {truth.shape}")
    d = imputed - truth
    return float((d * d).sum())


# --------------------------------------------------------------------------
# Conditioning and bridge
# --------------------------------------------------------------------------


@dataclass
class TaskIndicatorPool:
    embeddings: np.ndarray  # (M, pool_dim)
    conditioner: PerceptronParams


@dataclass
class BridgeNetwork:
    net: PerceptronParams
    feature_dims: tuple[int, ...]
    cond_dim: int

    @property
    def summary_dim(self) -> int:
        return sum(self.feature_dims)

    @property
    def prior_dim(self) -> int:
        return max(self.feature_dims)


def make_condition(pool: TaskIndicatorPool, mask, m: int) -> np.ndarray:
    """Conditioning vector for missing modality ``m``."""
    if not mask[m]:
        raise ContractError(f"modality {m} is observed; conditioning is only defined for missing slots")
    out, _ = perceptron_forward(pool.conditioner, pool.embeddings[m])
    return out


def _pad(v: np.ndarray, n: int) -> np.ndarray:
    if v.shape[-1] == n:
        return v
    out = np.zeros(v.shape[:-1] + (n,))
    out[..., : v.shape[-1]] = v
    return out


def bridge_impute(summary, prior, condition, bridge: BridgeNetwork) -> np.ndarray:
    """Prior plus the bridge's residual, cut to the prior's dimension."""
    summary = np.asarray(summary, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    condition = np.asarray(condition, dtype=np.float64)
    if summary.shape != (bridge.summary_dim,) or condition.shape != (bridge.cond_dim,):
        raise ShapeError("summary or condition does not match the bridge input layout")
    if prior.ndim != 1 or prior.size not in bridge.feature_dims:
        raise ShapeError(f"prior of length {prior.size} matches no modality")
    x = np.concatenate([summary, _pad(prior, bridge.prior_dim), condition])
    residual, _ = perceptron_forward(bridge.net, x)
    return prior + residual[: prior.size]


class Imputer:
    """Owns the imputation parameters and the variant switches.

    ``use_retrieval=False`` gives a zero prior (no candidate selection);
    ``use_bridge=False`` returns the prior unchanged. With both off the
    imputer zero-fills.
    """

    def __init__(
        self,
        store: Optional[ParameterSet],
        feature_dims: Sequence[int],
        rng: np.random.Generator,
        K: int = 5,
        pool_dim: int = 16,
        cond_dim: int = 16,
        hidden: Sequence[int] = (256,),
        cond_hidden: Sequence[int] = (32,),
        use_retrieval: bool = True,
        use_bridge: bool = True,
        weighting: str = "softmax",
    ):
        self.feature_dims = tuple(feature_dims)
        self.M = len(self.feature_dims)
        self.K = K
        self.use_retrieval = use_retrieval and K > 0
        self.use_bridge = use_bridge
        self.weighting = weighting
        self.cond_dim = cond_dim
        self.summary_dim = sum(self.feature_dims)
        self.prior_dim = max(self.feature_dims)
        # valid[m] flags the padded prior positions that belong to modality m
        self.valid = np.zeros((self.M, self.prior_dim))
        for m, d in enumerate(self.feature_dims):
            self.valid[m, :d] = 1.0
        self.pool = self.bridge = None
        self._store = store
        if use_bridge:
            if store is None:
                raise ContractError("a bridged imputer needs a parameter store")
            store.add("g.pool", rng.standard_normal((self.M, pool_dim)) * 0.1)
            self._bind_cond = build_perceptron(store, "g.cond", [pool_dim, *cond_hidden, cond_dim], rng)
            in_dim = self.summary_dim + self.prior_dim + cond_dim
            self._bind_bridge = build_perceptron(store, "g.bridge", [in_dim, *hidden, self.prior_dim], rng, zero_last=True)

    def bind(self) -> "Imputer":
        if self.use_bridge:
            self.pool = TaskIndicatorPool(self._store["g.pool"], self._bind_cond())
            self.bridge = BridgeNetwork(self._bind_bridge(), self.feature_dims, self.cond_dim)
        return self

    def cold(self, bank: Optional[ExemplarBank]) -> bool:
        """True when retrieval is on but memory is still empty: impute zeros, skip the bridge."""
        return self.use_retrieval and (bank is None or len(bank) == 0)

    # -- priors ------------------------------------------------------------

    def prior(self, query: MultiModalSample, m: int, bank: Optional[ExemplarBank], exclude: Optional[int] = None) -> np.ndarray:
        """Exemplar prior for modality ``m``; zeros when retrieval is off or memory is empty."""
        if not self.use_retrieval or bank is None:
            return np.zeros(self.feature_dims[m])
        try:
            r = retrieve_candidates(query, bank, m, self.K, exclude=exclude, weighting=self.weighting)
        except BufferEmptyError:
            return np.zeros(self.feature_dims[m])
        return exemplar_prior(r)

    def slot_input(self, query: MultiModalSample, m: int, bank: Optional[ExemplarBank], exclude: Optional[int] = None) -> np.ndarray:
        """Bridge input without the condition: ``[summary, padded prior]``."""
        return np.concatenate([observed_summary(query, self.feature_dims), _pad(self.prior(query, m, bank, exclude), self.prior_dim)])

    # -- batched residuals -------------------------------------------------

    def forward_slots(self, base: np.ndarray, ms: np.ndarray):
        """Padded imputations for a batch of slots.

        ``base`` rows come from :meth:`slot_input`; ``ms`` holds the target
        modality of each row. Returns ``(imputed_padded, cache)``.
        """
        prior = base[:, self.summary_dim :]
        if not self.use_bridge:
            return prior * self.valid[ms], None
        conds, ccache = perceptron_forward(self.pool.conditioner, self.pool.embeddings)
        x = np.concatenate([base, conds[ms]], axis=1)
        residual, bcache = perceptron_forward(self.bridge.net, x)
        return (prior + residual) * self.valid[ms], (ms, ccache, bcache)

    def backward_slots(self, cache, upstream: np.ndarray) -> None:
        """Accumulate gradients of ``sum(imputed * upstream)`` into the store."""
        if cache is None:
            return
        ms, ccache, bcache = cache
        g_res = upstream * self.valid[ms]
        bgrads, gx = perceptron_backward(self.bridge.net, bcache, g_res)
        _accumulate(self._store, "g.bridge", bgrads)
        g_cond = np.zeros((self.M, self.cond_dim))
        np.add.at(g_cond, ms, gx[:, self.summary_dim + self.prior_dim :])
        cgrads, g_pool = perceptron_backward(self.pool.conditioner, ccache, g_cond)
        _accumulate(self._store, "g.cond", cgrads)
        self._store.grad("g.pool")[...] += g_pool

    def rec_loss(self, base: np.ndarray, ms: np.ndarray, truth_padded: np.ndarray, backward: bool = True, weight: float = 1.0) -> float:
        """Mean squared reconstruction distance over slots; gradients are scaled by ``weight``."""
        imputed, cache = self.forward_slots(base, ms)
        diff = imputed - truth_padded * self.valid[ms]
        n = len(ms)
        loss = float((diff * diff).sum() / n)
        if backward:
            self.backward_slots(cache, weight * 2.0 * diff / n)
        return loss

    # -- whole samples -----------------------------------------------------

    def impute(self, sample: MultiModalSample, bank: Optional[ExemplarBank], exclude: Optional[int] = None) -> list[np.ndarray]:
        """Every modality slot filled: observed features as-is, missing ones imputed."""
        missing = sample.missing
        if not missing:
            return list(sample.features)
        if self.cold(bank):
            return [np.zeros(d) if f is None else f for f, d in zip(sample.features, self.feature_dims)]
        ms = np.array(missing)
        base = np.stack([self.slot_input(sample, m, bank, exclude) for m in missing])
        imputed, _ = self.forward_slots(base, ms)
        out = list(sample.features)
        for row, m in enumerate(missing):
            out[m] = imputed[row, : self.feature_dims[m]]
        return out


def _accumulate(store: ParameterSet, prefix: str, grads) -> None:
    for k, (dw, db) in enumerate(grads):
        store.grad(f"{prefix}.{k}.weight")[...] += dw
        store.grad(f"{prefix}.{k}.bias")[...] += db
