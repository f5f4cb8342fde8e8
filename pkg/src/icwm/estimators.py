"""Count-based in-context predictors over discrete contexts.

Environment Learning (EL) predicts from the context's own transition
counts; Environment Recognition (ER) scores a bank of per-environment
tabular models by context likelihood and either picks the best one
(ARGMAX) or averages them under the posterior (MIXTURE).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from icwm.errors import ConfigError, ContractError, DegenerateFitError
from icwm.tabular_env import DiscreteContext, DiscreteEnv


class ERMode(str, enum.Enum):
    ARGMAX = "ARGMAX"
    MIXTURE = "MIXTURE"


@dataclass(eq=False)
class ContextCounts:
    n_sao: np.ndarray  # (S, A, O) int64

    @classmethod
    def zeros(cls, dims: tuple[int, int, int]) -> "ContextCounts":
        return cls(np.zeros(dims, dtype=np.int64))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.n_sao.shape

    @property
    def n_sa(self) -> np.ndarray:
        return self.n_sao.sum(axis=-1)

    @property
    def total(self) -> int:
        return int(self.n_sao.sum())

    def observe(self, s: int, a: int, o: int) -> None:
        """Streaming update with a single record (mutates in place)."""
        S, A, O = self.dims
        if not (0 <= s < S and 0 <= a < A and 0 <= o < O):
            raise ContractError(f"record ({s}, {a}, {o}) outside dims {self.dims}")
        self.n_sao[s, a, o] += 1

    def copy(self) -> "ContextCounts":
        return ContextCounts(self.n_sao.copy())


def accumulate(counts: ContextCounts, context: DiscreteContext) -> ContextCounts:
    context.check_dims(counts.dims)
    out = counts.n_sao.copy()
    np.add.at(out, (context.states, context.actions, context.next_obs), 1)
    return ContextCounts(out)


def counts_of(context: DiscreteContext, dims: tuple[int, int, int]) -> ContextCounts:
    return accumulate(ContextCounts.zeros(dims), context)


def _as_counts(data, dims=None) -> np.ndarray:
    if isinstance(data, ContextCounts):
        return data.n_sao
    if isinstance(data, DiscreteContext):
        if dims is None:
            raise ContractError("dims required to count a raw context")
        return counts_of(data, dims).n_sao
    return np.asarray(data)


def _check_smoothing(smoothing: float) -> None:
    if smoothing < 0:
        raise ConfigError("smoothing must be nonnegative")


def _smoothed_ratio(num: np.ndarray, den: np.ndarray, smoothing: float) -> np.ndarray:
    num = num + smoothing
    den = den + smoothing * num.shape[-1]
    uniform = np.full(num.shape, 1.0 / num.shape[-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = num / den[..., None]
    return np.where(den[..., None] > 0, ratio, uniform)


def el_predict(counts: ContextCounts, q: tuple[int, int], smoothing: float = 0.0) -> np.ndarray:
    """(n(s,a,o') + c) / (n(s,a) + c|O|); uniform when the query is unseen."""
    _check_smoothing(smoothing)
    s, a = q
    S, A, _ = counts.dims
    if not (0 <= s < S and 0 <= a < A):
        raise ContractError(f"query {q} outside dims {counts.dims}")
    row = counts.n_sao[s, a].astype(np.float64)
    return _smoothed_ratio(row, np.asarray(row.sum()), smoothing)


def el_predict_table(counts, smoothing: float = 0.0) -> np.ndarray:
    """EL prediction for every query at once, shape (S, A, O)."""
    _check_smoothing(smoothing)
    n = _as_counts(counts).astype(np.float64)
    return _smoothed_ratio(n, n.sum(axis=-1), smoothing)


def el_predict_pomdp(
    counts: ContextCounts, belief: np.ndarray, action: int, smoothing: float = 0.0
) -> np.ndarray:
    """Belief-weighted EL: sum_s b(s) n(s,a,o') / sum_s b(s) n(s,a)."""
    _check_smoothing(smoothing)
    belief = np.asarray(belief, dtype=np.float64)
    S, A, _ = counts.dims
    if belief.shape != (S,) or np.any(belief < 0) or abs(belief.sum() - 1.0) > 1e-9:
        raise ContractError("belief must be a normalized vector over states")
    if not 0 <= action < A:
        raise ContractError(f"action {action} outside [0, {A})")
    rows = counts.n_sao[:, action, :].astype(np.float64)
    num = belief @ rows
    den = belief @ rows.sum(axis=-1)
    return _smoothed_ratio(num, np.asarray(den), smoothing)


@dataclass(eq=False)
class TabularWorldModel:
    probs: np.ndarray  # (S, A, O)
    fit_count: int = 0

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.probs.shape

    def row(self, q: tuple[int, int]) -> np.ndarray:
        return self.probs[q[0], q[1]]

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "probs": self.probs.ravel().tolist(),
            "fit_count": self.fit_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularWorldModel":
        return cls(np.asarray(d["probs"], dtype=np.float64).reshape(d["dims"]), d["fit_count"])


def fit_from_counts(counts, smoothing: float = 1.0) -> TabularWorldModel:
    _check_smoothing(smoothing)
    n = _as_counts(counts)
    if n.sum() == 0 and smoothing == 0:
        raise DegenerateFitError("no data and zero smoothing")
    return TabularWorldModel(el_predict_table(n, smoothing), int(n.sum()))


def fit_tabular_model(
    contexts: Sequence[DiscreteContext], dims: tuple[int, int, int], smoothing: float = 1.0
) -> TabularWorldModel:
    counts = ContextCounts.zeros(dims)
    for ctx in contexts:
        counts = accumulate(counts, ctx)
    return fit_from_counts(counts, smoothing)


def context_log_likelihood(model: TabularWorldModel, context) -> float:
    """sum over records of log p(o' | s, a); -inf if any record is impossible."""
    n = _as_counts(context, model.dims)
    return float(_log_likelihoods(model.probs[None], n)[0])


def _log_likelihoods(probs: np.ndarray, n: np.ndarray) -> np.ndarray:
    # probs (E, S, A, O); zero-count cells contribute 0 even where p = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.log(probs)
        terms = np.where(n[None] > 0, n[None] * logp, 0.0)
    return terms.reshape(len(probs), -1).sum(axis=1)


def _stack(models: Sequence[TabularWorldModel]) -> np.ndarray:
    if not models:
        raise ContractError("at least one model required")
    return np.stack([m.probs for m in models])


def er_identify(models: Sequence[TabularWorldModel], context) -> tuple[int, np.ndarray]:
    """argmax_e log p_e(C_T), lowest index on ties."""
    probs = _stack(models)
    ll = _log_likelihoods(probs, _as_counts(context, probs.shape[1:]))
    return int(np.argmax(ll)), ll


def er_posterior(log_likelihoods: np.ndarray, prior=None) -> np.ndarray:
    ll = np.asarray(log_likelihoods, dtype=np.float64)
    prior = np.full(len(ll), 1.0 / len(ll)) if prior is None else np.asarray(prior, dtype=np.float64)
    if prior.shape != ll.shape or abs(prior.sum() - 1.0) > 1e-9 or np.any(prior < 0):
        raise ContractError("prior must be a normalized vector over models")
    with np.errstate(divide="ignore"):
        logpost = np.log(prior) + ll
    if not np.any(np.isfinite(logpost)):
        return prior.copy()
    return np.exp(logpost - logsumexp(logpost))


def er_predict_table(
    models: Sequence[TabularWorldModel], context, mode=ERMode.ARGMAX, prior=None
) -> np.ndarray:
    """ER prediction for every query, shape (S, A, O)."""
    probs = _stack(models)
    mode = ERMode(mode)
    idx, ll = er_identify(models, context)
    if mode is ERMode.ARGMAX:
        return probs[idx]
    w = er_posterior(ll, prior)
    return np.tensordot(w, probs, axes=1)


def er_predict(
    models: Sequence[TabularWorldModel], context, q: tuple[int, int], mode=ERMode.ARGMAX, prior=None
) -> np.ndarray:
    return er_predict_table(models, context, mode, prior)[q[0], q[1]]


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ContractError(f"length mismatch {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def expected_tv(predictor: Callable | np.ndarray | TabularWorldModel, env: DiscreteEnv) -> float:
    """Mean TV to the true p(o'|s,a) under uniform queries.

    ``predictor`` is an (S, A, O) table, a TabularWorldModel, or a callable
    ``(s, a) -> distribution``.
    """
    truth = env.marginal_table()
    if isinstance(predictor, TabularWorldModel):
        table = predictor.probs
    elif callable(predictor):
        S, A, _ = env.dims
        table = np.array([[predictor(s, a) for a in range(A)] for s in range(S)], dtype=np.float64)
    else:
        table = np.asarray(predictor, dtype=np.float64)
    if table.shape != truth.shape:
        raise ContractError(f"predictor table {table.shape} vs env {truth.shape}")
    return float(0.5 * np.abs(table - truth).sum(axis=-1).mean())


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) in nats; 0 log 0 = 0, +inf where q = 0 < p."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


@dataclass
class DivergenceStats:
    delta: np.ndarray
    kappa: np.ndarray
    alpha: float
    degenerate: bool
    best_index: int | None = None


def divergence_stats(models: Sequence[TabularWorldModel], target: DiscreteEnv | None = None) -> DivergenceStats:
    """Mean KL (delta), max KL (kappa) and non-uniformity alpha between models.

    With a target environment, ``best_index`` is the model minimising mean
    KL(model || target).
    """
    probs = _stack(models)
    if np.any(probs <= 0):
        raise ContractError("divergence statistics need strictly positive model rows (use smoothing)")
    E = len(probs)
    flat = probs.reshape(E, -1, probs.shape[-1])
    kl = kl_rows(flat[:, None], flat[None, :])  # (E, E, Q)
    delta = kl.mean(axis=-1)
    kappa = kl.max(axis=-1)
    np.fill_diagonal(delta, 0.0)
    np.fill_diagonal(kappa, 0.0)
    off = delta > 0
    if np.any(off):
        alpha = float(np.sqrt(kappa[off] / delta[off]).max())
        degenerate = False
    else:
        alpha, degenerate = 1.0, True
    best = None
    if target is not None:
        truth = target.marginal_table().reshape(-1, probs.shape[-1])
        best = int(np.argmin(kl_rows(flat, truth[None]).mean(axis=-1)))
    return DivergenceStats(delta, kappa, alpha, degenerate, best)


def matching_tvs(models: Sequence[TabularWorldModel], env: DiscreteEnv) -> np.ndarray:
    """Expected TV of each stored model against the true environment."""
    return np.array([expected_tv(m, env) for m in models])
