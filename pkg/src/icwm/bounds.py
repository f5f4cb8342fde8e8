"""Closed-form TV error bounds for ER/EL and their Monte Carlo verification."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from icwm.errors import ConfigError, InsufficientDataError
from icwm.estimators import (
    ERMode,
    divergence_stats,
    el_predict_table,
    er_predict_table,
    expected_tv,
    fit_from_counts,
    matching_tvs,
)
from icwm.tabular_env import DiscreteEnv, EnvFamilyConfig, sample_counts, sample_env_family

PREDICTORS = ("EL", "ER")
CSV_COLUMNS = ("predictor", "T", "trial", "empirical_tv", "bound", "valid", "violated")


def er_bound(alpha: float, n_envs: int, T: float, best_tv: float, worst_tv: float) -> float:
    """min{ alpha (|E|-1) / (3 sqrt T) + best_tv, worst_tv }."""
    return min(alpha * (n_envs - 1) / (3.0 * math.sqrt(T)) + best_tv, worst_tv)


def el_threshold(dims: Sequence[int], delta: float) -> float:
    """4 |S|^2 |A|^2 log(4 |S||A| / delta), natural log."""
    S, A = dims[0], dims[1]
    return 4.0 * S**2 * A**2 * math.log(4.0 * S * A / delta)


def el_bound(dims: Sequence[int], delta: float, T: float, log_states: bool = False) -> tuple[float, bool]:
    """sqrt(2 |O||S||A| log(4|O|/delta)) / sqrt(T), valid above el_threshold.

    ``log_states`` swaps |O| for |S| inside the log, the variant the
    derivation's last line carries.
    """
    S, A, O = dims
    inner = (S if log_states else O)
    value = math.sqrt(2.0 * O * S * A * math.log(4.0 * inner / delta)) / math.sqrt(T)
    return value, T > el_threshold(dims, delta)


@dataclass(frozen=True)
class BoundConfig:
    delta: float = 0.1
    T_grid: tuple[int, ...] = tuple(2**k for k in range(4, 15))
    trials: int = 200
    seed: int = 0
    fit_samples: int = 100_000
    model_smoothing: float = 1.0
    el_smoothing: float = 0.0
    er_mode: ERMode = ERMode.ARGMAX

    def __post_init__(self):
        object.__setattr__(self, "T_grid", tuple(int(t) for t in self.T_grid))
        object.__setattr__(self, "er_mode", ERMode(self.er_mode))
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if not self.T_grid or min(self.T_grid) < 1 or any(b <= a for a, b in zip(self.T_grid, self.T_grid[1:])):
            raise ConfigError("T_grid must be positive and strictly ascending")
        if self.trials < 1:
            raise ConfigError("trials must be positive")

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "T_grid": list(self.T_grid),
            "trials": self.trials,
            "seed": self.seed,
            "fit_samples": self.fit_samples,
            "model_smoothing": self.model_smoothing,
            "el_smoothing": self.el_smoothing,
            "er_mode": self.er_mode.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoundConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        if "T_grid" in known:
            known["T_grid"] = tuple(known["T_grid"])
        return cls(**known)


@dataclass
class BoundReport:
    T_grid: tuple[int, ...]
    trials: int
    tv: dict[str, np.ndarray]  # predictor -> (len(T_grid), trials)
    bounds: dict[str, np.ndarray]  # predictor -> (len(T_grid),)
    valid: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def violations(self, predictor: str) -> np.ndarray:
        return (self.tv[predictor] > self.bounds[predictor][:, None]) & self.valid[predictor][:, None]

    def violation_rate(self, predictor: str) -> np.ndarray:
        """Per-T fraction of trials above the bound; NaN where the bound is not claimed."""
        rate = self.violations(predictor).mean(axis=1)
        return np.where(self.valid[predictor], rate, np.nan)

    def median_tv(self, predictor: str) -> np.ndarray:
        return np.median(self.tv[predictor], axis=1)

    def rows(self):
        for p in self.tv:
            viol = self.violations(p)
            for i, T in enumerate(self.T_grid):
                for j in range(self.trials):
                    yield (p, T, j, float(self.tv[p][i, j]), float(self.bounds[p][i]),
                           bool(self.valid[p][i]), bool(viol[i, j]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for p, T, j, tv, b, valid, viol in self.rows():
            w.writerow([p, T, j, repr(tv), repr(b), int(valid), int(viol)])
        return buf.getvalue()

    def summary(self) -> dict:
        out = {"metadata": self.metadata, "T_grid": list(self.T_grid), "predictors": {}}
        for p in self.tv:
            rates = self.violation_rate(p)
            out["predictors"][p] = {
                "median_tv": self.median_tv(p).tolist(),
                "bound": self.bounds[p].tolist(),
                "valid": self.valid[p].tolist(),
                "violation_rate": [None if np.isnan(r) else float(r) for r in rates],
            }
            try:
                out["predictors"][p]["slope"] = fit_decay_slope(self, p)
            except InsufficientDataError:
                out["predictors"][p]["slope"] = None
        return out

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True)


def trial_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def fit_family_models(family: Sequence[DiscreteEnv], samples: int, smoothing: float, seed: int):
    """Per-environment tabular models fitted on ``samples`` uniform queries each."""
    return [
        fit_from_counts(sample_counts(env, samples, trial_rng(seed, 1_000_003, i)), smoothing)
        for i, env in enumerate(family)
    ]


def verify_bound_montecarlo(
    family: Sequence[DiscreteEnv], target: DiscreteEnv | int, config: BoundConfig, models=None
) -> BoundReport:
    """Monte Carlo TV errors of EL and ER against the Theorem bounds.

    ``target`` is a held-out environment, or an index into ``family`` for
    the seen-environment case.
    """
    if not family:
        raise ConfigError("empty environment family")
    seen = not isinstance(target, DiscreteEnv)
    target_env = family[target] if seen else target
    if models is None:
        models = fit_family_models(family, config.fit_samples, config.model_smoothing, config.seed)
    stats = divergence_stats(models, target_env)
    mtv = matching_tvs(models, target_env)
    best_tv, worst_tv = float(mtv.min()), float(mtv.max())
    dims = target_env.dims

    nT = len(config.T_grid)
    tv = {p: np.empty((nT, config.trials)) for p in PREDICTORS}
    for i, T in enumerate(config.T_grid):
        for j in range(config.trials):
            counts = sample_counts(target_env, T, trial_rng(config.seed, T, j))
            tv["EL"][i, j] = expected_tv(el_predict_table(counts, config.el_smoothing), target_env)
            tv["ER"][i, j] = expected_tv(er_predict_table(models, counts, config.er_mode), target_env)

    el = [el_bound(dims, config.delta, T) for T in config.T_grid]
    bounds = {
        "EL": np.array([v for v, _ in el]),
        "ER": np.array([er_bound(stats.alpha, len(models), T, best_tv, worst_tv) for T in config.T_grid]),
    }
    valid = {"EL": np.array([ok for _, ok in el]), "ER": np.ones(nT, dtype=bool)}
    metadata = {
        "dims": list(dims),
        "n_envs": len(models),
        "seen": seen,
        "alpha": stats.alpha,
        "alpha_degenerate": stats.degenerate,
        "best_index": stats.best_index,
        "best_matching_tv": best_tv,
        "worst_matching_tv": worst_tv,
        "el_threshold": el_threshold(dims, config.delta),
        # the derivation's final line uses log(4|S|/delta); the theorem statement log(4|O|/delta)
        "el_bound_log_states_variant": [el_bound(dims, config.delta, T, log_states=True)[0] for T in config.T_grid],
        "config": config.to_dict(),
    }
    return BoundReport(config.T_grid, config.trials, tv, bounds, valid, metadata)


def fit_decay_slope(report: BoundReport, predictor: str, T_range: tuple[float, float] | None = None) -> float:
    """Least-squares slope of log(median TV) against log(T)."""
    T = np.asarray(report.T_grid, dtype=np.float64)
    med = report.median_tv(predictor)
    keep = med > 0
    if T_range is not None:
        keep &= (T >= T_range[0]) & (T <= T_range[1])
    if keep.sum() < 3:
        raise InsufficientDataError("need at least 3 grid points with positive median TV")
    return float(np.polyfit(np.log(T[keep]), np.log(med[keep]), 1)[0])


def slope_of_series(T, values) -> float:
    T = np.asarray(T, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    keep = values > 0
    if keep.sum() < 3:
        raise InsufficientDataError("need at least 3 positive points")
    return float(np.polyfit(np.log(T[keep]), np.log(values[keep]), 1)[0])


def crossover_T(report: BoundReport) -> int | None:
    """Smallest T at which median EL error is below median ER error."""
    below = report.median_tv("EL") < report.median_tv("ER")
    hits = np.flatnonzero(below)
    return int(report.T_grid[hits[0]]) if len(hits) else None


@dataclass
class CrossoverCell:
    n_envs: int
    dims: tuple[int, int, int]
    crossover_unseen: int | None
    crossover_seen: int | None
    best_matching_tv: float
    unseen: BoundReport = field(repr=False)
    seen: BoundReport = field(repr=False)


@dataclass
class CrossoverReport:
    cells: list[CrossoverCell]

    def table(self) -> list[dict]:
        return [
            {
                "n_envs": c.n_envs,
                "dims": list(c.dims),
                "crossover_unseen": c.crossover_unseen,
                "crossover_seen": c.crossover_seen,
                "best_matching_tv": c.best_matching_tv,
            }
            for c in self.cells
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n_envs", "S", "A", "O", "setting", "predictor", "T", "median_tv"])
        for c in self.cells:
            for setting, rep in (("unseen", c.unseen), ("seen", c.seen)):
                for p in PREDICTORS:
                    for T, m in zip(rep.T_grid, rep.median_tv(p)):
                        w.writerow([c.n_envs, *c.dims, setting, p, T, repr(float(m))])
        return buf.getvalue()


def crossover_cell(family_config: EnvFamilyConfig, config: BoundConfig) -> CrossoverCell:
    """One sweep cell: train on ``count`` environments, hold out one more."""
    envs = sample_env_family(
        EnvFamilyConfig(
            count=family_config.count + 1,
            dims=family_config.dims,
            concentration=family_config.concentration,
            determinism_fraction=family_config.determinism_fraction,
            kind=family_config.kind,
            seed=family_config.seed,
        )
    )
    family, holdout = envs[:-1], envs[-1]
    models = fit_family_models(family, config.fit_samples, config.model_smoothing, config.seed)
    unseen = verify_bound_montecarlo(family, holdout, config, models)
    seen = verify_bound_montecarlo(family, 0, config, models)
    return CrossoverCell(
        family_config.count,
        family_config.dims,
        crossover_T(unseen),
        crossover_T(seen),
        unseen.metadata["best_matching_tv"],
        unseen,
        seen,
    )


def crossover_scan(
    base: EnvFamilyConfig,
    n_envs: Sequence[int],
    dims_list: Sequence[tuple[int, int, int]],
    config: BoundConfig,
) -> CrossoverReport:
    if not n_envs or not dims_list:
        raise ConfigError("empty sweep")
    cells = []
    for dims in dims_list:
        for n in n_envs:
            cfg = EnvFamilyConfig(
                count=n,
                dims=tuple(dims),
                concentration=base.concentration,
                determinism_fraction=base.determinism_fraction,
                kind=base.kind,
                seed=base.seed,
            )
            cells.append(crossover_cell(cfg, config))
    return CrossoverReport(cells)
