import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from icwm.bounds import (
    CSV_COLUMNS,
    BoundConfig,
    BoundReport,
    crossover_cell,
    crossover_scan,
    el_bound,
    el_threshold,
    er_bound,
    fit_decay_slope,
    slope_of_series,
    verify_bound_montecarlo,
)
from icwm.errors import ConfigError, InsufficientDataError
from icwm.tabular_env import DiscreteEnv, EnvFamilyConfig, sample_env_family


def test_er_bound_single_env():
    assert er_bound(3.0, 1, 10, 0.1, 0.4) == 0.1


def test_er_bound_large_T_limit():
    assert abs(er_bound(2.0, 5, 1e24, 0.05, 0.3) - 0.05) < 1e-11


def test_er_bound_example():
    assert abs(er_bound(2.0, 5, 400, 0.05, 0.3) - (8 / 60 + 0.05)) < 1e-15
    assert er_bound(2.0, 5, 4, 0.05, 0.3) == 0.3


def test_el_bound_example():
    value, valid = el_bound((6, 3, 6), 0.1, 16384)
    assert abs(value - math.sqrt(216 * math.log(240)) / 128) < 1e-15
    assert round(value, 4) == 0.2688 and valid


def test_el_bound_below_threshold_flag():
    hi, _ = el_bound((6, 3, 6), 0.1, 16384)
    v, valid = el_bound((6, 3, 6), 0.1, 4096)
    assert not valid and abs(v - 2 * hi) < 1e-15


@given(T=st.floats(1, 1e8), S=st.integers(1, 8), A=st.integers(1, 4), O=st.integers(1, 8))
def test_el_bound_quartering(T, S, A, O):
    v1, _ = el_bound((S, A, O), 0.1, T)
    v4, _ = el_bound((S, A, O), 0.1, 4 * T)
    assert math.isclose(v4, v1 / 2, rel_tol=1e-14)


def test_el_threshold_example():
    th = el_threshold((6, 3, 6), 0.1)
    assert abs(th - 1296 * math.log(720)) < 1e-9
    assert abs(th - 8526.8) < 0.1


def test_el_threshold_delta_near_one_positive():
    assert el_threshold((1, 1, 1), 1 - 1e-12) > 0


def test_el_threshold_scaling_in_states():
    a = el_threshold((3, 2, 3), 0.1)
    b = el_threshold((6, 2, 6), 0.1)
    assert abs(b / a - 4 * math.log(48 / 0.1) / math.log(24 / 0.1)) < 1e-12


@given(T=st.integers(1, 10**6), alpha=st.floats(1, 10), E=st.integers(1, 10))
def test_bounds_monotone_in_T(T, alpha, E):
    assert er_bound(alpha, E, T + 1, 0.02, 0.5) <= er_bound(alpha, E, T, 0.02, 0.5)
    assert el_bound((4, 2, 4), 0.1, T + 1)[0] <= el_bound((4, 2, 4), 0.1, T)[0]


def test_boundconfig_validation():
    with pytest.raises(ConfigError):
        BoundConfig(delta=0.0)
    with pytest.raises(ConfigError):
        BoundConfig(T_grid=(4, 4, 8))
    with pytest.raises(ConfigError):
        BoundConfig(trials=0)
    cfg = BoundConfig(T_grid=(2, 4), trials=3, seed=1)
    assert BoundConfig.from_dict(cfg.to_dict()) == cfg


def _synthetic(series):
    T = tuple(2**k for k in range(len(series)))
    tv = np.asarray(series, dtype=float)[:, None]
    return BoundReport(T, 1, {"EL": tv}, {"EL": np.ones(len(T))}, {"EL": np.ones(len(T), bool)})


def test_slope_of_inverse_root_series():
    T = 2.0 ** np.arange(6)
    assert abs(fit_decay_slope(_synthetic(3 * T**-0.5), "EL") + 0.5) < 1e-12
    assert abs(slope_of_series(T, 3 * T**-0.5) + 0.5) < 1e-12


def test_slope_of_constant_series():
    assert abs(fit_decay_slope(_synthetic([0.2] * 5), "EL")) < 1e-12


def test_slope_needs_three_points():
    with pytest.raises(InsufficientDataError):
        fit_decay_slope(_synthetic([0.2, 0.1]), "EL")
    with pytest.raises(InsufficientDataError):
        fit_decay_slope(_synthetic([0.2, 0.1, 0.05, 0.03]), "EL", T_range=(4, 8))


SMALL = BoundConfig(T_grid=(64, 256, 1024), trials=30, seed=3, fit_samples=20_000)


def test_seen_environment_er_limit():
    family = sample_env_family(EnvFamilyConfig(count=3, dims=(3, 2, 3), seed=0))
    rep = verify_bound_montecarlo(family, 1, SMALL)
    assert rep.metadata["best_matching_tv"] < 0.05 and rep.metadata["best_index"] == 1
    assert np.median(rep.tv["ER"][-1]) <= rep.metadata["best_matching_tv"] + 1e-12


def test_deterministic_single_env_el_zero():
    T = np.zeros((3, 2, 3))
    for s in range(3):
        for a in range(2):
            T[s, a, (s + a) % 3] = 1.0
    env = DiscreteEnv.mdp(T)
    rep = verify_bound_montecarlo([env], env, BoundConfig(T_grid=(512, 1024, 2048), trials=20, fit_samples=1000))
    assert np.all(rep.tv["EL"] == 0)


def test_violation_rate_semantics():
    family = sample_env_family(EnvFamilyConfig(count=2, dims=(2, 2, 2), seed=1))
    cfg = BoundConfig(T_grid=(16, 1024), trials=40, fit_samples=5000)
    rep = verify_bound_montecarlo(family, 0, cfg)
    rates = rep.violation_rate("EL")
    assert math.isnan(rates[0]) and 0 <= rates[1] <= 1
    assert rep.metadata["el_threshold"] == el_threshold((2, 2, 2), 0.1)


def test_report_is_reproducible_and_csv_layout():
    family = sample_env_family(EnvFamilyConfig(count=2, dims=(3, 2, 3), seed=4))
    a = verify_bound_montecarlo(family, 0, SMALL)
    b = verify_bound_montecarlo(family, 0, SMALL)
    assert a.to_csv() == b.to_csv() and a.summary_json() == b.summary_json()
    lines = a.to_csv().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 1 + 2 * len(SMALL.T_grid) * SMALL.trials


def test_el_slope_pilot_range():
    family = sample_env_family(EnvFamilyConfig(count=1, dims=(6, 3, 6), seed=9))
    cfg = BoundConfig(T_grid=tuple(2**k for k in range(8, 15)), trials=60, fit_samples=10_000)
    slope = fit_decay_slope(verify_bound_montecarlo(family, 0, cfg), "EL")
    assert -0.65 <= slope <= -0.35


def test_crossover_far_holdout_single_env():
    cell = crossover_cell(
        EnvFamilyConfig(count=1, dims=(3, 2, 3), seed=2), BoundConfig(T_grid=(16, 256, 4096), trials=30, fit_samples=20_000)
    )
    assert cell.best_matching_tv > 0.05
    assert cell.crossover_unseen is not None


def test_crossover_scan_shape():
    rep = crossover_scan(
        EnvFamilyConfig(count=1, dims=(2, 2, 2), seed=0), [1, 2], [(2, 2, 2)], BoundConfig(T_grid=(16, 64), trials=5, fit_samples=500)
    )
    assert [c["n_envs"] for c in rep.table()] == [1, 2]
    with pytest.raises(ConfigError):
        crossover_scan(EnvFamilyConfig(count=1, dims=(2, 2, 2)), [], [(2, 2, 2)], SMALL)
