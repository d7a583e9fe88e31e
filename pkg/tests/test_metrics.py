import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from estgcn.errors import InputError
from estgcn.metrics import (
    crps_ensemble,
    dm_test,
    mae,
    mase,
    mcb_test,
    metric_report,
    pinball,
    residual_ensemble,
    rmse,
    smape,
    studentized_range_cdf,
    studentized_range_quantile,
    write_dm_csv,
    write_mcb_csv,
)

# --- scalar-loop oracles ------------------------------------------------------------


def loop_mae(y, f):
    return sum(abs(a - b) for a, b in zip(y, f)) / len(y)


def loop_rmse(y, f):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(y, f)) / len(y))


def loop_mase(y, f, train):
    denom = len(y) / (len(train) - 1) * sum(abs(train[t] - train[t - 1]) for t in range(1, len(train)))
    return sum(abs(a - b) for a, b in zip(y, f)) / denom


def loop_smape(y, f):
    total = 0.0
    for a, b in zip(y, f):
        d = abs(a) + abs(b)
        total += 0.0 if d == 0 else 2 * abs(b - a) / d
    return 100 * total / len(y)


def loop_pinball(y, f, rho):
    total = 0.0
    for a, b in zip(y, f):
        d = a - b
        total += rho * d if d >= 0 else (rho - 1) * d
    return total / len(y)


def double_sum_crps(y, ens):
    total = 0.0
    for t in range(len(y)):
        xs = ens[t]
        s = len(xs)
        first = sum(abs(x - y[t]) for x in xs) / s
        pair = sum(abs(a - b) for a in xs for b in xs) / (s * s)
        total += first - 0.5 * pair
    return total / len(y)


# --- examples -----------------------------------------------------------------------


def test_mae_rmse_examples():
    assert mae([1, 2], [1, 2]) == 0 and rmse([1, 2], [1, 2]) == 0
    assert mae([0, 0], [3, 4]) == 3.5
    assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), rel=1e-15)
    with pytest.raises(InputError):
        mae([1, 2], [1])
    with pytest.raises(InputError):
        rmse([], [])


def test_mase_examples():
    assert mase([5.0], [5.0], [1, 2, 3]) == 0
    assert mase([5.0], [7.0], [1, 2, 3]) == 2.0
    assert math.isnan(mase([5.0], [7.0], [4, 4, 4]))
    with pytest.raises(InputError):
        mase([1.0], [1.0], [1.0])


def test_smape_examples():
    assert smape([3, 4], [3, 4]) == 0
    assert smape([0.0], [5.0]) == 200.0
    assert smape([0.0, 2.0], [0.0, 2.0]) == 0.0


def test_pinball_examples():
    assert pinball([1.0], [1.0]) == 0
    assert pinball([1.0], [0.0], 0.8) == pytest.approx(0.8)
    assert pinball([0.0], [1.0], 0.8) == pytest.approx(0.2)
    for rho in (0.0, 1.0, 1.5):
        with pytest.raises(InputError):
            pinball([1.0], [0.0], rho)


def test_crps_examples():
    assert crps_ensemble([3.0], [[5.0, 5.0, 5.0]]) == pytest.approx(2.0, abs=1e-15)
    assert crps_ensemble([3.0, 1.0], [[3.0, 3.0], [1.0, 1.0]]) == 0.0
    # {y - 1, y + 1}: first term 1, pair term 0.5 * (0 + 2 + 2 + 0) / 4 = 0.5
    assert crps_ensemble([4.0], [[3.0, 5.0]]) == pytest.approx(0.5, abs=1e-15)
    assert crps_ensemble([4.0], [[3.0, 5.0]]) == pytest.approx(double_sum_crps([4.0], [[3.0, 5.0]]))
    with pytest.raises(InputError):
        crps_ensemble([1.0], [[1.0]])
    with pytest.raises(InputError):
        crps_ensemble([1.0, 2.0], [[1.0, 2.0]])


# --- oracle agreement ---------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_scalar_loops(seed):
    rng = np.random.default_rng(seed)
    y, f, train = rng.normal(50, 20, 200), rng.normal(50, 20, 200), rng.normal(50, 20, 300)
    assert mae(y, f) == pytest.approx(loop_mae(y, f), rel=1e-12)
    assert rmse(y, f) == pytest.approx(loop_rmse(y, f), rel=1e-12)
    assert mase(y, f, train) == pytest.approx(loop_mase(y, f, train), rel=1e-12)
    assert smape(y, f) == pytest.approx(loop_smape(y, f), rel=1e-12)
    assert pinball(y, f, 0.8) == pytest.approx(loop_pinball(y, f, 0.8), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(2, 50), st.integers(0, 10_000))
def test_crps_matches_double_sum(q, s, seed):
    rng = np.random.default_rng(seed)
    y, ens = rng.normal(size=q), rng.normal(size=(q, s)) * 3
    assert crps_ensemble(y, ens) == pytest.approx(double_sum_crps(y, ens), rel=1e-10, abs=1e-12)


vec = arrays(float, 12, elements=st.floats(-100, 100))


@settings(max_examples=60, deadline=None)
@given(vec, vec, st.randoms(use_true_random=False))
def test_metrics_invariant_to_joint_shuffles_and_nonnegative(y, f, rnd):
    order = list(range(12))
    rnd.shuffle(order)
    ys, fs = y[order], f[order]
    for fn in (mae, rmse, smape, lambda a, b: pinball(a, b, 0.3)):
        assert fn(ys, fs) == pytest.approx(fn(y, f), rel=1e-12, abs=1e-12)
        assert fn(y, f) >= 0
    assert smape(y, f) <= 200 + 1e-12


def test_metric_report_row_and_residual_ensemble():
    rng = np.random.default_rng(3)
    y, f = rng.normal(60, 10, 30), rng.normal(60, 10, 30)
    ens = residual_ensemble(f, rng.normal(0, 5, 100), 50, np.random.default_rng(1))
    assert ens.shape == (30, 50)
    rep = metric_report(y, f, rng.normal(60, 10, 200), ens)
    assert set(rep.row()) == {"mae", "mase", "rmse", "smape", "pinball", "crps"}
    assert rep.horizon == 30 and rep.quantile_rho == 0.8 and rep.train_len == 200
    res = np.array([-1.0, 2.0])
    a = residual_ensemble(f, res, 50, np.random.default_rng(4))
    assert np.array_equal(a, residual_ensemble(f, res, 50, np.random.default_rng(4)))
    assert set(np.unique(a - f[:, None]).round(12)) <= {-1.0, 2.0}
    with pytest.raises(InputError):
        residual_ensemble(f, [])


# --- Diebold-Mariano ----------------------------------------------------------------


def test_dm_undefined_cases():
    y = np.arange(10.0)
    r = dm_test(y, y + 1, y + 1)
    assert not r.defined and math.isnan(r.statistic) and math.isnan(r.p_value)
    r = dm_test(y, y + 3.0, y)
    assert not r.defined and r.mean_diff == pytest.approx(3.0)
    with pytest.raises(InputError):
        dm_test([1.0], [1.0], [2.0])


def test_dm_matches_hand_computation():
    rng = np.random.default_rng(8)
    y, a, b = rng.normal(size=40), rng.normal(size=40), rng.normal(size=40)
    lam = [abs(y[t] - a[t]) - abs(y[t] - b[t]) for t in range(40)]
    mu = sum(lam) / 40
    sd = math.sqrt(sum((v - mu) ** 2 for v in lam) / 39)
    r = dm_test(y, a, b)
    assert r.statistic == pytest.approx(math.sqrt(40) * mu / sd, rel=1e-12)
    assert r.p_value == pytest.approx(1 - stats.norm.cdf(r.statistic), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_dm_antisymmetry(seed):
    rng = np.random.default_rng(seed)
    y, a, b = rng.normal(size=20), rng.normal(size=20), rng.normal(size=20)
    assert dm_test(y, a, b).statistic == pytest.approx(-dm_test(y, b, a).statistic, rel=1e-12)


def test_dm_detects_noisier_forecaster_usually():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        y = rng.normal(50, 10, 60)
        r = dm_test(y, y + rng.normal(0, 6, 60), y + rng.normal(0, 2, 60))
        hits += r.defined and r.statistic > 0 and r.p_value < 0.05
    assert hits >= 90


# --- MCB ----------------------------------------------------------------------------


def test_studentized_range_matches_scipy():
    for k in (2, 3, 5, 14):
        ours = studentized_range_quantile(k, 0.05)
        assert ours == pytest.approx(stats.studentized_range.ppf(0.95, k, np.inf), abs=1e-6)
    # two groups: the range of two standard normals is |N(0, 2)|
    assert studentized_range_quantile(2, 0.05) == pytest.approx(math.sqrt(2) * stats.norm.ppf(0.975), abs=1e-9)
    assert studentized_range_cdf(-1.0, 3) == 0.0
    with pytest.raises(InputError):
        studentized_range_quantile(1)


def test_mcb_strict_best_and_cd_formula():
    rng = np.random.default_rng(0)
    losses = rng.uniform(1, 2, (12, 4))
    losses[:, 2] = 0.5
    r = mcb_test(losses, ["a", "b", "c", "d"])
    assert r.mean_ranks[2] == 1.0 and r.best == "c"
    delta = stats.studentized_range.ppf(0.95, 4, np.inf)
    assert r.critical_distance == pytest.approx(delta * math.sqrt(4 * 5 / 72), abs=1e-3)
    assert r.reference_interval == (1.0 - r.critical_distance, 1.0 + r.critical_distance)
    assert r.in_reference()[2]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(2, 6), st.integers(0, 10_000))
def test_mcb_rank_conservation(d, f, seed):
    rng = np.random.default_rng(seed)
    losses = rng.integers(0, 3, (d, f)).astype(float)  # plenty of ties
    r = mcb_test(losses)
    assert r.mean_ranks.sum() == pytest.approx(f * (f + 1) / 2, rel=1e-12)
    assert np.all((r.mean_ranks >= 1) & (r.mean_ranks <= f))
    assert r.critical_distance > 0


def test_mcb_two_models_and_errors():
    r = mcb_test([[1, 2], [2, 1], [1, 1]])
    assert r.mean_ranks.sum() == 3.0
    with pytest.raises(InputError):
        mcb_test([[1.0, np.nan], [1.0, 2.0]])
    with pytest.raises(InputError):
        mcb_test([[1.0, 2.0]])
    with pytest.raises(InputError):
        mcb_test([[1.0, 2.0], [2.0, 1.0]], ["only-one"])


def test_csv_writers(tmp_path):
    y = np.arange(5.0)
    write_dm_csv(tmp_path / "dm.csv", [("s1", dm_test(y, y + 1, y)), ("s2", dm_test(y, y, y))])
    rows = list(csv.DictReader(open(tmp_path / "dm.csv")))
    assert rows[1]["defined"] == "false" and rows[1]["statistic"] == "nan"
    write_mcb_csv(tmp_path / "mcb.csv", None)
    assert (tmp_path / "mcb.csv").read_text().strip() == "model,mean_rank,cd,in_reference"
