import itertools

import numpy as np
import pandas as pd
import pytest

from core import BetsError, CSVFormatError
from offline import (DiscreteDistribution, TableForecaster, audit_report, distribution_from_sample,
                     histogram_binning, mce, multicalibration_gap, sample_from_csv, soundness_gap,
                     table_from_records)


@pytest.fixture
def two_point():
    # x1, x2 가 같은 mu = 0.5 를 받지만 mu* 는 0.4, 0.6
    dist = DiscreteDistribution(["x1", "x2"], [0.5, 0.5], [0.4, 0.6])
    return dist, TableForecaster({"x1": 0.5, "x2": 0.5})


def brute_force_gap(dist, fc, M, by_value):
    """가능한 모든 {-M, 0, M} 스테이크 함수를 열거한 최대 기대 지불액"""
    mu, c = fc.aligned(dist.ids)
    keys = sorted(set(mu)) if by_value else list(range(len(mu)))
    best = 0.0
    for choice in itertools.product((-M, 0.0, M), repeat=len(keys)):
        table = dict(zip(keys, choice))
        b = np.array([table[u] if by_value else table[i] for i, u in enumerate(mu)])
        best = max(best, float(np.sum(dist.weights * (b * (mu - dist.mu_star) - np.abs(b) * c))))
    return best


def random_table(rng, n=5, levels=3):
    weights = rng.dirichlet(np.ones(n))
    weights[-1] = 1.0 - weights[:-1].sum()
    ids = [f"x{i}" for i in range(n)]
    dist = DiscreteDistribution(ids, weights, rng.uniform(size=n))
    values = rng.uniform(0.05, 0.95, size=levels)
    mu = {x: float(values[rng.integers(levels)]) for x in ids}
    width = float(rng.uniform(0.0, 0.2))
    return dist, TableForecaster(mu, {x: width for x in ids})


def test_distribution_validation():
    with pytest.raises(BetsError):
        DiscreteDistribution(["a", "a"], [0.5, 0.5], [0.1, 0.2])
    with pytest.raises(BetsError):
        DiscreteDistribution(["a", "b"], [0.5, 0.4], [0.1, 0.2])
    with pytest.raises(BetsError):
        DiscreteDistribution(["a", "b"], [1.0, 0.0], [0.1, 0.2])
    with pytest.raises(BetsError):
        DiscreteDistribution(["a"], [1.0], [1.2])
    with pytest.raises(BetsError):
        TableForecaster({"a": 0.5}).aligned(["a", "b"])


def test_perfect_forecaster_has_no_gap():
    dist = DiscreteDistribution(["a", "b", "c"], [0.2, 0.3, 0.5], [0.1, 0.5, 0.9])
    fc = TableForecaster(dict(zip(dist.ids, dist.mu_star)))
    assert soundness_gap(dist, fc, "pointwise", M=3.0) == 0.0
    assert soundness_gap(dist, fc, "standard", M=3.0) == pytest.approx(0.0, abs=1e-15)
    assert mce(dist, fc) == pytest.approx(0.0, abs=1e-15)


def test_two_point_example(two_point):
    dist, fc = two_point
    assert soundness_gap(dist, fc, "standard", M=1.0) == pytest.approx(0.0, abs=1e-15)
    assert soundness_gap(dist, fc, "pointwise", M=1.0) == pytest.approx(0.1)
    assert soundness_gap(dist, fc, "pointwise", M=2.0) == pytest.approx(0.2)
    assert mce(dist, fc) == pytest.approx(0.0, abs=1e-15)


def test_constant_miscalibration():
    dist = DiscreteDistribution(["a", "b"], [0.5, 0.5], [0.5, 0.5])
    fc = TableForecaster({"a": 0.3, "b": 0.3})
    assert soundness_gap(dist, fc, "standard", M=1.0) == pytest.approx(0.2)
    assert mce(dist, fc) == pytest.approx(0.2)
    wide = TableForecaster({"a": 0.3, "b": 0.3}, {"a": 0.25, "b": 0.25})
    assert soundness_gap(dist, wide, "standard", M=1.0) == 0.0


def test_closed_forms_match_brute_force(rng):
    for _ in range(60):
        dist, fc = random_table(rng)
        M = float(rng.uniform(0.5, 2.0))
        assert soundness_gap(dist, fc, "standard", M) == pytest.approx(brute_force_gap(dist, fc, M, True),
                                                                       abs=1e-12)
        assert soundness_gap(dist, fc, "pointwise", M) == pytest.approx(brute_force_gap(dist, fc, M, False),
                                                                        abs=1e-12)
        assert soundness_gap(dist, fc, "standard", M) <= soundness_gap(dist, fc, "pointwise", M) + 1e-12


def test_zero_gap_iff_calibrated_within_width(rng):
    for _ in range(200):
        dist, fc = random_table(rng)
        c0 = next(iter(fc.c.values()))
        assert (soundness_gap(dist, fc, "standard", 1.0) == 0.0) == (mce(dist, fc) <= c0)


def test_unknown_inputs_rejected(two_point):
    dist, fc = two_point
    with pytest.raises(BetsError):
        soundness_gap(dist, fc, "swap", 1.0)
    with pytest.raises(BetsError):
        soundness_gap(dist, fc, "standard", 0.0)
    with pytest.raises(BetsError):
        soundness_gap(dist, fc, "multicalibration", 1.0)


def test_multicalibration_detects_isolated_point(two_point):
    dist, fc = two_point
    subsets = {"all": ["x1", "x2"], "first": ["x1"]}
    report = multicalibration_gap(dist, fc, subsets, c0=0.0)
    assert not report.multicalibrated
    assert report.violations == {"first": [0.5]}
    assert report.gaps["first"] == pytest.approx(0.05)
    assert soundness_gap(dist, fc, "multicalibration", 1.0, subsets) == pytest.approx(0.05)
    assert multicalibration_gap(dist, fc, subsets, c0=1.0).multicalibrated


def test_empty_subset_is_skipped(two_point, caplog):
    dist, fc = two_point
    report = multicalibration_gap(dist, fc, {"nobody": [], "second": lambda x: x == "x2"}, c0=0.2)
    assert report.skipped == ["nobody"]
    assert report.multicalibrated
    assert "nobody" in caplog.text


def test_single_bin_gives_global_mean():
    dist = DiscreteDistribution(["a", "b", "c"], [0.2, 0.3, 0.5], [0.0, 0.5, 1.0])
    fc = TableForecaster({"a": 0.1, "b": 0.6, "c": 0.9})
    binned = histogram_binning(dist, fc, 1)
    assert all(v == pytest.approx(0.65) for v in binned.mu.values())
    assert mce(dist, binned) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(BetsError):
        histogram_binning(dist, fc, 0)


def test_binning_calibrates_and_is_a_fixed_point(rng):
    for _ in range(20):
        dist, fc = random_table(rng, n=8, levels=4)
        binned = histogram_binning(dist, fc, 10)
        assert mce(dist, binned) == pytest.approx(0.0, abs=1e-12)
        # 구간 값들이 서로 다른 구간에 떨어지면 다시 나눠도 그대로
        values = {binned.mu[x] for x in dist.ids}
        if len({min(int(v * 10), 9) for v in values}) == len(values):
            again = histogram_binning(dist, binned, 10)
            for x in dist.ids:
                assert again.mu[x] == pytest.approx(binned.mu[x])


def test_binning_uses_sample_frame():
    frame = pd.DataFrame({"id": ["a", "a", "b", "c"], "y": [1, 0, 1, 1]})
    fc = TableForecaster({"a": 0.12, "b": 0.18, "c": 0.95, "d": 0.11})
    binned = histogram_binning(frame, fc, 5)
    assert binned.mu["a"] == pytest.approx(2 / 3)
    assert binned.mu["d"] == pytest.approx(2 / 3)
    assert binned.mu["c"] == 1.0


def test_distribution_from_sample():
    dist = distribution_from_sample(["a", "b", "a", "a"], [1, 0, 0, 1])
    assert dist.ids == ("a", "b")
    np.testing.assert_allclose(dist.weights, [0.75, 0.25])
    np.testing.assert_allclose(dist.mu_star, [2 / 3, 0.0])
    with pytest.raises(BetsError):
        distribution_from_sample([], [])


def test_sample_from_csv(tmp_path):
    path = tmp_path / "sample.csv"
    path.write_text("id,y,mu,c\n1,1,0.5,0.1\n2,0,0.5,0.1\n1,1,0.5,0.1\n")
    dist, fc, frame = sample_from_csv(str(path))
    assert dist.ids == ("1", "2")
    assert fc.mu == {"1": 0.5, "2": 0.5}
    assert len(frame) == 3
    assert mce(dist, fc) == pytest.approx(1 / 6)

    bad = tmp_path / "bad.csv"
    bad.write_text("id,y,mu\n1,1,0.5\n2,3,0.5\n")
    with pytest.raises(CSVFormatError) as err:
        sample_from_csv(str(bad))
    assert err.value.line == 3


def test_table_from_records_and_report():
    dist, fc = table_from_records([
        {"id": "x1", "weight": 0.5, "mu_star": 0.4, "mu": 0.5},
        {"id": "x2", "weight": 0.5, "mu_star": 0.6, "mu": 0.5, "c": 0.0},
    ])
    report = audit_report(dist, fc, M=1.0, subsets={"first": ["x1"]}, bins=2)
    assert report["gaps"]["pointwise"] == pytest.approx(0.1)
    assert report["gaps"]["multicalibration"] == pytest.approx(0.05)
    assert report["multicalibration"]["violations"] == {"first": [0.5]}
    assert report["binned"]["mce"] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(BetsError):
        table_from_records([{"id": "x1", "weight": 1.0, "mu_star": 0.4}])
