import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfb.calibration import (
    CalibrationReport,
    apply_temperature,
    ece,
    fit_temperature,
    reliability_curve,
)
from sfb.errors import LengthMismatch


def loop_ece(conf, correct, bins):
    """Independent ECE: explicit bin loop over (lo, hi] intervals."""
    conf, correct = np.asarray(conf), np.asarray(correct)
    total = 0.0
    for b in range(bins):
        lo, hi = b / bins, (b + 1) / bins
        sel = ((conf > lo) & (conf <= hi)) | ((b == 0) & (conf == 0))
        if sel.any():
            total += sel.mean() * abs(correct[sel].mean() - conf[sel].mean())
    return total


class TestEce:
    def test_perfect_confident(self):
        assert ece(np.array([1.0, 0.0, 1.0]), [1, 0, 1], 10) == 0.0

    def test_calibrated_constant(self):
        n = 1000
        labels = np.array([1] * 700 + [0] * 300)
        assert ece(np.full(n, 0.7), labels, 10) == pytest.approx(0.0, abs=1 / n)

    def test_overconfident(self):
        assert ece(np.ones(10), [0, 1] * 5, 10) == pytest.approx(0.5)

    def test_single_bin_is_gap_of_means(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(3), size=200)
        y = rng.integers(0, 3, 200)
        gap = abs(p.max(1).mean() - (p.argmax(1) == y).mean())
        assert ece(p, y, 1) == pytest.approx(gap, abs=1e-15)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        p = rng.dirichlet(np.ones(4), size=300)
        y = rng.integers(0, 4, 300)
        conf = p.max(1)
        correct = (p.argmax(1) == y).astype(float)
        assert ece(p, y, 15) == pytest.approx(loop_ece(conf, correct, 15), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            ece([0.5, 0.5], [1], 10)

    def test_reliability_counts_sum(self):
        rng = np.random.default_rng(2)
        p = rng.random(500)
        curve = reliability_curve(p, rng.integers(0, 2, 500), 15)
        assert sum(c for _, _, c in curve) == 500


class TestTemperature:
    def test_zero_logit(self):
        assert apply_temperature(0.0, 5.0) == 0.5

    def test_log_nine(self):
        assert apply_temperature(2.1972, 1.0) == pytest.approx(0.9, abs=1e-4)

    def test_infinite_temperature(self):
        assert apply_temperature(2.1972, 1e6) == pytest.approx(0.5, abs=1e-5)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            apply_temperature([1.0], 0.0)

    @settings(max_examples=100)
    @given(st.floats(0.01, 100))
    def test_argmax_invariance(self, t):
        z = np.random.default_rng(0).normal(size=(50, 4)) * 3
        assert (apply_temperature(z, t).argmax(1) == z.argmax(1)).all()


def calibrated_binary(n, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=2.0, size=n)
    y = (rng.random(n) < 1 / (1 + np.exp(-z))).astype(int)
    return z, y


class TestFitTemperature:
    def test_calibrated_logits_select_one(self):
        z, y = calibrated_binary(200_000, 0)
        assert fit_temperature(z, y) == 1.0

    def test_scaled_logits_select_three(self):
        z, y = calibrated_binary(200_000, 1)
        grid = (0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 5.0)
        # brute-force oracle over the grid with the loop implementation
        oracle = []
        for t in grid:
            p = 1 / (1 + np.exp(-3 * z / t))
            conf = np.maximum(p, 1 - p)
            correct = ((p > 0.5).astype(int) == y).astype(float)
            oracle.append(loop_ece(conf, correct, 15))
        assert grid[int(np.argmin(oracle))] == 3.0
        assert fit_temperature(3 * z, y, grid) == 3.0

    def test_single_point_grid(self):
        assert fit_temperature([0.1, -0.3], [1, 0], [2.0]) == 2.0

    def test_ties_go_toward_one(self):
        # all-zero logits: every temperature gives the same probabilities
        assert fit_temperature(np.zeros(10), [0, 1] * 5, [0.25, 3.0, 1.5]) == 1.5

    def test_never_worse_than_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            z = rng.normal(scale=rng.uniform(0.1, 5), size=(300, 3))
            y = rng.integers(0, 3, 300)
            t = fit_temperature(z, y)
            assert ece(apply_temperature(z, t), y) <= ece(apply_temperature(z, 1.0), y)


def test_report_roundtrip():
    z, y = calibrated_binary(2000, 4)
    report = CalibrationReport.build(3 * z, y)
    assert report.ece_after <= report.ece_before
    assert CalibrationReport.from_json(report.to_json()) == report
