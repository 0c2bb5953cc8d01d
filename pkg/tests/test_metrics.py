import math

import numpy as np
import pytest

from rfunfold.estimation import WlmpModel
from rfunfold.layers import FLOP_CONVENTION, make_iq_pa_model
from rfunfold.metrics import ZeroSignalError, cancellation_db, complexity_report, format_complexity
from rfunfold.numerics import RngStream, complex_gaussian


class TestCancellation:
    def test_zero_estimate(self):
        y = complex_gaussian(RngStream(0), 10)
        assert cancellation_db(y, np.zeros(10)).c_db == pytest.approx(0.0, abs=1e-12)

    def test_forty_db(self):
        assert cancellation_db([2.0], [1.98]).c_db == pytest.approx(40.0, abs=1e-9)

    def test_exact_sentinel(self):
        y = complex_gaussian(RngStream(1), 10)
        r = cancellation_db(y, y)
        assert r.c_db == math.inf and r.residual_power == 0.0 and r.exact

    def test_errors(self):
        with pytest.raises(ZeroSignalError):
            cancellation_db(np.zeros(3), np.ones(3))
        with pytest.raises(ValueError):
            cancellation_db(np.ones(3), np.ones(2))
        with pytest.raises(ValueError):
            cancellation_db([], [])

    def test_scale_invariance(self):
        rng = RngStream(2)
        y, e = complex_gaussian(rng, 64), complex_gaussian(rng, 64, 1e-3)
        for alpha in (2.0, 1j, 0.5 - 3j):
            a = cancellation_db(alpha * y, alpha * (y + e)).c_db
            assert a == pytest.approx(cancellation_db(y, y + e).c_db, abs=1e-12)

    def test_powers_are_additive(self):
        rng = RngStream(3)
        y, y_hat = complex_gaussian(rng, 100), complex_gaussian(rng, 100)
        first, second = cancellation_db(y[:50], y_hat[:50]), cancellation_db(y[50:], y_hat[50:])
        whole = cancellation_db(y, y_hat)
        combined = 10 * math.log10((first.si_power + second.si_power) / (first.residual_power + second.residual_power))
        assert whole.c_db == pytest.approx(combined, abs=1e-12)

    def test_brute_force_oracle(self):
        rng = RngStream(4)
        y, y_hat = complex_gaussian(rng, 200), complex_gaussian(rng, 200)
        num = den = 0.0
        for a, b in zip(y, y_hat):
            num += abs(a) ** 2
            den += abs(a - b) ** 2
        assert cancellation_db(y, y_hat).c_db == pytest.approx(10 * math.log10(num / den), abs=1e-12)


class TestComplexity:
    def test_reported_reductions(self):
        rows = complexity_report([("WLMP", 156, 1558), ("MB-NN", 41, 331)])
        assert f"{100 * rows[1].param_reduction:.1f}" == "73.7"
        assert f"{100 * rows[1].flop_reduction:.1f}" == "78.8"
        text = format_complexity(rows)
        assert "73.7%" in text and "78.8%" in text

    def test_single_model(self):
        (row,) = complexity_report([make_iq_pa_model(5, 13)])
        assert row.param_reduction == 0.0 and row.flop_reduction == 0.0

    def test_from_models(self):
        rows = complexity_report([("WLMP", WlmpModel(5, 13)), ("MB-NN", make_iq_pa_model(5, 13))])
        assert (rows[0].param_count, rows[1].param_count) == (156, 41)
        assert FLOP_CONVENTION in format_complexity(rows)

    def test_empty(self):
        with pytest.raises(ValueError):
            complexity_report([])
