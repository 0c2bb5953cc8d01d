from math import comb

import numpy as np
import pytest

from rfunfold.estimation import (
    LmsState,
    WlmpModel,
    build_wlmp_basis,
    cascade_to_wlmp,
    expand_to_wlmp,
    fit_wlmp,
    lms_step,
    run_lms,
    wlmp_size,
    wlmp_terms,
)
from rfunfold.layers import Cascade, MemoryPolynomialLayer, WidelyLinearLayer, make_iq_pa_model
from rfunfold.metrics import cancellation_db
from rfunfold.numerics import NonFiniteError, RngStream, complex_gaussian, delay_matrix


def _random_cascade(rng, max_order, memory):
    model = make_iq_pa_model(max_order, memory)
    k = complex_gaussian(rng, 2)
    model.layers[0].params = np.array([1.0 + 0.3 * k[0], 0.3 * k[1]])
    model.layers[1].params = complex_gaussian(rng, model.layers[1].param_count())
    return model


class TestBasis:
    def test_linear_columns(self):
        x = complex_gaussian(RngStream(0), 5)
        np.testing.assert_array_equal(build_wlmp_basis(x, 1, 1), np.column_stack([np.conj(x), x]))

    @pytest.mark.parametrize("max_order", [1, 3, 5, 7, 9])
    @pytest.mark.parametrize("memory", [1, 2, 13])
    def test_count_law(self, max_order, memory):
        x = complex_gaussian(RngStream(1), 40)
        n_cols = build_wlmp_basis(x, max_order, memory).shape[1]
        assert n_cols == wlmp_size(max_order, memory) == memory * (max_order + 1) * (max_order + 3) // 4

    def test_reported_sizes(self):
        assert wlmp_size(3, 1) == 6
        assert wlmp_size(5, 13) == 156

    def test_column_order(self):
        x = complex_gaussian(RngStream(2), 12)
        basis = build_wlmp_basis(x, 3, 2)
        for i, (p, q) in enumerate(wlmp_terms(3)):
            expected = delay_matrix(x**q * np.conj(x) ** (p - q), 2)
            np.testing.assert_allclose(basis[:, 2 * i:2 * i + 2], expected, rtol=1e-14)

    def test_deterministic(self):
        x = complex_gaussian(RngStream(3), 30)
        np.testing.assert_array_equal(build_wlmp_basis(x, 5, 3), build_wlmp_basis(x.copy(), 5, 3))

    def test_even_order_rejected(self):
        with pytest.raises(ValueError):
            build_wlmp_basis(np.ones(4), 4, 1)


class TestFit:
    def test_recovers_known_wlmp(self):
        rng = RngStream(4)
        truth = WlmpModel(3, 2, complex_gaussian(rng, wlmp_size(3, 2)))
        x = complex_gaussian(rng, 400)
        t = truth(x)
        fit = fit_wlmp(x, t, 3, 2)
        assert np.linalg.norm(fit.params - truth.params) / np.linalg.norm(truth.params) < 1e-8
        assert cancellation_db(t, fit(x)).c_db > 80

    def test_zero_target(self):
        x = complex_gaussian(RngStream(5), 100)
        np.testing.assert_array_equal(fit_wlmp(x, np.zeros(100), 3, 2).params, 0)

    def test_cascade_target(self):
        rng = RngStream(6)
        cascade = _random_cascade(rng, 5, 3)
        x = complex_gaussian(rng, 2000)
        t = cascade(x)
        assert cancellation_db(t, fit_wlmp(x, t, 5, 3)(x)).c_db > 80

    def test_ls_optimality(self):
        rng = RngStream(7)
        x = complex_gaussian(rng, 300)
        t = _random_cascade(rng, 3, 2)(x) + complex_gaussian(rng, 300, 1e-2)
        fit = fit_wlmp(x, t, 3, 2)
        basis = build_wlmp_basis(x, 3, 2)
        best = np.sum(np.abs(t - basis @ fit.params) ** 2)
        for _ in range(20):
            d = complex_gaussian(rng, fit.params.size)
            g = fit.params + 1e-3 * d / np.linalg.norm(d)
            assert np.sum(np.abs(t - basis @ g) ** 2) > best

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            fit_wlmp(np.ones(10), np.ones(9), 1, 1)


class TestExpansion:
    def test_linear_case(self):
        rng = RngStream(8)
        k1, k2 = complex_gaussian(rng, 2)
        h1 = complex_gaussian(rng, 3)
        wlmp = expand_to_wlmp(k1, k2, {1: h1})
        np.testing.assert_allclose(wlmp.coefficient(1, 1), k1 * h1, rtol=1e-15)
        np.testing.assert_allclose(wlmp.coefficient(1, 0), k2 * h1, rtol=1e-15)

    def test_no_image_term(self):
        rng = RngStream(9)
        k1 = complex_gaussian(rng, 1)[0]
        h = complex_gaussian(rng, 6).reshape(3, 2)
        pa = MemoryPolynomialLayer((1, 3, 5), 2, h)
        wlmp = expand_to_wlmp(k1, 0.0, pa)
        for p, q in wlmp.terms:
            if q != (p + 1) // 2:
                assert np.all(wlmp.coefficient(p, q) == 0)
        x = complex_gaussian(rng, 200)
        y = pa(k1 * x)
        np.testing.assert_allclose(wlmp(x), y, rtol=0, atol=1e-12 * np.max(np.abs(y)))

    def test_third_order_closed_form(self):
        # z|z|^2 = z^2 conj(z) with z = k1 x + k2 conj(x)
        rng = RngStream(10)
        k1, k2, h3 = complex_gaussian(rng, 3)
        wlmp = expand_to_wlmp(k1, k2, {3: [h3]})
        a, b = k1, k2
        expected = {
            3: h3 * a * a * np.conj(b),
            2: h3 * (a * a * np.conj(a) + 2 * a * b * np.conj(b)),
            1: h3 * (b * b * np.conj(b) + 2 * a * b * np.conj(a)),
            0: h3 * b * b * np.conj(a),
        }
        for q, g in expected.items():
            np.testing.assert_allclose(wlmp.coefficient(3, q), [g], rtol=1e-13)

    def test_third_order_samples(self):
        rng = RngStream(11)
        cascade = _random_cascade(rng, 3, 1)
        x = complex_gaussian(rng, 1000)
        y = cascade(x)
        assert np.max(np.abs(cascade_to_wlmp(cascade)(x) - y)) / np.max(np.abs(y)) < 1e-10

    @pytest.mark.parametrize("max_order", [1, 3, 5, 7, 9])
    @pytest.mark.parametrize("memory", [1, 2, 3, 4])
    def test_equivalence_grid(self, max_order, memory):
        rng = RngStream(100 * max_order + memory, 4)
        for _ in range(3):
            cascade = _random_cascade(rng, max_order, memory)
            x = complex_gaussian(rng, 1000)
            y = cascade(x)
            assert np.max(np.abs(cascade_to_wlmp(cascade)(x) - y)) < 1e-9 * np.max(np.abs(y))

    def test_exact_binomials(self):
        # the ninth-order coefficient sum for k1 = k2 = 1 is C(9, q)
        wlmp = expand_to_wlmp(1.0, 1.0, {9: [1.0]})
        for q in range(10):
            assert wlmp.coefficient(9, q)[0] == comb(9, q)

    def test_rejects_even_orders(self):
        with pytest.raises(ValueError):
            expand_to_wlmp(1, 0, {2: [1.0]})

    def test_pa_only_cascade(self):
        pa = MemoryPolynomialLayer((1, 3), 2, [[1, 0.5], [0.1, 0.2j]])
        x = complex_gaussian(RngStream(12), 50)
        np.testing.assert_allclose(cascade_to_wlmp(Cascade([pa]))(x), pa(x), rtol=1e-13)

    def test_gauge_invariance(self):
        rng = RngStream(13)
        cascade = _random_cascade(rng, 5, 2)
        x = complex_gaussian(rng, 100)
        y = cascade(x)
        alpha = 0.7 * np.exp(0.4j)
        wl, pa = cascade.layers
        scaled = Cascade([
            WidelyLinearLayer(alpha * wl.k1, alpha * wl.k2),
            MemoryPolynomialLayer(pa.orders, pa.memory,
                                  [h / (alpha * abs(alpha) ** (p - 1)) for p, h in zip(pa.orders, pa.coeffs)]),
        ])
        np.testing.assert_allclose(scaled(x), y, rtol=1e-12)
        np.testing.assert_allclose(cascade_to_wlmp(scaled).params, cascade_to_wlmp(cascade).params, rtol=1e-12)


class TestLms:
    def test_zero_error_unchanged(self):
        state = LmsState([1 + 1j, 2], 0.1)
        u = np.array([0.5, 1j])
        new = lms_step(state, u, np.dot(state.weights, u))
        np.testing.assert_array_equal(new.weights, state.weights)

    def test_one_step_convergence(self):
        new = lms_step(LmsState([0.0], 2.0), [1.0], 1.0)
        np.testing.assert_array_equal(new.weights, [1.0])

    def test_divergence_guard(self):
        with pytest.raises(NonFiniteError):
            lms_step(LmsState([1e308], 1.0), [1e308], 0.0)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            lms_step(LmsState([0.0, 0.0], 1.0), [1.0], 0.0)

    def test_mse_trend(self):
        # Monte-Carlo average over realizations of the a priori squared error
        h = np.array([0.8 - 0.2j, 0.3j, -0.1])
        curves = []
        for seed in range(30):
            rng = RngStream(seed, 14)
            x = complex_gaussian(rng, 1000)
            u = delay_matrix(x, 3)
            t = u @ h + complex_gaussian(rng, 1000, 1e-4)
            _, err = run_lms(u, t, LmsState(np.zeros(3), 0.05))
            curves.append(np.abs(err) ** 2)
        mse = np.mean(curves, axis=0).reshape(-1, 100).mean(axis=1)
        # increases must stay within Monte-Carlo scatter around the noise floor
        assert np.all(np.diff(mse) <= 0.1 * 1e-4)
        assert mse[-1] < 1e-2 * mse[0]
