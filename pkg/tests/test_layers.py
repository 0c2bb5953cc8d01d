import numpy as np
import pytest

from rfunfold.estimation import WlmpModel, expand_to_wlmp, lms_step, LmsState
from rfunfold.layers import (
    Cascade,
    FirFilterLayer,
    MemoryPolynomialLayer,
    ParallelSumModel,
    StaleCacheError,
    StaticPowerLayer,
    WidelyLinearLayer,
    dumps_model,
    flop_count,
    loads_model,
    make_classic_model,
    make_iq_pa_model,
    param_count,
    save_model,
    load_model,
)
from rfunfold.numerics import RngStream, complex_gaussian, max_relative_error, wirtinger_finite_difference
from rfunfold.training import cost_adjoint, gd_step, mse_cost


def _randomize(model, rng, scale=0.5):
    n = model.param_count()
    if n:
        model.params = complex_gaussian(rng, n, scale)
    return model


LAYER_FACTORIES = {
    "fir": lambda: FirFilterLayer(memory=3),
    "raw_power_1": lambda: StaticPowerLayer(1, "raw_power"),
    "raw_power_3": lambda: StaticPowerLayer(3, "raw_power"),
    "baseband_2": lambda: StaticPowerLayer(2, "baseband"),
    "baseband_5": lambda: StaticPowerLayer(5, "baseband"),
    "widely_linear": lambda: WidelyLinearLayer(),
    "mp_full": lambda: MemoryPolynomialLayer.full(4, 3),
    "mp_odd": lambda: MemoryPolynomialLayer.odd(5, 3),
    "iq_pa": lambda: make_iq_pa_model(5, 3),
    "parallel": lambda: make_classic_model("parallel_hammerstein", 2, 3),
    "hammerstein_wiener": lambda: make_classic_model("hammerstein_wiener", 2, 2, 3),
    "wlmp": lambda: WlmpModel(3, 2),
}


def _check_gradients(model, x, t):
    """Return (param rel. error, input rel. error) against finite differences."""
    p0 = model.params

    def cost_params(p):
        model.params = p
        return mse_cost(model.forward(x), t)

    def cost_input(v):
        model.params = p0
        return mse_cost(model.forward(v), t)

    model.params = p0
    y = model.forward(x)
    b, g = model.backward(cost_adjoint(y, t))
    err_p = max_relative_error(g, wirtinger_finite_difference(cost_params, p0)) if p0.size else 0.0
    err_x = max_relative_error(b, wirtinger_finite_difference(cost_input, x))
    model.params = p0
    return err_p, err_x


class TestForward:
    def test_widely_linear_identity(self):
        x = complex_gaussian(RngStream(0), 10)
        np.testing.assert_array_equal(WidelyLinearLayer(1, 0).forward(x), x)

    def test_widely_linear_substitution(self):
        y = WidelyLinearLayer(1, 0.1).forward(np.array([1 + 1j]))
        np.testing.assert_allclose(y, [1.1 + 0.9j], rtol=1e-15)

    def test_memory_polynomial_cubic(self):
        mp = MemoryPolynomialLayer([1, 3], 1, [[0], [1]])
        np.testing.assert_allclose(mp.forward(np.array([2.0])), [8.0])

    def test_output_length_and_signal_type(self):
        from rfunfold.numerics import ComplexSignal

        s = ComplexSignal(complex_gaussian(RngStream(1), 17), 1e6)
        out = make_iq_pa_model(5, 4).forward(s)
        assert isinstance(out, ComplexSignal)
        assert len(out) == 17 and out.sample_rate_hz == 1e6

    @pytest.mark.parametrize("max_order", [1, 3, 5, 7, 9])
    def test_cascade_equals_expanded_wlmp(self, max_order):
        rng = RngStream(max_order, 3)
        model = _randomize(make_iq_pa_model(max_order, 3), rng)
        x = complex_gaussian(rng, 500)
        wlmp = expand_to_wlmp(*model.layers[0].params, model.layers[1])
        y = model.forward(x)
        assert np.max(np.abs(wlmp.forward(x) - y)) / np.max(np.abs(y)) < 1e-10

    def test_zero_prepend_edge(self):
        y = FirFilterLayer([1.0, 2.0, 3.0]).forward(np.array([1.0, 0.0, 0.0]))
        np.testing.assert_array_equal(y, [1, 2, 3])


class TestClassicModels:
    def test_wiener_identity(self):
        x = complex_gaussian(RngStream(0), 8)
        np.testing.assert_allclose(make_classic_model("wiener", 1, 1, taps=[1]).forward(x), x)

    def test_hammerstein(self):
        x = np.arange(1, 7, dtype=float)
        y = make_classic_model("hammerstein", 2, 2, taps=[1, 1]).forward(x)
        expected = x**2 + np.concatenate([[0], x[:-1] ** 2])
        np.testing.assert_allclose(y, expected)

    def test_hammerstein_wiener(self):
        c, a = 0.7 - 0.2j, 1.3 + 0.4j
        y = make_classic_model("hammerstein_wiener", 1, 2, 2, taps=[c]).forward(np.array([a]))
        np.testing.assert_allclose(y, [(c * a**2) ** 2], rtol=1e-14)

    def test_wiener_closed_form(self):
        rng = RngStream(4)
        h, x = complex_gaussian(rng, 3), complex_gaussian(rng, 20)
        y = make_classic_model("wiener", 3, 3, taps=h).forward(x)
        np.testing.assert_allclose(y, np.convolve(x, h)[:20] ** 3, rtol=1e-12)

    def test_parallel_hammerstein_closed_form(self):
        rng = RngStream(5)
        taps = complex_gaussian(rng, 6).reshape(3, 2)
        x = complex_gaussian(rng, 15)
        y = make_classic_model("parallel_hammerstein", 2, 3, taps=taps).forward(x)
        expected = sum(np.convolve(x ** (p + 1), taps[p])[:15] for p in range(3))
        np.testing.assert_allclose(y, expected, rtol=1e-12)

    def test_invalid_kind(self):
        with pytest.raises(ValueError):
            make_classic_model("volterra", 2, 2)


class TestBackward:
    def test_fir_lms_example(self):
        fir = FirFilterLayer([1.0])
        y = fir.forward(np.array([1.0]))
        _, g = fir.backward(cost_adjoint(y, np.array([0.0])))
        np.testing.assert_allclose(g, [0.5])

    def test_memory_polynomial_gradient_example(self):
        mp = MemoryPolynomialLayer([1, 3], 2)
        mp.forward(np.array([2j, 0.0]))
        # adjoint 0.5 * (y - t) with y - t = 1 at n = 1; x[n-1] = 2j
        _, g = mp.backward(np.array([0.0, 0.5]))
        assert g[3] == pytest.approx(-4j)

    def test_stale_cache(self):
        with pytest.raises(StaleCacheError):
            WidelyLinearLayer().backward(np.zeros(3))
        model = make_iq_pa_model(3, 2)
        model.forward(np.ones(4))
        model.backward(np.zeros(4))
        with pytest.raises(StaleCacheError):
            model.backward(np.zeros(4))

    @pytest.mark.parametrize("name", sorted(LAYER_FACTORIES))
    def test_matches_finite_differences(self, name):
        rng = RngStream(abs(hash(name)) % 1000, 21)
        worst_p = worst_x = 0.0
        for _ in range(50):
            model = _randomize(LAYER_FACTORIES[name](), rng)
            x = complex_gaussian(rng, 12)
            t = complex_gaussian(rng, 12)
            err_p, err_x = _check_gradients(model, x, t)
            worst_p, worst_x = max(worst_p, err_p), max(worst_x, err_x)
        assert worst_p < 1e-6
        assert worst_x < 1e-6

    @pytest.mark.parametrize("name", sorted(LAYER_FACTORIES))
    def test_zero_input_is_finite(self, name):
        model = _randomize(LAYER_FACTORIES[name](), RngStream(2))
        x = np.zeros(6, dtype=complex)
        y = model.forward(x)
        b, g = model.backward(cost_adjoint(y, np.ones(6)))
        assert np.all(np.isfinite(y)) and np.all(np.isfinite(b)) and np.all(np.isfinite(g))

    def test_cascade_matches_hand_chain(self):
        # M = 1, P = 5: the per-sample chain written out term by term
        rng = RngStream(17)
        model = _randomize(make_iq_pa_model(5, 1), rng)
        k1, k2 = model.layers[0].params
        h = model.layers[1].coeffs[:, 0]
        x = complex_gaussian(rng, 25)
        t = complex_gaussian(rng, 25)
        y = model.forward(x)
        a = cost_adjoint(y, t)
        _, grads = model.backward(a)

        xiq = k1 * x + k2 * np.conj(x)
        mag = np.abs(xiq)
        orders = (1, 3, 5)
        dy_dxiqc = 0.5 * sum(hp * mag ** (p - 1) * xiq / np.conj(xiq) * (p - 1) for hp, p in zip(h, orders))
        dyc_dxiqc = 0.5 * sum(np.conj(hp) * mag ** (p - 1) * (p + 1) for hp, p in zip(h, orders))
        grad_xiq = np.conj(a) * dy_dxiqc + a * dyc_dxiqc
        expected = [np.sum(np.conj(x) * grad_xiq), np.sum(x * grad_xiq)]
        expected += [np.sum(a * np.conj(xiq) * mag ** (q - 1)) for q in orders]
        np.testing.assert_allclose(grads, expected, rtol=1e-12)


class TestLinearReduction:
    def test_forward_is_fir(self):
        rng = RngStream(8)
        h = complex_gaussian(rng, 4)
        model = Cascade([WidelyLinearLayer(1, 0), MemoryPolynomialLayer([1], 4, [h])])
        x = complex_gaussian(rng, 40)
        np.testing.assert_allclose(model.forward(x), np.convolve(x, h)[:40], rtol=1e-13)

    def test_gradient_step_is_lms(self):
        rng = RngStream(9)
        m = 3
        model = Cascade([WidelyLinearLayer(1, 0), MemoryPolynomialLayer([1], m, np.zeros((1, m)))])
        x = complex_gaussian(rng, 60)
        t = complex_gaussian(rng, 60)
        lms = LmsState(np.zeros(m, dtype=complex), 0.05)
        for n in range(m, 60):
            window = x[n - m + 1:n + 1]
            y = model.forward(window)
            adj = np.zeros(m, dtype=complex)
            adj[-1] = cost_adjoint(y[-1:], t[n:n + 1])[0]
            _, g = model.backward(adj)
            params = model.params
            params[2:] = gd_step(params[2:], g[2:], 0.05)
            model.params = params
            lms = lms_step(lms, x[n - np.arange(m)], t[n])
            np.testing.assert_allclose(model.layers[1].coeffs[0], lms.weights, rtol=0, atol=1e-12)


class TestCounts:
    @pytest.mark.parametrize("max_order", [3, 5, 7, 9])
    @pytest.mark.parametrize("memory", [1, 13])
    def test_param_count_closed_forms(self, max_order, memory):
        assert param_count(make_iq_pa_model(max_order, memory)) == (max_order + 1) * memory // 2 + 2
        assert param_count(WlmpModel(max_order, memory)) == memory * (max_order + 1) * (max_order + 3) // 4

    def test_reported_counts(self):
        assert param_count(make_iq_pa_model(5, 13)) == 41
        assert param_count(WlmpModel(5, 13)) == 156
        assert param_count(FirFilterLayer(memory=7)) == 7
        assert param_count(StaticPowerLayer(3)) == 0

    def test_fir_flops(self):
        assert flop_count(FirFilterLayer(memory=1)) == 6

    def test_flops_near_reported(self):
        assert abs(flop_count(make_iq_pa_model(5, 13)) - 331) <= 0.15 * 331
        assert abs(flop_count(WlmpModel(5, 13)) - 1558) <= 0.15 * 1558

    def test_flops_deterministic_and_additive(self):
        model = make_iq_pa_model(7, 5)
        assert flop_count(model) == sum(flop_count(layer) for layer in model.layers)
        assert flop_count(model) == flop_count(make_iq_pa_model(7, 5))


class TestSerialization:
    @pytest.mark.parametrize("name", sorted(LAYER_FACTORIES))
    def test_round_trip_bit_exact(self, name):
        model = _randomize(LAYER_FACTORIES[name](), RngStream(33))
        clone = loads_model(dumps_model(model))
        assert type(clone) is type(model)
        np.testing.assert_array_equal(clone.params, model.params)
        assert dumps_model(clone) == dumps_model(model)

    def test_file_round_trip(self, tmp_path):
        model = _randomize(make_iq_pa_model(5, 13), RngStream(1))
        save_model(model, tmp_path / "m.json")
        x = complex_gaussian(RngStream(2), 30)
        np.testing.assert_array_equal(load_model(tmp_path / "m.json").forward(x), model.forward(x))

    def test_rejects_unknown_version(self):
        text = dumps_model(FirFilterLayer([1.0])).replace('"format_version": 1', '"format_version": 99')
        with pytest.raises(ValueError):
            loads_model(text)

    def test_parallel_branches_sum(self):
        a, b = FirFilterLayer([1.0, 2.0]), FirFilterLayer([0.5j])
        x = complex_gaussian(RngStream(3), 9)
        np.testing.assert_allclose(ParallelSumModel([a, b]).forward(x), a.forward(x) + b.forward(x))
