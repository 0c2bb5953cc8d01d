"""Linear-in-parameters baselines: the widely-linear memory polynomial
(WLMP), its least-squares fit, sample-wise complex LMS, and the exact
expansion of an IQ + PA cascade into WLMP coefficients."""

from dataclasses import dataclass
from math import comb

import numpy as np

from .layers import (
    CADD,
    CMUL,
    CSCALE,
    Block,
    Cascade,
    MemoryPolynomialLayer,
    StaleCacheError,
    WidelyLinearLayer,
    _complex_from_pairs,
    _magnitude_flops,
    register_block,
)
from .numerics import NonFiniteError, as_samples, delay_matrix, solve_least_squares


def _check_order(max_order):
    if max_order < 1 or max_order % 2 == 0:
        raise ValueError(f"WLMP max order must be odd and >= 1, got {max_order}")


def wlmp_terms(max_order):
    """``(p, q)`` pairs in column order: odd ``p`` ascending, then ``q``."""
    _check_order(max_order)
    return [(p, q) for p in range(1, max_order + 1, 2) for q in range(p + 1)]


def wlmp_size(max_order, memory):
    return memory * (max_order + 1) * (max_order + 3) // 4


def _monomials(x, max_order):
    xc = np.conj(x)
    return [x**q * xc ** (p - q) for p, q in wlmp_terms(max_order)]


def build_wlmp_basis(x, max_order, memory):
    """Design matrix of the WLMP.

    Column ``(p, q, m)`` holds ``x[n-m]**q * conj(x[n-m])**(p-q)``; columns
    are ordered by ``p`` (odd, ascending), then ``q``, then ``m``.

    Parameters
    ----------
    x : ComplexSignal or array_like
        Input samples.
    max_order : int
        Largest odd order ``P``.
    memory : int
        Memory length ``M``.

    Returns
    -------
    ndarray, shape (len(x), M (P+1) (P+3) / 4)
    """
    if memory < 1:
        raise ValueError("memory must be >= 1")
    x = as_samples(x)
    mono = _monomials(x, max_order)
    return np.concatenate([delay_matrix(v, memory) for v in mono], axis=1)


@register_block
class WlmpModel(Block):
    """Widely-linear memory polynomial with coefficients ``g[p, q, m]``.

    ``coeffs`` has shape ``(n_terms, memory)`` with rows in
    :func:`wlmp_terms` order.
    """

    kind = "wlmp"

    def __init__(self, max_order, memory, coeffs=None):
        _check_order(max_order)
        if memory < 1:
            raise ValueError("memory must be >= 1")
        self.max_order = int(max_order)
        self._memory = int(memory)
        shape = (len(wlmp_terms(max_order)), self._memory)
        if coeffs is None:
            coeffs = np.zeros(shape, dtype=np.complex128)
        self.coeffs = np.array(coeffs, dtype=np.complex128).reshape(shape)
        self._cache = None

    @property
    def memory(self):
        return self._memory

    @property
    def terms(self):
        return wlmp_terms(self.max_order)

    def coefficient(self, p, q):
        return self.coeffs[self.terms.index((p, q))]

    @property
    def params(self):
        return self.coeffs.ravel().copy()

    @params.setter
    def params(self, value):
        value = np.asarray(value, dtype=np.complex128).reshape(-1)
        if value.size != self.coeffs.size:
            raise ValueError(f"expected {self.coeffs.size} parameters, got {value.size}")
        self.coeffs = value.reshape(self.coeffs.shape).copy()

    def flop_count(self):
        # each monomial is |x|^(2k) * x^a (or its conjugate), x^a by repeated
        # multiplication; only the magnitude powers are shared
        flops = _magnitude_flops([2 * min(q, p - q) for p, q in self.terms])
        for p, q in self.terms:
            flops += CMUL * (abs(2 * q - p) - 1)
            if min(q, p - q) > 0:
                flops += CSCALE
        n = self.coeffs.size
        return flops + CMUL * n + CADD * (n - 1)

    def _forward(self, x):
        basis = build_wlmp_basis(x, self.max_order, self.memory)
        self._cache = (x, basis)
        return basis @ self.coeffs.ravel()

    def _backward(self, a):
        if self._cache is None:
            raise StaleCacheError("wlmp.backward called without a preceding forward")
        (x, basis), self._cache = self._cache, None
        grads = basis.conj().T @ a
        xc = np.conj(x)
        b = np.zeros_like(x)
        for (p, q), g in zip(self.terms, self.coeffs):
            r = np.convolve(a[::-1], np.conj(g))[: a.size][::-1]
            d_x = q * x ** max(q - 1, 0) * xc ** (p - q) if q > 0 else 0.0
            d_xc = (p - q) * x**q * xc ** max(p - q - 1, 0) if p - q > 0 else 0.0
            b += np.conj(r) * d_xc + r * np.conj(d_x)
        return b, grads

    def to_dict(self):
        return {
            "kind": self.kind,
            "max_order": self.max_order,
            "memory": self.memory,
            "params": [[float(v.real), float(v.imag)] for v in self.coeffs.ravel()],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["max_order"], d["memory"], _complex_from_pairs(d["params"]))


def fit_wlmp(x, t, max_order, memory):
    """Least-squares fit of a WLMP mapping `x` to `t`.

    Raises
    ------
    RankDeficientError
        Propagated from :func:`~rfunfold.numerics.solve_least_squares`.
    """
    x = as_samples(x)
    t = as_samples(t)
    if x.size != t.size:
        raise ValueError(f"length mismatch: {x.size} inputs vs {t.size} targets")
    basis = build_wlmp_basis(x, max_order, memory)
    g = solve_least_squares(basis, t)
    return WlmpModel(max_order, memory, g)


def _widely_linear_power_coeffs(k1, k2, p):
    """Coefficients ``c[q]`` with ``z |z|^(p-1) = sum_q c[q] x^q conj(x)^(p-q)``
    for ``z = k1 x + k2 conj(x)`` and odd ``p``."""
    a, b = (p + 1) // 2, (p - 1) // 2
    k1c, k2c = np.conj(k1), np.conj(k2)
    out = np.zeros(p + 1, dtype=np.complex128)
    # z^a = sum_i C(a,i) (k1 x)^i (k2 xc)^(a-i)
    # conj(z)^b = sum_j C(b,j) (k2c x)^j (k1c xc)^(b-j)
    for i in range(a + 1):
        for j in range(b + 1):
            weight = comb(a, i) * comb(b, j)
            out[i + j] += weight * (k1**i * k2 ** (a - i) * k2c**j * k1c ** (b - j))
    return out


def expand_to_wlmp(k1, k2, pa):
    """Expand an IQ-imbalance + odd PA memory polynomial into a WLMP.

    Parameters
    ----------
    k1, k2 : complex
        Widely-linear coefficients.
    pa : MemoryPolynomialLayer or dict
        PA memory polynomial, or a mapping ``{p: taps}`` with odd ``p``.

    Returns
    -------
    WlmpModel
        Model whose forward output equals the cascade output on any input.
    """
    if isinstance(pa, MemoryPolynomialLayer):
        taps = {p: h for p, h in zip(pa.orders, pa.coeffs)}
    else:
        taps = {int(p): np.asarray(h, dtype=np.complex128).reshape(-1) for p, h in pa.items()}
    if any(p % 2 == 0 for p in taps):
        raise ValueError("expansion is defined for odd PA orders only")
    memories = {h.size for h in taps.values()}
    if len(memories) != 1:
        raise ValueError("all PA orders must share one memory length")
    memory = memories.pop()
    model = WlmpModel(max(taps), memory)
    index = {term: i for i, term in enumerate(model.terms)}
    k1, k2 = complex(k1), complex(k2)
    for p, h in taps.items():
        c = _widely_linear_power_coeffs(k1, k2, p)
        for q in range(p + 1):
            model.coeffs[index[(p, q)]] = c[q] * h
    return model


def cascade_to_wlmp(cascade):
    """Expand a model built by :func:`~rfunfold.layers.make_iq_pa_model`."""
    layers = cascade.layers if isinstance(cascade, Cascade) else [cascade]
    if len(layers) == 2 and isinstance(layers[0], WidelyLinearLayer):
        wl, pa = layers
        return expand_to_wlmp(wl.k1, wl.k2, pa)
    if len(layers) == 1 and isinstance(layers[0], MemoryPolynomialLayer):
        return expand_to_wlmp(1.0, 0.0, layers[0])
    raise ValueError("expected [WidelyLinearLayer, MemoryPolynomialLayer] or [MemoryPolynomialLayer]")


@dataclass(frozen=True)
class LmsState:
    weights: np.ndarray
    step_size: float

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.complex128).reshape(-1))


def lms_step(state, basis_row, target):
    """One complex LMS update.

    ``y = w . u``, ``w' = w - step * 0.5 * (y - t) * conj(u)``.
    """
    u = np.asarray(basis_row, dtype=np.complex128).reshape(-1)
    if u.size != state.weights.size:
        raise ValueError(f"basis row has {u.size} entries, weights have {state.weights.size}")
    with np.errstate(over="ignore", invalid="ignore"):
        y = np.dot(state.weights, u)
        w = state.weights - state.step_size * 0.5 * (y - target) * np.conj(u)
    if not np.all(np.isfinite(w)):
        raise NonFiniteError("LMS weights diverged")
    return LmsState(w, state.step_size)


def run_lms(basis, targets, state):
    """Run LMS over the rows of `basis`; returns final state and a priori errors."""
    errors = np.empty(len(targets), dtype=np.complex128)
    for n, (u, t) in enumerate(zip(basis, targets)):
        errors[n] = t - np.dot(state.weights, u)
        state = lms_step(state, u, t)
    return state, errors
