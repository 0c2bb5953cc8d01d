"""Parameterized non-linear blocks with Wirtinger backward passes.

Every block maps a complex sequence to a complex sequence of equal length.
Backward passes propagate a single adjoint ``a[n] = dC/d conj(y[n])`` of a
real cost ``C``. Since ``C`` is real, ``dC/dy[n] = conj(a[n])``, so for a
block ``y = f(x, conj(x))`` the input adjoint is::

    dC/d conj(x) = conj(a) * df/d conj(x) + a * conj(df/dx)

and for a parameter ``theta`` the returned gradient is ``dC/d conj(theta)``,
the quantity used by the update ``theta <- theta - lr * grad``.

Samples before the start of the input are treated as zero.
"""

import json

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import ComplexSignal, as_samples, delay_matrix

FORMAT_VERSION = 1

FLOP_CONVENTION = (
    "real FLOPs per output sample: complex multiply = 6, complex add = 2, "
    "complex-by-real scale = 2, |z|^2 = 3, real multiply/add/sqrt = 1, "
    "conjugation = 0; |z|^k built incrementally and shared across branches; "
    "complex powers z^k by repeated multiplication, not shared between terms; "
    "per-sample nonlinear terms computed once and reused along the delay line"
)

CMUL, CADD, CSCALE, ABS2 = 6, 2, 2, 3


class StaleCacheError(RuntimeError):
    """Raised when backward is called without a matching forward."""


def _magnitude_flops(exponents):
    """FLOPs to build all ``|z|**e`` for the given positive exponents."""
    exponents = {int(e) for e in exponents if e > 0}
    if not exponents:
        return 0
    flops = ABS2
    evens = [e for e in exponents if e % 2 == 0]
    odds = [e for e in exponents if e % 2 == 1]
    if evens:
        flops += max(evens) // 2 - 1
    if odds:
        flops += 1 + (max(odds) - 1) // 2
    return flops


def _baseband_partials(x, p):
    """Partials of ``x |x|**(p-1)`` with respect to ``x`` and ``conj(x)``.

    The conjugate partial is written as ``(p-1)/2 * x**2 * |x|**(p-3)``,
    which is finite at ``x = 0`` for ``p >= 3`` and identically zero for
    ``p = 1``.
    """
    mag = np.abs(x)
    d_x = 0.5 * (p + 1) * mag ** (p - 1)
    if p == 1:
        d_xc = np.zeros_like(x)
    elif p >= 3:
        d_xc = 0.5 * (p - 1) * x * x * mag ** (p - 3)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            d_xc = np.where(mag > 0, 0.5 * (p - 1) * x * x / mag, 0.0)
    return d_x, d_xc


def baseband_power(x, p):
    """Evaluate ``x |x|**(p-1)``."""
    if p == 1:
        return np.array(x, dtype=np.complex128)
    if p % 2 == 1:
        return x * (x.real**2 + x.imag**2) ** ((p - 1) // 2)
    return x * np.abs(x) ** (p - 1)


def _correlate_taps(a, h):
    """Return ``r[k] = sum_m a[k+m] * conj(h[m])`` for ``k < len(a)``."""
    n = a.size
    return np.convolve(a[::-1], np.conj(h))[:n][::-1]


class Block:
    """Common interface shared by layers and composed models."""

    kind = "block"

    @property
    def memory(self):
        return 1

    @property
    def params(self):
        return np.zeros(0, dtype=np.complex128)

    @params.setter
    def params(self, value):
        if np.asarray(value).size != 0:
            raise ValueError(f"{self.kind} has no parameters")

    def param_count(self):
        return int(self.params.size)

    def flop_count(self):
        raise NotImplementedError

    def forward(self, x):
        """Evaluate the block on `x` and cache what backward needs.

        Accepts a :class:`ComplexSignal` (returned type matches) or any
        complex array-like.
        """
        samples = as_samples(x)
        if samples.size == 0:
            raise ValueError("input must be non-empty")
        y = self._forward(samples)
        if isinstance(x, ComplexSignal):
            return ComplexSignal(y, x.sample_rate_hz)
        return y

    __call__ = forward

    def backward(self, adjoint):
        """Propagate ``dC/d conj(output)`` back through the block.

        Returns
        -------
        input_adjoint : ndarray
            ``dC/d conj(input)``.
        grads : ndarray
            ``dC/d conj(theta)`` in the order of :attr:`params`.
        """
        adjoint = np.asarray(adjoint, dtype=np.complex128).reshape(-1)
        return self._backward(adjoint)

    def _forward(self, x):
        raise NotImplementedError

    def _backward(self, a):
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError


class _Layer(Block):
    _cache = None

    def _take_cache(self, n):
        if self._cache is None:
            raise StaleCacheError(f"{self.kind}.backward called without a preceding forward")
        cache, self._cache = self._cache, None
        if cache[0].shape[0] != n:
            raise ValueError(f"adjoint length {n} does not match cached forward length {cache[0].shape[0]}")
        return cache

    def _params_dict(self):
        return [[float(v.real), float(v.imag)] for v in self.params]


def _complex_from_pairs(pairs):
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    return arr[:, 0] + 1j * arr[:, 1]


class FirFilterLayer(_Layer):
    """Linear time-invariant filter ``y[n] = sum_m h[m] x[n-m]``."""

    kind = "fir"

    def __init__(self, taps=None, memory=None):
        if taps is None:
            if memory is None or memory < 1:
                raise ValueError("memory must be >= 1")
            taps = np.zeros(memory, dtype=np.complex128)
            taps[0] = 1.0
        self.taps = np.array(taps, dtype=np.complex128).reshape(-1)
        if self.taps.size < 1:
            raise ValueError("memory must be >= 1")

    @property
    def memory(self):
        return self.taps.size

    @property
    def params(self):
        return self.taps.copy()

    @params.setter
    def params(self, value):
        value = np.asarray(value, dtype=np.complex128).reshape(-1)
        if value.size != self.taps.size:
            raise ValueError(f"expected {self.taps.size} parameters, got {value.size}")
        self.taps = value.copy()

    def flop_count(self):
        m = self.memory
        return CMUL * m + CADD * (m - 1)

    def _forward(self, x):
        lag = delay_matrix(x, self.memory)
        self._cache = (lag,)
        return lag @ self.taps

    def _backward(self, a):
        (lag,) = self._take_cache(a.size)
        grads = lag.conj().T @ a
        return _correlate_taps(a, self.taps), grads

    def to_dict(self):
        return {"kind": self.kind, "memory": self.memory, "params": self._params_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(_complex_from_pairs(d["params"]))


class StaticPowerLayer(_Layer):
    """Memoryless power non-linearity without trainable parameters.

    ``mode="raw_power"`` computes ``z**p``; ``mode="baseband"`` computes
    ``z |z|**(p-1)``.
    """

    kind = "static_power"
    MODES = ("raw_power", "baseband")

    def __init__(self, exponent, mode="raw_power"):
        if int(exponent) != exponent or exponent < 1:
            raise ValueError("exponent must be a positive integer")
        if mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}")
        self.exponent = int(exponent)
        self.mode = mode

    def flop_count(self):
        p = self.exponent
        if self.mode == "raw_power":
            return CMUL * (p - 1)
        return _magnitude_flops([p - 1]) + (CSCALE if p > 1 else 0)

    def _forward(self, x):
        p = self.exponent
        self._cache = (x,)
        if self.mode == "raw_power":
            return x**p
        return baseband_power(x, p)

    def _backward(self, a):
        (x,) = self._take_cache(a.size)
        p = self.exponent
        if self.mode == "raw_power":
            d_x = p * x ** (p - 1)
            return a * np.conj(d_x), np.zeros(0, dtype=np.complex128)
        d_x, d_xc = _baseband_partials(x, p)
        return np.conj(a) * d_xc + a * d_x, np.zeros(0, dtype=np.complex128)

    def to_dict(self):
        return {"kind": self.kind, "exponent": self.exponent, "mode": self.mode}

    @classmethod
    def from_dict(cls, d):
        return cls(d["exponent"], d["mode"])


class WidelyLinearLayer(_Layer):
    """IQ-imbalance map ``y[n] = K1 x[n] + K2 conj(x[n])``."""

    kind = "widely_linear"

    def __init__(self, k1=1.0, k2=0.0):
        self.k1 = complex(k1)
        self.k2 = complex(k2)

    @property
    def params(self):
        return np.array([self.k1, self.k2], dtype=np.complex128)

    @params.setter
    def params(self, value):
        value = np.asarray(value, dtype=np.complex128).reshape(-1)
        if value.size != 2:
            raise ValueError(f"expected 2 parameters, got {value.size}")
        self.k1, self.k2 = complex(value[0]), complex(value[1])

    def flop_count(self):
        return 2 * CMUL + CADD

    def _forward(self, x):
        self._cache = (x,)
        return self.k1 * x + self.k2 * np.conj(x)

    def _backward(self, a):
        (x,) = self._take_cache(a.size)
        grads = np.array([np.vdot(x, a), np.sum(a * x)])
        return a * np.conj(self.k1) + np.conj(a) * self.k2, grads

    def to_dict(self):
        return {"kind": self.kind, "params": self._params_dict()}

    @classmethod
    def from_dict(cls, d):
        k1, k2 = _complex_from_pairs(d["params"])
        return cls(k1, k2)


class MemoryPolynomialLayer(_Layer):
    """Memory polynomial ``y[n] = sum_p sum_m h_p[m] x[n-m] |x[n-m]|**(p-1)``.

    Parameters
    ----------
    orders : sequence of int
        Active orders ``p``.
    memory : int
        Number of taps ``M`` per order.
    coeffs : array_like, optional
        Shape ``(len(orders), memory)``. Defaults to a unit linear tap.
    """

    kind = "memory_polynomial"

    def __init__(self, orders, memory, coeffs=None):
        orders = tuple(int(p) for p in orders)
        if not orders or min(orders) < 1 or len(set(orders)) != len(orders):
            raise ValueError("orders must be distinct positive integers")
        if memory < 1:
            raise ValueError("memory must be >= 1")
        self.orders = tuple(sorted(orders))
        self._memory = int(memory)
        if coeffs is None:
            coeffs = np.zeros((len(self.orders), self._memory), dtype=np.complex128)
            if 1 in self.orders:
                coeffs[self.orders.index(1), 0] = 1.0
        self.coeffs = np.array(coeffs, dtype=np.complex128).reshape(len(self.orders), self._memory)

    @classmethod
    def full(cls, max_order, memory, coeffs=None):
        return cls(range(1, max_order + 1), memory, coeffs)

    @classmethod
    def odd(cls, max_order, memory, coeffs=None):
        if max_order % 2 == 0:
            raise ValueError("odd memory polynomial needs an odd max order")
        return cls(range(1, max_order + 1, 2), memory, coeffs)

    @property
    def memory(self):
        return self._memory

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
        n_terms = len(self.orders) * self.memory
        basis = _magnitude_flops([p - 1 for p in self.orders])
        basis += CSCALE * sum(1 for p in self.orders if p > 1)
        return basis + CMUL * n_terms + CADD * (n_terms - 1)

    def basis(self, x):
        return np.stack([baseband_power(x, p) for p in self.orders])

    def _forward(self, x):
        phi = self.basis(x)
        n_orders, m = phi.shape[0], self.memory
        padded = np.concatenate([np.zeros((n_orders, m - 1), dtype=phi.dtype), phi], axis=1)
        # columns ordered by order, then delay
        lag = sliding_window_view(padded, m, axis=1)[:, :, ::-1].transpose(1, 0, 2).reshape(x.size, -1)
        self._cache = (x, lag)
        return lag @ self.coeffs.ravel()

    def _backward(self, a):
        x, lag = self._take_cache(a.size)
        grads = lag.conj().T @ a
        m = self.memory
        # r[k, i] = sum_m a[k+m] conj(h_i[m])
        ahead = sliding_window_view(np.concatenate([a, np.zeros(m - 1, dtype=a.dtype)]), m)
        r = ahead @ self.coeffs.conj().T
        b = np.zeros_like(x)
        for i, p in enumerate(self.orders):
            d_x, d_xc = _baseband_partials(x, p)
            b += np.conj(r[:, i]) * d_xc + r[:, i] * d_x
        return b, grads

    def to_dict(self):
        return {
            "kind": self.kind,
            "orders": list(self.orders),
            "memory": self.memory,
            "params": self._params_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        coeffs = _complex_from_pairs(d["params"]).reshape(len(d["orders"]), d["memory"])
        return cls(d["orders"], d["memory"], coeffs)


class Cascade(Block):
    """Serial composition; the output of layer ``i`` feeds layer ``i+1``."""

    kind = "cascade"

    def __init__(self, layers):
        self.layers = list(layers)
        if not self.layers:
            raise ValueError("cascade needs at least one layer")

    @property
    def memory(self):
        return sum(layer.memory - 1 for layer in self.layers) + 1

    def _sizes(self):
        return [layer.param_count() for layer in self.layers]

    @property
    def params(self):
        parts = [layer.params for layer in self.layers]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.complex128)

    @params.setter
    def params(self, value):
        value = np.asarray(value, dtype=np.complex128).reshape(-1)
        sizes = self._sizes()
        if value.size != sum(sizes):
            raise ValueError(f"expected {sum(sizes)} parameters, got {value.size}")
        offset = 0
        for layer, n in zip(self.layers, sizes):
            layer.params = value[offset:offset + n]
            offset += n

    def param_groups(self):
        """Return ``(name, slice)`` pairs locating each layer's parameters."""
        groups, offset = [], 0
        for i, (layer, n) in enumerate(zip(self.layers, self._sizes())):
            if n:
                groups.append((f"{i}:{layer.kind}", slice(offset, offset + n)))
            offset += n
        return groups

    def flop_count(self):
        return sum(layer.flop_count() for layer in self.layers)

    def _forward(self, x):
        for layer in self.layers:
            x = layer._forward(x)
        return x

    def _backward(self, a):
        grads = []
        for layer in reversed(self.layers):
            a, g = layer._backward(a)
            grads.append(g)
        return a, np.concatenate(grads[::-1])

    def to_dict(self):
        return {"kind": self.kind, "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls([block_from_dict(item) for item in d["layers"]])


class ParallelSumModel(Block):
    """Branches fed with the same input whose outputs are summed."""

    kind = "parallel_sum"

    def __init__(self, branches):
        self.branches = [b if isinstance(b, Block) else Cascade(b) for b in branches]
        if not self.branches:
            raise ValueError("need at least one branch")

    @property
    def memory(self):
        return max(b.memory for b in self.branches)

    @property
    def params(self):
        return np.concatenate([b.params for b in self.branches])

    @params.setter
    def params(self, value):
        value = np.asarray(value, dtype=np.complex128).reshape(-1)
        sizes = [b.param_count() for b in self.branches]
        if value.size != sum(sizes):
            raise ValueError(f"expected {sum(sizes)} parameters, got {value.size}")
        offset = 0
        for b, n in zip(self.branches, sizes):
            b.params = value[offset:offset + n]
            offset += n

    def flop_count(self):
        return sum(b.flop_count() for b in self.branches) + CADD * (len(self.branches) - 1)

    def _forward(self, x):
        out = self.branches[0]._forward(x)
        for b in self.branches[1:]:
            out = out + b._forward(x)
        return out

    def _backward(self, a):
        b_in, grads = None, []
        for b in self.branches:
            adj, g = b._backward(a)
            b_in = adj if b_in is None else b_in + adj
            grads.append(g)
        return b_in, np.concatenate(grads)

    def to_dict(self):
        return {"kind": self.kind, "branches": [b.to_dict() for b in self.branches]}

    @classmethod
    def from_dict(cls, d):
        return cls([block_from_dict(item) for item in d["branches"]])


_REGISTRY = {
    cls.kind: cls
    for cls in (FirFilterLayer, StaticPowerLayer, WidelyLinearLayer, MemoryPolynomialLayer, Cascade, ParallelSumModel)
}


def register_block(cls):
    _REGISTRY[cls.kind] = cls
    return cls


def block_from_dict(d):
    try:
        cls = _REGISTRY[d["kind"]]
    except KeyError:
        raise ValueError(f"unknown block kind {d.get('kind')!r}") from None
    return cls.from_dict(d)


def dumps_model(model):
    """Serialize a model to JSON text with complex values as ``[re, im]``."""
    doc = {"format_version": FORMAT_VERSION, "model": model.to_dict()}
    return json.dumps(doc, indent=2)


def loads_model(text):
    doc = json.loads(text)
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version!r}")
    return block_from_dict(doc["model"])


def save_model(model, path):
    with open(path, "w") as fh:
        fh.write(dumps_model(model))
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        return loads_model(fh.read())


def make_iq_pa_model(max_order, memory, iq=True, k1=1.0, k2=0.0, coeffs=None):
    """Unfolded IQ-imbalance + odd-order PA memory polynomial cascade.

    With ``iq=False`` the widely-linear layer is omitted.
    """
    pa = MemoryPolynomialLayer.odd(max_order, memory, coeffs)
    if iq:
        return Cascade([WidelyLinearLayer(k1, k2), pa])
    return Cascade([pa])


CLASSIC_KINDS = ("wiener", "hammerstein", "hammerstein_wiener", "parallel_hammerstein")


def make_classic_model(kind, memory, order, q_order=1, taps=None, mode="raw_power"):
    """Build one of the block-structured classic models.

    Parameters
    ----------
    kind : {"wiener", "hammerstein", "hammerstein_wiener", "parallel_hammerstein"}
    memory : int
        Filter length ``M``.
    order : int
        Power ``P`` of the static non-linearity (maximum order for the
        parallel model).
    q_order : int
        Output power ``Q`` of the Hammerstein-Wiener model.
    taps : array_like, optional
        Filter taps; shape ``(order, memory)`` for the parallel model.
        Defaults to unit impulses.
    mode : {"raw_power", "baseband"}
        Form of the static non-linearities.
    """
    if kind not in CLASSIC_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {CLASSIC_KINDS}")
    if memory < 1 or order < 1 or q_order < 1:
        raise ValueError("memory, order and q_order must be >= 1")

    def fir(h):
        return FirFilterLayer(h) if h is not None else FirFilterLayer(memory=memory)

    if kind == "wiener":
        return Cascade([fir(taps), StaticPowerLayer(order, mode)])
    if kind == "hammerstein":
        return Cascade([StaticPowerLayer(order, mode), fir(taps)])
    if kind == "hammerstein_wiener":
        return Cascade([StaticPowerLayer(order, mode), fir(taps), StaticPowerLayer(q_order, mode)])
    rows = [None] * order if taps is None else np.asarray(taps, dtype=np.complex128).reshape(order, memory)
    return ParallelSumModel(
        [Cascade([StaticPowerLayer(p, mode), fir(h)]) for p, h in zip(range(1, order + 1), rows)]
    )


def param_count(model):
    """Number of complex-valued trainable parameters."""
    return model.param_count()


def flop_count(model):
    """Real FLOPs per output sample under :data:`FLOP_CONVENTION`."""
    return model.flop_count()
