"""Complex-vector helpers, least squares, seeded randomness and a
finite-difference Wirtinger gradient oracle."""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import solve_triangular


class RankDeficientError(np.linalg.LinAlgError):
    """Raised when a design matrix is numerically rank deficient."""

    def __init__(self, rank, n_cols):
        self.rank = rank
        self.n_cols = n_cols
        super().__init__(f"design matrix has numerical rank {rank} < {n_cols} columns")


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ComplexSignal:
    """Complex baseband samples with their sample rate.

    Parameters
    ----------
    samples : array_like
        Complex baseband amplitudes (dimensionless).
    sample_rate_hz : float
        Sample rate in Hz, strictly positive.
    """

    samples: np.ndarray
    sample_rate_hz: float = 20e6

    def __post_init__(self):
        s = np.ascontiguousarray(self.samples, dtype=np.complex128).reshape(-1)
        if s.size == 0:
            raise ValueError("signal must be non-empty")
        if not np.all(np.isfinite(s)):
            raise ValueError("signal contains non-finite samples")
        if not (np.isfinite(self.sample_rate_hz) and self.sample_rate_hz > 0):
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    def __len__(self):
        return self.samples.size

    def __getitem__(self, item):
        if isinstance(item, slice):
            return ComplexSignal(self.samples[item], self.sample_rate_hz)
        return self.samples[item]

    @property
    def power(self):
        return float(np.mean(np.abs(self.samples) ** 2))


def as_samples(x):
    """Return the complex sample array of a signal or array-like."""
    if isinstance(x, ComplexSignal):
        return x.samples
    return np.asarray(x, dtype=np.complex128).reshape(-1)


def delay_matrix(v, memory):
    """Stack delayed copies of `v` column-wise.

    Row ``n`` holds ``v[n], v[n-1], ..., v[n-memory+1]``; samples before the
    start of `v` are zero.
    """
    v = np.asarray(v)
    padded = np.concatenate([np.zeros(memory - 1, dtype=v.dtype), v])
    return sliding_window_view(padded, memory)[:, ::-1]


@dataclass
class RngStream:
    """Deterministic random source keyed by ``(seed, stream_id)``.

    Distinct stream ids give statistically independent generators for the
    same seed. The underlying bit generator is PCG64, whose output is
    platform independent.
    """

    seed: int
    stream_id: int = 0
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=(int(self.stream_id),))
        self.generator = np.random.default_rng(ss)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, options):
        return options[int(self.generator.integers(len(options)))]


def complex_gaussian(rng, n, variance=1.0):
    """Draw i.i.d. circularly-symmetric complex Gaussian samples.

    Real and imaginary parts are independent, each with variance
    ``variance / 2``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if variance <= 0:
        raise ValueError("variance must be positive")
    scale = np.sqrt(variance / 2.0)
    re = rng.normal(n)
    im = rng.normal(n)
    return scale * (re + 1j * im)


def numerical_rank(s, n_rows):
    """Count singular values above ``eps * n_rows * s_max``."""
    if s.size == 0 or s[0] == 0:
        return 0
    tol = np.finfo(np.float64).eps * n_rows * s[0]
    return int(np.count_nonzero(s > tol))


def solve_least_squares(X, t):
    """Solve ``min ||t - X h||^2`` for complex `X` and `t`.

    Uses a reduced QR factorization followed by a triangular solve.

    Parameters
    ----------
    X : ndarray, shape (N, K)
        Design matrix with ``N >= K`` and full column rank.
    t : ndarray, shape (N,)
        Target vector.

    Returns
    -------
    h : ndarray, shape (K,)
        Least-squares coefficients.

    Raises
    ------
    ValueError
        If the dimensions do not match or ``N < K``.
    RankDeficientError
        If the numerical rank of `X` is below ``K``. The estimated rank is
        available as the ``rank`` attribute.
    """
    X = np.asarray(X, dtype=np.complex128)
    t = np.asarray(t, dtype=np.complex128).reshape(-1)
    if X.ndim != 2:
        raise ValueError("X must be two-dimensional")
    n, k = X.shape
    if t.size != n:
        raise ValueError(f"target length {t.size} does not match {n} rows")
    if n < k:
        raise ValueError(f"underdetermined system: {n} rows < {k} columns")
    q, r = np.linalg.qr(X, mode="reduced")
    s = np.linalg.svd(r, compute_uv=False)
    rank = numerical_rank(s, n)
    if rank < k:
        raise RankDeficientError(rank, k)
    return solve_triangular(r, q.conj().T @ t)


def wirtinger_finite_difference(f, p, step=1e-6):
    """Estimate the conjugate Wirtinger gradient of a real function.

    For each coordinate ``z = a + jb`` this returns
    ``0.5 * (df/da + j df/db)`` using central differences on the real and
    imaginary parts.

    Parameters
    ----------
    f : callable
        Maps a complex vector to a real scalar.
    p : array_like
        Complex point of evaluation.
    step : float
        Finite-difference step applied to real and imaginary parts.

    Returns
    -------
    ndarray
        Complex vector of the same length as `p`.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    p = np.array(p, dtype=np.complex128).reshape(-1)
    out = np.empty_like(p)

    def _eval(v):
        val = f(v)
        if not np.isfinite(val):
            raise NonFiniteError(f"function returned {val}")
        return float(np.real(val))

    for i in range(p.size):
        q = p.copy()
        q[i] = p[i] + step
        fp = _eval(q)
        q[i] = p[i] - step
        fm = _eval(q)
        d_re = (fp - fm) / (2 * step)
        q[i] = p[i] + 1j * step
        fp = _eval(q)
        q[i] = p[i] - 1j * step
        fm = _eval(q)
        d_im = (fp - fm) / (2 * step)
        out[i] = 0.5 * (d_re + 1j * d_im)
    return out


def max_relative_error(actual, expected):
    """Infinity-norm error of `actual` relative to the scale of `expected`."""
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    scale = np.max(np.abs(expected)) if expected.size else 0.0
    err = np.max(np.abs(actual - expected)) if expected.size else 0.0
    if scale == 0.0:
        return float(err)
    return float(err / scale)
