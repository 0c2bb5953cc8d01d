"""Synthetic full-duplex self-interference data.

A QPSK-OFDM transmit signal is passed through IQ imbalance, an odd-order
PA memory polynomial, the SI channel and passive suppression, and receiver
noise is added at a level set relative to the received SI power.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .layers import Cascade, FirFilterLayer, MemoryPolynomialLayer, WidelyLinearLayer
from .numerics import ComplexSignal, RngStream, as_samples, complex_gaussian

STREAM_OFDM = 1
STREAM_GROUND_TRUTH = 2
STREAM_NOISE = 3

SIGNAL_MAGIC = b"RFUNSIG\x00"
SIGNAL_VERSION = 1
_HEADER = struct.Struct("<8sI4x")
_META = struct.Struct("<dQ")
MANIFEST_VERSION = 1

QPSK = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / np.sqrt(2)


class SignalFormatError(ValueError):
    pass


class CorruptHeaderError(SignalFormatError):
    pass


class TruncatedPayloadError(SignalFormatError):
    pass


class EmptySignalError(SignalFormatError):
    pass


class DegenerateSplitError(ValueError):
    pass


@dataclass(frozen=True)
class OfdmConfig:
    active_carriers: int = 1024
    fft_size: int = 2048
    cp_length: int = 512
    n_symbols: int = 8
    bandwidth_hz: float = 10e6
    sample_rate_hz: float = 20e6

    def __post_init__(self):
        if self.active_carriers < 2 or self.active_carriers % 2:
            raise ValueError("active_carriers must be a positive even number")
        if self.active_carriers >= self.fft_size:
            raise ValueError("active_carriers must be below fft_size (DC is left empty)")
        if not 0 <= self.cp_length <= self.fft_size:
            raise ValueError("cp_length must lie in [0, fft_size]")
        if self.n_symbols < 1:
            raise ValueError("n_symbols must be >= 1")
        ratio_rate = self.sample_rate_hz / self.bandwidth_hz
        ratio_bins = self.fft_size / self.active_carriers
        if not math.isclose(ratio_rate, ratio_bins, rel_tol=1e-12):
            raise ValueError("sample_rate_hz / bandwidth_hz must equal fft_size / active_carriers")

    @property
    def length(self):
        return self.n_symbols * (self.fft_size + self.cp_length)

    def carrier_bins(self):
        """FFT bins of the active carriers, centred around an unused DC bin."""
        half = self.active_carriers // 2
        k = np.concatenate([np.arange(-half, 0), np.arange(1, half + 1)])
        return np.mod(k, self.fft_size)


def qpsk_symbols(rng, n):
    """Return ``(indices, points)`` of `n` uniform QPSK symbols."""
    idx = rng.integers(0, 4, size=n)
    return idx, QPSK[idx]


def generate_ofdm(config, rng):
    """QPSK-OFDM baseband frame with cyclic prefix and unit average power."""
    bins = config.carrier_bins()
    _, points = qpsk_symbols(rng, config.n_symbols * bins.size)
    grid = np.zeros((config.n_symbols, config.fft_size), dtype=np.complex128)
    grid[:, bins] = points.reshape(config.n_symbols, bins.size)
    body = np.fft.ifft(grid, axis=1)
    if config.cp_length:
        frames = np.concatenate([body[:, -config.cp_length:], body], axis=1)
    else:
        frames = body
    x = frames.ravel()
    x /= np.sqrt(np.mean(np.abs(x) ** 2))
    return ComplexSignal(x, config.sample_rate_hz)


@dataclass
class GroundTruth:
    """Impairment chain parameters.

    ``pa_coeffs`` has shape ``(len(pa_orders), pa_memory)``. A
    ``noise_floor_db`` of ``None`` disables receiver noise.
    """

    k1: complex = 1.0
    k2: complex = 0.0
    pa_orders: tuple = (1,)
    pa_coeffs: np.ndarray = field(default_factory=lambda: np.ones((1, 1), dtype=np.complex128))
    h_si: np.ndarray = field(default_factory=lambda: np.ones(1, dtype=np.complex128))
    suppression_db: float = 53.0
    noise_floor_db: Optional[float] = -45.0

    def __post_init__(self):
        self.k1, self.k2 = complex(self.k1), complex(self.k2)
        self.pa_orders = tuple(int(p) for p in self.pa_orders)
        self.pa_coeffs = np.array(self.pa_coeffs, dtype=np.complex128).reshape(len(self.pa_orders), -1)
        self.h_si = np.array(self.h_si, dtype=np.complex128).reshape(-1)
        if not abs(self.k1) > abs(self.k2):
            raise ValueError("ground truth requires |K1| > |K2|")
        if self.suppression_db < 0:
            raise ValueError("suppression_db must be >= 0")
        if any(p % 2 == 0 for p in self.pa_orders):
            raise ValueError("PA orders must be odd")

    @property
    def combined_memory(self):
        """Memory of the PA followed by the SI channel."""
        return self.pa_coeffs.shape[1] + self.h_si.size - 1

    def chain(self):
        return Cascade(
            [
                WidelyLinearLayer(self.k1, self.k2),
                MemoryPolynomialLayer(self.pa_orders, self.pa_coeffs.shape[1], self.pa_coeffs),
                FirFilterLayer(self.h_si),
            ]
        )

    def to_dict(self):
        pairs = lambda a: [[float(v.real), float(v.imag)] for v in np.ravel(a)]  # noqa: E731
        return {
            "k1": pairs([self.k1])[0],
            "k2": pairs([self.k2])[0],
            "pa_orders": list(self.pa_orders),
            "pa_memory": int(self.pa_coeffs.shape[1]),
            "pa_coeffs": pairs(self.pa_coeffs),
            "h_si": pairs(self.h_si),
            "suppression_db": self.suppression_db,
            "noise_floor_db": self.noise_floor_db,
        }

    @classmethod
    def from_dict(cls, d):
        c = lambda v: np.asarray(v, dtype=float).reshape(-1, 2) @ np.array([1, 1j])  # noqa: E731
        return cls(
            k1=c(d["k1"])[0],
            k2=c(d["k2"])[0],
            pa_orders=tuple(d["pa_orders"]),
            pa_coeffs=c(d["pa_coeffs"]).reshape(len(d["pa_orders"]), d["pa_memory"]),
            h_si=c(d["h_si"]),
            suppression_db=d["suppression_db"],
            noise_floor_db=d["noise_floor_db"],
        )


def default_ground_truth(seed=0, noise_floor_db=-45.0, pa_memory=3, si_taps=4):
    """Synthetic transceiver with IQ imbalance, a 5th-order PA and a short
    SI channel.

    Tap phases are random (drawn from `seed`); magnitudes are fixed: linear
    gain 1, third-order 0.06, fifth-order 0.01, decaying by 0.3 per PA
    delay and by 0.5 per SI-channel tap.
    """
    rng = RngStream(seed, STREAM_GROUND_TRUTH)
    orders = (1, 3, 5)
    base = np.array([1.0, 0.06, 0.01])
    decay = 0.3 ** np.arange(pa_memory)
    phases = np.exp(2j * np.pi * rng.uniform(size=(len(orders), pa_memory)))
    phases[0, 0] = 1.0
    pa = base[:, None] * decay[None, :] * phases
    si = 0.5 ** np.arange(si_taps) * np.exp(2j * np.pi * rng.uniform(size=si_taps))
    return GroundTruth(
        k1=1.0,
        k2=0.05 * np.exp(1j * np.pi / 6),
        pa_orders=orders,
        pa_coeffs=pa,
        h_si=si,
        suppression_db=53.0,
        noise_floor_db=noise_floor_db,
    )


def apply_ground_truth(x, gt, rng):
    """Pass `x` through the impairment chain of `gt` and add noise.

    Noise power is ``noise_floor_db`` relative to the noiseless received SI
    power.
    """
    samples = as_samples(x)
    clean = 10.0 ** (-gt.suppression_db / 20.0) * gt.chain()(samples)
    if gt.noise_floor_db is not None:
        si_power = np.mean(np.abs(clean) ** 2)
        clean = clean + complex_gaussian(rng, clean.size, si_power * 10.0 ** (gt.noise_floor_db / 10.0))
    rate = x.sample_rate_hz if isinstance(x, ComplexSignal) else 20e6
    return ComplexSignal(clean, rate)


class SignalPair(NamedTuple):
    x: ComplexSignal
    y: ComplexSignal


def split_dataset(x, y, fraction, memory=1):
    """Time-ordered split into a training prefix and a test suffix."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
    if len(x) != len(y):
        raise ValueError("x and y must have equal length")
    n_train = int(len(x) * fraction)
    if n_train < memory or len(x) - n_train < memory:
        raise DegenerateSplitError(
            f"split of {len(x)} samples at {fraction} leaves a side shorter than memory {memory}"
        )
    return SignalPair(x[:n_train], y[:n_train]), SignalPair(x[n_train:], y[n_train:])


@dataclass
class Dataset:
    x: ComplexSignal
    y: ComplexSignal
    split: float = 0.9

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("x and y must have equal length")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must lie in (0, 1)")

    def splits(self, memory=1):
        return split_dataset(self.x, self.y, self.split, memory)

    @property
    def train(self):
        return self.splits()[0]

    @property
    def test(self):
        return self.splits()[1]


def generate_dataset(config=None, ground_truth=None, seed=0, split=0.9):
    """Deterministic dataset for ``(config, ground_truth, seed)``."""
    config = config or OfdmConfig()
    ground_truth = ground_truth or default_ground_truth(seed)
    x = generate_ofdm(config, RngStream(seed, STREAM_OFDM))
    y = apply_ground_truth(x, ground_truth, RngStream(seed, STREAM_NOISE))
    return Dataset(x, y, split)


def write_signal(path, signal):
    """Write `signal` as binary, or as CSV when `path` ends in ``.csv``."""
    path = str(path)
    if path.endswith(".csv"):
        return write_signal_csv(path, signal)
    s = as_samples(signal)
    rate = signal.sample_rate_hz if isinstance(signal, ComplexSignal) else 20e6
    payload = np.empty(2 * s.size, dtype="<f8")
    payload[0::2] = s.real
    payload[1::2] = s.imag
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SIGNAL_MAGIC, SIGNAL_VERSION))
        fh.write(_META.pack(rate, s.size))
        fh.write(payload.tobytes())


def read_signal(path, sample_rate_hz=20e6):
    """Read a signal written by :func:`write_signal`.

    `sample_rate_hz` is only used for CSV files, which carry no rate.
    """
    path = str(path)
    if path.endswith(".csv"):
        return read_signal_csv(path, sample_rate_hz)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size + _META.size:
        raise CorruptHeaderError(f"{path}: file too short for a signal header")
    magic, version = _HEADER.unpack_from(blob, 0)
    if magic != SIGNAL_MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic {magic!r}")
    if version != SIGNAL_VERSION:
        raise CorruptHeaderError(f"{path}: unsupported version {version}")
    rate, count = _META.unpack_from(blob, _HEADER.size)
    if not (math.isfinite(rate) and rate > 0):
        raise CorruptHeaderError(f"{path}: invalid sample rate {rate}")
    if count == 0:
        raise EmptySignalError(f"{path}: signal has no samples")
    start = _HEADER.size + _META.size
    expected = 16 * count
    if len(blob) - start < expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} payload bytes, found {len(blob) - start}")
    if len(blob) - start > expected:
        raise CorruptHeaderError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(blob, dtype="<f8", count=2 * count, offset=start)
    return ComplexSignal(data[0::2] + 1j * data[1::2], rate)


def write_signal_csv(path, signal):
    s = as_samples(signal)
    with open(path, "w") as fh:
        fh.write("re,im\n")
        for v in s:
            fh.write(f"{float(v.real)!r},{float(v.imag)!r}\n")


def read_signal_csv(path, sample_rate_hz=20e6):
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "re,im":
            raise CorruptHeaderError(f"{path}: expected CSV header 're,im', found {header!r}")
        rows = [line.split(",") for line in fh if line.strip()]
    if not rows:
        raise EmptySignalError(f"{path}: signal has no samples")
    try:
        data = np.array([[float(a), float(b)] for a, b in rows])
    except ValueError as exc:
        raise TruncatedPayloadError(f"{path}: malformed CSV row ({exc})") from None
    return ComplexSignal(data[:, 0] + 1j * data[:, 1], sample_rate_hz)


def make_manifest(config, ground_truth, seed, split, files, include_ground_truth=True):
    doc = {
        "format_version": MANIFEST_VERSION,
        "seed": int(seed),
        "split": float(split),
        "ofdm": asdict(config),
        "files": files,
    }
    if include_ground_truth:
        doc["ground_truth"] = ground_truth.to_dict()
    return doc


def write_manifest(path, manifest):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != MANIFEST_VERSION:
        raise SignalFormatError(f"{path}: unsupported manifest version {doc.get('format_version')!r}")
    return doc
