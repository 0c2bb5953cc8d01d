"""Self-interference cancellation and complexity reporting."""

import math
from dataclasses import dataclass

import numpy as np

from .layers import FLOP_CONVENTION
from .numerics import as_samples


class ZeroSignalError(ValueError):
    pass


@dataclass(frozen=True)
class CancellationResult:
    c_db: float
    n_samples: int
    residual_power: float
    si_power: float

    @property
    def exact(self):
        return self.residual_power == 0.0


def cancellation_db(y, y_hat):
    """Cancellation ``10 log10(sum |y|^2 / sum |y - y_hat|^2)`` over the window.

    A zero residual yields ``c_db = inf``.

    Raises
    ------
    ValueError
        On length mismatch or empty input.
    ZeroSignalError
        If `y` has zero power.
    """
    y = as_samples(y)
    y_hat = as_samples(y_hat)
    if y.size != y_hat.size:
        raise ValueError(f"length mismatch: {y.size} vs {y_hat.size}")
    if y.size == 0:
        raise ValueError("empty window")
    si_power = float(np.sum(y.real**2 + y.imag**2))
    if si_power == 0.0:
        raise ZeroSignalError("self-interference signal has zero power")
    e = y - y_hat
    residual = float(np.sum(e.real**2 + e.imag**2))
    c_db = math.inf if residual == 0.0 else 10.0 * math.log10(si_power / residual)
    return CancellationResult(c_db, int(y.size), residual, si_power)


@dataclass(frozen=True)
class ComplexityRow:
    name: str
    param_count: int
    flop_count: int
    param_reduction: float
    flop_reduction: float


def _reduction(value, baseline):
    return 0.0 if baseline == 0 else 1.0 - value / baseline


def complexity_report(models):
    """Parameter/FLOP table with reductions relative to the first entry.

    Parameters
    ----------
    models : list
        Entries are models, ``(name, model)`` pairs, or
        ``(name, param_count, flop_count)`` triples.

    Returns
    -------
    list of ComplexityRow
    """
    if not models:
        raise ValueError("need at least one model")
    rows = []
    for entry in models:
        if isinstance(entry, tuple) and len(entry) == 3:
            name, n_params, n_flops = entry
        elif isinstance(entry, tuple):
            name, model = entry
            n_params, n_flops = model.param_count(), model.flop_count()
        else:
            name, n_params, n_flops = type(entry).__name__, entry.param_count(), entry.flop_count()
        rows.append((str(name), int(n_params), int(n_flops)))
    base_p, base_f = rows[0][1], rows[0][2]
    return [ComplexityRow(n, p, f, _reduction(p, base_p), _reduction(f, base_f)) for n, p, f in rows]


def format_complexity(rows):
    width = max(len("model"), *(len(r.name) for r in rows))
    lines = [
        f"{'model':<{width}}  {'params':>7}  {'FLOPs':>7}  {'param red.':>10}  {'FLOP red.':>10}",
    ]
    for r in rows:
        lines.append(
            f"{r.name:<{width}}  {r.param_count:>7d}  {r.flop_count:>7d}  "
            f"{100 * r.param_reduction:>9.1f}%  {100 * r.flop_reduction:>9.1f}%"
        )
    lines.append(f"FLOP convention: {FLOP_CONVENTION}")
    return "\n".join(lines)
