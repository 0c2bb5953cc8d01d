"""Training of unfolded cascades: cost, optimizers, normalization,
initialization, the epoch loop, multi-initialization runs and random
hyperparameter search."""

import hashlib
import json
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .layers import Cascade, MemoryPolynomialLayer, WidelyLinearLayer, baseband_power, make_iq_pa_model
from .metrics import cancellation_db
from .numerics import NonFiniteError, RngStream, as_samples, complex_gaussian

STREAM_INIT = 10
STREAM_SHUFFLE = 11
STREAM_SEARCH = 12

REPORT_SCHEMA_VERSION = 1
OPTIMIZERS = ("gd", "ftrl")
INIT_SCHEMES = ("variance_preserving", "explicit")


class DivergenceError(RuntimeError):
    def __init__(self, message, epoch=None, batch=None, run=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.run = run


def _check_lengths(y, t):
    if y.shape != t.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {t.shape}")


def mse_cost(y, t):
    """Mean over samples of ``0.5 * |t - y|^2``."""
    y, t = as_samples(y), as_samples(t)
    _check_lengths(y, t)
    e = t - y
    return float(np.mean(0.5 * (e.real**2 + e.imag**2)))


def cost_adjoint(y, t):
    """``dC/d conj(y)`` of :func:`mse_cost`: ``0.5 * (y - t) / N``."""
    y, t = as_samples(y), as_samples(t)
    _check_lengths(y, t)
    return 0.5 * (y - t) / y.size


def gd_step(params, grads, learning_rate):
    params = np.asarray(params, dtype=np.complex128)
    grads = np.asarray(grads, dtype=np.complex128)
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: {params.shape} vs {grads.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = params - learning_rate * grads
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("parameters became non-finite")
    return out


def _to_real(v):
    return np.concatenate([v.real, v.imag])


def _to_complex(r):
    k = r.size // 2
    return r[:k] + 1j * r[k:]


@dataclass
class FtrlState:
    """Per-coordinate FTRL-Proximal state over real coordinates.

    Complex parameters are split into real and imaginary coordinates
    ``[Re(theta), Im(theta)]``. ``linear`` is stored pre-multiplied by the
    learning rate and initialized consistently with the starting point, so
    a zero gradient leaves the parameters unchanged.
    """

    accumulator: np.ndarray
    linear: np.ndarray
    learning_rate_power: float = -0.5

    @classmethod
    def create(cls, params, initial_accumulator=0.1, learning_rate_power=-0.5):
        if initial_accumulator <= 0:
            raise ValueError("initial_accumulator must be positive")
        if learning_rate_power > 0:
            raise ValueError("learning_rate_power must be <= 0")
        w = _to_real(np.asarray(params, dtype=np.complex128))
        n = np.full(w.size, float(initial_accumulator))
        return cls(n, -(n ** -learning_rate_power) * w, learning_rate_power)


def ftrl_step(state, params, grads, learning_rate):
    """One FTRL-Proximal update without regularization.

    Wirtinger gradients map to coordinate gradients as
    ``dC/dRe = 2 Re(grad)`` and ``dC/dIm = 2 Im(grad)``.
    """
    params = np.asarray(params, dtype=np.complex128)
    grads = np.asarray(grads, dtype=np.complex128)
    if params.shape != grads.shape or 2 * params.size != state.accumulator.size:
        raise ValueError("state, parameter and gradient sizes do not match")
    p = -state.learning_rate_power
    w = _to_real(params)
    g = 2.0 * _to_real(grads)
    n_old = state.accumulator
    n_new = n_old + g * g
    sigma = n_new**p - n_old**p
    z = state.linear + learning_rate * g - sigma * w
    w_new = -z / n_new**p
    if not (np.all(np.isfinite(w_new)) and np.all(np.isfinite(z))):
        raise NonFiniteError("FTRL update produced non-finite values")
    return FtrlState(n_new, z, state.learning_rate_power), _to_complex(w_new)


@dataclass
class Normalizer:
    """Affine map giving unit total power (0.5 per quadrature part).

    With ``center=True`` in :meth:`fit` the training means are removed as
    well. Centering is off by default: the odd-order models have no bias
    path, so shifting the input breaks exact representability.
    """

    input_mean: complex = 0j
    output_mean: complex = 0j
    input_scale: float = 1.0
    output_scale: float = 1.0

    @classmethod
    def fit(cls, x, t, center=False):
        x, t = as_samples(x), as_samples(t)
        mx = complex(np.mean(x)) if center else 0j
        mt = complex(np.mean(t)) if center else 0j
        sx = float(np.sqrt(np.mean(np.abs(x - mx) ** 2)))
        st = float(np.sqrt(np.mean(np.abs(t - mt) ** 2)))
        if sx == 0 or st == 0:
            raise ValueError("cannot normalize a zero-power signal")
        return cls(mx, mt, sx, st)

    def normalize_input(self, x):
        return (as_samples(x) - self.input_mean) / self.input_scale

    def normalize_output(self, t):
        return (as_samples(t) - self.output_mean) / self.output_scale

    def denormalize_input(self, xn):
        return np.asarray(xn) * self.input_scale + self.input_mean

    def denormalize_output(self, yn):
        return np.asarray(yn) * self.output_scale + self.output_mean

    def to_dict(self):
        return {
            "input_mean": [self.input_mean.real, self.input_mean.imag],
            "output_mean": [self.output_mean.real, self.output_mean.imag],
            "input_scale": self.input_scale,
            "output_scale": self.output_scale,
        }


@dataclass(frozen=True)
class ModelSpec:
    """IQ + PA model-based NN description; ``iq=False`` drops the IQ layer."""

    max_order: int = 5
    memory: int = 13
    iq: bool = True

    def build(self):
        return make_iq_pa_model(self.max_order, self.memory, iq=self.iq)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.01
    optimizer: str = "ftrl"
    ftrl_learning_rate_power: float = -0.5
    ftrl_initial_accumulator: float = 0.1
    seed: int = 0
    init_scheme: str = "variance_preserving"
    center: bool = False
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"init_scheme must be one of {INIT_SCHEMES}")

    def to_dict(self):
        return asdict(self)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def init_cascade(model, rng, scheme="variance_preserving", x=None):
    """Randomly initialize an IQ + PA cascade in place and return it.

    The widely-linear layer starts near the identity (``K1 ~ 1``,
    ``K2 ~ 0``). Memory-polynomial taps are complex Gaussian with
    per-order variance ``1 / (n_orders * M * E|phi_p|^2)``, so each
    order contributes equally to a unit output power. If training inputs
    `x` are given, moments are measured on them and the taps are finally
    rescaled so the output power on `x` is exactly one; otherwise unit
    complex-Gaussian input moments ``E|x|^(2p) = p!`` are assumed.
    """
    if scheme == "explicit":
        return model
    if scheme != "variance_preserving":
        raise ValueError(f"unknown init scheme {scheme!r}")
    layers = model.layers if isinstance(model, Cascade) else [model]
    signal = None if x is None else as_samples(x)
    for layer in layers:
        if isinstance(layer, WidelyLinearLayer):
            k = complex_gaussian(rng, 2, 1e-4)
            layer.params = np.array([1.0 + k[0], k[1]])
            if signal is not None:
                signal = layer._forward(signal)
                layer._cache = None
        elif isinstance(layer, MemoryPolynomialLayer):
            n_orders = len(layer.orders)
            coeffs = np.empty_like(layer.coeffs)
            for i, p in enumerate(layer.orders):
                if signal is None:
                    moment = float(math.factorial(p))
                else:
                    moment = float(np.mean(np.abs(baseband_power(signal, p)) ** 2))
                coeffs[i] = complex_gaussian(rng, layer.memory, 1.0 / (n_orders * layer.memory * moment))
            layer.coeffs = coeffs
            if signal is not None:
                out = layer._forward(signal)
                layer._cache = None
                layer.coeffs = coeffs / np.sqrt(np.mean(np.abs(out) ** 2))
                signal = layer._forward(signal)
                layer._cache = None
        else:
            raise TypeError(f"cannot initialize layer of kind {layer.kind!r}")
    return model


def predict(model, x, context=None):
    """Model output on `x`, seeding the memory with trailing `context` samples."""
    x = as_samples(x)
    need = model.memory - 1
    if context is None or need == 0:
        out = model._forward(x)
    else:
        ctx = as_samples(context)[-need:]
        out = model._forward(np.concatenate([ctx, x]))[ctx.size:]
    _clear_caches(model)
    return out


def _clear_caches(model):
    for layer in getattr(model, "layers", [model]):
        if hasattr(layer, "_cache"):
            layer._cache = None


@dataclass
class FitReport:
    train_db: list
    test_db: list
    params: np.ndarray
    param_count: int
    flop_count: int
    config: dict
    fingerprint: str
    model: dict = field(default_factory=dict)
    normalizer: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    label: str = ""

    @property
    def final_train_db(self):
        return self.train_db[-1]

    @property
    def final_test_db(self):
        return self.test_db[-1] if self.test_db else None

    def to_dict(self, include_timing=False):
        doc = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "label": self.label,
            "config": self.config,
            "fingerprint": self.fingerprint,
            "param_count": self.param_count,
            "flop_count": self.flop_count,
            "train_db": [float(v) for v in self.train_db],
            "test_db": [float(v) for v in self.test_db],
            "params": [[float(v.real), float(v.imag)] for v in self.params],
            "model": self.model,
            "normalizer": self.normalizer,
        }
        if include_timing:
            doc["wall_clock_s"] = self.wall_clock_s
        return doc

    def curve_rows(self):
        test = self.test_db if self.test_db else [float("nan")] * len(self.train_db)
        return [(i + 1, tr, te) for i, (tr, te) in enumerate(zip(self.train_db, test))]


def _batch_bounds(n, batch_size):
    starts = np.arange(0, n, batch_size)
    return [(int(s), int(min(s + batch_size, n))) for s in starts]


def train(model, x, t, config, test=None, test_context=None, label=""):
    """Train `model` to map `x` to `t` and record per-epoch cancellation.

    Each epoch visits contiguous mini-batches in shuffled order. A batch is
    evaluated with its true preceding samples as memory context, and only
    the batch's own outputs enter the cost. Cancellation is measured on
    de-normalized signals over the full training and test windows.

    Parameters
    ----------
    model : Cascade
        Model to train in place.
    x, t : array_like
        Training input and target.
    config : TrainingConfig
    test : tuple of array_like, optional
        ``(x_test, t_test)``.
    test_context : array_like, optional
        Input samples immediately preceding ``x_test``. Defaults to the tail
        of `x` when `test` is given.

    Raises
    ------
    DivergenceError
        If the batch cost becomes non-finite or exceeds
        ``config.divergence_factor`` times the first batch cost.
    """
    start_time = time.perf_counter()
    x, t = as_samples(x), as_samples(t)
    if x.size != t.size:
        raise ValueError(f"length mismatch: {x.size} inputs vs {t.size} targets")
    norm = Normalizer.fit(x, t, center=config.center)
    xn, tn = norm.normalize_input(x), norm.normalize_output(t)

    init_cascade(model, RngStream(config.seed, STREAM_INIT), config.init_scheme, xn)
    shuffle_rng = RngStream(config.seed, STREAM_SHUFFLE)
    params = model.params
    ftrl = None
    if config.optimizer == "ftrl":
        ftrl = FtrlState.create(params, config.ftrl_initial_accumulator, config.ftrl_learning_rate_power)

    if test is not None:
        x_test, t_test = as_samples(test[0]), as_samples(test[1])
        ctx = x if test_context is None else as_samples(test_context)
        xn_test_ctx = norm.normalize_input(ctx)

    def evaluate():
        tr = cancellation_db(t, norm.denormalize_output(predict(model, xn))).c_db
        te = None
        if test is not None:
            yn = predict(model, norm.normalize_input(x_test), xn_test_ctx)
            te = cancellation_db(t_test, norm.denormalize_output(yn)).c_db
        return tr, te

    bounds = _batch_bounds(xn.size, config.batch_size)
    context = model.memory - 1
    initial_cost = None
    train_db, test_db = [], []
    for epoch in range(config.epochs):
        for b_idx in shuffle_rng.permutation(len(bounds)):
            s, e = bounds[b_idx]
            ws = max(0, s - context)
            y = model._forward(xn[ws:e])
            adj = np.zeros(e - ws, dtype=np.complex128)
            adj[s - ws:] = cost_adjoint(y[s - ws:], tn[s:e])
            cost = mse_cost(y[s - ws:], tn[s:e])
            if initial_cost is None:
                initial_cost = max(cost, np.finfo(float).tiny)
            if not np.isfinite(cost) or cost > config.divergence_factor * initial_cost:
                _clear_caches(model)
                raise DivergenceError(f"batch cost {cost:.3e} diverged", epoch=epoch, batch=int(b_idx))
            _, grads = model._backward(adj)
            try:
                if ftrl is None:
                    params = gd_step(params, grads, config.learning_rate)
                else:
                    ftrl, params = ftrl_step(ftrl, params, grads, config.learning_rate)
            except NonFiniteError as exc:
                raise DivergenceError(str(exc), epoch=epoch, batch=int(b_idx)) from None
            model.params = params
        tr, te = evaluate()
        if not np.isfinite(tr) and tr != math.inf:
            raise DivergenceError("training cancellation is not finite", epoch=epoch)
        train_db.append(tr)
        if te is not None:
            test_db.append(te)

    return FitReport(
        train_db=train_db,
        test_db=test_db,
        params=model.params,
        param_count=model.param_count(),
        flop_count=model.flop_count(),
        config=config.to_dict(),
        fingerprint=config.fingerprint(),
        model=model.to_dict(),
        normalizer=norm.to_dict(),
        wall_clock_s=time.perf_counter() - start_time,
        label=label,
    )


@dataclass
class MultiInitSummary:
    """Per-epoch statistics over completed runs.

    ``failures`` lists ``(run, seed, message)`` for runs that diverged
    when the runner was asked to skip them.
    """

    seeds: list
    reports: list
    failures: list = field(default_factory=list)

    def _stack(self, attr):
        return np.array([getattr(r, attr) for r in self.reports], dtype=float)

    @property
    def mean_train_db(self):
        return self._stack("train_db").mean(axis=0)

    @staticmethod
    def _std(values):
        # pstdev is exact, so identical runs give exactly zero
        return np.array([statistics.pstdev(column) for column in values.T])

    @property
    def std_train_db(self):
        return self._std(self._stack("train_db"))

    @property
    def mean_test_db(self):
        return self._stack("test_db").mean(axis=0)

    @property
    def std_test_db(self):
        return self._std(self._stack("test_db"))

    def rows(self):
        has_test = bool(self.reports[0].test_db)
        out = []
        for i in range(len(self.reports[0].train_db)):
            row = [i + 1, self.mean_train_db[i], self.std_train_db[i]]
            if has_test:
                row += [self.mean_test_db[i], self.std_test_db[i]]
            out.append(tuple(row))
        return out


def _run_one(args):
    spec, train_pair, test_pair, config, index, skip_diverged = args
    model = spec.build()
    try:
        return train(model, train_pair[0], train_pair[1], config, test=test_pair, label=f"init{index}")
    except DivergenceError as exc:
        exc.run = index
        if skip_diverged:
            return exc
        raise


def run_multi_init(spec, train_pair, test_pair, config, n_inits=20, seeds=None, jobs=1, skip_diverged=False):
    """Train ``n_inits`` independently initialized models.

    Run ``i`` uses seed ``seeds[i]`` (default ``config.seed + i``). Results
    are collected in run order regardless of `jobs`.

    Raises
    ------
    DivergenceError
        From the first diverging run, with ``run`` set to its index, unless
        `skip_diverged` is true; then diverged runs are listed in
        ``failures`` and the error is raised only if every run diverged.
    """
    if seeds is None:
        seeds = [config.seed + i for i in range(n_inits)]
    seeds = [int(s) for s in seeds]
    if len(seeds) < 1:
        raise ValueError("need at least one initialization")
    tasks = [(spec, tuple(train_pair), None if test_pair is None else tuple(test_pair),
              replace(config, seed=s), i, skip_diverged) for i, s in enumerate(seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(task) for task in tasks]
    failures = [(i, seeds[i], str(r)) for i, r in enumerate(results) if isinstance(r, DivergenceError)]
    reports = [r for r in results if not isinstance(r, DivergenceError)]
    if not reports:
        raise results[0]
    return MultiInitSummary([s for i, s in enumerate(seeds) if not isinstance(results[i], DivergenceError)],
                            reports, failures)


@dataclass(frozen=True)
class SearchSpace:
    learning_rate: tuple = (1e-4, 1.0)
    batch_sizes: tuple = (8, 32, 128, 512)

    def sample(self, rng):
        lo, hi = self.learning_rate
        lr = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
        return {"learning_rate": lr, "batch_size": int(rng.choice(self.batch_sizes))}


@dataclass
class SearchResult:
    best_config: dict
    best_score: float
    trials: list


def random_search(evaluate, space=None, budget=10, seed=0):
    """Random search maximizing ``evaluate(learning_rate=..., batch_size=...)``.

    Learning rates are log-uniform, batch sizes uniform over the discrete
    set. Evaluations that raise :class:`DivergenceError` score ``-inf``.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    space = space or SearchSpace()
    if not space.batch_sizes:
        raise ValueError("search space has no batch sizes")
    rng = RngStream(seed, STREAM_SEARCH)
    trials = []
    for _ in range(budget):
        cfg = space.sample(rng)
        try:
            score = float(evaluate(**cfg))
        except DivergenceError:
            score = -math.inf
        trials.append((cfg, score))
    best_cfg, best_score = max(trials, key=lambda item: item[1])
    return SearchResult(best_cfg, best_score, trials)


def search_training_config(spec, train_pair, base_config, space=None, budget=10, seed=0, validation_fraction=0.1):
    """Pick learning rate and batch size on a held-out tail of the training data."""
    x, t = as_samples(train_pair[0]), as_samples(train_pair[1])
    n_fit = int(x.size * (1 - validation_fraction))

    def evaluate(learning_rate, batch_size):
        cfg = replace(base_config, learning_rate=learning_rate, batch_size=batch_size)
        report = train(spec.build(), x[:n_fit], t[:n_fit], cfg, test=(x[n_fit:], t[n_fit:]))
        return report.final_test_db

    result = random_search(evaluate, space, budget, seed)
    return replace(base_config, **result.best_config), result
