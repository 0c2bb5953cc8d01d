"""Command-line entry point.

Every command reads one JSON config (``--config``), applies dotted-path
overrides (``--set training.learning_rate=0.3``) and writes its artifacts
to ``--out``. Artifacts are byte-identical for identical configs and seeds;
wall-clock times go to a separate ``timing.json``.
"""

import argparse
import copy
import csv
import json
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .datagen import (
    DegenerateSplitError,
    GroundTruth,
    OfdmConfig,
    SignalFormatError,
    default_ground_truth,
    generate_dataset,
    make_manifest,
    read_manifest,
    read_signal,
    split_dataset,
    write_manifest,
    write_signal,
)
from .estimation import WlmpModel, fit_wlmp
from .layers import FLOP_CONVENTION, make_iq_pa_model
from .metrics import cancellation_db, complexity_report, format_complexity
from .numerics import RankDeficientError, RngStream, complex_gaussian, wirtinger_finite_difference
from .training import (
    DivergenceError,
    ModelSpec,
    Normalizer,
    SearchSpace,
    TrainingConfig,
    cost_adjoint,
    init_cascade,
    mse_cost,
    predict,
    run_multi_init,
    search_training_config,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_GRADCHECK = 5

CONFIG_VERSION = 1

DEFAULT_CONFIG = {
    "config_version": CONFIG_VERSION,
    "seed": 0,
    "data": {
        "dir": None,
        "split": 0.9,
        "ofdm": asdict(OfdmConfig()),
        "ground_truth": {"noise_floor_db": -45.0, "pa_memory": 3, "si_taps": 4, "params": None},
    },
    "model": {"max_order": 5, "memory": 13, "iq": True},
    "wlmp": {"max_order": 5, "memory": 13},
    "training": {k: v for k, v in asdict(TrainingConfig(learning_rate=0.3)).items() if k != "seed"},
    "search": {"budget": 0, "learning_rate": [1e-4, 1.0], "batch_sizes": [8, 32, 128, 512], "validation_fraction": 0.1},
    "experiment": {"n_inits": 20},
    "gradcheck": {"points": 10, "samples": 64, "threshold": 1e-6},
}


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


class GradcheckFailure(RuntimeError):
    pass


# -- configuration -----------------------------------------------------------

def _merge(base, update, path=""):
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def _parse_override(text):
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = {}
    cursor = node
    parts = key.split(".")
    for part in parts[:-1]:
        cursor[part] = {}
        cursor = cursor[part]
    cursor[parts[-1]] = value
    return node


def load_config(path=None, overrides=(), seed=None):
    """Defaults, then the config file, then dotted overrides, then ``--seed``."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        if user.get("config_version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {user['config_version']!r}")
        _merge(config, user)
    for text in overrides:
        _merge(config, _parse_override(text))
    if seed is not None:
        config["seed"] = seed
    _validate(config)
    return config


def dumps_config(config):
    return json.dumps(config, indent=2, sort_keys=True) + "\n"


def _validate(config):
    try:
        if not isinstance(config["seed"], int) or config["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not 0.0 < float(config["data"]["split"]) < 1.0:
            raise ConfigError(f"data.split must lie in (0, 1), got {config['data']['split']}")
        _ofdm(config)
        _training(config)
        _model_spec(config)
        for section in ("model", "wlmp"):
            if config[section]["max_order"] % 2 == 0 or config[section]["memory"] < 1:
                raise ConfigError(f"{section}: max_order must be odd and memory >= 1")
        if config["experiment"]["n_inits"] < 1:
            raise ConfigError("experiment.n_inits must be >= 1")
        if config["search"]["budget"] < 0:
            raise ConfigError("search.budget must be >= 0")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def _ofdm(config):
    return OfdmConfig(**config["data"]["ofdm"])


def _training(config):
    known = {f.name for f in fields(TrainingConfig)}
    extra = set(config["training"]) - known
    if extra:
        raise ConfigError(f"unknown training keys {sorted(extra)}")
    return TrainingConfig(seed=config["seed"], **config["training"])


def _model_spec(config, iq=None):
    m = config["model"]
    return ModelSpec(int(m["max_order"]), int(m["memory"]), bool(m["iq"] if iq is None else iq))


def _ground_truth(config):
    g = config["data"]["ground_truth"]
    if g["params"] is not None:
        return GroundTruth.from_dict(g["params"])
    return default_ground_truth(config["seed"], g["noise_floor_db"], g["pa_memory"], g["si_taps"])


# -- data --------------------------------------------------------------------

def _load_pairs(config, memory):
    """Training and test pairs from ``data.dir`` or, if unset, synthesized."""
    split = float(config["data"]["split"])
    data_dir = config["data"]["dir"]
    try:
        if data_dir is None:
            ds = generate_dataset(_ofdm(config), _ground_truth(config), config["seed"], split)
            x, y = ds.x, ds.y
        else:
            manifest = read_manifest(Path(data_dir) / "manifest.json")
            x = read_signal(Path(data_dir) / manifest["files"]["x"])
            y = read_signal(Path(data_dir) / manifest["files"]["y"])
        return split_dataset(x, y, split, memory)
    except (OSError, KeyError, SignalFormatError, DegenerateSplitError, json.JSONDecodeError) as exc:
        raise DataError(str(exc)) from None


# -- artifact writers --------------------------------------------------------

def _write_json(path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_timing(out, seconds):
    _write_json(out / "timing.json", {"wall_clock_s": seconds})


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ----------------------------------------------------------------

def cmd_generate(config, args):
    ofdm, gt = _ofdm(config), _ground_truth(config)
    ds = generate_dataset(ofdm, gt, config["seed"], float(config["data"]["split"]))
    out = _out_dir(args)
    files = {"x": "x.bin", "y": "y.bin"}
    write_signal(out / files["x"], ds.x)
    write_signal(out / files["y"], ds.y)
    write_manifest(out / "manifest.json", make_manifest(ofdm, gt, config["seed"], ds.split, files))
    (out / "config.json").write_text(dumps_config(config))
    print(f"wrote {len(ds.x)} samples to {out}")
    return EXIT_OK


def _fit_wlmp_report(config, train_pair, test_pair):
    w = config["wlmp"]
    norm = Normalizer.fit(train_pair.x, train_pair.y)
    xn = norm.normalize_input(train_pair.x)
    model = fit_wlmp(xn, norm.normalize_output(train_pair.y), w["max_order"], w["memory"])
    y_train = norm.denormalize_output(predict(model, xn))
    y_test = norm.denormalize_output(predict(model, norm.normalize_input(test_pair.x), xn))
    return {
        "label": "wlmp",
        "param_count": model.param_count(),
        "flop_count": model.flop_count(),
        "train_db": cancellation_db(train_pair.y, y_train).c_db,
        "test_db": cancellation_db(test_pair.y, y_test).c_db,
        "model": model.to_dict(),
        "normalizer": norm.to_dict(),
    }


def _print_result(label, train_db, test_db, n_params, n_flops):
    print(f"{label}: train {train_db:.2f} dB, test {test_db:.2f} dB, {n_params} params, {n_flops} FLOPs/sample")


def cmd_fit_wlmp(config, args):
    train_pair, test_pair = _load_pairs(config, config["wlmp"]["memory"])
    start = time.perf_counter()
    report = _fit_wlmp_report(config, train_pair, test_pair)
    elapsed = time.perf_counter() - start
    out = _out_dir(args)
    _write_json(out / "report.json", report)
    _write_csv(out / "epochs.csv", ["epoch", "train_db", "test_db"], [(1, report["train_db"], report["test_db"])])
    (out / "config.json").write_text(dumps_config(config))
    _write_timing(out, elapsed)
    _print_result("WLMP", report["train_db"], report["test_db"], report["param_count"], report["flop_count"])
    return EXIT_OK


def cmd_train_mbnn(config, args):
    if args.no_iq:
        config["model"]["iq"] = False
    spec = _model_spec(config)
    train_pair, test_pair = _load_pairs(config, spec.memory)
    report = train(spec.build(), train_pair.x, train_pair.y, _training(config),
                   test=(test_pair.x, test_pair.y), label="mbnn" if spec.iq else "mbnn_no_iq")
    out = _out_dir(args)
    _write_json(out / "report.json", report.to_dict())
    _write_csv(out / "epochs.csv", ["epoch", "train_db", "test_db"], report.curve_rows())
    (out / "config.json").write_text(dumps_config(config))
    _write_timing(out, report.wall_clock_s)
    _print_result("MB-NN" if spec.iq else "MB-NN w/o IQ", report.final_train_db, report.final_test_db,
                  report.param_count, report.flop_count)
    return EXIT_OK


def cmd_experiment(config, args):
    """Optional search, then multi-init MB-NN runs plus the WLMP baseline."""
    start = time.perf_counter()
    spec = _model_spec(config)
    memory = max(spec.memory, config["wlmp"]["memory"])
    train_pair, test_pair = _load_pairs(config, memory)
    training = _training(config)
    search_doc = None
    s = config["search"]
    if s["budget"] > 0:
        space = SearchSpace(tuple(s["learning_rate"]), tuple(s["batch_sizes"]))
        training, result = search_training_config(spec, train_pair, training, space, s["budget"],
                                                   config["seed"], s["validation_fraction"])
        search_doc = {"best": result.best_config, "best_score": result.best_score,
                      "trials": [{"config": c, "score": v} for c, v in result.trials]}
    summary = run_multi_init(spec, train_pair, (test_pair.x, test_pair.y), training,
                             n_inits=config["experiment"]["n_inits"], jobs=args.jobs, skip_diverged=True)
    wlmp = _fit_wlmp_report(config, train_pair, test_pair)

    out = _out_dir(args)
    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)
    for seed, report in zip(summary.seeds, summary.reports):
        _write_csv(runs_dir / f"seed_{seed}.csv", ["epoch", "train_db", "test_db"], report.curve_rows())
    _write_csv(out / "summary.csv", ["epoch", "mean_train_db", "std_train_db", "mean_test_db", "std_test_db"],
               summary.rows())
    doc = {
        "training": training.to_dict(),
        "model": asdict(spec),
        "seeds": summary.seeds,
        "final_test_db": [r.final_test_db for r in summary.reports],
        "final_train_db": [r.final_train_db for r in summary.reports],
        "mean_final_test_db": float(summary.mean_test_db[-1]),
        "std_final_test_db": float(summary.std_test_db[-1]),
        "mean_final_train_db": float(summary.mean_train_db[-1]),
        "std_final_train_db": float(summary.std_train_db[-1]),
        "param_count": summary.reports[0].param_count,
        "flop_count": summary.reports[0].flop_count,
        "diverged": [{"run": i, "seed": sd, "error": msg} for i, sd, msg in summary.failures],
        "wlmp": {k: wlmp[k] for k in ("train_db", "test_db", "param_count", "flop_count")},
        "search": search_doc,
    }
    _write_json(out / "summary.json", doc)
    (out / "config.json").write_text(dumps_config(config))
    _write_timing(out, time.perf_counter() - start)
    print(f"MB-NN over {len(summary.reports)} inits: test {doc['mean_final_test_db']:.2f} "
          f"+/- {doc['std_final_test_db']:.2f} dB")
    _print_result("WLMP", wlmp["train_db"], wlmp["test_db"], wlmp["param_count"], wlmp["flop_count"])
    if summary.failures:
        print(f"diverged runs: {[i for i, _, _ in summary.failures]}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


def _parameter_groups(model):
    wl, pa = model.layers if len(model.layers) == 2 else (None, model.layers[0])
    groups, offset = [], 0
    if wl is not None:
        groups += [("K1", slice(0, 1)), ("K2", slice(1, 2))]
        offset = 2
    for i, p in enumerate(pa.orders):
        groups.append((f"h{p}", slice(offset + i * pa.memory, offset + (i + 1) * pa.memory)))
    return groups


def gradcheck(spec, seed, points=10, samples=64, corrupt=False):
    """Max relative gradient error per parameter group over random points."""
    rng = RngStream(seed, 20)
    model = spec.build()
    groups = _parameter_groups(model)
    worst = {name: 0.0 for name, _ in groups}
    for _ in range(points):
        init_cascade(model, rng)
        x, t = complex_gaussian(rng, samples), complex_gaussian(rng, samples)
        p0 = model.params
        _, analytic = model.backward(cost_adjoint(model(x), t))
        if corrupt:
            analytic = analytic * (1 + 1e-3)

        def cost(p):
            model.params = p
            return mse_cost(model(x), t)

        numeric = wirtinger_finite_difference(cost, p0)
        model.params = p0
        for name, sl in groups:
            scale = np.max(np.abs(numeric[sl]))
            err = np.max(np.abs(analytic[sl] - numeric[sl])) / scale if scale > 0 else np.max(np.abs(analytic[sl]))
            worst[name] = max(worst[name], float(err))
    return worst


def cmd_gradcheck(config, args):
    spec = _model_spec(config)
    g = config["gradcheck"]
    worst = gradcheck(spec, config["seed"], g["points"], g["samples"], corrupt=args.corrupt_gradient)
    threshold = g["threshold"]
    print(f"{'group':<6}  {'max rel. error':>14}  status")
    for name, err in worst.items():
        print(f"{name:<6}  {err:>14.3e}  {'ok' if err < threshold else 'FAIL'}")
    if args.out:
        out = _out_dir(args)
        _write_json(out / "gradcheck.json", {"model": asdict(spec), "threshold": threshold, "max_rel_error": worst})
    if any(err >= threshold for err in worst.values()):
        raise GradcheckFailure("gradient check failed")
    return EXIT_OK


def cmd_complexity(config, args):
    m, w = config["model"], config["wlmp"]
    rows = complexity_report([
        (f"WLMP P={w['max_order']} M={w['memory']}", WlmpModel(w["max_order"], w["memory"])),
        (f"MB-NN P={m['max_order']} M={m['memory']}", make_iq_pa_model(m["max_order"], m["memory"])),
        ("MB-NN w/o IQ", make_iq_pa_model(m["max_order"], m["memory"], iq=False)),
    ])
    text = format_complexity(rows)
    print(text)
    if args.out:
        out = _out_dir(args)
        _write_json(out / "complexity.json", {"flop_convention": FLOP_CONVENTION, "rows": [asdict(r) for r in rows]})
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "fit-wlmp": cmd_fit_wlmp,
    "train-mbnn": cmd_train_mbnn,
    "experiment": cmd_experiment,
    "gradcheck": cmd_gradcheck,
    "complexity": cmd_complexity,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="rfunfold", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default=None if name in ("gradcheck", "complexity") else "out",
                       help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel runs (experiment only)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path config override, repeatable")
        if name in ("fit-wlmp", "train-mbnn", "experiment"):
            p.add_argument("--data", help="dataset directory (sets data.dir)")
        if name == "train-mbnn":
            p.add_argument("--no-iq", action="store_true", help="drop the IQ-imbalance layer")
        if name == "gradcheck":
            p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.set)
        if getattr(args, "data", None) and args.command != "generate":
            overrides.append(f"data.dir={json.dumps(args.data)}")
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        config = load_config(args.config, overrides, args.seed)
        return COMMANDS[args.command](config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, RankDeficientError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc} (epoch {exc.epoch}, batch {exc.batch}, run {exc.run})", file=sys.stderr)
        return EXIT_DIVERGENCE
    except GradcheckFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_GRADCHECK


if __name__ == "__main__":
    sys.exit(main())
