"""``dvgp`` command line: fitting, gradient checks and the experiment harnesses.

Every subcommand writes ``metrics.jsonl`` (one JSON object per optimizer
iteration, flushed as it happens) and ``summary.json`` into ``--out``.
Failures print a JSON error object on stderr and exit nonzero.
"""
import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, fixtures, gradcheck
from ._accel import backend_name
from .models import Dataset, FitOptions, fit_gplvm, fit_sparse_gp, save_model

METRIC_KEYS = ("iter", "elbo", "grad_norm", "alive_workers", "elapsed_ms")


class ParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def ingest_csv(path):
    """Read a numeric CSV whose header names ``x_*`` input and ``y_*`` output columns."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        xcols = [j for j, h in enumerate(header) if h.startswith("x_")]
        ycols = [j for j, h in enumerate(header) if h.startswith("y_")]
        other = [h for h in header if not h.startswith(("x_", "y_"))]
        if other:
            raise ParseError(f"{path}:1: columns must start with x_ or y_, got {other}")
        if not ycols:
            raise ParseError(f"{path}:1: no y_ output columns")
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                bad = next(c for c in row if not _is_float(c))
                raise ParseError(f"{path}:{line}: non-numeric cell {bad!r}") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    table = np.array(rows)
    if not np.all(np.isfinite(table)):
        line = 2 + int(np.argwhere(~np.isfinite(table))[0, 0])
        raise ParseError(f"{path}: non-finite value near line {line}")
    X = table[:, xcols] if xcols else None
    return Dataset(table[:, ycols], X)


def _is_float(c):
    try:
        float(c)
    except ValueError:
        return False
    return True


def load_data(source):
    """A CSV path, or the name of a bundled fixture."""
    p = Path(source)
    if not p.exists() and source in fixtures.BUNDLED:
        p = fixtures.bundled_path(source)
    if not p.exists():
        raise ConfigError(f"data file {source!r} not found (bundled: {sorted(fixtures.BUNDLED)})")
    return ingest_csv(p)


@dataclass
class RunConfig:
    command: str
    mode: str = "gplvm"
    data: str = "gplvm"
    m: int = 10
    q: int = 2
    workers: int = 1
    failure_rate: float = 0.0
    seed: int = 0
    max_iters: int = 500
    out: str = "dvgp-out"
    rates: list = field(default_factory=lambda: [0.0, 0.01, 0.02])
    seeds: int = 10
    instances: int = 100

    def validate(self):
        if self.mode not in ("sgpr", "gplvm"):
            raise ConfigError(f"mode must be sgpr or gplvm, got {self.mode!r}")
        for name in ("m", "q", "workers", "seeds", "instances"):
            if getattr(self, name) < 1:
                raise ConfigError(f"--{name} must be at least 1")
        if self.max_iters < 0:
            raise ConfigError("--max-iters must be non-negative")
        for r in [self.failure_rate, *self.rates]:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"failure rate {r} outside [0, 1]")
        return self


class MetricsWriter:
    """Appends one flushed JSON line per iteration."""

    def __init__(self, path, extra=None):
        self.fh = open(path, "w")
        self.extra = extra or {}

    def __call__(self, rec):
        row = {k: rec[k] for k in METRIC_KEYS}
        row.update(self.extra)
        self.fh.write(json.dumps(row) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _fit_one(cfg, data, rate, seed, metrics):
    opts = FitOptions(max_iters=cfg.max_iters, n_workers=cfg.workers, failure_rate=rate,
                      seed=seed)
    if cfg.mode == "sgpr":
        if not data.is_regression:
            raise ConfigError("sgpr mode needs x_ input columns in the data")
        return fit_sparse_gp(data, cfg.m, opts, callback=metrics)
    return fit_gplvm(data, cfg.q, cfg.m, opts, callback=metrics)


def _model_summary(model):
    return {"elbo": model.elbo, "initial_elbo": model.initial_elbo,
            "iterations": len(model.history), "stop": model.message,
            "ard_weights": model.ard_weights.tolist(), "beta": model.params.beta,
            "sf2": model.params.theta.sf2}


def cmd_fit(cfg, out):
    data = load_data(cfg.data)
    metrics = MetricsWriter(out / "metrics.jsonl")
    try:
        model = _fit_one(cfg, data, cfg.failure_rate, cfg.seed, metrics)
    finally:
        metrics.close()
    save_model(model, out / "model.npz")
    return _model_summary(model)


def cmd_gradcheck(cfg, out):
    """Finite-difference audit: random instances plus one instance from the data."""
    worst = gradcheck.run_suite(n_instances=cfg.instances, seed=cfg.seed)
    summary = {"random_instances": cfg.instances, "blocks": worst}
    if cfg.data:
        errs = gradcheck.data_gradient_errors(load_data(cfg.data), cfg.m, cfg.q, cfg.seed)
        summary["data_blocks"] = errs
        worst = {**worst, **{f"data_{k}": v for k, v in errs.items()}}
    summary["max_relative_error"] = max(worst.values())
    print(f"max relative error {summary['max_relative_error']:.3e}")
    for k in sorted(worst):
        print(f"  {k:12s} {worst[k]:.3e}")
    return summary


def cmd_failure_sweep(cfg, out):
    data = load_data(cfg.data)
    trace_dir = out / "traces"
    trace_dir.mkdir(exist_ok=True)
    finals = {}
    metrics = MetricsWriter(out / "metrics.jsonl")
    try:
        for rate in cfg.rates:
            for seed in range(cfg.seed, cfg.seed + cfg.seeds):
                metrics.extra = {"rate": rate, "seed": seed}
                run = MetricsWriter(trace_dir / f"rate{rate:g}_seed{seed}.jsonl")
                try:
                    model = _fit_one(cfg, data, rate, seed,
                                     lambda rec, run=run: (run(rec), metrics(rec)))
                finally:
                    run.close()
                finals.setdefault(rate, []).append(model.elbo)
                print(f"rate {rate:g} seed {seed}: final elbo {model.elbo:.4f}", flush=True)
    finally:
        metrics.close()
    medians = {f"{r:g}": float(np.median(v)) for r, v in finals.items()}
    ordered = all(np.median(finals[a]) >= np.median(finals[b])
                  for a, b in zip(cfg.rates, cfg.rates[1:]))
    for r, v in medians.items():
        print(f"median final elbo at rate {r}: {v:.4f}")
    return {"final_elbo": {f"{r:g}": v for r, v in finals.items()}, "median_final_elbo": medians,
            "medians_ordered": bool(ordered)}


def cmd_ard_report(cfg, out):
    data = load_data(cfg.data)
    metrics = MetricsWriter(out / "metrics.jsonl")
    try:
        model = _fit_one(cfg, data, cfg.failure_rate, cfg.seed, metrics)
    finally:
        metrics.close()
    w = model.ard_weights
    order = np.argsort(w)[::-1]
    for k in order:
        print(f"  dim {k}: {w[k]:.6g}")
    top = w[order[0]]
    rest = w[order[1:]]
    dominant = bool(np.all(top > 3.0 * rest))
    print("one dominant dimension" if dominant else "no single dominant dimension")
    return {**_model_summary(model), "sorted_dims": order.tolist(), "one_dominant": dominant}


COMMANDS = {"fit": cmd_fit, "gradcheck": cmd_gradcheck, "failure-sweep": cmd_failure_sweep,
            "ard-report": cmd_ard_report}


def build_parser():
    parser = argparse.ArgumentParser(prog="dvgp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dvgp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--mode", choices=["sgpr", "gplvm"], default="gplvm")
        p.add_argument("--data", default=None,
                       help="CSV path or bundled fixture name (%s)" % ", ".join(fixtures.BUNDLED))
        p.add_argument("--m", type=int, default=10, help="number of inducing points")
        p.add_argument("--q", type=int, default=2, help="latent dimension (gplvm)")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--failure-rate", type=float, default=0.0)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--max-iters", type=int, default=500)
        p.add_argument("--out", default="dvgp-out")
        if name == "failure-sweep":
            p.add_argument("--rates", default="0,0.01,0.02", help="comma-separated failure rates")
            p.add_argument("--seeds", type=int, default=10, help="seeds per rate")
        if name == "gradcheck":
            p.add_argument("--instances", type=int, default=100)
    return parser


_DEFAULT_DATA = {"fit": "gplvm", "gradcheck": None, "failure-sweep": "gplvm",
                 "ard-report": "manifold"}


def config_from_args(args):
    kw = {k: v for k, v in vars(args).items() if v is not None}
    kw.setdefault("data", _DEFAULT_DATA[args.command])
    if "rates" in kw:
        try:
            kw["rates"] = [float(r) for r in kw["rates"].split(",") if r.strip()]
        except ValueError:
            raise ConfigError(f"--rates must be comma-separated numbers, got {args.rates!r}")
    if args.command == "ard-report":
        kw["mode"] = "gplvm"
    cfg = RunConfig(**kw)
    if args.command == "gradcheck" and args.data is None:
        cfg.data = None
    return cfg.validate()


def run(cfg):
    """Execute one validated configuration; returns the process exit code."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"command": cfg.command, "config": asdict(cfg), "backend": backend_name(),
               "version": __version__}
    t0 = time.perf_counter()
    try:
        summary["result"] = COMMANDS[cfg.command](cfg, out)
        summary["status"] = "ok"
        return 0
    except Exception as exc:
        summary["status"] = "error"
        summary["error"] = _error_object(exc)
        raise
    finally:
        summary["elapsed_s"] = time.perf_counter() - t0
        with open(out / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, default=float)
            fh.write("\n")


def _error_object(exc):
    return {"error": type(exc).__name__, "message": str(exc)}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        return run(cfg)
    except (ConfigError, ParseError, OSError) as exc:
        print(json.dumps(_error_object(exc)), file=sys.stderr)
        return 2
    except Exception as exc:
        print(json.dumps(_error_object(exc)), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
