"""Command-line entry point: ``streamopt <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 every replication
diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .harness import ConfigError, ExperimentConfig, preset, run_experiment, run_median_experiment
from .schedules import ScheduleParams, UncertaintyParams
from .streams import GeneratorSpec, Innovation, export_series_csv, generate_series
from .theory import (
    BoundParams,
    HypothesisError,
    bound_curve,
    delta_recursion,
    fit_decay_exponent,
    noise_exponent,
    verify_ar1_drift,
)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

BOUND_PRESETS = {
    "thm1-default": {
        "mu": 1.0, "d_nu": 1.0, "b_nu": 1.0, "c_kappa": 1.0, "delta0": 1.0,
        "uncertainty": {"nu": 1.0, "sigma": 0.5, "c_sigma": 1.0},
        "schedule": {"c_gamma": 1.0, "alpha": 2 / 3, "beta": 0.0, "c_rho": 64, "rho": 0.5},
        "horizon": 2000,
    },
    "thm1-constant-batch": {
        "mu": 1.0, "d_nu": 0.25, "b_nu": 1.0, "c_kappa": 1.0, "delta0": 1.0,
        "uncertainty": {"nu": 1.0, "sigma": 0.5, "c_sigma": 1.0},
        "schedule": {"c_gamma": 1.0, "alpha": 2 / 3, "beta": 0.0, "c_rho": 64, "rho": 0.0},
        "horizon": 2000,
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _load_config(args) -> dict:
    if args.config and args.preset:
        raise ConfigError("--config and --preset are mutually exclusive")
    if args.config:
        try:
            with open(args.config) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"config: cannot read {args.config} ({exc.strerror})") from None
        if not isinstance(d, dict):
            raise ConfigError("config: must be a JSON object")
    elif args.preset:
        d = preset(args.preset)
    else:
        raise ConfigError("one of --config or --preset is required")
    if args.seed is not None:
        d["seed"] = args.seed
    if args.reps is not None:
        d["replications"] = args.reps
    if getattr(args, "horizon", None) is not None:
        d["horizon"] = args.horizon
    if args.out:
        out = Path(args.out)
        d["output"] = {"csv": str(out), "json": str(out.with_suffix(".json"))}
    return d


def _report(table, out) -> int:
    table.write()
    for v in table.variants:
        s = v.slope_last["slope"] if v.slope_last else math.nan
        a = v.slope_avg["slope"] if v.slope_avg else math.nan
        out.write(f"{v.label}: reps_used={v.reps_used} diverged={v.diverged} slope_last={s:.4f} slope_avg={a:.4f}\n")
    if table.config.csv_path:
        out.write(f"wrote {table.config.csv_path}\n")
    return EXIT_DIVERGED if table.all_diverged else EXIT_OK


def cmd_run(args, out) -> int:
    cfg = ExperimentConfig.from_dict(_load_config(args))
    return _report(run_experiment(cfg), out)


def cmd_median(args, out) -> int:
    d = _load_config(args)
    if args.data:
        model = dict(d.get("model") or {})
        model.update(source="csv", path=args.data)
        if args.timestamp_column:
            model["timestamp_column"] = args.timestamp_column
        d["model"] = model
    cfg = ExperimentConfig.from_dict(d)
    return _report(run_median_experiment(cfg), out)


def cmd_simulate(args, out) -> int:
    try:
        inn = Innovation(args.innovation, df=args.df, hurst=args.hurst)
        spec = GeneratorSpec(args.kind, theta_star=args.theta_star, phi_star=args.phi_star, alpha0=args.alpha0,
                             alpha1=args.alpha1, innovation=inn, dimension=args.dimension, seed=args.seed or 0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    series = generate_series(spec, args.length)
    if args.out:
        export_series_csv(args.out, series)
        out.write(f"wrote {args.out}\n")
    else:
        out.write(f"generated {len(series)} observations; pass --out to save them\n")
    return EXIT_OK


def _bound_params(d: dict):
    try:
        horizon = int(d.pop("horizon", 1000))
        unc = UncertaintyParams(**d.pop("uncertainty", {}))
        sched = ScheduleParams(**d.pop("schedule", {}))
        return BoundParams(uncertainty=unc, schedule=sched, **d), horizon
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bound config: {exc}") from None


def cmd_bound(args, out) -> int:
    if args.preset:
        if args.preset not in BOUND_PRESETS:
            raise ConfigError(f"preset: unknown bound preset {args.preset!r}; available: {sorted(BOUND_PRESETS)}")
        d = json.loads(json.dumps(BOUND_PRESETS[args.preset]))
    elif args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: {exc}") from None
    else:
        raise ConfigError("one of --config or --preset is required")
    p, horizon = _bound_params(d)
    if args.horizon is not None:
        horizon = args.horizon
    try:
        curves = OrderedDict((k, bound_curve(p, horizon, k)) for k in ("total", "init_term", "bias_term", "noise_term"))
    except HypothesisError as exc:
        raise ConfigError(f"bound: {exc}") from None
    rec = delta_recursion(p, horizon)
    n = curves["total"].n
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["N", "total", "init_term", "bias_term", "noise_term", "delta_recursion"])
            for k in range(len(n)):
                w.writerow([int(n[k])] + [repr(float(c.values[k])) for c in curves.values()] + [repr(float(rec.values[k]))])
        out.write(f"wrote {args.out}\n")
    fit = fit_decay_exponent(curves["noise_term"])
    exponent = noise_exponent(p.schedule, p.uncertainty.sigma)
    out.write(f"noise slope fitted={fit.slope:.6f} analytic={-exponent:.6f}\n")
    dominated = bool(np.all(rec.values <= curves["total"].values))
    out.write(f"recursion below bound at every batch: {dominated}\n")
    return EXIT_OK


def cmd_verify(args, out) -> int:
    try:
        res = verify_ar1_drift(args.theta, args.theta_star, args.sigma2, args.n, args.reps or 100_000, args.seed or 0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    z = (res.mc_estimate - res.closed_form) / res.std_error if res.std_error > 0 else 0.0
    out.write(f"mc_estimate={res.mc_estimate:.6g} closed_form={res.closed_form:.6g} "
              f"std_error={res.std_error:.3g} z={z:.2f}\n")
    return EXIT_OK


def cmd_slopes(args, out) -> int:
    path = Path(args.csv)
    if not path.exists():
        raise ConfigError(f"csv: {path} not found")
    rows = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"label", "N", "mean_err_last", "mean_err_avg"}
        if not need <= set(reader.fieldnames or ()):
            raise ConfigError(f"csv: missing columns {sorted(need - set(reader.fieldnames or ()))}")
        for row in reader:
            rows.setdefault(row["label"], []).append(row)
    for label, rs in rows.items():
        n = np.array([float(r["N"]) for r in rs])
        parts = []
        for col in ("mean_err_last", "mean_err_avg"):
            vals = np.array([float(r[col]) if r[col] else math.nan for r in rs])
            try:
                fit = fit_decay_exponent((n, vals), args.tail)
                parts.append(f"{col}={fit.slope:.4f} (r2={fit.r2:.3f})")
            except ValueError:
                parts.append(f"{col}=n/a")
        out.write(f"{label}: " + " ".join(parts) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="streamopt", description="Streaming SGD experiments and bound evaluators.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--reps", type=int)
        p.add_argument("--out")

    p = sub.add_parser("run", help="run an experiment from a config file or preset")
    common(p)
    p.add_argument("--config")
    p.add_argument("--preset")
    p.add_argument("--horizon", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("median", help="geometric-median experiment")
    common(p)
    p.add_argument("--config")
    p.add_argument("--preset")
    p.add_argument("--horizon", type=int)
    p.add_argument("--data", help="header-first CSV with a timestamp column")
    p.add_argument("--timestamp-column")
    p.set_defaults(func=cmd_median)

    p = sub.add_parser("simulate", help="dump a generated series as CSV")
    common(p)
    p.add_argument("--kind", default="ar1")
    p.add_argument("--length", type=int, default=1000)
    p.add_argument("--theta-star", type=float, default=0.5)
    p.add_argument("--phi-star", type=float, default=0.8)
    p.add_argument("--alpha0", type=float, default=1.0)
    p.add_argument("--alpha1", type=float, default=0.3)
    p.add_argument("--innovation", default="gaussian")
    p.add_argument("--df", type=float, default=math.inf)
    p.add_argument("--hurst", type=float, default=0.5)
    p.add_argument("--dimension", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bound", help="evaluate the explicit bound and the one-step recursion")
    common(p)
    p.add_argument("--config")
    p.add_argument("--preset")
    p.add_argument("--horizon", type=int)
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("verify", help="Monte-Carlo check of the AR(1) gradient drift")
    common(p)
    p.add_argument("--theta", type=float, default=0.2)
    p.add_argument("--theta-star", type=float, default=0.5)
    p.add_argument("--sigma2", type=float, default=1.0)
    p.add_argument("--n", type=int, default=8)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("slopes", help="fit log-log tail slopes to a result CSV")
    p.add_argument("csv")
    p.add_argument("--tail", type=float, default=0.5)
    p.set_defaults(func=cmd_slopes)
    return parser


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, out)
    except ConfigError as exc:
        sys.stderr.write(f"streamopt: config error: {exc}\n")
        return EXIT_CONFIG


def cli(argv=None) -> int:
    return main(argv)
