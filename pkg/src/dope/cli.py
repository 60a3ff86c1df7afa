"""Command-line interface: generate, train, estimate, experiment, verify.

Exit codes: 0 on success, 1 on usage errors (unknown flags, missing or
invalid configuration), 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import darcy, pk
from .data import load_dataset, save_dataset, stack_observations
from .estimators import dope_crossfit, fit_crossfit, plugin_estimate, plugin_from_values
from .functionals import FunctionalSpec, functional_value
from .grid import Grid1D
from .harness import (ConfigValidationError, ExperimentConfig, backbone_config, emit_plot, format_summary,
                      functional_label, run_experiment, summarize)
from .operators import load_checkpoint, predict, save_checkpoint, train_solution_operator

BETA_MODE = {"dope": "unstructured", "dope_structured": "structured", "dope_oracle": "oracle"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dope", description="Debiased estimation of functionals of neural-operator predictions.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=False):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=out_required)

    g = sub.add_parser("generate", help="simulate a dataset and write it as JSON")
    common(g, out_required=True)
    g.add_argument("--dgp", choices=("pk", "darcy"), default="pk")
    g.add_argument("--rho", type=float, default=0.0)
    g.add_argument("--n", type=int, default=64)
    g.add_argument("--with-oracle", action="store_true", help="include latent trajectories")

    t = sub.add_parser("train", help="fit the solution operator on a dataset")
    common(t, out_required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--backbone", choices=("fno", "deeponet"), default="fno")
    t.add_argument("--epochs", type=int, default=20)

    e = sub.add_parser("estimate", help="estimate one functional on a dataset")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--method", choices=("plugin", *BETA_MODE), default="dope")
    e.add_argument("--functional", default="auc", help="kind name or a JSON object")
    e.add_argument("--kappa", type=float, default=None, help="Darcy sweep value; selects the smooth excess")
    e.add_argument("--checkpoint", help="pre-fitted solution operator (plug-in only or shared across folds)")
    e.add_argument("--backbone", choices=("fno", "deeponet"), default="fno")
    e.add_argument("--epochs", type=int, default=20)
    e.add_argument("--folds", type=int, default=2)

    x = sub.add_parser("experiment", help="run a configured sweep; writes CSV and SVG plots")
    common(x)
    x.add_argument("--config", required=True)
    x.add_argument("--repeats", type=int, default=None, help="override the configured repeat count")
    x.add_argument("--force", action="store_true", help="recompute even if a cached CSV exists")

    v = sub.add_parser("verify", help="run the functional, gradient and solver invariant suites")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--suite", choices=("all", "functionals", "gradients", "solvers"), default="all")
    return p


def _spec_from_args(args, dgp) -> FunctionalSpec:
    if args.kappa is not None:
        if not 0.0 <= args.kappa <= 1.0:
            raise UsageError("--kappa must lie in [0, 1]")
        return FunctionalSpec.darcy_excess(args.kappa)
    text = args.functional.strip()
    try:
        return FunctionalSpec.from_json(text) if text.startswith("{") else FunctionalSpec(text)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_generate(args) -> int:
    if not 0.0 <= args.rho <= 1.0:
        raise UsageError("--rho must lie in [0, 1]")
    if args.n < 1:
        raise UsageError("--n must be positive")
    if args.dgp == "pk":
        data, grid = pk.generate_pk_dataset(args.n, args.rho, args.seed), pk.default_grid()
    else:
        data, grid = darcy.generate_darcy_dataset(args.n, args.seed), darcy.default_grid()
    save_dataset(args.out, data, grid, with_oracle=args.with_oracle)
    print(f"wrote {len(data)} {args.dgp} samples to {args.out}")
    return 0


def _load(path):
    if not os.path.exists(path):
        raise UsageError(f"dataset {path} not found")
    grid, data = load_dataset(path)
    dgp = "pk" if isinstance(grid, Grid1D) else "darcy"
    return dgp, grid, data, (pk.pk_features if dgp == "pk" else darcy.darcy_features)


def cmd_train(args) -> int:
    dgp, grid, data, features = _load(args.data)
    cfg = backbone_config(dgp, args.backbone)
    params = train_solution_operator(stack_observations(data, features), cfg, epochs=args.epochs, seed=args.seed)
    save_checkpoint(params, args.out)
    print(f"trained {args.backbone} on {len(data)} samples; final loss {params.meta['final_loss']:.3e}; "
          f"checkpoint {args.out}")
    return 0


def cmd_estimate(args) -> int:
    dgp, grid, data, features = _load(args.data)
    spec = _spec_from_args(args, dgp)
    w = grid.weights()
    cfg = backbone_config(dgp, args.backbone)
    s_hat = load_checkpoint(args.checkpoint, cfg) if args.checkpoint else None
    if args.method == "dope_oracle" and any(o._latent_u is None for o in data):
        raise UsageError("dope_oracle needs a dataset generated with --with-oracle")
    if args.method == "plugin":
        if s_hat is not None:
            report = plugin_estimate(s_hat, features([o.input for o in data]), spec, w)
        else:
            _, fits = fit_crossfit(data, [spec], cfg, [], w, features, J=args.folds, seed=args.seed,
                                   epochs=args.epochs)
            batch = stack_observations(data, features)
            vals = np.empty(len(data))
            for f in fits:
                vals[f.held] = functional_value(spec, predict(f.s_hat, batch.features[f.held]), w)
            report = plugin_from_values(vals, {"seed": args.seed, "J": args.folds, "cross_fitted": True})
    else:
        report = dope_crossfit(data, spec, cfg, BETA_MODE[args.method], w, features, J=args.folds, seed=args.seed,
                               s_hat=s_hat, epochs=args.epochs)
    text = report.to_json()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"{report.method} {functional_label(spec)}: theta = {report.theta_hat:.6f} "
              f"[{report.ci[0]:.6f}, {report.ci[1]:.6f}]; report {args.out}")
    else:
        print(text)
    return 0


def cmd_experiment(args) -> int:
    if not os.path.exists(args.config):
        raise UsageError(f"config file {args.config} not found")
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
        if args.out:
            doc["out_dir"] = args.out
        if args.seed:
            doc["seed"] = args.seed
        if args.repeats is not None:
            doc["repeats"] = args.repeats
        config = ExperimentConfig.from_dict(doc)
    except (json.JSONDecodeError, ConfigValidationError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from exc
    t0 = time.perf_counter()
    rows = run_experiment(config, reuse=not args.force,
                          progress=lambda k, n: print(f"  unit {k}/{n}", file=sys.stderr, flush=True))
    print(format_summary(summarize(rows)))
    kind = "rmse_increase" if config.sweep == "delta" else "rmse"
    for functional in sorted({r.functional for r in rows}):
        if config.sweep == "kappa":
            break
        path = os.path.join(config.out_dir, f"{config.name}-{_slug(functional)}.svg")
        emit_plot(rows, kind, path, functional=functional, xlabel=config.sweep)
        print(f"plot {path}")
    if config.sweep == "kappa":
        # each kappa has its own functional; plot method RMSE against kappa directly
        from dataclasses import replace
        merged = [replace(r, functional="smooth_excess") for r in rows]
        path = os.path.join(config.out_dir, f"{config.name}.svg")
        emit_plot(merged, "rmse", path, functional="smooth_excess", xlabel="kappa")
        print(f"plot {path}")
    n_err = sum(1 for r in rows if r.error)
    print(f"csv {config.csv_path()} ({len(rows)} rows, {n_err} error rows, {time.perf_counter() - t0:.1f}s)")
    return 0


def _slug(s):
    return "".join(ch if ch.isalnum() else "_" for ch in s).strip("_")


def cmd_verify(args) -> int:
    from . import verify

    suites = verify.SUITES if args.suite == "all" else {args.suite: verify.SUITES[args.suite]}
    checks = [c for fn in suites.values() for c in fn(seed=args.seed)]
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 0 if not failed else 2


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "estimate": cmd_estimate,
            "experiment": cmd_experiment, "verify": cmd_verify}


def cli_main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli_main())
