"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 numeric failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import analysis, experiment, verify
from .config import RunConfig, apply_overrides
from .dynamics import ModelKind, forward
from .errors import ConfigError, NumericError
from .training import LOG_COLUMNS

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3

logger = logging.getLogger("frost")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {"seed": args.seed}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = _parse_value(value)
    if getattr(args, "reset_sketch_per_epoch", False):
        overrides["training.reset_sketch_per_epoch"] = True
    if getattr(args, "detach_backbone", False):
        overrides["training.detach_backbone_for_ranking"] = True
    for flag, key in (("output_dir", "output_dir"), ("epochs", "training.epochs"), ("lr", "training.lr")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return apply_overrides(cfg, overrides)


def _print_json(doc):
    print(json.dumps(experiment._json_safe(doc), indent=2, sort_keys=True))


# -- subcommands -------------------------------------------------------------


def cmd_print_config(args):
    print(load_config(args).to_json())
    return EXIT_OK


def cmd_run(args):
    cfg = load_config(args)
    if args.ablation:
        cfg.ablation = True
    res = experiment.run_experiment(cfg)
    _print_json({"output_dir": res.output_dir, "artifacts": res.artifacts, "trends": res.summary["trends"]})
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args)
    os.makedirs(cfg.output_dir, exist_ok=True)
    data = experiment.make_datasets(cfg)
    model, head, sketch, log = experiment.fit(cfg, data)
    experiment.write_csv(os.path.join(cfg.output_dir, "training_log.csv"), LOG_COLUMNS, log)
    ckpt = os.path.join(cfg.output_dir, "checkpoint.json")
    experiment.save_checkpoint(ckpt, model, head, sketch, cfg)
    last = log[-1] if log else {}
    _print_json({"checkpoint": ckpt, "steps": len(log), "final": last})
    return EXIT_OK


def _checkpoint_path(args):
    if args.checkpoint:
        return args.checkpoint
    return os.path.join(load_config(args).output_dir, "checkpoint.json")


def cmd_eval(args):
    model, head, sketch, cfg = experiment.load_checkpoint(_checkpoint_path(args))
    grid = [args.q] if args.q is not None else cfg.q_grid
    data = experiment.make_datasets(cfg).eval
    rows = experiment.quantile_sweep(model, head, sketch, data, grid, cfg.t_min, cfg.T_max)
    out = args.output or os.path.join(cfg.output_dir, "eval_quantiles.csv")
    experiment.write_csv(out, ("q", "s_halt", "mean_depth", "accuracy", "accuracy_boundary"), rows)
    _print_json({"output": out, "rows": rows})
    return EXIT_OK


def cmd_analyze(args):
    model, head, sketch, cfg = experiment.load_checkpoint(_checkpoint_path(args))
    data = experiment.make_datasets(cfg).eval
    cache = forward(model, data.X, cfg.T_max)
    states = np.stack(cache.states, axis=1)
    profile = analysis.cosine_profile(states)
    report = {
        "cosine_profile": profile.to_rows(),
        "cosine_excluded": profile.excluded,
        "latent_dimension": analysis.latent_dimension(states[:, 1:, :]).to_dict(),
    }
    if model.kind is not ModelKind.VANILLA:
        checks = []
        for i in range(min(args.samples, len(data))):
            x = data.X[i]
            decay = analysis.error_decay_check(model, x, cfg.T_max)
            entry = {"sample": i, "L": decay["L"], "error_decay": decay["passed"], "status": decay["status"]}
            if decay["status"] == "ran":
                entry["gradient_bound"] = analysis.gradient_bound_check(model, x, cfg.T_max, L=decay["L"])["passed"]
            checks.append(entry)
        report["bounds"] = checks
    out = args.output or os.path.join(cfg.output_dir, "analysis.json")
    experiment.write_json(out, report)
    _print_json({"output": out, "latent_dimension": report["latent_dimension"]["D"]})
    return EXIT_OK


def cmd_verify(args):
    only = set(args.suite) if args.suite else None
    ok, reports, first = verify.run_verify(args.report_dir, only, args.inject_negative_lambda)
    for name, rep in reports.items():
        print(f"{'PASS' if rep['passed'] else 'FAIL'}  {name}  ({rep['seconds']:.2f}s)")
    if not ok:
        print(f"verification failed: first failing suite is {first}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_sketch_bench(args):
    report = verify.sketch_bench(args.k, args.n, args.trials)
    rows = report.pop("rows")
    if args.output:
        experiment.write_csv(args.output, ("order", "trial", "max_error", "ok"), rows)
    _print_json(report)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="frost", description="Fractal-scaled stationary refinement with adaptive halting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, output_dir=True):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int, default=42)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (dotted keys)")
        if output_dir:
            sp.add_argument("--output-dir", dest="output_dir")

    sp = sub.add_parser("print-config", help="print the effective config as JSON")
    common(sp)
    sp.set_defaults(func=cmd_print_config)

    for name, func, hlp in (("run", cmd_run, "full experiment with every artifact"), ("train", cmd_train, "train and save a checkpoint")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--reset-sketch-per-epoch", action="store_true", help="start a fresh score sketch each epoch")
        sp.add_argument("--detach-backbone", action="store_true", help="ranking losses train only the halting head")
        if name == "run":
            sp.add_argument("--ablation", action="store_true", help="also train the loss-ablation arms")
        sp.set_defaults(func=func)

    for name, func, hlp in (("eval", cmd_eval, "quantile sweep from a checkpoint"), ("analyze", cmd_analyze, "geometry checks from a checkpoint")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--checkpoint")
        sp.add_argument("--output")
        if name == "eval":
            sp.add_argument("--q", type=float, help="single quantile instead of the configured grid")
        else:
            sp.add_argument("--samples", type=int, default=8, help="eval inputs used for the bound checks")
        sp.set_defaults(func=func)

    sp = sub.add_parser("verify", help="run the property suites")
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--report-dir", default="verify_reports")
    sp.add_argument("--suite", action="append", choices=sorted(verify.SUITES))
    sp.add_argument("--inject-negative-lambda", action="store_true", help="negative control for the positivity suite")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("sketch-bench", help="KLL rank error against exact sorting")
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--k", type=int, default=200)
    sp.add_argument("--n", type=int, default=100_000)
    sp.add_argument("--trials", type=int, default=50)
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_sketch_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ArithmeticError) as exc:
        step = getattr(exc, "step", None)
        where = f" (step {step})" if step is not None else ""
        print(f"numeric failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
