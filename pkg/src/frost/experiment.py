"""End-to-end runs: train, calibrate, sweep the quantile grid, write artifacts."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .analysis import cosine_profile, latent_dimension, positivity_check
from .config import RunConfig
from .data import TIER_BOUNDARY, SyntheticDataset, generate_dataset
from .dynamics import Model, ModelKind, forward
from .errors import FrostError
from .halting import HaltingHead, adaptive_predict, write_halting_trace
from .sketch import KLLSketch
from .training import LOG_COLUMNS, train

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "frost-run-checkpoint"


@dataclass
class Datasets:
    train: SyntheticDataset
    val: SyntheticDataset | None
    eval: SyntheticDataset


@dataclass
class ExperimentResult:
    output_dir: str
    summary: dict
    artifacts: list = field(default_factory=list)
    model: Model | None = None
    head: HaltingHead | None = None
    sketch: KLLSketch | None = None


def make_datasets(cfg: RunConfig) -> Datasets:
    """Train, validation and eval splits drawn around shared class centers."""
    spec = cfg.dataset

    def gen(per_class, offset):
        return generate_dataset(
            spec.classes, per_class, cfg.d_in, spec.boundary_fraction,
            seed=cfg.seed + offset, separation=spec.separation, means_seed=cfg.seed,
        )

    val = gen(spec.val_per_class, 1) if spec.val_per_class > 0 else None
    return Datasets(gen(spec.train_per_class, 0), val, gen(spec.eval_per_class, 2))


def build_model(cfg: RunConfig, rng, hurst=None):
    model = Model.init(
        cfg.model_kind, cfg.d_in, cfg.d_hid, cfg.d_out, rng,
        T_max=cfg.T_max, hidden=cfg.hidden, activation=cfg.activation,
        lam=cfg.lam_init, hurst=cfg.hurst if hurst is None else hurst, gating=cfg.gating,
    )
    head = HaltingHead.init(cfg.d_hid, rng)
    return model, head


def fit(cfg: RunConfig, data: Datasets, training=None, hurst=None):
    """Build a fresh model from the run seed and train it. Returns ``(model, head, sketch, log)``."""
    rng = np.random.default_rng(cfg.seed)
    model, head = build_model(cfg, rng, hurst)
    sketch = KLLSketch(cfg.sketch_k, seed=cfg.seed)
    log, sketch = train(model, head, data.train, training or cfg.training, sketch, validation=data.val)
    if sketch.n == 0:
        # no training steps ran: calibrate on held-out scores of the untrained model
        src = data.val if data.val is not None else data.train
        cache = forward(model, src.X, cfg.T_max)
        sketch.extend(np.concatenate([head.score(h) for h in cache.states[1:]]))
    return model, head, sketch, log


def threshold_for(sketch: KLLSketch, q: float) -> float:
    return math.inf if q >= 1.0 else sketch.query(q)


def quantile_sweep(model, head, sketch, data: SyntheticDataset, q_grid, t_min=1, T_max=16):
    rows = []
    for q in q_grid:
        s_halt = threshold_for(sketch, q)
        y, depths, _ = adaptive_predict(model, data.X, head, s_halt, t_min, T_max)
        rows.append(
            {
                "q": float(q),
                "s_halt": s_halt,
                "mean_depth": float(depths.mean()),
                "accuracy": float(np.mean(y.argmax(axis=1) == data.labels)),
                "accuracy_boundary": _tier_accuracy(y, data, TIER_BOUNDARY),
            }
        )
    return rows


def _tier_accuracy(y, data, tier):
    mask = data.tier == tier
    if not mask.any():
        return float("nan")
    return float(np.mean(y[mask].argmax(axis=1) == data.labels[mask]))


def final_gap(log, steps_per_epoch):
    """Mean of ``s_easy - s_hard`` over the last epoch's steps."""
    if not log:
        return float("nan")
    tail = log[-max(1, steps_per_epoch):]
    return float(np.mean([r["mean_s_easy"] - r["mean_s_hard"] for r in tail]))


def trend_checks(quantile_rows, profile_mean, gap, lambdas, slack_cos=0.02, slack_acc=0.01, min_gap=0.1):
    """The desk-scale trend criteria as booleans."""
    acc = [r["accuracy"] for r in quantile_rows]
    depth = [r["mean_depth"] for r in quantile_rows]
    prof = list(profile_mean)
    return {
        "cosine_non_decreasing": all(prof[t + 1] >= prof[t] - slack_cos for t in range(1, len(prof) - 1)),
        "accuracy_non_decreasing": all(acc[i + 1] >= acc[i] - slack_acc for i in range(len(acc) - 1)),
        "depth_strictly_increasing": all(depth[i + 1] > depth[i] for i in range(len(depth) - 1)),
        "easy_hard_gap": bool(gap >= min_gap),
        "lambda_positive": positivity_check(lambdas)["passed"] if lambdas else True,
    }


# -- output helpers --------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return v


def write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _json_safe(obj):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_json_safe(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_checkpoint(path, model, head, sketch, cfg: RunConfig):
    write_json(
        path,
        {
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "config": cfg.to_dict(),
            "model": model.to_dict(),
            "head": head.to_dict(),
            "sketch": sketch.to_dict(),
        },
    )


def load_checkpoint(path):
    """Return ``(model, head, sketch, RunConfig)``."""
    from .errors import ConfigError

    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a run checkpoint")
    return (
        Model.from_dict(doc["model"]),
        HaltingHead.from_dict(doc["head"]),
        KLLSketch.from_dict(doc["sketch"]),
        RunConfig.from_dict(doc["config"]),
    )


# -- orchestration ------------------------------------------------------------


ABLATION_ARMS = (("abs_only", 0.0, None), ("rel_only", None, 0.0), ("combined", None, None))


def run_experiment(cfg: RunConfig) -> ExperimentResult:
    """Train, calibrate and evaluate; every artifact lands in ``cfg.output_dir``.

    On failure a summary with ``status: failed`` and the list of artifacts
    already written is left behind before the error propagates.
    """
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    artifacts = []

    def path(name):
        p = os.path.join(out, name)
        artifacts.append(name)
        return p

    try:
        write_json(path("config.json"), cfg.to_dict())
        data = make_datasets(cfg)
        model, head, sketch, log = fit(cfg, data)
        steps_per_epoch = len(data.train) // cfg.training.B

        write_csv(path("training_log.csv"), LOG_COLUMNS, log)
        lambdas = [r["lambda"] for r in log] if model.kind is ModelKind.FROST else []
        write_csv(path("lambda_trajectory.csv"), ("step", "lambda"), log if lambdas else [])

        rows = quantile_sweep(model, head, sketch, data.eval, cfg.q_grid, cfg.t_min, cfg.T_max)
        write_csv(path("quantile_sweep.csv"), ("q", "s_halt", "mean_depth", "accuracy", "accuracy_boundary"), rows)

        cache = forward(model, data.eval.X, cfg.T_max)
        states = np.stack(cache.states, axis=1)
        profile = cosine_profile(states)
        write_csv(path("cosine_profile.csv"), ("t", "mean_cos", "std_cos"), profile.to_rows())

        n_trace = min(cfg.trace_samples, len(data.eval))
        if n_trace > 0:
            _, depths, scores = adaptive_predict(
                model, data.eval.X[:n_trace], head, threshold_for(sketch, cfg.q), cfg.t_min, cfg.T_max
            )
            write_halting_trace(path("halting_trace.csv"), scores, depths)

        save_checkpoint(path("checkpoint.json"), model, head, sketch, cfg)

        gap = final_gap(log, steps_per_epoch)
        dim = latent_dimension(states[:, 1:, :])
        summary = {
            "status": "ok",
            "seed": cfg.seed,
            "model_kind": cfg.model_kind,
            "train_steps": len(log),
            "final_lambda": lambdas[-1] if lambdas else None,
            "min_lambda": min(lambdas) if lambdas else None,
            "max_lambda": max(lambdas) if lambdas else None,
            "easy_hard_gap": gap,
            "quantile_sweep": rows,
            "cosine_profile": [float(v) for v in profile.mean],
            "cosine_excluded": profile.excluded,
            "latent_dimension": dim.to_dict(),
            "sketch_items": sketch.n,
            "trends": trend_checks(rows, profile.mean, gap, lambdas),
        }

        if cfg.ablation:
            summary["ablation"] = _run_ablation(cfg, data, path, steps_per_epoch)
        if cfg.hurst_sweep:
            summary["hurst_sweep"] = _run_hurst_sweep(cfg, data, path)

        write_json(path("summary.json"), summary)
    except (FrostError, ArithmeticError, ValueError) as exc:
        write_json(
            os.path.join(out, "summary.json"),
            {"status": "failed", "error": f"{type(exc).__name__}: {exc}", "partial_artifacts": artifacts},
        )
        raise
    return ExperimentResult(out, summary, artifacts, model, head, sketch)


def _run_ablation(cfg, data, path, steps_per_epoch):
    rows, gaps = [], {}
    for arm, alpha_rel, alpha_abs in ABLATION_ARMS:
        tcfg = copy.deepcopy(cfg.training)
        if alpha_rel is not None:
            tcfg.alpha_rel = alpha_rel
        if alpha_abs is not None:
            tcfg.alpha_abs = alpha_abs
        _, _, _, log = fit(cfg, data, training=tcfg)
        gaps[arm] = final_gap(log, steps_per_epoch)
        rows.extend({"arm": arm, **r} for r in log)
    write_csv(path("ablation_log.csv"), ("arm",) + LOG_COLUMNS, rows)
    return gaps


def _run_hurst_sweep(cfg, data, path):
    rows = []
    for hurst in cfg.hurst_sweep:
        model, head, sketch, log = fit(cfg, data, hurst=hurst)
        sweep = quantile_sweep(model, head, sketch, data.eval, [cfg.q, 1.0], cfg.t_min, cfg.T_max)
        rows.append(
            {
                "hurst": float(hurst),
                "final_lambda": log[-1]["lambda"] if log else float("nan"),
                "accuracy_full_depth": sweep[1]["accuracy"],
                "accuracy_at_q": sweep[0]["accuracy"],
                "mean_depth_at_q": sweep[0]["mean_depth"],
            }
        )
    write_csv(
        path("hurst_sweep.csv"),
        ("hurst", "final_lambda", "accuracy_full_depth", "accuracy_at_q", "mean_depth_at_q"),
        rows,
    )
    return rows


def evaluate(model, head, sketch, cfg: RunConfig, q=None):
    """Accuracy and mean depth on the eval split at one quantile."""
    data = make_datasets(cfg).eval
    q = cfg.q if q is None else q
    return quantile_sweep(model, head, sketch, data, [q], cfg.t_min, cfg.T_max)[0]
