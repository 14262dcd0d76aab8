"""Property suites run by ``frost verify``. Each suite returns a JSON report."""

from __future__ import annotations

import os
import time

import numpy as np

from . import analysis
from .data import generate_dataset
from .dynamics import Model, ModelKind, OperatorSet, ScaleParameters, frost_step, lambda_value
from .halting import HaltingHead
from .numerics import AffineMap, MLPMap, spectral_norm_estimate
from .sketch import KLLSketch, exact_rank_error
from .training import TrainingConfig, all_parameters, objective, train

QUANTILES = (0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99)


# -- oracles shared with the test suite --------------------------------------


def random_ops(rng, d_in, d_hid, d_out, lam=0.5, hurst=0.8, skip=-1.0):
    return OperatorSet(
        A=MLPMap.init(rng, [d_hid, d_hid, d_hid], "tanh", skip=skip),
        B=AffineMap.init(rng, d_in, d_hid),
        C=AffineMap.init(rng, d_hid, d_out),
        D=AffineMap.init(rng, d_in, d_out),
        scale=ScaleParameters.from_lambda(lam, hurst),
    )


def update_identity_errors(n=1000, seed=0):
    """Max deviation of the step from ``h`` at lambda=0 and from ``h + A + B`` at lambda=1."""
    rng = np.random.default_rng(seed)
    worst0 = worst1 = 0.0
    for _ in range(n):
        d_in, d_hid = rng.integers(1, 9, size=2)
        ops = random_ops(rng, int(d_in), int(d_hid), 2, lam=1.0, hurst=float(rng.uniform(0.1, 1.0)))
        h = rng.standard_normal(d_hid) * 3
        x = rng.standard_normal(d_in) * 3
        worst1 = max(worst1, float(np.max(np.abs(frost_step(ops, h, x) - (h + ops.A(h) + ops.B(x))))))
        ops.scale = ScaleParameters.from_lambda(0.0, ops.scale.hurst)
        worst0 = max(worst0, float(np.max(np.abs(frost_step(ops, h, x) - h))))
    return worst0, worst1


def gradient_check(seed=0, d_in=2, d_hid=3, d_out=2, T=2, B=2, k_split=1, eps=1e-6):
    """Max relative error between analytic and central-difference gradients of the total loss.

    The easy/hard split is frozen at the unperturbed point so the loss is a
    smooth function of the parameters being perturbed.
    """
    rng = np.random.default_rng(seed)
    model = Model.init(ModelKind.FROST, d_in, d_hid, d_out, rng, hidden=d_hid)
    head = HaltingHead.init(d_hid, rng)
    X = rng.standard_normal((B, d_in))
    labels = rng.integers(0, d_out, size=B)
    cfg = TrainingConfig(T=T, B=B, k_split=k_split, delta=0.5)
    base = objective(model, head, X, labels, cfg)
    params = all_parameters(model, head)
    worst, per_key = 0.0, {}
    for key, p in params.items():
        g = base.grads[key]
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = objective(model, head, X, labels, cfg, split=base.split).losses.total
            flat[i] = old - eps
            down = objective(model, head, X, labels, cfg, split=base.split).losses.total
            flat[i] = old
            nflat[i] = (up - down) / (2 * eps)
        err = float(np.linalg.norm(g - num) / max(np.linalg.norm(g) + np.linalg.norm(num), 1e-8))
        per_key[key] = err
        worst = max(worst, err)
    return worst, per_key


def contractive_instance(seed, d_in=8, d_hid=16, d_out=4):
    rng = np.random.default_rng(seed)
    model = Model.init(ModelKind.FROST, d_in, d_hid, d_out, rng)
    return model, rng.standard_normal(d_in)


def sketch_trial_errors(k, n, seed, order):
    """Per-quantile normalized rank errors for one stream."""
    rng = np.random.default_rng(seed)
    stream = rng.standard_normal(n)
    if order == "sorted":
        stream = np.sort(stream)
    elif order == "reversed":
        stream = np.sort(stream)[::-1]
    sk = KLLSketch(k, seed=seed)
    sk.extend(stream)
    return exact_rank_error(sk, np.sort(stream), QUANTILES)


def sketch_bench(k=200, n=100_000, trials=50, orders=("random", "sorted", "reversed"), tol=0.02):
    rows, passed = [], 0
    for order in orders:
        for trial in range(trials):
            errs = sketch_trial_errors(k, n, trial, order)
            ok = max(errs) <= tol
            passed += ok
            rows.append({"order": order, "trial": trial, "max_error": max(errs), "ok": ok})
    total = len(rows)
    return {
        "k": k,
        "n": n,
        "trials_per_order": trials,
        "pass_fraction": passed / total,
        "max_error": max(r["max_error"] for r in rows),
        "mean_error": float(np.mean([r["max_error"] for r in rows])),
        "tol": tol,
        "rows": rows,
    }


# -- suites --------------------------------------------------------------------


def suite_numerics():
    e0, e1 = update_identity_errors(200)
    grad_err, _ = gradient_check()
    rng = np.random.default_rng(0)
    m = rng.standard_normal((9, 6))
    sn_err = abs(spectral_norm_estimate(m, iters=2000, tol=1e-15) - np.linalg.norm(m, 2)) / np.linalg.norm(m, 2)
    ok = e0 <= 1e-12 and e1 <= 1e-12 and grad_err < 1e-3 and sn_err < 1e-6
    return {"passed": ok, "identity_lambda0": e0, "identity_lambda1": e1,
            "gradient_rel_error": grad_err, "spectral_norm_rel_error": sn_err}


def suite_sketch():
    bench = sketch_bench(trials=5)
    bench.pop("rows")
    return {"passed": bench["pass_fraction"] >= 0.99, **bench}


def suite_bounds(instances=5):
    decay, grads = [], []
    for seed in range(instances):
        model, x = contractive_instance(seed)
        decay.append(analysis.error_decay_check(model, x))
        grads.append(analysis.gradient_bound_check(model, x, L=decay[-1]["L"]))
    ok = all(r["passed"] for r in decay + grads)
    return {"passed": ok, "instances": instances,
            "max_decay_ratio": max(r.get("max_ratio", 0.0) for r in decay),
            "L": [r["L"] for r in decay],
            "gradient_violations": sum(len(r["violations"]) for r in grads)}


def suite_scaling():
    ops = random_ops(np.random.default_rng(0), 5, 7, 3)
    return analysis.scaling_equivariance_check(ops)


def suite_fractal():
    koch = analysis.box_counting_dimension(analysis.koch_curve(6)).D
    line = analysis.box_counting_dimension(analysis.line_points()).D
    grid = analysis.box_counting_dimension(analysis.grid_points()).D
    ok = abs(koch - np.log(4) / np.log(3)) <= 0.05 and abs(line - 1) <= 0.05 and abs(grid - 2) <= 0.05
    return {"passed": ok, "koch": koch, "line": line, "grid": grid, "tol": 0.05}


def suite_positivity(inject_negative=False):
    """Train briefly and check every logged step size is positive."""
    rng = np.random.default_rng(0)
    data = generate_dataset(4, 16, 8, seed=0)
    model = Model.init(ModelKind.FROST, 8, 8, 4, rng, T_max=4)
    head = HaltingHead.init(8, rng)
    log, _ = train(model, head, data, TrainingConfig(T=4, B=16, epochs=2, lr=0.05))
    lambdas = [r["lambda"] for r in log]
    # extreme log-parameters still map to positive values
    lambdas += [lambda_value(ScaleParameters(np.array(r), 0.8)) for r in (-30.0, -5.0, 0.0, 5.0)]
    if inject_negative:
        lambdas.append(-0.1)
    return analysis.positivity_check(lambdas)


def suite_sketch_k():
    errs = {}
    for k in (8, 400):
        errs[k] = float(np.mean([max(sketch_trial_errors(k, 20_000, s, "random")) for s in range(5)]))
    return {"passed": errs[8] > errs[400], "mean_error_k8": errs[8], "mean_error_k400": errs[400]}


SUITES = {
    "numerics": suite_numerics,
    "sketch": suite_sketch,
    "bounds": suite_bounds,
    "scaling": suite_scaling,
    "fractal": suite_fractal,
    "positivity": suite_positivity,
    "sketch_k": suite_sketch_k,
}


def run_verify(report_dir=None, only=None, inject_negative_lambda=False):
    """Run suites in order; returns ``(ok, reports, first_failing_suite)``."""
    from .experiment import write_json

    reports, first_fail = {}, None
    for name, fn in SUITES.items():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        report = fn(inject_negative_lambda) if name == "positivity" else fn()
        report = {"suite": name, **report}
        elapsed = time.perf_counter() - t0
        reports[name] = report
        if report_dir:
            os.makedirs(report_dir, exist_ok=True)
            write_json(os.path.join(report_dir, f"{name}.json"), report)
        report["seconds"] = elapsed  # console only, keeps the files deterministic
        if not report["passed"] and first_fail is None:
            first_fail = name
    return first_fail is None, reports, first_fail
