"""Geometric checks on trained or freshly initialized models.

Every ``*_check`` returns a JSON-serializable report dict with a ``passed``
flag, the measured values and the tolerance used.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import Model, ModelKind, OperatorSet, ScaleParameters, readout, scaled_input, scaled_transition
from .errors import NumericError, ShapeError
from .numerics import spectral_norm_estimate

# -- scale consistency ---------------------------------------------------------


@dataclass
class ConsistencyProfile:
    mean: np.ndarray  # index t-1 holds depth t
    std: np.ndarray
    excluded: int = 0

    def to_rows(self):
        return [{"t": t + 1, "mean_cos": float(m), "std_cos": float(s)} for t, (m, s) in enumerate(zip(self.mean, self.std))]


def cosine_profile(trajectories) -> ConsistencyProfile:
    """Mean and std of ``cos(h_t, h_T)`` for ``t = 1..T`` over trajectories.

    Accepts a list of ``Trajectory`` or a ``(n, T+1, D)`` state array. Samples
    whose state at ``t`` or ``T`` has zero norm are left out of that depth and
    counted in ``excluded``.
    """
    if isinstance(trajectories, np.ndarray):
        states = trajectories
    else:
        lengths = {len(tr.states) for tr in trajectories}
        if len(lengths) != 1:
            raise ShapeError("all trajectories must have the same T")
        states = np.stack([tr.states for tr in trajectories])
    final = states[:, -1, :]
    final_norm = np.linalg.norm(final, axis=1)
    T = states.shape[1] - 1
    means, stds, excluded = np.zeros(T), np.zeros(T), 0
    for t in range(1, T + 1):
        h = states[:, t, :]
        hn = np.linalg.norm(h, axis=1)
        ok = (hn > 0) & (final_norm > 0)
        excluded += int((~ok).sum())
        cos = np.sum(h[ok] * final[ok], axis=1) / (hn[ok] * final_norm[ok])
        cos = np.clip(cos, -1.0, 1.0)
        means[t - 1] = cos.mean() if cos.size else np.nan
        stds[t - 1] = cos.std() if cos.size else np.nan
    # exact at the final depth (rounding can leave 1 - 1e-16)
    if np.all(final_norm > 0):
        means[-1], stds[-1] = 1.0, 0.0
    return ConsistencyProfile(means, stds, excluded)


# -- box-counting dimension -------------------------------------------------------


@dataclass
class DimensionEstimate:
    D: float
    scales: list
    counts: list
    residual: float
    degenerate: bool = False
    dropped_levels: int = 0

    def to_dict(self):
        return {
            "D": self.D,
            "scales": self.scales,
            "counts": self.counts,
            "residual": self.residual,
            "degenerate": self.degenerate,
            "dropped_levels": self.dropped_levels,
        }


def box_counting_dimension(points, scale_levels=8, saturation=0.25, fit_from=2) -> DimensionEstimate:
    """Slope of ``log N(eps)`` against ``log(1/eps)`` on a dyadic ladder.

    Points are translated, uniformly rescaled and centered in the unit square.
    Boxes are counted at ``eps = 2**-1 .. 2**-scale_levels``. The fit starts at
    level ``fit_from`` because the 2x2 grid only sees the bounding box. Finest
    levels whose count exceeds ``saturation * n_points`` are dropped since the
    cloud no longer resolves structure there.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError("points must be an (n, 2) array")
    if len(pts) < 100:
        raise ValueError("need at least 100 points")
    if scale_levels < 4:
        raise ValueError("need at least 4 scale levels")
    if not np.all(np.isfinite(pts)):
        raise NumericError("points must be finite")
    lo = pts.min(axis=0)
    span = pts.max(axis=0) - lo
    extent = float(span.max())
    if extent == 0.0:
        return DimensionEstimate(0.0, [], [], 0.0, degenerate=True)
    unit = (pts - lo) / extent + (1.0 - span / extent) / 2.0
    scales, counts = [], []
    for j in range(1, scale_levels + 1):
        cells = 2**j
        idx = np.minimum(np.floor(unit * cells).astype(np.int64), cells - 1)
        counts.append(int(len(np.unique(idx[:, 0] * cells + idx[:, 1]))))
        scales.append(1.0 / cells)
    first = fit_from - 1
    dropped = 0
    while len(counts) - dropped - first > 3 and counts[len(counts) - 1 - dropped] > saturation * len(pts):
        dropped += 1
    keep = len(counts) - dropped
    x = np.log(1.0 / np.array(scales[first:keep]))
    y = np.log(np.array(counts[first:keep], dtype=np.float64))
    slope, intercept = np.polyfit(x, y, 1)
    residual = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    return DimensionEstimate(float(slope), scales, counts, residual, dropped_levels=dropped)


def koch_curve(iterations=6):
    """Vertices of the Koch curve on the unit segment (``4**iterations + 1`` points)."""
    pts = np.array([[0.0, 0.0], [1.0, 0.0]])
    rot = np.array([[0.5, -math.sqrt(3) / 2], [math.sqrt(3) / 2, 0.5]])
    for _ in range(iterations):
        a, b = pts[:-1], pts[1:]
        d = (b - a) / 3.0
        p1 = a + d
        p3 = a + 2 * d
        p2 = p1 + d @ rot.T
        seg = np.stack([a, p1, p2, p3], axis=1).reshape(-1, 2)
        pts = np.vstack([seg, pts[-1:]])
    return pts


def line_points(n=10_000):
    t = np.linspace(0.0, 1.0, n)
    return np.stack([t, 0.3 * t], axis=1)


def grid_points(side=200):
    g = (np.arange(side) + 0.5) / side
    xx, yy = np.meshgrid(g, g)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def latent_dimension(states, scale_levels=8) -> DimensionEstimate:
    """Pool latent states, project onto the top-2 principal axes, box-count."""
    pts = np.asarray(states, dtype=np.float64).reshape(-1, np.shape(states)[-1])
    centered = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return box_counting_dimension(centered @ vt[:2].T, scale_levels)


# -- contraction, error decay, gradient bound ----------------------------------


def contraction_factor_estimate(model: Model, probe_states, x, t=0, iters=1000, tol=1e-13) -> float:
    """Max over probes of the step's h-Jacobian spectral norm (power iteration)."""
    best = 0.0
    for h in probe_states:
        matvec, rmatvec = model.step_jacobian(h, x, t)
        est = spectral_norm_estimate(matvec, rmatvec=rmatvec, dim=model.d_hid, iters=iters, tol=tol)
        if not math.isfinite(est):
            raise NumericError("power iteration diverged")
        best = max(best, est)
    return best


def iterate_to_fixed_point(model: Model, x, h0=None, tol=1e-12, max_iter=200_000):
    """Iterate the stationary step until the increment norm drops below ``tol``."""
    h = model.initial_state() if h0 is None else np.array(h0, dtype=np.float64)
    path = [h]
    for _ in range(max_iter):
        nxt = model.step(h, x)
        if not np.all(np.isfinite(nxt)):
            raise NumericError("iteration diverged while seeking the fixed point")
        inc = float(np.linalg.norm(nxt - h))
        h = nxt
        path.append(h)
        if inc < tol:
            return h, path
    raise NumericError(f"no convergence within {max_iter} iterations")


def probe_set(model: Model, x, path, n_random=16, seed=0, max_path=64):
    """Trajectory states plus random points in the ball spanned by the path."""
    rng = np.random.default_rng(seed)
    path = np.asarray(path)
    if len(path) > max_path:
        # keep the early transient densely, the converged tail sparsely
        idx = np.unique(np.concatenate([np.arange(32), np.linspace(32, len(path) - 1, max_path - 32).astype(int)]))
        path = path[idx]
    radius = max(float(np.linalg.norm(path, axis=1).max()), 1e-3)
    dirs = rng.standard_normal((n_random, model.d_hid))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = radius * rng.uniform(0, 1, size=(n_random, 1)) ** (1.0 / model.d_hid)
    return list(path) + list(dirs * radii)


def _require_stationary(model):
    if model.kind is ModelKind.VANILLA:
        raise ValueError("fixed-point checks need a stationary (shared-parameter) model")


def error_decay_check(model: Model, x, T=16, L=None, rel_tol=1e-6, probes=None):
    """Check ``||h_t - h*|| <= L^t / (1 - L) * ||h_1 - h_0||`` for ``t <= T``."""
    _require_stationary(model)
    x = np.asarray(x, dtype=np.float64)
    h_star, path = iterate_to_fixed_point(model, x)
    if L is None:
        L = contraction_factor_estimate(model, probes if probes is not None else probe_set(model, x, path), x)
    if L >= 1.0:
        return {"check": "error_decay", "status": "skipped", "passed": True, "L": L, "reason": "L >= 1"}
    traj = path[: T + 1]
    while len(traj) < T + 1:
        traj.append(h_star)
    step0 = float(np.linalg.norm(traj[1] - traj[0]))
    # h* itself is only known to within L/(1-L) * stopping tolerance
    h_star_err = L / (1.0 - L) * 1e-12
    errors, bounds, violations = [], [], []
    for t in range(T + 1):
        err = float(np.linalg.norm(traj[t] - h_star))
        bound = L**t / (1.0 - L) * step0
        errors.append(err)
        bounds.append(bound)
        if err > bound * (1.0 + rel_tol) + h_star_err:
            violations.append(t)
    ratios = [e / b if b > 0 else 0.0 for e, b in zip(errors, bounds)]
    return {
        "check": "error_decay",
        "status": "ran",
        "passed": not violations,
        "L": L,
        "errors": errors,
        "bounds": bounds,
        "max_ratio": max(ratios),
        "violations": violations,
        "rel_tol": rel_tol,
    }


def composed_jacobian_norm(model: Model, states, x, t, iters=300, tol=1e-12, seed=0):
    """Spectral norm of ``d h_t / d h_0`` along ``states`` via chained JVP/VJP."""
    if t == 0:
        return 1.0
    jacs = [model.step_jacobian(states[k], x, k if model.kind is ModelKind.VANILLA else 0) for k in range(t)]

    def matvec(v):
        for mv, _ in jacs:
            v = mv(v)
        return v

    def rmatvec(u):
        for _, rv in reversed(jacs):
            u = rv(u)
        return u

    return spectral_norm_estimate(matvec, rmatvec=rmatvec, dim=model.d_hid, iters=iters, tol=tol, seed=seed)


def gradient_bound_check(model: Model, x, T=16, L=None, abs_tol=1e-6, probes=None):
    """Check ``||d h_t / d h_0|| <= L^t + abs_tol`` for ``t = 0..T``."""
    _require_stationary(model)
    x = np.asarray(x, dtype=np.float64)
    _, path = iterate_to_fixed_point(model, x)
    if L is None:
        L = contraction_factor_estimate(model, probes if probes is not None else probe_set(model, x, path), x)
    states = path[: T + 1]
    while len(states) < T + 1:
        states.append(model.step(states[-1], x))
    norms, violations = [], []
    for t in range(T + 1):
        nrm = composed_jacobian_norm(model, states, x, t)
        norms.append(nrm)
        if nrm > L**t + abs_tol:
            violations.append(t)
    return {
        "check": "gradient_bound",
        "passed": not violations,
        "L": L,
        "norms": norms,
        "bounds": [L**t for t in range(T + 1)],
        "violations": violations,
        "abs_tol": abs_tol,
    }


# -- scaling identities --------------------------------------------------------


def _with_scale(ops: OperatorSet, lam, hurst):
    out = copy.copy(ops)
    out.scale = ScaleParameters.from_lambda(lam, hurst)
    return out


def scaling_equivariance_check(
    ops: OperatorSet,
    trials=20,
    lambdas=(0.25, 0.5, 1.0, 2.0),
    hursts=(0.2, 0.5, 0.8, 1.0),
    tol=1e-12,
    seed=0,
):
    """Operator-level scaling identities on random ``h``, ``x``.

    Errors are relative to ``max(1, |reference|)`` per coordinate.
    """
    rng = np.random.default_rng(seed)
    worst = {"transition": 0.0, "input": 0.0, "readout_C": 0.0, "readout_D": 0.0}

    def rel(a, b):
        return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))

    c_zero = copy.copy(ops)
    c_zero.C = type(ops.C)(np.zeros_like(ops.C.weight), np.zeros_like(ops.C.bias))
    for _ in range(trials):
        h = rng.standard_normal(ops.d_hid)
        x = rng.standard_normal(ops.d_in)
        a, b, c, d = ops.A(h), ops.B(x), ops.C(h), ops.D(x)
        for lam in lambdas:
            for hurst in hursts:
                s = _with_scale(ops, lam, hurst)
                worst["transition"] = max(worst["transition"], rel(scaled_transition(s, h), lam * a))
                worst["input"] = max(worst["input"], rel(scaled_input(s, x), lam ** (1 + hurst) * b))
                worst["readout_C"] = max(worst["readout_C"], rel(readout(s, h, x) - d, lam ** (-hurst) * c))
                y_lam = readout(_with_scale(c_zero, lam, hurst), h, x)
                y_one = readout(_with_scale(c_zero, 1.0, hurst), h, x)
                worst["readout_D"] = max(worst["readout_D"], rel(y_lam, y_one))
    return {
        "check": "scaling_equivariance",
        "passed": all(v <= tol for v in worst.values()),
        "max_rel_error": worst,
        "tol": tol,
        "lambdas": list(lambdas),
        "hursts": list(hursts),
        "trials": trials,
    }


# -- gradient conflict ---------------------------------------------------------


def gradient_conflict(grad_task: dict, grad_rank: dict):
    """Cosine between two flattened gradient bundles.

    Returns ``(cosine, zero_flag)``; a zero bundle gives ``(0.0, True)``.
    """
    if set(grad_task) != set(grad_rank):
        raise ShapeError("gradient bundles cover different parameters")
    keys = sorted(grad_task)
    for k in keys:
        if np.shape(grad_task[k]) != np.shape(grad_rank[k]):
            raise ShapeError(f"shape mismatch for {k}")
    a = np.concatenate([np.ravel(grad_task[k]) for k in keys])
    b = np.concatenate([np.ravel(grad_rank[k]) for k in keys])
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0, True
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0)), False


def positivity_check(lambdas):
    """All logged step sizes strictly positive and finite."""
    arr = np.asarray(list(lambdas), dtype=np.float64)
    bad = [int(i) for i in np.flatnonzero(~(np.isfinite(arr) & (arr > 0)))]
    return {"check": "lambda_positivity", "passed": not bad, "n": int(arr.size), "violations": bad,
            "min_lambda": float(arr.min()) if arr.size else None}
