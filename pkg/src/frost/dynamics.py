"""Stationary contractive state update, scaled operators, readout and baselines.

The FROST step is

    h' = h + lam * A(h) + lam**(1 + H) * B(x)

with readout ``y = lam**(-H) * C(h) + D(x)`` and ``lam = exp(rho)``. Baselines
share the same operator types but drop the scale factors.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .numerics import AffineMap, MLPMap, affine_vjp, as_vec, sigmoid, spectral_norm_estimate

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "frost-checkpoint"
CHECKPOINT_VERSION = 1


class ModelKind(str, enum.Enum):
    FROST = "frost"
    VANILLA = "vanilla"
    RECURRENT = "recurrent"
    BASIC_SSM = "basic_ssm"


@dataclass
class ScaleParameters:
    """Log-space step size ``rho`` (trainable) and fixed Hurst exponent."""

    rho: np.ndarray = field(default_factory=lambda: np.array(math.log(0.5)))
    hurst: float = 0.8

    def __post_init__(self):
        self.rho = np.array(self.rho, dtype=np.float64).reshape(())
        if not 0.0 < self.hurst <= 1.0:
            raise ConfigError(f"Hurst exponent must lie in (0, 1], got {self.hurst}")

    @classmethod
    def from_lambda(cls, lam, hurst=0.8):
        if lam < 0 or not math.isfinite(lam):
            raise ConfigError(f"lambda must be finite and >= 0, got {lam}")
        return cls(np.array(math.log(lam) if lam > 0 else -math.inf), hurst)

    @property
    def lam(self):
        return lambda_value(self)


def lambda_value(p: ScaleParameters) -> float:
    rho = float(p.rho)
    # rho = -inf is the zero-step limit; anything else non-finite is an error
    if math.isnan(rho) or rho == math.inf:
        raise NumericError("rho is not finite")
    return math.exp(rho)


@dataclass
class OperatorSet:
    A: MLPMap
    B: AffineMap
    C: AffineMap
    D: AffineMap
    scale: ScaleParameters = field(default_factory=ScaleParameters)

    def __post_init__(self):
        if self.A.dim_in != self.A.dim_out:
            raise ShapeError("transition A must map D_hid -> D_hid")
        if self.B.dim_out != self.A.dim_in or self.C.dim_in != self.A.dim_in:
            raise ShapeError("B/C dims must match the hidden size")
        if self.C.dim_out != self.D.dim_out or self.B.dim_in != self.D.dim_in:
            raise ShapeError("C/D output dims or B/D input dims disagree")

    @property
    def d_in(self):
        return self.B.dim_in

    @property
    def d_hid(self):
        return self.A.dim_in

    @property
    def d_out(self):
        return self.C.dim_out

    def params(self):
        out = {}
        for name in "ABCD":
            for k, v in getattr(self, name).params().items():
                out[f"{name}.{k}"] = v
        return out


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, D_hid), states[0] = h_0
    outputs: np.ndarray  # (T, D_out), outputs[t-1] = y_t
    scores: np.ndarray  # (T,), empty when no halting head was given
    input: np.ndarray

    @property
    def T(self):
        return len(self.states) - 1


# -- FROST operators -------------------------------------------------------


def scaled_transition(ops: OperatorSet, h) -> np.ndarray:
    h = as_vec(h, ops.d_hid, "h")
    return lambda_value(ops.scale) * ops.A(h)


def scaled_input(ops: OperatorSet, x) -> np.ndarray:
    x = as_vec(x, ops.d_in, "x")
    lam = lambda_value(ops.scale)
    return lam ** (1.0 + ops.scale.hurst) * ops.B(x)


def readout(ops: OperatorSet, h, x) -> np.ndarray:
    h = as_vec(h, ops.d_hid, "h")
    x = as_vec(x, ops.d_in, "x")
    lam = lambda_value(ops.scale)
    if lam == 0.0:
        raise NumericError("readout is undefined at lambda = 0")
    return lam ** (-ops.scale.hurst) * ops.C(h) + ops.D(x)


def frost_step(ops: OperatorSet, h, x, gate: AffineMap | None = None) -> np.ndarray:
    """One stationary update ``(1 - lam) h + (lam h + A_lam(h) + B_lam(x))``."""
    h = as_vec(h, ops.d_hid, "h")
    x = as_vec(x, ops.d_in, "x")
    update = scaled_transition(ops, h) + scaled_input(ops, x)
    if gate is not None:
        update = sigmoid(gate(h)) * update
    out = h + update
    if not np.all(np.isfinite(out)):
        raise NumericError("frost_step produced a non-finite state")
    return out


def baseline_step(kind: ModelKind, model: "Model", h, x, t: int) -> np.ndarray:
    """Step rule of the non-fractal baselines; ``t`` is 0-based."""
    kind = ModelKind(kind)
    if kind is ModelKind.FROST:
        raise ConfigError("baseline_step does not handle FROST; use frost_step")
    ops = model.ops_at(t)
    h = as_vec(h, ops.d_hid, "h")
    x = as_vec(x, ops.d_in, "x")
    if kind is ModelKind.RECURRENT:
        return ops.A(h) + ops.B(x)
    return h + ops.A(h) + ops.B(x)


# -- model container -------------------------------------------------------


@dataclass
class Model:
    kind: ModelKind
    ops: list
    gate: AffineMap | None = None

    def __post_init__(self):
        self.kind = ModelKind(self.kind)
        if self.kind is not ModelKind.VANILLA and len(self.ops) != 1:
            raise ConfigError(f"{self.kind.value} uses one shared OperatorSet")
        if self.kind is ModelKind.VANILLA and len(self.ops) < 1:
            raise ConfigError("vanilla needs one OperatorSet per step")
        if self.gate is not None and self.kind is not ModelKind.FROST:
            raise ConfigError("gating is only defined for FROST")

    @classmethod
    def init(
        cls,
        kind,
        d_in,
        d_hid,
        d_out,
        rng,
        T_max=16,
        hidden=None,
        activation="tanh",
        lam=0.5,
        hurst=0.8,
        gating=False,
        target_contraction=0.9,
    ):
        kind = ModelKind(kind)
        hidden = hidden or d_hid
        n_sets = T_max if kind is ModelKind.VANILLA else 1
        ops = []
        for _ in range(n_sets):
            skip = -1.0 if kind is ModelKind.FROST else 0.0
            ops.append(
                OperatorSet(
                    A=MLPMap.init(rng, [d_hid, hidden, d_hid], activation, skip=skip),
                    B=AffineMap.init(rng, d_in, d_hid),
                    C=AffineMap.init(rng, d_hid, d_out),
                    D=AffineMap.init(rng, d_in, d_out),
                    scale=ScaleParameters.from_lambda(lam, hurst),
                )
            )
        gate = AffineMap.init(rng, d_hid, d_hid) if gating else None
        model = cls(kind, ops, gate)
        if kind is ModelKind.FROST:
            model.enforce_initial_contraction(target_contraction)
        return model

    @property
    def T_max(self):
        return len(self.ops) if self.kind is ModelKind.VANILLA else None

    @property
    def d_in(self):
        return self.ops[0].d_in

    @property
    def d_hid(self):
        return self.ops[0].d_hid

    @property
    def d_out(self):
        return self.ops[0].d_out

    @property
    def scale(self):
        return self.ops[0].scale

    def ops_at(self, t):
        if self.kind is ModelKind.VANILLA:
            if not 0 <= t < len(self.ops):
                raise IndexError(f"vanilla step {t} outside 0..{len(self.ops) - 1}")
            return self.ops[t]
        return self.ops[0]

    def parameters(self):
        """Name -> array references (mutating them updates the model)."""
        out = {}
        if self.kind is ModelKind.VANILLA:
            for t, ops in enumerate(self.ops):
                for k, v in ops.params().items():
                    out[f"{t}.{k}"] = v
        else:
            out.update(self.ops[0].params())
        if self.kind is ModelKind.FROST:
            out["rho"] = self.ops[0].scale.rho
        if self.gate is not None:
            for k, v in self.gate.params().items():
                out[f"G.{k}"] = v
        return out

    def step(self, h, x, t=0):
        if self.kind is ModelKind.FROST:
            return frost_step(self.ops[0], h, x, self.gate)
        return baseline_step(self.kind, self, h, x, t)

    def readout(self, h, x, t=0):
        """Output at state ``h``; ``t`` is the 0-based index of the step that produced it."""
        if self.kind is ModelKind.FROST:
            return readout(self.ops[0], h, x)
        ops = self.ops_at(t)
        return ops.C(h) + ops.D(x)

    def initial_state(self, batch_shape=()):
        return np.zeros(tuple(batch_shape) + (self.d_hid,))

    # -- Jacobian access for analysis ------------------------------------

    def step_jacobian(self, h, x, t=0):
        """Return ``(matvec, rmatvec)`` of d step / d h at a single point."""
        rec = _step_forward(self, as_vec(h, self.d_hid), as_vec(x, self.d_in), t)
        return (lambda v: _step_jvp(self, rec, v)), (lambda u: _step_vjp_state(self, rec, u))

    def step_jacobian_dense(self, h, x, t=0):
        matvec, _ = self.step_jacobian(h, x, t)
        return np.stack([matvec(e) for e in np.eye(self.d_hid)], axis=1)

    def enforce_initial_contraction(self, target=0.9, shrink=0.7, max_rounds=200):
        """Shrink A's output layer until the step Jacobian norm at h_0 is <= target."""
        h0 = self.initial_state()
        x0 = np.zeros(self.d_in)
        last = self.ops[0].A.layers[-1]
        est = None
        for _ in range(max_rounds):
            matvec, rmatvec = self.step_jacobian(h0, x0)
            est = spectral_norm_estimate(matvec, rmatvec=rmatvec, dim=self.d_hid, iters=500, tol=1e-12)
            if est <= target:
                return est
            last.weight *= shrink
        logger.warning("could not bring initial step contraction below %.3f (got %.4f)", target, est)
        return est

    # -- serialization ----------------------------------------------------

    def to_dict(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": self.kind.value,
            "dims": {"d_in": self.d_in, "d_hid": self.d_hid, "d_out": self.d_out},
            "activation": self.ops[0].A.activation,
            "a_skip": self.ops[0].A.skip,
            "rho": float(self.ops[0].scale.rho),
            "hurst": self.ops[0].scale.hurst,
            "ops": [
                {
                    "A": [_affine_to_dict(layer) for layer in ops.A.layers],
                    "B": _affine_to_dict(ops.B),
                    "C": _affine_to_dict(ops.C),
                    "D": _affine_to_dict(ops.D),
                }
                for ops in self.ops
            ],
            "gate": _affine_to_dict(self.gate) if self.gate is not None else None,
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError("not a model checkpoint document")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
        ops = []
        for o in doc["ops"]:
            ops.append(
                OperatorSet(
                    A=MLPMap([_affine_from_dict(d) for d in o["A"]], doc["activation"], doc["a_skip"]),
                    B=_affine_from_dict(o["B"]),
                    C=_affine_from_dict(o["C"]),
                    D=_affine_from_dict(o["D"]),
                    scale=ScaleParameters(np.array(doc["rho"]), doc["hurst"]),
                )
            )
        gate = _affine_from_dict(doc["gate"]) if doc.get("gate") else None
        return cls(doc["kind"], ops, gate)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _affine_to_dict(m):
    return {"weight": m.weight.tolist(), "bias": m.bias.tolist()}


def _affine_from_dict(d):
    return AffineMap(np.array(d["weight"], dtype=np.float64), np.array(d["bias"], dtype=np.float64))


# -- unrolling ---------------------------------------------------------------


def unroll(model: Model, x, T: int, head=None, h0=None) -> Trajectory:
    """Apply the model's step rule ``T`` times with static input ``x``."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    if model.kind is ModelKind.VANILLA and T > len(model.ops):
        raise ConfigError(f"vanilla model has only {len(model.ops)} steps")
    x = as_vec(x, model.d_in, "x")
    h = model.initial_state() if h0 is None else as_vec(h0, model.d_hid, "h0").copy()
    states, outputs, scores = [h], [], []
    for t in range(T):
        h = _checked(model.step(h, x, t), t + 1)
        states.append(h)
        outputs.append(model.readout(h, x, t))
        if head is not None:
            scores.append(head.score(h))
    return Trajectory(np.array(states), np.array(outputs), np.array(scores, dtype=np.float64), x)


def _checked(h, step):
    if not np.all(np.isfinite(h)):
        raise NumericError(f"state diverged at step {step}", step=step)
    return h


# -- batched forward / reverse sweep ------------------------------------------


@dataclass
class StepRecord:
    t: int
    h: np.ndarray
    x: np.ndarray
    a: np.ndarray
    a_cache: tuple
    bx: np.ndarray
    lam: float = 1.0
    gate: np.ndarray | None = None
    update: np.ndarray | None = None


@dataclass
class ForwardCache:
    x: np.ndarray
    states: list  # h_0..h_T, each (n, D_hid)
    records: list  # StepRecord per step
    c_out: list  # C(h_t) per t = 1..T
    outputs: list  # y_t per t = 1..T

    @property
    def T(self):
        return len(self.records)


def _step_forward(model, h, x, t):
    ops = model.ops_at(t)
    a, a_cache = ops.A.forward(h)
    bx = ops.B(x)
    if model.kind is ModelKind.FROST:
        lam = lambda_value(ops.scale)
        update = lam * a + lam ** (1.0 + ops.scale.hurst) * bx
        g = sigmoid(model.gate(h)) if model.gate is not None else None
        return StepRecord(t, h, x, a, a_cache, bx, lam, g, update)
    return StepRecord(t, h, x, a, a_cache, bx)


def _step_output(model, rec):
    if model.kind is ModelKind.FROST:
        if rec.gate is not None:
            return rec.h + rec.gate * rec.update
        return rec.h + rec.update
    if model.kind is ModelKind.RECURRENT:
        return rec.a + rec.bx
    return rec.h + rec.a + rec.bx


def _step_jvp(model, rec, v):
    ops = model.ops_at(rec.t)
    ja = ops.A.jvp(rec.a_cache, v)
    if model.kind is ModelKind.FROST:
        if rec.gate is None:
            return v + rec.lam * ja
        gz = (v @ model.gate.weight.T) * rec.gate * (1.0 - rec.gate)
        return v + gz * rec.update + rec.gate * (rec.lam * ja)
    if model.kind is ModelKind.RECURRENT:
        return ja
    return v + ja


def _step_vjp_state(model, rec, u):
    """Transpose of ``_step_jvp`` without touching parameter gradients."""
    ops = model.ops_at(rec.t)
    if model.kind is ModelKind.FROST:
        if rec.gate is None:
            return u + rec.lam * ops.A.input_vjp(rec.a_cache, u)
        d_gz = u * rec.update * rec.gate * (1.0 - rec.gate)
        return u + d_gz @ model.gate.weight + ops.A.input_vjp(rec.a_cache, rec.lam * rec.gate * u)
    if model.kind is ModelKind.RECURRENT:
        return ops.A.input_vjp(rec.a_cache, u)
    return u + ops.A.input_vjp(rec.a_cache, u)


def _step_vjp(model, rec, g, grads):
    """Backprop ``g`` (d loss / d h_{t+1}) through one step; accumulate into ``grads``.

    Returns ``(d loss / d h_t, d loss / d lam)``.
    """
    ops = model.ops_at(rec.t)
    prefix = f"{rec.t}." if model.kind is ModelKind.VANILLA else ""
    d_lam = 0.0
    if model.kind is ModelKind.FROST:
        hurst = ops.scale.hurst
        dh = g.copy()
        if rec.gate is not None:
            d_gz = g * rec.update * rec.gate * (1.0 - rec.gate)
            gg, dh_gate = affine_vjp(model.gate, rec.h, d_gz)
            _accum(grads, "G.weight", gg["weight"])
            _accum(grads, "G.bias", gg["bias"])
            dh = dh + dh_gate
            d_update = g * rec.gate
        else:
            d_update = g
        d_a = rec.lam * d_update
        d_bx = rec.lam ** (1.0 + hurst) * d_update
        d_lam = float(np.sum(d_update * rec.a)) + (1.0 + hurst) * rec.lam**hurst * float(np.sum(d_update * rec.bx))
    elif model.kind is ModelKind.RECURRENT:
        dh = np.zeros_like(g)
        d_a = g
        d_bx = g
    else:
        dh = g.copy()
        d_a = g
        d_bx = g
    ga, dh_a = ops.A.vjp(rec.a_cache, d_a)
    for k, v in ga.items():
        _accum(grads, f"{prefix}A.{k}", v)
    gb, _ = affine_vjp(ops.B, rec.x, d_bx)
    _accum(grads, f"{prefix}B.weight", gb["weight"])
    _accum(grads, f"{prefix}B.bias", gb["bias"])
    return dh + dh_a, d_lam


def _accum(grads, key, value):
    if key in grads:
        grads[key] += value
    else:
        grads[key] = np.array(value, dtype=np.float64)


def forward(model: Model, X, T: int) -> ForwardCache:
    """Batched unroll keeping everything the reverse sweep needs."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    if model.kind is ModelKind.VANILLA and T > len(model.ops):
        raise ConfigError(f"vanilla model has only {len(model.ops)} steps")
    X = np.atleast_2d(as_vec(X, model.d_in, "X"))
    h = model.initial_state((X.shape[0],))
    states, records, c_out, outputs = [h], [], [], []
    for t in range(T):
        rec = _step_forward(model, h, X, t)
        h = _checked(_step_output(model, rec), t + 1)
        records.append(rec)
        states.append(h)
        ops = model.ops_at(t)
        c = ops.C(h)
        c_out.append(c)
        if model.kind is ModelKind.FROST:
            outputs.append(rec.lam ** (-ops.scale.hurst) * c + ops.D(X))
        else:
            outputs.append(c + ops.D(X))
    return ForwardCache(X, states, records, c_out, outputs)


def backward(model: Model, cache: ForwardCache, g_outputs=None, g_states=None):
    """Reverse sweep through the unrolled steps (backprop through time).

    ``g_outputs[t-1]`` and ``g_states[t-1]`` are loss gradients w.r.t. ``y_t``
    and ``h_t`` (``None`` entries are skipped). Returns a gradient bundle keyed
    like ``model.parameters()``.
    """
    T = cache.T
    g_outputs = g_outputs or [None] * T
    g_states = g_states or [None] * T
    grads = {k: np.zeros_like(v) for k, v in model.parameters().items()}
    d_lam = 0.0
    carry = np.zeros_like(cache.states[0])
    for t in range(T, 0, -1):
        rec = cache.records[t - 1]
        ops = model.ops_at(t - 1)
        prefix = f"{t - 1}." if model.kind is ModelKind.VANILLA else ""
        if g_states[t - 1] is not None:
            carry = carry + g_states[t - 1]
        gy = g_outputs[t - 1]
        if gy is not None:
            if model.kind is ModelKind.FROST:
                hurst = ops.scale.hurst
                c_scale = rec.lam ** (-hurst)
                d_lam += -hurst * rec.lam ** (-hurst - 1.0) * float(np.sum(gy * cache.c_out[t - 1]))
                gc_up = c_scale * gy
            else:
                gc_up = gy
            gc, dh_c = affine_vjp(ops.C, cache.states[t], gc_up)
            gd, _ = affine_vjp(ops.D, cache.x, gy)
            grads[f"{prefix}C.weight"] += gc["weight"]
            grads[f"{prefix}C.bias"] += gc["bias"]
            grads[f"{prefix}D.weight"] += gd["weight"]
            grads[f"{prefix}D.bias"] += gd["bias"]
            carry = carry + dh_c
        carry, dl = _step_vjp(model, rec, carry, grads)
        d_lam += dl
    if model.kind is ModelKind.FROST:
        grads["rho"] = np.array(d_lam * lambda_value(model.scale))
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite gradient for {k}")
    return grads
