"""Small dense linear-algebra kernel with explicit vector-Jacobian products.

Vectors are plain 1-D float64 numpy arrays. Every map also accepts a batch of
row vectors (shape ``(n, dim)``); VJPs then sum parameter gradients over rows.
Gradient bundles are ``dict[str, np.ndarray]`` keyed like ``params()``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericError, ShapeError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu", "sigmoid")


def as_vec(v, dim=None, name="vector"):
    """Coerce to float64 array and check the trailing dimension."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0 or arr.ndim > 2:
        raise ShapeError(f"{name} must be 1-D or a 2-D batch, got shape {arr.shape}")
    if dim is not None and arr.shape[-1] != dim:
        raise ShapeError(f"{name} has dim {arr.shape[-1]}, expected {dim}")
    return arr


def glorot_uniform(rng, dim_out, dim_in):
    a = np.sqrt(6.0 / (dim_in + dim_out))
    return rng.uniform(-a, a, size=(dim_out, dim_in))


@dataclass
class AffineMap:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"inconsistent affine shapes: weight {self.weight.shape}, bias {self.bias.shape}"
            )
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise NumericError("affine parameters must be finite")

    @classmethod
    def init(cls, rng, dim_in, dim_out):
        return cls(glorot_uniform(rng, dim_out, dim_in), np.zeros(dim_out))

    @classmethod
    def zeros(cls, dim_in, dim_out):
        return cls(np.zeros((dim_out, dim_in)), np.zeros(dim_out))

    @property
    def dim_in(self):
        return self.weight.shape[1]

    @property
    def dim_out(self):
        return self.weight.shape[0]

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, v):
        return affine_apply(self, v)


def affine_apply(m: AffineMap, v) -> np.ndarray:
    v = as_vec(v, m.dim_in)
    return v @ m.weight.T + m.bias


def affine_vjp(m: AffineMap, v, upstream):
    """Return ``(grads, dv)`` for ``upstream`` flowing back through ``m`` at ``v``."""
    v = as_vec(v, m.dim_in)
    upstream = as_vec(upstream, m.dim_out, "upstream")
    if v.shape[:-1] != upstream.shape[:-1]:
        raise ShapeError(f"batch mismatch: {v.shape} vs {upstream.shape}")
    if v.ndim == 1:
        grads = {"weight": np.outer(upstream, v), "bias": upstream.copy()}
    else:
        grads = {"weight": upstream.T @ v, "bias": upstream.sum(axis=0)}
    return grads, upstream @ m.weight


def activation_apply(kind: str, v):
    """Elementwise activation value and derivative."""
    v = np.asarray(v, dtype=np.float64)
    if kind == "tanh":
        out = np.tanh(v)
        return out, 1.0 - out * out
    if kind == "relu":
        return np.maximum(v, 0.0), (v > 0).astype(np.float64)
    if kind == "sigmoid":
        out = sigmoid(v)
        return out, out * (1.0 - out)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def sigmoid(v):
    v = np.asarray(v, dtype=np.float64)
    # split by sign to avoid overflow in exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out if out.ndim else float(out)


@dataclass
class MLPMap:
    """Chain of affine layers with an activation between consecutive layers.

    ``skip`` adds ``skip * h`` to the output, so ``skip=-1`` turns the map
    into a decay-plus-correction term ``N(h) - h``.
    """

    layers: list
    activation: str = "tanh"
    skip: float = 0.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.layers:
            raise ShapeError("MLPMap needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.dim_out != b.dim_in:
                raise ShapeError(f"layer dims do not chain: {a.dim_out} -> {b.dim_in}")
        if self.skip != 0.0 and self.dim_in != self.dim_out:
            raise ShapeError("skip term needs a square map")

    @classmethod
    def init(cls, rng, dims, activation="tanh", skip=0.0):
        layers = [AffineMap.init(rng, i, o) for i, o in zip(dims[:-1], dims[1:])]
        return cls(layers, activation, skip)

    @property
    def dim_in(self):
        return self.layers[0].dim_in

    @property
    def dim_out(self):
        return self.layers[-1].dim_out

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"{i}.{k}"] = v
        return out

    def forward(self, h):
        """Return output and the cache needed by ``vjp``/``jvp``."""
        h = as_vec(h, self.dim_in)
        inputs, derivs = [], []
        z = h
        for i, layer in enumerate(self.layers):
            inputs.append(z)
            z = affine_apply(layer, z)
            if i < len(self.layers) - 1:
                z, d = activation_apply(self.activation, z)
                derivs.append(d)
        if self.skip:
            z = z + self.skip * h
        return z, (inputs, derivs)

    def __call__(self, h):
        return self.forward(h)[0]

    def vjp(self, cache, upstream):
        inputs, derivs = cache
        grads = {}
        g = np.asarray(upstream, dtype=np.float64)
        g_skip = self.skip * g if self.skip else None
        for i in range(len(self.layers) - 1, -1, -1):
            if i < len(self.layers) - 1:
                g = g * derivs[i]
            lg, g = affine_vjp(self.layers[i], inputs[i], g)
            grads[f"{i}.weight"] = lg["weight"]
            grads[f"{i}.bias"] = lg["bias"]
        if g_skip is not None:
            g = g + g_skip
        return grads, g

    def input_vjp(self, cache, upstream):
        """Vector-Jacobian product w.r.t. the input only (no parameter grads)."""
        _, derivs = cache
        g = np.asarray(upstream, dtype=np.float64)
        out = g
        for i in range(len(self.layers) - 1, -1, -1):
            if i < len(self.layers) - 1:
                out = out * derivs[i]
            out = out @ self.layers[i].weight
        if self.skip:
            out = out + self.skip * g
        return out

    def jvp(self, cache, tangent):
        """Input-direction Jacobian-vector product at the cached point."""
        _, derivs = cache
        t = np.asarray(tangent, dtype=np.float64)
        out = t
        for i, layer in enumerate(self.layers):
            out = out @ layer.weight.T
            if i < len(self.layers) - 1:
                out = out * derivs[i]
        if self.skip:
            out = out + self.skip * t
        return out

    def weight_norm_bound(self):
        """Product of layer spectral norms: a global Lipschitz bound of the MLP part."""
        bound = 1.0
        for layer in self.layers:
            bound *= np.linalg.norm(layer.weight, 2)
        return bound


def finite_difference_gradient(f: Callable, theta, eps=1e-6):
    """Central-difference gradient of scalar ``f`` at ``theta`` (any shape)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = f(theta)
        flat[k] = orig - eps
        fm = f(theta)
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {k}")
        gflat[k] = (fp - fm) / (2.0 * eps)
    return grad


def spectral_norm_estimate(m, iters=200, tol=1e-10, rmatvec=None, dim=None, seed=0):
    """Largest singular value by power iteration on ``M^T M``.

    ``m`` is either a dense matrix or a matvec callable; with a callable,
    ``rmatvec`` (transpose product) and ``dim`` (input dimension) are required.
    A zero map returns 0.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if callable(m):
        if rmatvec is None or dim is None:
            raise ValueError("matvec form needs rmatvec and dim")
        matvec = m
    else:
        mat = np.asarray(m, dtype=np.float64)
        if mat.ndim != 2:
            raise ShapeError("matrix must be 2-D")
        if not np.all(np.isfinite(mat)):
            raise NumericError("matrix has non-finite entries")
        matvec = lambda v: mat @ v  # noqa: E731
        rmatvec = lambda u: mat.T @ u  # noqa: E731
        dim = mat.shape[1]
    v = np.random.default_rng(seed).standard_normal(dim)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = matvec(v)
        new_sigma = float(np.linalg.norm(u))
        if not np.isfinite(new_sigma):
            raise NumericError("power iteration diverged")
        if new_sigma == 0.0:
            return max(sigma, 0.0)
        w = rmatvec(u)
        wn = np.linalg.norm(w)
        if wn == 0.0:
            return new_sigma
        converged = abs(new_sigma - sigma) <= tol * new_sigma
        sigma = max(sigma, new_sigma)
        v = w / wn
        if converged:
            break
    # one last Rayleigh step from the refined direction
    return max(sigma, float(np.linalg.norm(matvec(v))))
