"""Synthetic Gaussian-cluster classification data with easy/hard tiers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

TIER_FAR = 0
TIER_BOUNDARY = 1


@dataclass
class SyntheticDataset:
    X: np.ndarray  # (n, D_in)
    labels: np.ndarray  # (n,)
    tier: np.ndarray  # (n,) TIER_FAR or TIER_BOUNDARY
    means: np.ndarray  # (classes, D_in)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return SyntheticDataset(self.X[idx], self.labels[idx], self.tier[idx], self.means)


def _truncated_normal(rng, shape, bound=2.0):
    """Standard normal resampled until every coordinate lies within +-bound."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def class_means(classes, d_in, separation, seed):
    """Orthogonal class centers of norm ``separation`` (needs classes <= d_in)."""
    rng = np.random.default_rng(seed)
    if classes <= d_in:
        q, _ = np.linalg.qr(rng.standard_normal((d_in, classes)))
        return separation * q.T
    m = rng.standard_normal((classes, d_in))
    return separation * m / np.linalg.norm(m, axis=1, keepdims=True)


def generate_dataset(
    classes=4,
    per_class=250,
    d_in=16,
    boundary_fraction=0.25,
    seed=0,
    separation=4.0,
    means_seed=None,
) -> SyntheticDataset:
    """Balanced clusters; a ``boundary_fraction`` of each class sits near a midpoint.

    Far samples are ``mean + noise`` with noise coordinates truncated to 2 sigma.
    Boundary samples start 35-50% of the way from their own center toward a
    random other center, then get the same noise. ``means_seed`` fixes the
    class centers so train and eval splits share a geometry.
    """
    if classes < 2 or per_class < 1 or d_in < 1:
        raise ConfigError("need classes >= 2, per_class >= 1, d_in >= 1")
    if not 0.0 <= boundary_fraction <= 1.0:
        raise ConfigError("boundary_fraction must lie in [0, 1]")
    means = class_means(classes, d_in, separation, seed if means_seed is None else means_seed)
    rng = np.random.default_rng(seed)
    n_hard = int(round(boundary_fraction * per_class))
    X, labels, tier = [], [], []
    for c in range(classes):
        noise = _truncated_normal(rng, (per_class, d_in))
        centers = np.repeat(means[c][None, :], per_class, axis=0)
        if n_hard:
            others = rng.integers(0, classes - 1, size=n_hard)
            others = others + (others >= c)
            frac = rng.uniform(0.35, 0.5, size=(n_hard, 1))
            centers[:n_hard] = means[c] + frac * (means[others] - means[c])
        X.append(centers + noise)
        labels.append(np.full(per_class, c))
        tier.append(np.where(np.arange(per_class) < n_hard, TIER_BOUNDARY, TIER_FAR))
    order = rng.permutation(classes * per_class)
    return SyntheticDataset(
        np.concatenate(X)[order],
        np.concatenate(labels)[order].astype(np.int64),
        np.concatenate(tier)[order],
        means,
    )
