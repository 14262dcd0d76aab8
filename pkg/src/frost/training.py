"""Task, relative-ranking and absolute-anchoring losses, BPTT and the SGD loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .dynamics import Model, ModelKind, backward, forward, lambda_value
from .errors import ConfigError, NumericError, ShapeError
from .numerics import sigmoid
from .halting import EasyHardSplit, HaltingHead, batch_time_rank, split_easy_hard
from .sketch import KLLSketch

logger = logging.getLogger(__name__)

SCORE_CLAMP = 1e-7
LOG_COLUMNS = ("step", "lambda", "loss_task", "loss_rel", "loss_abs", "mean_s_easy", "mean_s_hard", "s_halt")


@dataclass
class TrainingConfig:
    T: int = 16
    B: int = 32
    alpha_rel: float = 0.7
    alpha_abs: float = 0.3
    delta: float = 0.1
    lr: float = 0.001
    momentum: float = 0.9
    clip_norm: float | None = 1.0
    epochs: int = 20
    k_split: int | None = None
    seed: int = 42
    detach_backbone_for_ranking: bool = False
    reset_sketch_per_epoch: bool = False
    log_quantile: float = 0.5

    def __post_init__(self):
        if self.alpha_rel < 0 or self.alpha_abs < 0:
            raise ConfigError("alpha weights must be non-negative")
        if self.delta <= 0:
            raise ConfigError("delta must be positive")
        if self.T < 1 or self.B < 2 or self.epochs < 0:
            raise ConfigError("need T >= 1, B >= 2, epochs >= 0")

    def split_size(self, batch_size):
        k = self.k_split if self.k_split is not None else max(1, batch_size // 4)
        return min(k, batch_size // 2)


@dataclass
class LossBreakdown:
    task: float
    rank_rel: float
    rank_abs: float
    total: float


# -- losses -------------------------------------------------------------------


def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    """Per-sample cross-entropy and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError("one label per logit row required")
    n_cls = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= n_cls):
        raise IndexError(f"labels must lie in 0..{n_cls - 1}")
    lsm = log_softmax(logits)
    rows = np.arange(len(labels))
    losses = -lsm[rows, labels]
    grad = np.exp(lsm)
    grad[rows, labels] -= 1.0
    return losses, grad


def task_loss(logits_T, labels) -> float:
    return float(cross_entropy(logits_T, labels)[0].mean())


def _check_split(split: EasyHardSplit):
    if not split.easy or not split.hard:
        raise ConfigError("easy and hard sets must be non-empty")


def relative_rank_loss(scores, split: EasyHardSplit, delta: float, return_grad=False):
    """Sum over t of the mean hinge ``max(0, s_hard - s_easy + delta)`` over E x H."""
    _check_split(split)
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    E, H = list(split.easy), list(split.hard)
    se, sh = s[E], s[H]  # (|E|, T), (|H|, T)
    margin = sh[None, :, :] - se[:, None, :] + delta  # (|E|, |H|, T)
    active = margin > 0
    norm = len(E) * len(H)
    loss = float(np.where(active, margin, 0.0).sum() / norm)
    if not return_grad:
        return loss
    grad = np.zeros_like(s)
    np.add.at(grad, E, -active.sum(axis=1) / norm)
    np.add.at(grad, H, active.sum(axis=0) / norm)
    return loss, grad


def absolute_anchor_loss(scores, split: EasyHardSplit, return_grad=False):
    """Negated log-likelihood pushing easy scores to 1 and hard scores to 0."""
    _check_split(split)
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if np.any(s < 0) or np.any(s > 1) or not np.all(np.isfinite(s)):
        raise NumericError("halting scores must lie in [0, 1]")
    E, H = list(split.easy), list(split.hard)
    sc = np.clip(s, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    loss = -float(np.log(sc[E]).sum() / len(E) + np.log1p(-sc[H]).sum() / len(H))
    if not return_grad:
        return loss
    inside = (s > SCORE_CLAMP) & (s < 1.0 - SCORE_CLAMP)
    grad = np.zeros_like(s)
    np.add.at(grad, E, -1.0 / (len(E) * sc[E]))
    np.add.at(grad, H, 1.0 / (len(H) * (1.0 - sc[H])))
    return loss, grad * inside


def total_loss(task, rank_rel, rank_abs, cfg: TrainingConfig) -> LossBreakdown:
    total = task + cfg.alpha_rel * rank_rel + cfg.alpha_abs * rank_abs
    return LossBreakdown(float(task), float(rank_rel), float(rank_abs), float(total))


# -- objective and gradients ------------------------------------------------


@dataclass
class ObjectiveResult:
    losses: LossBreakdown
    grads: dict
    scores: np.ndarray  # (B, T)
    step_losses: np.ndarray  # (B, T) per-iteration task losses, no gradient
    split: EasyHardSplit
    cache: object


def objective(model: Model, head: HaltingHead, X, labels, cfg: TrainingConfig, split=None, parts=("task", "rel", "abs")):
    """Forward pass, the three losses and (for the selected ``parts``) gradients.

    Gradient keys are the model's parameter names plus ``w_s`` and ``b_s``.
    ``split`` may be fixed by the caller (finite-difference checks do this so
    the discrete easy/hard selection does not move under perturbation).
    """
    T = cfg.T
    cache = forward(model, X, T)
    B = cache.x.shape[0]
    states = cache.states[1:]
    logits = [head.logits(h) for h in states]
    scores = np.stack([sigmoid(z) for z in logits], axis=1)
    step_losses = np.empty((B, T))
    ce_grads = []
    for t, y in enumerate(cache.outputs):
        step_losses[:, t], g = cross_entropy(y, labels)
        ce_grads.append(g)
    if split is None:
        split = split_easy_hard(batch_time_rank(step_losses), cfg.split_size(B))
    l_task = float(step_losses[:, -1].mean())
    l_rel, g_rel = relative_rank_loss(scores, split, cfg.delta, return_grad=True)
    l_abs, g_abs = absolute_anchor_loss(scores, split, return_grad=True)
    losses = total_loss(l_task, l_rel, l_abs, cfg)

    g_outputs = [None] * T
    if "task" in parts:
        g_outputs[-1] = ce_grads[-1] / B
    g_s = np.zeros_like(scores)
    if "rel" in parts:
        g_s += cfg.alpha_rel * g_rel
    if "abs" in parts:
        g_s += cfg.alpha_abs * g_abs
    g_z = g_s * scores * (1.0 - scores)  # through the sigmoid
    g_states = None
    if not cfg.detach_backbone_for_ranking and np.any(g_z):
        g_states = [g_z[:, t : t + 1] * head.w_s[None, :] for t in range(T)]
    grads = backward(model, cache, g_outputs, g_states)
    grads["w_s"] = sum(g_z[:, t] @ states[t] for t in range(T))
    grads["b_s"] = np.array(g_z.sum())
    return ObjectiveResult(losses, grads, scores, step_losses, split, cache)


def all_parameters(model: Model, head: HaltingHead):
    params = dict(model.parameters())
    params.update(head.parameters())
    return params


def flatten_bundle(bundle, keys=None):
    keys = sorted(bundle) if keys is None else keys
    return np.concatenate([np.asarray(bundle[k], dtype=np.float64).reshape(-1) for k in keys])


def gradient_norms(grads):
    return {k: float(np.linalg.norm(v)) for k, v in grads.items()}


class SGDMomentum:
    """Heavy-ball SGD with optional global-norm gradient clipping."""

    def __init__(self, params, lr, momentum=0.9, clip_norm=None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        scale = 1.0
        if self.clip_norm is not None:
            total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
        for k, p in self.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += scale * grads[k]
            p -= self.lr * v  # in place: params are live references


def train_step(model, head, batch, cfg: TrainingConfig, sketch: KLLSketch | None = None, optimizer=None):
    """One optimization step. Returns ``(LossBreakdown, gradient norms, ObjectiveResult)``.

    Non-finite gradients abort the step before any parameter changes.
    """
    X, labels = batch
    if optimizer is None:
        optimizer = SGDMomentum(all_parameters(model, head), cfg.lr, cfg.momentum, cfg.clip_norm)
    res = objective(model, head, X, labels, cfg)
    for k, g in res.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}; step aborted")
    optimizer.step(res.grads)
    if sketch is not None:
        # detached copy: the threshold statistics never feed back into gradients
        sketch.extend(np.array(res.scores, copy=True))
    return res.losses, gradient_norms(res.grads), res


def _split_means(scores, split):
    return float(scores[list(split.easy)].mean()), float(scores[list(split.hard)].mean())


def train(model, head, dataset, cfg: TrainingConfig, sketch: KLLSketch | None = None, validation=None):
    """Shuffled mini-batch training; returns the per-step log (list of dicts)."""
    if len(dataset.labels) == 0:
        raise ConfigError("empty dataset")
    sketch = sketch if sketch is not None else KLLSketch(seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = SGDMomentum(all_parameters(model, head), cfg.lr, cfg.momentum, cfg.clip_norm)
    log = []
    warned = False
    step = 0
    n = len(dataset.labels)
    for epoch in range(cfg.epochs):
        if cfg.reset_sketch_per_epoch and epoch > 0:
            sketch = KLLSketch(sketch.k, sketch.seed + epoch, sketch.c)
        order = rng.permutation(n)
        for start in range(0, n - cfg.B + 1, cfg.B):
            idx = order[start : start + cfg.B]
            losses, _, res = train_step(model, head, (dataset.X[idx], dataset.labels[idx]), cfg, sketch, opt)
            step += 1
            lam = lambda_value(model.scale) if model.kind is ModelKind.FROST else float("nan")
            if lam >= 1.0 and not warned:
                logger.warning("lambda reached %.4f (>= 1) at step %d", lam, step)
                warned = True
            s_easy, s_hard = _split_means(res.scores, res.split)
            log.append(
                {
                    "step": step,
                    "lambda": lam,
                    "loss_task": losses.task,
                    "loss_rel": losses.rank_rel,
                    "loss_abs": losses.rank_abs,
                    "mean_s_easy": s_easy,
                    "mean_s_hard": s_hard,
                    "s_halt": sketch.query(cfg.log_quantile),
                }
            )
        if validation is not None:
            cache = forward(model, validation.X, cfg.T)
            sketch.extend(np.concatenate([head.score(h) for h in cache.states[1:]]))
    return log, sketch


def loss_breakdown_dict(lb: LossBreakdown):
    return asdict(lb)
