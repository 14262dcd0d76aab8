"""Halting head, batch-time ranking, easy/hard split and early-exit inference."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import Model, Trajectory, forward, unroll
from .errors import ConfigError, EmptySketchError, NumericError, ShapeError
from .numerics import as_vec, sigmoid
from .sketch import KLLSketch


@dataclass
class HaltingHead:
    w_s: np.ndarray
    b_s: np.ndarray = field(default_factory=lambda: np.array(0.0))

    def __post_init__(self):
        self.w_s = np.array(self.w_s, dtype=np.float64).reshape(-1)
        self.b_s = np.array(self.b_s, dtype=np.float64).reshape(())
        if not (np.all(np.isfinite(self.w_s)) and np.isfinite(self.b_s)):
            raise NumericError("halting head parameters must be finite")

    @classmethod
    def init(cls, d_hid, rng=None):
        if rng is None:
            return cls(np.zeros(d_hid))
        a = math.sqrt(6.0 / (d_hid + 1))
        return cls(rng.uniform(-a, a, size=d_hid))

    def parameters(self):
        return {"w_s": self.w_s, "b_s": self.b_s}

    def logits(self, h):
        h = as_vec(h, self.w_s.size, "h")
        return h @ self.w_s + self.b_s

    def score(self, h):
        return sigmoid(self.logits(h))

    def to_dict(self):
        return {"w_s": self.w_s.tolist(), "b_s": float(self.b_s)}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.array(doc["w_s"]), np.array(doc["b_s"]))


def halting_score(head: HaltingHead, h) -> float:
    return head.score(h)


@dataclass(frozen=True)
class RankRecord:
    sample: int
    t: int  # 1-based iteration
    loss: float
    rank: int  # 1..B*T, ascending loss


def batch_time_rank(losses) -> list[RankRecord]:
    """Rank all ``B*T`` losses jointly, ascending; ties keep ``(i, t)`` order."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 2:
        raise ShapeError("losses must be a B x T array")
    if not np.all(np.isfinite(losses)):
        raise NumericError("losses must be finite")
    B, T = losses.shape
    order = np.argsort(losses.reshape(-1), kind="stable")
    ranks = np.empty(B * T, dtype=np.int64)
    ranks[order] = np.arange(1, B * T + 1)
    flat = losses.reshape(-1)
    return [RankRecord(idx // T, idx % T + 1, float(flat[idx]), int(ranks[idx])) for idx in range(B * T)]


def rank_matrix(records, B, T):
    out = np.zeros((B, T), dtype=np.int64)
    for r in records:
        out[r.sample, r.t - 1] = r.rank
    return out


@dataclass(frozen=True)
class EasyHardSplit:
    easy: tuple
    hard: tuple
    k_split: int

    def __post_init__(self):
        if set(self.easy) & set(self.hard):
            raise ConfigError("easy and hard sets overlap")
        if len(self.easy) != self.k_split or len(self.hard) != self.k_split:
            raise ConfigError("easy/hard sets must both have k_split members")


def split_easy_hard(records, k_split: int) -> EasyHardSplit:
    """Lowest/highest mean-rank samples become easy/hard (ties by sample index)."""
    B = 1 + max(r.sample for r in records)
    if k_split < 1 or 2 * k_split > B:
        raise ConfigError(f"k_split={k_split} invalid for batch size {B}")
    total = np.zeros(B)
    count = np.zeros(B)
    for r in records:
        total[r.sample] += r.rank
        count[r.sample] += 1
    mean_rank = total / count
    order = np.lexsort((np.arange(B), mean_rank))
    easy = tuple(sorted(int(i) for i in order[:k_split]))
    # hardest first among the rest; equal mean ranks go to the lower index
    hard_order = [int(i) for i in np.lexsort((np.arange(B), -mean_rank)) if int(i) not in easy]
    hard = tuple(sorted(hard_order[:k_split]))
    return EasyHardSplit(easy, hard, k_split)


@dataclass
class HaltingPolicy:
    q: float = 0.5
    sketch: KLLSketch = field(default_factory=KLLSketch)
    t_min: int = 1
    T_max: int = 16
    s_halt: float | None = None

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ConfigError(f"q must lie in (0, 1], got {self.q}")
        if not 1 <= self.t_min <= self.T_max:
            raise ConfigError("need 1 <= t_min <= T_max")


def calibrate_threshold(policy: HaltingPolicy) -> float:
    """Set ``policy.s_halt`` from the sketch.

    ``q = 1`` means no early exit: the threshold is placed above any sigmoid
    score so every sample runs to ``T_max``.
    """
    if policy.sketch.n == 0:
        raise EmptySketchError("cannot calibrate from an empty sketch")
    policy.s_halt = math.inf if policy.q >= 1.0 else policy.sketch.query(policy.q)
    return policy.s_halt


def first_crossing(scores, s_halt, t_min=1, T_max=None):
    """1-based depth of the first ``t >= t_min`` with ``scores[t-1] >= s_halt``."""
    scores = np.asarray(scores, dtype=np.float64)
    T_max = T_max or scores.shape[-1]
    hit = scores[..., :T_max] >= s_halt
    hit[..., : t_min - 1] = False
    any_hit = hit.any(axis=-1)
    depth = np.where(any_hit, hit.argmax(axis=-1) + 1, T_max)
    return int(depth) if np.ndim(depth) == 0 else depth


def adaptive_unroll(model: Model, x, head: HaltingHead, policy: HaltingPolicy):
    """Iterate until the halting score reaches the calibrated threshold.

    Returns ``(y, depth, trajectory)`` where the trajectory stops at ``depth``.
    """
    if policy.s_halt is None:
        raise ConfigError("policy threshold is not calibrated")
    x = as_vec(x, model.d_in, "x")
    h = model.initial_state()
    states, outputs, scores = [h], [], []
    depth = policy.T_max
    for t in range(policy.T_max):
        h = model.step(h, x, t)
        if not np.all(np.isfinite(h)):
            raise NumericError(f"state diverged at step {t + 1}", step=t + 1)
        states.append(h)
        outputs.append(model.readout(h, x, t))
        s = head.score(h)
        scores.append(s)
        if t + 1 >= policy.t_min and s >= policy.s_halt:
            depth = t + 1
            break
    traj = Trajectory(np.array(states), np.array(outputs), np.array(scores), x)
    return outputs[-1], depth, traj


def adaptive_predict(model: Model, X, head: HaltingHead, s_halt: float, t_min=1, T_max=16):
    """Batched early exit: same decisions as ``adaptive_unroll`` per row.

    Returns ``(outputs at exit, depths, scores[B, T_max])``.
    """
    cache = forward(model, X, T_max)
    scores = np.stack([head.score(h) for h in cache.states[1:]], axis=1)
    depths = first_crossing(scores, s_halt, t_min, T_max)
    depths = np.atleast_1d(depths)
    outs = np.stack(cache.outputs, axis=1)
    y = outs[np.arange(len(depths)), depths - 1]
    return y, depths, scores


def write_halting_trace(path, scores, depths, sample_ids=None):
    """CSV rows ``sample_id,t,score,halted_flag`` up to each sample's exit step."""
    scores = np.atleast_2d(scores)
    depths = np.atleast_1d(depths)
    ids = range(len(depths)) if sample_ids is None else sample_ids
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "t", "score", "halted_flag"])
        for sid, row, d in zip(ids, scores, depths):
            for t in range(1, int(d) + 1):
                w.writerow([sid, t, repr(float(row[t - 1])), int(t == d)])
