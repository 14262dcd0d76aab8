import math

import numpy as np
import pytest

from frost.analysis import gradient_conflict
from frost.data import generate_dataset
from frost.dynamics import Model, lambda_value
from frost.errors import ConfigError, NumericError
from frost.halting import EasyHardSplit, HaltingHead
from frost.sketch import KLLSketch
from frost.training import (
    LossBreakdown,
    TrainingConfig,
    absolute_anchor_loss,
    all_parameters,
    objective,
    relative_rank_loss,
    task_loss,
    total_loss,
    train,
    train_step,
)
from frost.verify import gradient_check

SPLIT_1x1 = EasyHardSplit((0,), (1,), 1)


# -- task loss ----------------------------------------------------------------


def test_task_loss_uniform_logits():
    assert task_loss(np.zeros((5, 4)), np.array([0, 1, 2, 3, 0])) == pytest.approx(math.log(4), abs=1e-12)


def test_task_loss_large_margin_goes_to_zero():
    logits = np.array([[100.0, 0.0, 0.0]])
    assert task_loss(logits, np.array([0])) < 1e-40


def _ce_oracle(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(labels)


@pytest.mark.parametrize("seed", range(10))
def test_task_loss_matches_log_softmax_oracle(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((8, 5)) * 4
    labels = rng.integers(0, 5, 8)
    assert abs(task_loss(logits, labels) - _ce_oracle(logits, labels)) < 1e-10


def test_task_loss_label_out_of_range():
    with pytest.raises(IndexError):
        task_loss(np.zeros((2, 3)), np.array([0, 3]))


# -- ranking losses -------------------------------------------------------------


def test_relative_loss_satisfied_margin():
    assert relative_rank_loss(np.array([[0.9], [0.2]]), SPLIT_1x1, 0.1) == 0.0


def test_relative_loss_violated_margin():
    assert relative_rank_loss(np.array([[0.5], [0.6]]), SPLIT_1x1, 0.1) == pytest.approx(0.2, abs=1e-15)


@pytest.mark.parametrize("T", [1, 3, 16])
def test_relative_loss_equal_scores(T):
    split = EasyHardSplit((0, 1), (2, 3), 2)
    assert relative_rank_loss(np.full((6, T), 0.4), split, 0.1) == pytest.approx(0.1 * T, abs=1e-12)


def _hinge_oracle(s, split, delta):
    total = 0.0
    for t in range(s.shape[1]):
        pairs = [max(0.0, s[j, t] - s[i, t] + delta) for i in split.easy for j in split.hard]
        total += sum(pairs) / len(pairs)
    return total


def test_relative_loss_matches_pair_oracle_and_gradient():
    rng = np.random.default_rng(0)
    s = rng.uniform(0.05, 0.95, (8, 4))
    split = EasyHardSplit((0, 3), (5, 6), 2)
    loss, grad = relative_rank_loss(s, split, 0.3, return_grad=True)
    assert loss == pytest.approx(_hinge_oracle(s, split, 0.3), abs=1e-14)
    eps = 1e-7
    for i, t in [(0, 0), (3, 2), (5, 1), (6, 3), (1, 1)]:
        up, down = s.copy(), s.copy()
        up[i, t] += eps
        down[i, t] -= eps
        fd = (_hinge_oracle(up, split, 0.3) - _hinge_oracle(down, split, 0.3)) / (2 * eps)
        assert grad[i, t] == pytest.approx(fd, abs=1e-6)


def test_relative_loss_empty_sets():
    with pytest.raises(ConfigError):
        relative_rank_loss(np.zeros((2, 1)), EasyHardSplit((), (1,), 1), 0.1)


def test_absolute_loss_polarized():
    s = np.array([[1 - 1e-7], [1e-7]])
    assert absolute_anchor_loss(s, SPLIT_1x1) == pytest.approx(0.0, abs=1e-6)


def test_absolute_loss_half():
    s = np.array([[0.5], [0.5]])
    assert absolute_anchor_loss(s, SPLIT_1x1) == pytest.approx(2 * math.log(2), abs=1e-15)
    assert absolute_anchor_loss(s, SPLIT_1x1) == pytest.approx(1.3863, abs=1e-4)


def test_absolute_loss_symmetry():
    rng = np.random.default_rng(1)
    s = rng.uniform(0.01, 0.99, (6, 3))
    split = EasyHardSplit((0, 1), (4, 5), 2)
    swapped = EasyHardSplit((4, 5), (0, 1), 2)
    assert absolute_anchor_loss(s, split) == pytest.approx(absolute_anchor_loss(1 - s, swapped), abs=1e-12)


def test_absolute_loss_clamps_and_rejects():
    assert math.isfinite(absolute_anchor_loss(np.array([[0.0], [1.0]]), SPLIT_1x1))
    with pytest.raises(NumericError):
        absolute_anchor_loss(np.array([[1.2], [0.1]]), SPLIT_1x1)


# -- total loss -----------------------------------------------------------------


def test_total_loss_values():
    cfg = TrainingConfig()
    assert total_loss(1.0, 2.0, 3.0, cfg).total == pytest.approx(3.3, abs=1e-12)
    assert total_loss(0.0, 0.0, 0.0, cfg).total == 0.0
    plain = TrainingConfig(alpha_rel=0.0, alpha_abs=0.0)
    assert total_loss(1.7, 5.0, 9.0, plain) == LossBreakdown(1.7, 5.0, 9.0, 1.7)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(alpha_rel=-0.1)
    with pytest.raises(ConfigError):
        TrainingConfig(delta=0.0)
    with pytest.raises(ConfigError):
        TrainingConfig(B=1)


# -- gradients ----------------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    worst, per_key = gradient_check(seed=seed)
    assert worst < 1e-3
    assert {"rho", "w_s", "b_s"} <= set(per_key)


def _setup(seed=0, T=4, B=8):
    rng = np.random.default_rng(seed)
    model = Model.init("frost", 3, 5, 3, rng)
    head = HaltingHead.init(5, rng)
    X = rng.standard_normal((B, 3))
    labels = rng.integers(0, 3, B)
    return model, head, X, labels, TrainingConfig(T=T, B=B)


def test_task_gradient_ignores_intermediate_outputs():
    model, head, X, labels, cfg = _setup()
    cfg = TrainingConfig(T=cfg.T, B=cfg.B, alpha_rel=0.0, alpha_abs=0.0)
    res = objective(model, head, X, labels, cfg, parts=("task",))
    # the readout only enters the loss at the last step, so the gradient of
    # C equals the single-step readout gradient at h_T
    h_T = res.cache.states[-1]
    y_T = res.cache.outputs[-1]
    p = np.exp(y_T - y_T.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(labels)), labels] -= 1.0
    lam_scale = lambda_value(model.scale) ** (-model.scale.hurst)
    expected = lam_scale * (p / len(labels)).T @ h_T
    assert np.allclose(res.grads["C.weight"], expected, atol=1e-12)


def test_ranking_gradient_does_not_touch_readout():
    model, head, X, labels, cfg = _setup(1)
    res = objective(model, head, X, labels, cfg, parts=("rel", "abs"))
    assert not res.grads["C.weight"].any() and not res.grads["D.weight"].any()


def test_gradient_conflict_of_real_bundles():
    model, head, X, labels, cfg = _setup(2)
    g_task = objective(model, head, X, labels, cfg, parts=("task",)).grads
    g_rank = objective(model, head, X, labels, cfg, parts=("rel", "abs")).grads
    cos, zero = gradient_conflict(g_task, g_rank)
    keys = sorted(g_task)
    a = np.concatenate([np.ravel(g_task[k]) for k in keys])
    b = np.concatenate([np.ravel(g_rank[k]) for k in keys])
    oracle = float(np.dot(a, b) / math.sqrt(np.dot(a, a) * np.dot(b, b)))
    assert not zero and abs(cos - oracle) < 1e-12


# -- optimizer steps and loops -------------------------------------------------


def test_train_step_with_zero_lr_keeps_parameters():
    model, head, X, labels, cfg = _setup(3)
    cfg = TrainingConfig(T=cfg.T, B=cfg.B, lr=0.0)
    before = {k: v.copy() for k, v in all_parameters(model, head).items()}
    losses, norms, _ = train_step(model, head, (X, labels), cfg)
    after = all_parameters(model, head)
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert losses.total > 0 and set(norms) == set(before)


def test_train_step_feeds_sketch_and_moves_parameters():
    model, head, X, labels, cfg = _setup(4)
    sk = KLLSketch()
    before = {k: v.copy() for k, v in all_parameters(model, head).items()}
    train_step(model, head, (X, labels), cfg, sk)
    assert sk.n == cfg.B * cfg.T
    after = all_parameters(model, head)
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def test_train_step_aborts_on_nonfinite_gradient():
    model, head, X, labels, cfg = _setup(5)
    head.w_s[...] = np.nan
    before = {k: v.copy() for k, v in model.parameters().items()}
    with pytest.raises(NumericError):
        train_step(model, head, (X, labels), cfg)
    assert all(np.array_equal(before[k], v) for k, v in model.parameters().items())


def _small_run(seed=0, epochs=2):
    data = generate_dataset(classes=3, per_class=32, d_in=3, seed=seed)
    rng = np.random.default_rng(seed)
    model = Model.init("frost", 3, 5, 3, rng)
    head = HaltingHead.init(5, rng)
    cfg = TrainingConfig(T=4, B=16, epochs=epochs, seed=seed, lr=0.01)
    log, sketch = train(model, head, data, cfg)
    return model, head, log, sketch


def test_train_zero_epochs():
    data = generate_dataset(classes=3, per_class=8, d_in=3, seed=0)
    rng = np.random.default_rng(0)
    model = Model.init("frost", 3, 5, 3, rng)
    head = HaltingHead.init(5, rng)
    before = {k: v.copy() for k, v in all_parameters(model, head).items()}
    log, sketch = train(model, head, data, TrainingConfig(T=4, B=4, epochs=0))
    assert log == [] and sketch.n == 0
    assert all(np.array_equal(before[k], v) for k, v in all_parameters(model, head).items())


def test_train_logs_positive_lambda_and_is_deterministic():
    model_a, _, log_a, sk_a = _small_run()
    _, _, log_b, sk_b = _small_run()
    assert len(log_a) == 2 * (96 // 16)
    assert all(row["lambda"] > 0 for row in log_a)
    assert log_a == log_b and sk_a == sk_b
    assert set(log_a[0]) == {"step", "lambda", "loss_task", "loss_rel", "loss_abs", "mean_s_easy", "mean_s_hard", "s_halt"}


def test_train_rejects_empty_dataset():
    data = generate_dataset(classes=2, per_class=1, d_in=3).subset(np.array([], dtype=int))
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        train(Model.init("frost", 3, 4, 2, rng), HaltingHead.init(4, rng), data, TrainingConfig(T=2, B=2))
