from __future__ import annotations

import math

import numpy as np
import pytest

from fastbat.attacks import LinearizationScheme
from fastbat.autodiff import Tape, Tensor
from fastbat.constraints import active_mask, build_box
from fastbat.data import gen_blobs, gen_two_moons
from fastbat.errors import ContractViolation, TrainingDiverged
from fastbat.models import LossPair, ModelSpec, init_params
from fastbat.trainers import (
    OptimizerState,
    TrainRunConfig,
    cyclic_lr,
    default_ga_coeff,
    default_lambda,
    fast_at_ga_step,
    fast_at_step,
    fast_bat_direction,
    fast_bat_step,
    ga_penalty,
    pgd2_at_step,
    select_checkpoint,
    sgd_step,
    train,
)


# ------------------------------------------------------------ numpy reference for a linear softmax model


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _onehot(y, c):
    out = np.zeros((len(y), c))
    out[np.arange(len(y)), y] = 1.0
    return out


def _residual(w, b, x, d, y):
    return _softmax((x + d) @ w + b) - _onehot(y, w.shape[1])


def _param_grad(w, b, x, d, y):
    r = _residual(w, b, x, d, y) / len(y)
    return (x + d).T @ r, r.sum(axis=0)


def _flat(w, b):
    return np.concatenate([w.ravel(), b.ravel()])


@pytest.fixture
def linear_toy():
    spec = ModelSpec(3, 3, (), seed=4)
    theta = init_params(spec)
    theta = theta.like(3.0 * theta.values)
    rng = np.random.default_rng(12)
    x = rng.uniform(0.1, 0.9, size=(5, 3))
    y = np.array([0, 1, 2, 1, 0])
    d = theta.to_dict()
    return spec, LossPair(spec), theta, x, y, d["layer0.weight"], d["layer0.bias"]


# ------------------------------------------------------------ schedules and optimizer


def test_cyclic_schedule_shape_and_area():
    assert cyclic_lr(0, 10, 0.2) == 0.0
    assert cyclic_lr(5, 10, 0.2) == 0.2
    assert cyclic_lr(10, 10, 0.2) == 0.0
    assert math.isclose(cyclic_lr(2.5, 10, 0.2), 0.1)
    ts = np.linspace(0, 10, 100001)
    area = np.trapezoid([cyclic_lr(t, 10, 0.2) for t in ts], ts)
    assert math.isclose(area, 0.5 * 10 * 0.2, rel_tol=1e-8)


def test_sgd_step_worked_example_and_unroll():
    theta = np.array([1.0, -2.0])
    g = np.array([0.5, 0.5])
    state = OptimizerState(np.zeros(2))
    new, state = sgd_step(theta, g, state, lr=0.1, momentum=0.9, weight_decay=0.01)
    np.testing.assert_allclose(new, [1.0 - 0.1 * 0.51, -2.0 - 0.1 * 0.48])
    # constant gradient, no decay: velocities 1, 1.9, 2.71
    t, s = np.zeros(1), OptimizerState(np.zeros(1))
    for _ in range(3):
        t, s = sgd_step(t, np.ones(1), s, 1.0, 0.9, 0.0)
    np.testing.assert_allclose(t, [-(1 + 1.9 + 2.71)])
    assert s.step_count == 3
    with pytest.raises(ContractViolation):
        sgd_step(np.zeros(2), np.zeros(3), OptimizerState(np.zeros(2)), 0.1, 0.9, 0.0)


def test_defaults_for_lambda_and_ga_coefficient():
    assert math.isclose(default_lambda(8 / 255), 255 / 5000)
    assert math.isclose(default_lambda(16 / 255), 255 / 2500)
    assert math.isclose(default_lambda(0.2, image_domain=False), 4.0)
    assert math.isclose(default_ga_coeff(8 / 255), 0.2)
    assert math.isclose(default_ga_coeff(16 / 255), 2.0)


def test_config_validation():
    with pytest.raises(ContractViolation):
        TrainRunConfig(method="fast_at", lam=1.0)
    with pytest.raises(ContractViolation):
        TrainRunConfig(method="fast_bat", ga_coeff=0.1)
    with pytest.raises(ContractViolation):
        TrainRunConfig(method="sgd")
    with pytest.raises(ContractViolation):
        TrainRunConfig(lam=-1.0)
    assert TrainRunConfig(method="fast_bat", lam=2.0).resolved_lambda() == 2.0


# ------------------------------------------------------------ single steps against hand formulas


def test_fast_at_step_matches_hand_computation(linear_toy):
    spec, pair, theta, x, y, w, b = linear_toy
    eps, lr, wd = 0.2, 0.05, 1e-3
    cfg = TrainRunConfig(method="fast_at", epsilon=eps, momentum=0.9, weight_decay=wd)
    out = fast_at_step(pair, theta, (x, y), cfg, OptimizerState.zeros_like(theta), np.random.default_rng(3), lr)

    box = build_box(x, eps)
    d0 = np.random.default_rng(3).uniform(box.p, box.q)
    d = np.clip(d0 + 1.25 * eps * np.sign(_residual(w, b, x, d0, y) @ w.T), box.p, box.q)
    g = _flat(*_param_grad(w, b, x, d, y))
    np.testing.assert_allclose(out.theta.values, theta.values - lr * (g + wd * theta.values), rtol=1e-12, atol=1e-14)


def test_fast_at_is_deterministic_and_zero_gradient_is_a_noop(linear_toy):
    spec, pair, theta, x, y, *_ = linear_toy
    cfg = TrainRunConfig(method="fast_at", epsilon=0.1, weight_decay=0.0)
    runs = [fast_at_step(pair, theta, (x, y), cfg, OptimizerState.zeros_like(theta), np.random.default_rng(9), 0.1)
            for _ in range(2)]
    np.testing.assert_array_equal(runs[0].theta.values, runs[1].theta.values)
    flat_spec = ModelSpec(3, 1, (), seed=0)
    flat_theta = init_params(flat_spec)
    out = fast_at_step(LossPair(flat_spec), flat_theta, (x, np.zeros(5, dtype=int)), cfg,
                       OptimizerState.zeros_like(flat_theta), np.random.default_rng(0), 0.1)
    np.testing.assert_array_equal(out.theta.values, flat_theta.values)  # one class: loss is identically 0


def test_pgd2_step_unrolls_two_sign_steps(linear_toy):
    spec, pair, theta, x, y, w, b = linear_toy
    eps, lr = 0.2, 0.1
    cfg = TrainRunConfig(method="pgd2_at", epsilon=eps, weight_decay=0.0)
    out = pgd2_at_step(pair, theta, (x, y), cfg, OptimizerState.zeros_like(theta), np.random.default_rng(1), lr)
    box = build_box(x, eps)
    d = np.random.default_rng(1).uniform(box.p, box.q)
    for _ in range(2):
        d = np.clip(d + 0.5 * eps * np.sign(_residual(w, b, x, d, y) @ w.T), box.p, box.q)
    g = _flat(*_param_grad(w, b, x, d, y))
    np.testing.assert_allclose(out.theta.values, theta.values - lr * g, rtol=1e-12, atol=1e-14)


def test_ga_with_zero_coefficient_is_fast_at(linear_toy):
    spec, pair, theta, x, y, *_ = linear_toy
    base = dict(epsilon=0.1, weight_decay=0.0)
    a = fast_at_step(pair, theta, (x, y), TrainRunConfig(method="fast_at", **base),
                     OptimizerState.zeros_like(theta), np.random.default_rng(2), 0.1)
    b = fast_at_ga_step(pair, theta, (x, y), TrainRunConfig(method="fast_at_ga", ga_coeff=0.0, **base),
                        OptimizerState.zeros_like(theta), np.random.default_rng(2), 0.1)
    np.testing.assert_array_equal(a.theta.values, b.theta.values)


def _penalty_value(pair, theta, x, y, eta):
    with Tape():
        params = {k: Tensor(v, requires_grad=True) for k, v in theta.to_dict().items()}
        return float(ga_penalty(pair, params, x, y, eta).data)


def test_ga_penalty_values(linear_toy):
    spec, pair, theta, x, y, w, b = linear_toy
    eta = np.random.default_rng(5).uniform(-0.1, 0.1, size=x.shape)
    g0 = _residual(w, b, x, 0 * x, y) @ w.T
    g1 = _residual(w, b, x, eta, y) @ w.T
    cos = np.sum(g0 * g1, axis=1) / (np.linalg.norm(g0, axis=1) * np.linalg.norm(g1, axis=1))
    assert math.isclose(_penalty_value(pair, theta, x, y, eta), float(np.mean(1 - cos)), rel_tol=1e-12)
    # a single-output linear head has a constant input gradient direction per example
    one = ModelSpec(3, 2, (), seed=1)
    th = init_params(one)
    w2 = th.to_dict()["layer0.weight"]
    th = th.like(np.concatenate([np.stack([w2[:, 0], -w2[:, 0]], 1).ravel(), np.zeros(2)]))
    assert abs(_penalty_value(LossPair(one), th, x, np.array([0, 1, 0, 1, 0]), eta)) < 1e-12


def test_fast_bat_without_implicit_term_is_plain_gradient_at_delta_star(linear_toy):
    spec, pair, theta, x, y, w, b = linear_toy
    cfg = TrainRunConfig(method="fast_bat", epsilon=0.2, alpha2_ratio=0.0)
    lam = 2.0
    _, g = fast_bat_direction(pair, theta, (x, y), cfg, np.random.default_rng(0), lam)
    box = build_box(x, 0.2)
    z = np.clip(_residual(w, b, x, 0 * x, y) @ w.T / lam, box.p, box.q)
    d = np.clip(z + _residual(w, b, x, z, y) @ w.T / lam, box.p, box.q)
    np.testing.assert_allclose(g, _flat(*_param_grad(w, b, x, d, y)), rtol=1e-12, atol=1e-14)


def test_fast_bat_direction_includes_the_implicit_term(linear_toy):
    spec, pair, theta, x, y, w, b = linear_toy
    lam, ratio, eps = 2.0, 0.3, 0.2
    cfg = TrainRunConfig(method="fast_bat", epsilon=eps, alpha2_ratio=ratio)
    _, g = fast_bat_direction(pair, theta, (x, y), cfg, np.random.default_rng(0), lam)

    box = build_box(x, eps)
    z = np.clip(_residual(w, b, x, 0 * x, y) @ w.T / lam, box.p, box.q)
    d = np.clip(z + _residual(w, b, x, z, y) @ w.T / lam, box.p, box.q)
    u = active_mask(d, box).interior * (_residual(w, b, x, d, y) @ w.T)

    def phi(vec):  # <grad_delta of the mean attack loss at d, H_C v>
        ww, bb = vec[: w.size].reshape(w.shape), vec[w.size:]
        return float(np.sum(-(_residual(ww, bb, x, d, y) @ ww.T) / len(y) * u))

    base, h = _flat(w, b), 1e-6
    dphi = np.array([(phi(base + h * e) - phi(base - h * e)) / (2 * h) for e in np.eye(base.size)])
    expected = _flat(*_param_grad(w, b, x, d, y)) + ratio * lam * (-(1 / lam) * dphi)
    np.testing.assert_allclose(g, expected, rtol=1e-6, atol=1e-9)


def test_fast_bat_step_accepts_a_custom_lower_solver(linear_toy):
    spec, pair, theta, x, y, *_ = linear_toy
    cfg = TrainRunConfig(method="fast_bat", epsilon=0.1, lam=1.0, weight_decay=0.0, momentum=0.0,
                         linearization=LinearizationScheme("uniform_random"))
    zero = lambda *args: np.zeros_like(x)
    out = fast_bat_step(pair, theta, (x, y), cfg, OptimizerState.zeros_like(theta), np.random.default_rng(0), 0.1,
                        lower_solver=zero)
    assert out.theta.size == theta.size and np.isfinite(out.loss)


# ------------------------------------------------------------ the training loop


def test_zero_epochs_returns_initial_parameters():
    data = gen_two_moons(40, seed=0)
    cfg = TrainRunConfig(method="fast_at", epochs=0, epsilon=0.05, hidden_dims=(4,))
    result = train(cfg, data)
    assert result.history == [] and result.best_epoch is None
    np.testing.assert_array_equal(result.theta.values, init_params(result.spec).values)


def test_checkpoint_selection_prefers_first_maximum():
    assert select_checkpoint([10.0, 30.0, 20.0]) == 2
    assert select_checkpoint([5.0, 5.0]) == 1
    assert select_checkpoint([]) is None


def test_training_is_reproducible_and_reports_every_epoch():
    data = gen_blobs(60, centers=3, seed=3)
    cfg = TrainRunConfig(method="fast_bat", epochs=2, batch_size=16, epsilon=0.05, hidden_dims=(8,),
                         eval_pgd_steps=3, eval_pgd_restarts=1, seed=5)
    seen = []
    a = train(cfg, data, on_epoch=seen.append)
    b = train(cfg, data)
    assert [r.epoch for r in seen] == [1, 2]
    strip = lambda rows: [(r.lr, r.train_loss, r.sa_percent, r.ra_pgd_percent, r.ga_score) for r in rows]
    assert strip(a.history) == strip(b.history)
    np.testing.assert_array_equal(a.final_theta.values, b.final_theta.values)
    assert a.history[-1].lr == 0.0  # the cyclic schedule ends at zero


def test_divergence_is_reported_with_the_step(monkeypatch):
    from fastbat import trainers

    real = trainers.STEP_FUNCTIONS["fast_at"]
    calls = []

    def poisoned(*args, **kwargs):
        out = real(*args, **kwargs)
        calls.append(1)
        if len(calls) == 3:
            out.theta.values[0] = np.nan
        return out

    monkeypatch.setitem(trainers.STEP_FUNCTIONS, "fast_at", poisoned)
    data = gen_two_moons(40, seed=1)
    cfg = TrainRunConfig(method="fast_at", epochs=1, batch_size=8, epsilon=0.05, hidden_dims=(4,))
    with pytest.raises(TrainingDiverged, match="step 2"):
        train(cfg, data)
