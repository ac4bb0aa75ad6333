from __future__ import annotations

import numpy as np
import pytest

from fastbat import oracles
from fastbat.attacks import lower_level_solve
from fastbat.autodiff import ParamVector
from fastbat.autodiff.functional import value_and_grad
from fastbat.checks import bilinear_head
from fastbat.constraints import active_mask, build_box, uniform_in_box
from fastbat.errors import CGConvergenceError, ContractViolation, IndefiniteSystemError
from fastbat.implicit_grad import (
    IgMode,
    batched_cg,
    ig_jvp_free,
    ig_vp_aware,
    ig_vp_free,
    reduced_solve,
    total_upper_gradient,
)
from fastbat.models import LossPair, ModelSpec, init_params


def _dense_blocks(pair, theta: ParamVector, x, y, delta):
    """Attack-loss Hessian (d x d) and mixed block (n x d) for one example, by differences of gradients."""
    f = pair.attack_fn(x, y)
    grad_delta = lambda d: value_and_grad(f, theta.to_dict(), d.reshape(x.shape), wrt=(1,))[1][0].ravel()
    hess = oracles.fd_jacobian(grad_delta, delta.ravel(), 1e-5)
    grad_theta_delta = lambda vec: value_and_grad(f, theta.like(vec).to_dict(), delta, wrt=(1,))[1][0].ravel()
    mixed = oracles.fd_jacobian(grad_theta_delta, theta.values.copy(), 1e-5).T
    return 0.5 * (hess + hess.T), mixed


@pytest.fixture
def one_example():
    spec = ModelSpec(4, 3, (5,), "softplus", seed=21)
    pair = LossPair(spec)
    theta = init_params(spec)
    theta = theta.like(2.0 * theta.values)
    rng = np.random.default_rng(8)
    x = rng.uniform(0.05, 0.95, size=(1, 4))
    y = np.array([2])
    box = build_box(x, 0.3)
    lam = 0.4
    z = uniform_in_box(rng, box)
    delta = lower_level_solve(pair, theta, x, y, z, lam, box)
    return pair, theta, x, y, box, lam, delta


def test_hessian_aware_matches_the_literal_bordered_formula(one_example):
    pair, theta, x, y, box, lam, delta = one_example
    mask = active_mask(delta, box)
    assert mask.active.any() and mask.interior.any()
    hess, mixed = _dense_blocks(pair, theta, x, y, delta)
    b0 = oracles.active_rows(delta.ravel(), box.p.ravel(), box.q.ravel(), mask.interior.ravel())
    dense = oracles.dense_ig(hess + lam * np.eye(hess.shape[0]), mixed, b0)
    v = np.random.default_rng(1).normal(size=x.shape)
    fast = theta.flatten(ig_vp_aware(pair.attack_fn(x, y), theta.to_dict(), delta, v, mask, lam,
                                     IgMode("hessian_aware", cg_tol=1e-13)))
    assert oracles.rel_error(fast, dense @ v.ravel()) <= 1e-6


def test_hessian_free_matches_the_formula_with_zero_hessian(one_example):
    pair, theta, x, y, box, lam, delta = one_example
    mask = active_mask(delta, box)
    _, mixed = _dense_blocks(pair, theta, x, y, delta)
    b0 = oracles.active_rows(delta.ravel(), box.p.ravel(), box.q.ravel(), mask.interior.ravel())
    d = delta.size
    dense = oracles.dense_ig(lam * np.eye(d), mixed, b0)
    np.testing.assert_allclose(dense, -(1 / lam) * mixed @ oracles.dense_hc(b0, d), atol=1e-12)
    v = np.random.default_rng(2).normal(size=x.shape)
    fast = theta.flatten(ig_vp_free(pair.attack_fn(x, y), theta.to_dict(), delta, v, mask, lam))
    assert oracles.rel_error(fast, dense @ v.ravel()) <= 1e-6


def _linear_bilinear(seed=0, lam=1.5):
    spec = ModelSpec(4, 3, (), seed=seed)
    pair = LossPair(spec, attack_head=bilinear_head)
    theta = init_params(spec)
    rng = np.random.default_rng(seed)
    x = np.full((2, 4), 0.5)
    y = np.array([1, 2])
    box = build_box(x, 0.3)
    return pair, theta, x, y, box, lam, rng


def test_bilinear_sensitivity_has_a_closed_form():
    pair, theta, x, y, box, lam, rng = _linear_bilinear()
    z = np.zeros_like(x)
    w = rng.normal(size=theta.size)
    sens = oracles.fd_lower_level_sensitivity(pair, theta, x, y, w, z, lam, box, problem="linearized")
    assert sens.stable
    delta = lower_level_solve(pair, theta, x, y, z, lam, box)
    mask = active_mask(delta, box)
    # Per-example attack gradient is -W[:, y_i], so delta_i = P(z_i + W[:, y_i] / lam).
    w_weight = theta.like(w).to_dict()["layer0.weight"]
    expected = (w_weight[:, y].T / lam) * mask.interior
    np.testing.assert_allclose(sens.derivative, expected, atol=1e-9)
    fast = ig_jvp_free(pair.attack_fn(x, y), theta.to_dict(), delta, theta.like(w).to_dict(), mask, lam)
    np.testing.assert_allclose(fast, expected, atol=1e-12)


class _ThetaFree:
    """Attack loss that ignores the parameters entirely."""

    def attack_fn(self, x, y, reduction="mean"):
        target = np.full(x.shape, 0.05)
        return lambda params, delta: ((delta - target) * (delta - target)).sum()


def test_parameter_independent_attack_has_zero_sensitivity():
    _, theta, x, y, box, lam, rng = _linear_bilinear()
    sens = oracles.fd_lower_level_sensitivity(_ThetaFree(), theta, x, y, rng.normal(size=theta.size),
                                              np.zeros_like(x), lam, box, problem="proximal")
    assert sens.stable
    np.testing.assert_array_equal(sens.derivative, np.zeros_like(x))


def test_boundary_crossing_instance_is_flagged_unstable():
    pair, theta, x, y, box, lam, rng = _linear_bilinear()
    weight = theta.to_dict()["layer0.weight"]
    z = box.q - weight[:, y].T / lam  # unclipped solution lands exactly on the upper bound
    w = np.ones(theta.size)
    sens = oracles.fd_lower_level_sensitivity(pair, theta, x, y, w, z, lam, box, problem="linearized")
    assert not sens.stable


def test_cg_solves_block_diagonal_spd_rows():
    rng = np.random.default_rng(0)
    mats = []
    for _ in range(3):
        a = rng.normal(size=(5, 5))
        mats.append(a @ a.T + np.eye(5))
    mats = np.stack(mats)
    b = rng.normal(size=(3, 5))
    x = batched_cg(lambda p: np.einsum("bij,bj->bi", mats, p), b, 1e-12, 100)
    np.testing.assert_allclose(np.einsum("bij,bj->bi", mats, x), b, atol=1e-9)


def test_cg_reports_indefinite_and_stalled_systems():
    b = np.ones((1, 2))
    with pytest.raises(IndefiniteSystemError):
        batched_cg(lambda p: -p, b, 1e-10, 10)
    diag = np.array([[1.0, 1e6]])
    with pytest.raises(CGConvergenceError):
        batched_cg(lambda p: diag * p, np.array([[1.0, 1.0]]), 1e-12, 1)


def test_reduced_solve_is_zero_on_active_coordinates(one_example):
    pair, theta, x, y, box, lam, delta = one_example
    mask = active_mask(delta, box)
    u = reduced_solve(pair.attack_fn(x, y), theta.to_dict(), delta, np.ones_like(x), mask, lam, IgMode("hessian_aware"))
    assert np.all(u[mask.active] == 0.0)


def test_mode_and_lambda_validation(one_example):
    pair, theta, x, y, box, lam, delta = one_example
    with pytest.raises(ContractViolation):
        IgMode("exact")
    with pytest.raises(ContractViolation):
        ig_vp_free(pair.attack_fn(x, y), theta.to_dict(), delta, np.ones_like(x), active_mask(delta, box), 0.0)


def test_total_upper_gradient_is_partial_plus_implicit_term(one_example):
    pair, theta, x, y, box, lam, _ = one_example
    up = total_upper_gradient(pair, theta, x, y, np.zeros_like(x), lam, box)
    np.testing.assert_allclose(up.total.values, up.grad_theta.values + up.ig_term.values)
