"""Implicit-gradient products for the box-constrained lower-level problem.

Notation: ``attack(params, delta)`` is the batch-mean attack loss, ``delta``
has one row per example and each row owns an independent lower-level
problem whose Hessian is ``H_i + lam * I``.

The Hessian-aware operator uses the active-set form of the KKT sensitivity.
For a box, the bordered inverse

    G^-1 - G^-1 B0^T (B0 G^-1 B0^T)^-1 B0 G^-1

equals the inverse of G restricted to the free (interior) coordinates,
padded with zeros on the active ones. We solve that reduced system with
matrix-free conjugate gradients, so active coordinates are annihilated
exactly instead of up to solver error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from fastbat.attacks import lower_level_solve
from fastbat.autodiff import ParamVector, hvp_delta, mixed_partial_apply, mixed_partial_apply_t
from fastbat.autodiff.functional import value_and_grad
from fastbat.constraints import ActiveMask, ConstraintBox, active_mask, hc_apply
from fastbat.errors import CGConvergenceError, ContractViolation, IndefiniteSystemError
from fastbat.models import LossPair

IG_MODES = ("hessian_free", "hessian_aware")


@dataclass(frozen=True)
class IgMode:
    mode: str = "hessian_free"
    cg_tol: float = 1e-10
    cg_max_iters: int = 500

    def __post_init__(self):
        if self.mode not in IG_MODES:
            raise ContractViolation(f"unknown IG mode {self.mode!r}")
        if self.mode == "hessian_aware" and (self.cg_tol <= 0 or self.cg_max_iters < 1):
            raise ContractViolation("hessian_aware needs cg_tol > 0 and cg_max_iters >= 1")


def _check_lam(lam: float) -> None:
    if not lam > 0:
        raise ContractViolation(f"lambda must be positive, got {lam}")


def _scale(tree: Mapping[str, np.ndarray], c: float) -> dict:
    return {k: c * v for k, v in tree.items()}


def _rows(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], -1) if a.ndim > 1 else a.reshape(1, -1)


def _rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", _rows(a), _rows(b))


def _per_row(c: np.ndarray, like: np.ndarray) -> np.ndarray:
    return c.reshape((-1,) + (1,) * (like.ndim - 1)) if like.ndim > 1 else c[0]


def batched_cg(
    apply_a: Callable[[np.ndarray], np.ndarray], b: np.ndarray, tol: float, max_iters: int
) -> np.ndarray:
    """Row-wise conjugate gradients for a block-diagonal SPD operator.

    Each leading-axis row is an independent system; convergence is
    ``||r_i|| <= tol * ||b_i||``. Raises on non-positive curvature or when
    any row misses the tolerance within ``max_iters``.
    """
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = _rowdot(r, r)
    b_norm = np.sqrt(rs)
    thresh = tol * b_norm
    live = b_norm > thresh
    for _ in range(max_iters):
        if not live.any():
            return x
        ap = apply_a(p)
        pap = _rowdot(p, ap)
        if np.any(pap[live] <= 0):
            raise IndefiniteSystemError(
                "non-positive curvature in the lower-level Hessian; increase lambda"
            )
        alpha = np.where(live, rs / np.where(live, pap, 1.0), 0.0)
        x = x + _per_row(alpha, x) * p
        r = r - _per_row(alpha, r) * ap
        rs_new = _rowdot(r, r)
        beta = np.where(live, rs_new / np.where(live, rs, 1.0), 0.0)
        p = r + _per_row(beta, p) * p
        rs = np.where(live, rs_new, rs)
        live = live & (np.sqrt(rs) > thresh)
    if live.any():
        worst = float(np.max(np.sqrt(rs[live]) / b_norm[live]))
        raise CGConvergenceError(
            f"CG stopped after {max_iters} iterations with relative residual {worst:.3e} > {tol:.1e}"
        )
    return x


def reduced_solve(
    attack: Callable, theta, delta_star: np.ndarray, rhs: np.ndarray, mask: ActiveMask,
    lam: float, cfg: IgMode,
) -> np.ndarray:
    """Solve (H + lam I) u = rhs on the free coordinates; u is zero on active ones."""
    free = mask.as_float(delta_star.dtype)
    batch = delta_star.shape[0] if delta_star.ndim > 1 else 1

    def apply_a(p):
        hp = hvp_delta(attack, theta, delta_star, free * p)
        return free * (batch * hp) + lam * p

    return free * batched_cg(apply_a, free * rhs, cfg.cg_tol, cfg.cg_max_iters)


def ig_vp_free(attack: Callable, theta, delta_star, v, mask: ActiveMask, lam: float) -> dict:
    """Transposed implicit gradient applied to ``v`` under a zero attack Hessian.

    Returns -(1/lam) * d2 l_atk/dtheta ddelta @ (interior-masked v), theta-shaped.
    """
    _check_lam(lam)
    return _scale(mixed_partial_apply(attack, theta, delta_star, hc_apply(v, mask)), -1.0 / lam)


def ig_vp_aware(
    attack: Callable, theta, delta_star, v, mask: ActiveMask, lam: float, cfg: IgMode
) -> dict:
    """Transposed implicit gradient applied to ``v`` with the attack Hessian included."""
    _check_lam(lam)
    u = reduced_solve(attack, theta, delta_star, v, mask, lam, cfg)
    return _scale(mixed_partial_apply(attack, theta, delta_star, u), -1.0)


def ig_jvp_free(attack: Callable, theta, delta_star, w, mask: ActiveMask, lam: float) -> np.ndarray:
    """Forward-mode counterpart of :func:`ig_vp_free`: d delta*/d theta along ``w``."""
    _check_lam(lam)
    batch = delta_star.shape[0] if delta_star.ndim > 1 else 1
    b = batch * mixed_partial_apply_t(attack, theta, delta_star, w)
    return (-1.0 / lam) * hc_apply(b, mask)


def ig_jvp_aware(
    attack: Callable, theta, delta_star, w, mask: ActiveMask, lam: float, cfg: IgMode
) -> np.ndarray:
    """Forward-mode counterpart of :func:`ig_vp_aware`."""
    _check_lam(lam)
    batch = delta_star.shape[0] if delta_star.ndim > 1 else 1
    b = batch * mixed_partial_apply_t(attack, theta, delta_star, w)
    return -reduced_solve(attack, theta, delta_star, b, mask, lam, cfg)


def ig_vector_product(attack, theta, delta_star, v, mask, lam, cfg: IgMode) -> dict:
    if cfg.mode == "hessian_free":
        return ig_vp_free(attack, theta, delta_star, v, mask, lam)
    return ig_vp_aware(attack, theta, delta_star, v, mask, lam, cfg)


@dataclass
class UpperGradient:
    total: ParamVector
    grad_theta: ParamVector
    ig_term: ParamVector
    delta_star: np.ndarray
    mask: ActiveMask
    loss: float


def upper_level_parts(pair: LossPair, theta: ParamVector, x, y, delta_star):
    """Training loss, its theta-gradient and per-example delta-gradients at ``delta_star``."""
    loss, (g_theta, g_delta) = value_and_grad(pair.train_fn(x, y), theta.to_dict(), delta_star)
    batch = delta_star.shape[0]
    return loss, theta.flatten(g_theta), batch * g_delta


def total_upper_gradient(
    pair: LossPair,
    theta: ParamVector,
    x,
    y,
    z,
    lam: float,
    box: ConstraintBox,
    cfg: Optional[IgMode] = None,
) -> UpperGradient:
    """Full d l_tr(theta, delta*(theta)) / d theta: partial gradient plus IG correction."""
    cfg = cfg or IgMode()
    delta_star = lower_level_solve(pair, theta, x, y, z, lam, box)
    loss, g_theta, v = upper_level_parts(pair, theta, x, y, delta_star)
    mask = active_mask(delta_star, box)
    ig = ig_vector_product(pair.attack_fn(x, y), theta.to_dict(), delta_star, v, mask, lam, cfg)
    ig_flat = theta.flatten(ig)
    return UpperGradient(
        total=theta.like(g_theta + ig_flat),
        grad_theta=theta.like(g_theta),
        ig_term=theta.like(ig_flat),
        delta_star=delta_star,
        mask=mask,
        loss=loss,
    )
