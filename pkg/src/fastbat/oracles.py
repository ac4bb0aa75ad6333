"""Slow, independent reference computations.

Nothing here calls :mod:`fastbat.attacks` or :mod:`fastbat.implicit_grad`;
projections and interior tests are re-derived locally so a bug in those
modules cannot cancel out in a comparison. First-order gradients come from
the autodiff engine, which is itself checked against :func:`fd_gradient`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from fastbat.autodiff import ParamVector, hvp_delta
from fastbat.autodiff.functional import value_and_grad


def rel_error(a, b, floor: float = 1e-8) -> float:
    """max|a - b| / max(max|b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor)) if a.size else 0.0


def default_step(at: np.ndarray) -> float:
    return 1e-5 * max(1.0, float(np.max(np.abs(at))) if np.size(at) else 1.0)


def fd_gradient(f: Callable[[np.ndarray], float], at: np.ndarray, h: Optional[float] = None) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time."""
    at = np.asarray(at, dtype=np.float64)
    h = default_step(at) if h is None else h
    out = np.zeros_like(at)
    flat = at.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(at)
        flat[i] = orig - h
        down = f(at)
        flat[i] = orig
        g[i] = (up - down) / (2.0 * h)
    return out


def fd_directional(g: Callable[[np.ndarray], np.ndarray], at: np.ndarray, v: np.ndarray, h: float):
    """(g(at + h v) - g(at - h v)) / 2h for a vector-valued ``g``."""
    return (np.asarray(g(at + h * v)) - np.asarray(g(at - h * v))) / (2.0 * h)


def fd_jacobian(g: Callable[[np.ndarray], np.ndarray], at: np.ndarray, h: Optional[float] = None) -> np.ndarray:
    """Dense Jacobian of vector-valued ``g`` by central differences; rows index outputs."""
    at = np.asarray(at, dtype=np.float64)
    h = default_step(at) if h is None else h
    cols = []
    for i in range(at.size):
        e = np.zeros(at.size)
        e[i] = 1.0
        cols.append(fd_directional(lambda a: np.ravel(g(a.reshape(at.shape))), at.ravel(), e, h))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------- lower-level references


def _clip(v, p, q):
    return np.minimum(np.maximum(v, p), q)


def _interior(delta, p, q, eps):
    tau = 1e-8 * max(1.0, eps)
    return (delta > p + tau) & (delta < q - tau)


def _attack_grad(pair, theta, x, y, delta) -> np.ndarray:
    params = theta.to_dict() if isinstance(theta, ParamVector) else theta
    _, (g,) = value_and_grad(pair.attack_fn(x, y, "sum"), params, delta, wrt=(1,))
    return g


def sign_linearized_solve(pair, theta, x, y, z, lam: float, box) -> np.ndarray:
    """Minimizer of the sign-linearized lower level: P(z - (1/lam) sign(grad l_atk(z)))."""
    g = _attack_grad(pair, theta, x, y, z)
    return _clip(z - (1.0 / lam) * np.sign(g), box.p, box.q)


def linearized_solve(pair, theta, x, y, z, lam: float, box) -> np.ndarray:
    """Closed form of the first-order linearized lower level, recomputed independently."""
    g = _attack_grad(pair, theta, x, y, z)
    return _clip(z - g / lam, box.p, box.q)


def projected_gd(grad_fn: Callable[[np.ndarray], np.ndarray], start, p, q, step: float, iters: int):
    """Plain projected gradient descent with a fixed step."""
    d = np.array(start, dtype=np.float64)
    for _ in range(iters):
        d = _clip(d - step * grad_fn(d), p, q)
    return d


def proximal_solve(
    pair, theta, x, y, z, lam: float, box, step: Optional[float] = None,
    max_iters: int = 20000, tol: float = 1e-15,
) -> np.ndarray:
    """argmin over the box of l_atk(theta, delta) + lam/2 ||delta - z||^2, per example.

    Projected gradient until the fixed-point update stalls below ``tol``. The
    default step assumes the attack Hessian norm is below ``lam``.
    """
    step = 1.0 / (2.0 * lam) if step is None else step
    d = _clip(np.array(z, dtype=np.float64), box.p, box.q)
    for _ in range(max_iters):
        g = _attack_grad(pair, theta, x, y, d) + lam * (d - z)
        nxt = _clip(d - step * g, box.p, box.q)
        if np.max(np.abs(nxt - d)) <= tol:
            return nxt
        d = nxt
    return d


@dataclass
class Sensitivity:
    derivative: np.ndarray
    stable: bool  # interior set identical at theta - h w, theta, theta + h w


def fd_lower_level_sensitivity(
    pair, theta: ParamVector, x, y, w: np.ndarray, z, lam: float, box,
    h: float = 1e-4, problem: str = "proximal",
) -> Sensitivity:
    """Central difference of delta*(theta) along the flat direction ``w``.

    ``problem="linearized"`` differentiates the closed-form first-order
    solution; ``"proximal"`` differentiates the exact minimizer of the attack
    loss plus the lam-proximal term (the problem whose Hessian is H + lam I).
    """
    solve = {"linearized": linearized_solve, "proximal": proximal_solve}[problem]
    sols = [solve(pair, theta.like(theta.values + s * h * w), x, y, z, lam, box) for s in (1, 0, -1)]
    masks = [_interior(s, box.p, box.q, box.epsilon) for s in sols]
    stable = all(np.array_equal(masks[1], m) for m in masks)
    return Sensitivity(derivative=(sols[0] - sols[2]) / (2.0 * h), stable=stable)


# ---------------------------------------------------------------- dense constraint algebra


def active_rows(delta: np.ndarray, p: np.ndarray, q: np.ndarray, interior: np.ndarray) -> np.ndarray:
    """Active rows of B = [I; -I] for a single flat delta, as a dense |A| x d matrix.

    A coordinate at (or nearer) its upper bound contributes +e_i, otherwise -e_i.
    Degenerate coordinates contribute one row only, keeping B0 full row rank.
    """
    d = delta.size
    rows = []
    for i in np.flatnonzero(~interior.ravel()):
        e = np.zeros(d)
        e[i] = 1.0 if abs(delta.flat[i] - q.flat[i]) <= abs(delta.flat[i] - p.flat[i]) else -1.0
        rows.append(e)
    return np.array(rows).reshape(len(rows), d)


def dense_hc(b0: np.ndarray, d: int) -> np.ndarray:
    return np.eye(d) - b0.T @ b0


def dense_ig(hess_g: np.ndarray, mixed: np.ndarray, b0: np.ndarray) -> np.ndarray:
    """Literal KKT implicit gradient (n x d) from dense blocks.

    ``mixed`` is d2g/dtheta ddelta (n x d), ``hess_g`` is d2g/ddelta2 (d x d).
    """
    g_inv = np.linalg.inv(hess_g)
    ig = -mixed @ g_inv
    if b0.shape[0]:
        inner = np.linalg.inv(b0 @ g_inv @ b0.T)
        ig = ig + mixed @ g_inv @ b0.T @ inner @ b0 @ g_inv
    return ig


# ---------------------------------------------------------------- curvature and convergence


def hessian_norm_probe(f: Callable, theta, delta: np.ndarray, probes: int = 1, seed: int = 0,
                       iters: int = 100) -> float:
    """Spectral-norm estimate of d2f/ddelta2 by power iteration on HVPs."""
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(probes):
        v = rng.normal(size=delta.shape)
        v /= np.linalg.norm(v)
        est = 0.0
        for _ in range(iters):
            hv = hvp_delta(f, theta, delta, v)
            norm = float(np.linalg.norm(hv))
            est = abs(float(np.vdot(v, hv)))
            if norm == 0.0:
                break
            v = hv / norm
        best = max(best, est)
    return best


@dataclass
class ConvergenceSummary:
    steps: int
    running_min: np.ndarray
    mean_full: float
    mean_half: float
    ratio: float  # mean over T / mean over the first T // 2


def convergence_monitor(history) -> ConvergenceSummary:
    h = np.asarray(history, dtype=np.float64)
    if h.size == 0:
        raise ValueError("empty history")
    half = h[: max(1, h.size // 2)]
    full_mean = float(h.mean())
    half_mean = float(half.mean())
    return ConvergenceSummary(
        steps=h.size,
        running_min=np.minimum.accumulate(h),
        mean_full=full_mean,
        mean_half=half_mean,
        ratio=full_mean / half_mean if half_mean else float("nan"),
    )
