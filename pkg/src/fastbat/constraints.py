"""Per-coordinate box {delta : ||delta||_inf <= eps, 0 <= x + delta <= 1}.

The box is stored as lower/upper bounds ``p``/``q`` shaped like the input
batch. Projection is a clamp; the interior mask feeds the Hessian-free
implicit-gradient operator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from fastbat.errors import ContractViolation


@dataclass(frozen=True)
class ConstraintBox:
    p: np.ndarray
    q: np.ndarray
    epsilon: float

    @property
    def shape(self) -> tuple:
        return self.p.shape

    def default_tolerance(self) -> float:
        return 1e-8 * max(1.0, self.epsilon)


@dataclass(frozen=True)
class ActiveMask:
    """``interior[i]`` is True where delta_i sits strictly inside (p_i, q_i)."""

    interior: np.ndarray

    @property
    def active(self) -> np.ndarray:
        return ~self.interior

    def as_float(self, dtype=np.float64) -> np.ndarray:
        return self.interior.astype(dtype)


def build_box(x: np.ndarray, epsilon: float) -> ConstraintBox:
    x = np.asarray(x)
    if epsilon < 0:
        raise ContractViolation(f"epsilon must be >= 0, got {epsilon}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ContractViolation("inputs must lie in [0, 1]; refusing to clamp silently")
    p = np.maximum(-epsilon, -x)
    q = np.minimum(epsilon, 1.0 - x)
    return ConstraintBox(p=p, q=q, epsilon=float(epsilon))


def project(v: np.ndarray, box: ConstraintBox) -> np.ndarray:
    v = np.asarray(v)
    if v.shape != box.shape:
        raise ContractViolation(f"shape {v.shape} does not match box {box.shape}")
    return np.minimum(np.maximum(v, box.p), box.q)


def uniform_in_box(rng: np.random.Generator, box: ConstraintBox) -> np.ndarray:
    return rng.uniform(box.p, box.q)


def active_mask(delta: np.ndarray, box: ConstraintBox, tol: Optional[float] = None) -> ActiveMask:
    """Strict-interior indicator with tolerance ``tol`` (default 1e-8 * max(1, eps)).

    Degenerate coordinates (p_i == q_i) are always active.
    """
    delta = np.asarray(delta)
    if delta.shape != box.shape:
        raise ContractViolation(f"shape {delta.shape} does not match box {box.shape}")
    tau = box.default_tolerance() if tol is None else tol
    if np.any(delta < box.p - tau) or np.any(delta > box.q + tau):
        raise ContractViolation("delta lies outside its box beyond tolerance")
    interior = (delta > box.p + tau) & (delta < box.q - tau)
    return ActiveMask(interior=interior)


def hc_apply(v: np.ndarray, mask: ActiveMask) -> np.ndarray:
    """Zero the active coordinates of ``v`` (the diagonal 0/1 operator)."""
    v = np.asarray(v)
    if v.shape != mask.interior.shape:
        raise ContractViolation(f"shape {v.shape} does not match mask {mask.interior.shape}")
    return v * mask.interior
