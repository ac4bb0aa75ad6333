"""Perturbation generators.

All generators return perturbations inside the box (they end in a
projection). Gradients with respect to ``delta`` are per-example: they are
taken of the batch *sum* so each row is the gradient of its own loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from fastbat.autodiff import ParamVector, Tape, Tensor, grad, softmax_cross_entropy
from fastbat.autodiff.functional import value_and_grad
from fastbat.constraints import ConstraintBox, project, uniform_in_box
from fastbat.errors import ContractViolation
from fastbat.models import LossPair

STREAM_PGD = 1

LINEARIZATION_KINDS = (
    "uniform_random",
    "random_corner",
    "one_step_sign_pgd",
    "one_step_pgd_no_sign",
)


@dataclass(frozen=True)
class LinearizationScheme:
    """How the linearization point z is drawn. ``step=None`` means 1/lambda."""

    kind: str = "one_step_pgd_no_sign"
    step: Optional[float] = None

    def __post_init__(self):
        if self.kind not in LINEARIZATION_KINDS:
            raise ContractViolation(f"unknown linearization scheme {self.kind!r}")
        if self.step is not None and self.step <= 0:
            raise ContractViolation("linearization step must be positive")


@dataclass(frozen=True)
class PgdConfig:
    steps: int = 50
    restarts: int = 10
    step_size: Optional[float] = None  # None -> epsilon / 4
    rng_seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.restarts < 1:
            raise ContractViolation("PGD needs steps >= 1 and restarts >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ContractViolation("PGD step_size must be positive")


def _params(theta) -> dict:
    return theta.to_dict() if isinstance(theta, ParamVector) else dict(theta)


def input_gradient(fn, theta, delta: np.ndarray) -> np.ndarray:
    """Gradient of ``fn(params, delta)`` with respect to ``delta``."""
    _, (g,) = value_and_grad(fn, _params(theta), delta, wrt=(1,))
    return g


def sign_step(pair: LossPair, theta, x, y, delta0, alpha: float, box: ConstraintBox) -> np.ndarray:
    """One signed ascent step on the training loss from ``delta0``, then project."""
    g = input_gradient(pair.train_fn(x, y, "sum"), theta, delta0)
    return project(delta0 + alpha * np.sign(g), box)


def lower_level_solve(pair: LossPair, theta, x, y, z, lam: float, box: ConstraintBox) -> np.ndarray:
    """Closed-form minimizer of the linearized, lam-regularized attack problem.

    delta* = P(z - (1/lam) * grad_delta l_atk(theta, x + z)).
    """
    if not lam > 0:
        raise ContractViolation(f"lambda must be positive, got {lam}")
    g = input_gradient(pair.attack_fn(x, y, "sum"), theta, z)
    return project(z - (1.0 / lam) * g, box)


def make_linearization_point(
    scheme: LinearizationScheme,
    pair: LossPair,
    theta,
    x,
    y,
    box: ConstraintBox,
    rng: np.random.Generator,
    lam: float,
) -> np.ndarray:
    step = scheme.step if scheme.step is not None else 1.0 / lam
    if scheme.kind == "uniform_random":
        return uniform_in_box(rng, box)
    if scheme.kind == "random_corner":
        heads = rng.random(box.shape) < 0.5
        return np.where(heads, box.q, box.p)
    zero = np.zeros(box.shape, dtype=box.p.dtype)
    if scheme.kind == "one_step_sign_pgd":
        return sign_step(pair, theta, x, y, zero, step, box)
    g = input_gradient(pair.attack_fn(x, y, "sum"), theta, zero)
    return project(zero - step * g, box)


def _losses_and_grad(pair: LossPair, params: dict, x, y, delta):
    """Per-example losses, correctness and per-example input gradients."""
    with Tape():
        d = Tensor(delta, requires_grad=True)
        logits = pair.logits(params, x, d)
        per_ex = softmax_cross_entropy(logits, y, "none")
        g = grad(per_ex.sum(), d)
    correct = np.argmax(logits.data, axis=1) == y
    return per_ex.data, correct, g.data


@dataclass
class PgdResult:
    delta: np.ndarray  # highest-loss iterate per example
    loss: np.ndarray
    fooled: np.ndarray  # misclassified at any visited iterate


def pgd_search(pair: LossPair, theta, x, y, box: ConstraintBox, cfg: PgdConfig) -> PgdResult:
    """Multi-restart signed PGD on the training loss, tracking best-so-far per example."""
    params = _params(theta)
    step = cfg.step_size if cfg.step_size is not None else box.epsilon / 4.0
    n = box.shape[0]
    best_delta = np.zeros(box.shape, dtype=box.p.dtype)
    best_loss = np.full(n, -np.inf)
    fooled = np.zeros(n, dtype=bool)
    for r in range(cfg.restarts):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, STREAM_PGD, r]))
        delta = uniform_in_box(rng, box)
        for k in range(cfg.steps + 1):
            if k:
                delta = project(delta + step * np.sign(g), box)
            loss, correct, g = _losses_and_grad(pair, params, x, y, delta)
            better = loss > best_loss
            best_loss = np.where(better, loss, best_loss)
            best_delta[better] = delta[better]
            fooled |= ~correct
    return PgdResult(delta=best_delta, loss=best_loss, fooled=fooled)


def pgd_attack(pair: LossPair, theta, x, y, box: ConstraintBox, cfg: PgdConfig) -> np.ndarray:
    return pgd_search(pair, theta, x, y, box, cfg).delta
