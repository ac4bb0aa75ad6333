"""Training loops: Fast-AT, PGD-2-AT, GA-regularized Fast-AT and Fast-BAT.

Each ``*_step`` function is pure given its RNG: it takes the current
parameters and optimizer state and returns new ones. :func:`train` drives
the steps, evaluates after every epoch and keeps the best-robustness
checkpoint when early stopping is on.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from fastbat.attacks import (
    LinearizationScheme,
    PgdConfig,
    lower_level_solve,
    make_linearization_point,
    sign_step,
)
from fastbat.autodiff import ParamVector, Tape, Tensor, grad, mul, sqrt, sub, sum_
from fastbat.autodiff.functional import value_and_grad
from fastbat.constraints import active_mask, build_box, uniform_in_box
from fastbat.data import Dataset
from fastbat.errors import ContractViolation, TrainingDiverged
from fastbat.implicit_grad import IgMode, ig_vector_product, upper_level_parts
from fastbat.metrics import MetricsRow, ga_score, robust_accuracy, standard_accuracy
from fastbat.models import LossPair, ModelSpec, init_params

log = logging.getLogger(__name__)

METHODS = ("fast_at", "pgd2_at", "fast_at_ga", "fast_bat")

STREAM_SHUFFLE = 2
STREAM_STEP = 3
STREAM_EVAL = 4

FAST_AT_STEP = 1.25  # attack step, in units of epsilon
PGD2_STEP = 0.5


def default_lambda(epsilon: float, image_domain: bool = True) -> float:
    """Lower-level regularization weight.

    Image data uses 255/5000 at eps = 8/255, scaled linearly in eps (so
    255/2500 at 16/255). Other data falls back to 1 / (1.25 eps), which makes
    the lower-level step equal to the Fast-AT attack step.
    """
    if epsilon <= 0:
        raise ContractViolation("default lambda needs epsilon > 0")
    if image_domain:
        return (255.0 / 5000.0) * epsilon / (8.0 / 255.0)
    return 1.0 / (FAST_AT_STEP * epsilon)


def default_ga_coeff(epsilon: float) -> float:
    """0.2 at eps = 8/255 and 2.0 at 16/255; power-law in eps between and beyond."""
    ratio = epsilon / (8.0 / 255.0)
    return 0.2 * ratio ** math.log2(10.0)


@dataclass(frozen=True)
class TrainRunConfig:
    method: str = "fast_bat"
    epochs: int = 10
    batch_size: int = 128
    epsilon: float = 8.0 / 255.0
    lam: Optional[float] = None
    alpha2_ratio: float = 0.1
    lr_peak: float = 0.2
    lr_schedule: str = "cyclic"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ga_coeff: Optional[float] = None
    linearization: LinearizationScheme = field(default_factory=LinearizationScheme)
    ig_mode: IgMode = field(default_factory=IgMode)
    seed: int = 0
    early_stop: bool = True
    hidden_dims: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    dtype: str = "float64"
    eval_pgd_steps: int = 20
    eval_pgd_restarts: int = 3
    eval_size: Optional[int] = None
    ga_samples: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractViolation(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractViolation("epochs must be >= 0 and batch_size >= 1")
        if self.epsilon < 0:
            raise ContractViolation("epsilon must be >= 0")
        if self.lam is not None and self.method != "fast_bat":
            raise ContractViolation("lam only applies to method fast_bat")
        if self.ga_coeff is not None and self.method != "fast_at_ga":
            raise ContractViolation("ga_coeff only applies to method fast_at_ga")
        if self.lam is not None and not self.lam > 0:
            raise ContractViolation("lam must be positive")
        if self.ga_coeff is not None and self.ga_coeff < 0:
            raise ContractViolation("ga_coeff must be >= 0")
        if self.lr_peak <= 0 or self.momentum < 0 or self.weight_decay < 0 or self.alpha2_ratio < 0:
            raise ContractViolation("rates must be positive (momentum/decay/alpha2 may be 0)")
        if self.lr_schedule not in ("cyclic", "constant"):
            raise ContractViolation("lr_schedule must be cyclic or constant")
        if self.dtype not in ("float64", "float32"):
            raise ContractViolation("dtype must be float64 or float32")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    def resolved_lambda(self, image_domain: bool = True) -> float:
        return self.lam if self.lam is not None else default_lambda(self.epsilon, image_domain)

    def resolved_ga_coeff(self) -> float:
        return self.ga_coeff if self.ga_coeff is not None else default_ga_coeff(self.epsilon)


@dataclass
class OptimizerState:
    velocity: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros_like(cls, theta: ParamVector) -> "OptimizerState":
        return cls(velocity=np.zeros_like(theta.values))


def cyclic_lr(t: float, total: float, lr_peak: float) -> float:
    """Triangle schedule: 0 at t=0, ``lr_peak`` at total/2, back to 0 at total."""
    if total <= 0:
        return 0.0
    half = total / 2.0
    if t <= half:
        return lr_peak * t / half
    return lr_peak * (total - t) / half


def sgd_step(theta: np.ndarray, grad_: np.ndarray, state: OptimizerState, lr: float,
             momentum: float, weight_decay: float) -> tuple[np.ndarray, OptimizerState]:
    """Heavy-ball SGD with coupled weight decay."""
    if theta.shape != grad_.shape or state.velocity.shape != theta.shape:
        raise ContractViolation("theta, grad and velocity shapes must match")
    velocity = momentum * state.velocity + (grad_ + weight_decay * theta)
    new = (theta - lr * velocity).astype(theta.dtype, copy=False)
    return new, OptimizerState(velocity=velocity, step_count=state.step_count + 1)


@dataclass
class StepResult:
    theta: ParamVector
    state: OptimizerState
    loss: float


def _apply(theta: ParamVector, g: np.ndarray, cfg: TrainRunConfig, state, lr) -> tuple:
    values, state = sgd_step(theta.values, g, state, lr, cfg.momentum, cfg.weight_decay)
    return theta.like(values), state


def _theta_grad(pair: LossPair, theta: ParamVector, x, y, delta) -> tuple[float, np.ndarray]:
    loss, (g,) = value_and_grad(pair.train_fn(x, y), theta.to_dict(), delta, wrt=(0,))
    return loss, theta.flatten(g)


def fast_at_step(pair, theta, batch, cfg: TrainRunConfig, state, rng, lr) -> StepResult:
    x, y = batch
    box = build_box(x, cfg.epsilon)
    delta0 = uniform_in_box(rng, box)
    delta = sign_step(pair, theta, x, y, delta0, FAST_AT_STEP * cfg.epsilon, box)
    loss, g = _theta_grad(pair, theta, x, y, delta)
    theta, state = _apply(theta, g, cfg, state, lr)
    return StepResult(theta, state, loss)


def pgd2_at_step(pair, theta, batch, cfg: TrainRunConfig, state, rng, lr) -> StepResult:
    x, y = batch
    box = build_box(x, cfg.epsilon)
    delta = uniform_in_box(rng, box)
    for _ in range(2):
        delta = sign_step(pair, theta, x, y, delta, PGD2_STEP * cfg.epsilon, box)
    loss, g = _theta_grad(pair, theta, x, y, delta)
    theta, state = _apply(theta, g, cfg, state, lr)
    return StepResult(theta, state, loss)


def _input_grad_graph(pair: LossPair, params, x, y, delta: np.ndarray) -> Tensor:
    d = Tensor(delta, requires_grad=True)
    return grad(pair.train_loss(params, x, d, y, "sum"), d, create_graph=True)


def ga_penalty(pair: LossPair, params, x, y, eta: np.ndarray) -> Tensor:
    """Recorded batch mean of 1 - cos(grad_x l(x), grad_x l(x + eta)).

    Must run inside an active tape. Rows where either gradient is zero
    contribute 0.
    """
    g1 = _input_grad_graph(pair, params, x, y, np.zeros_like(eta))
    g2 = _input_grad_graph(pair, params, x, y, eta)
    axes = tuple(range(1, g1.ndim))
    n1sq = sum_(mul(g1, g1), axis=axes)
    n2sq = sum_(mul(g2, g2), axis=axes)
    ok = ((n1sq.data > 0) & (n2sq.data > 0)).astype(g1.dtype)
    pad = Tensor(1.0 - ok)
    denom = mul(sqrt(n1sq + pad), sqrt(n2sq + pad))
    cos = mul(sum_(mul(g1, g2), axis=axes) / denom, Tensor(ok)) + pad
    return sub(1.0, cos).mean()


def fast_at_ga_step(pair, theta, batch, cfg: TrainRunConfig, state, rng, lr) -> StepResult:
    coeff = cfg.resolved_ga_coeff()
    if coeff == 0:
        return fast_at_step(pair, theta, batch, cfg, state, rng, lr)
    x, y = batch
    box = build_box(x, cfg.epsilon)
    delta0 = uniform_in_box(rng, box)
    delta = sign_step(pair, theta, x, y, delta0, FAST_AT_STEP * cfg.epsilon, box)
    eta = uniform_in_box(rng, box)
    with Tape():
        params = {k: Tensor(v, requires_grad=True) for k, v in theta.to_dict().items()}
        total = pair.train_loss(params, x, Tensor(delta), y) + coeff * ga_penalty(pair, params, x, y, eta)
        grads = grad(total, list(params.values()))
    g = theta.flatten({k: gi.data for k, gi in zip(params, grads)})
    theta, state = _apply(theta, g, cfg, state, lr)
    return StepResult(theta, state, float(total.data))


def fast_bat_direction(pair, theta, batch, cfg: TrainRunConfig, rng, lam: float,
                       lower_solver: Optional[Callable] = None) -> tuple[float, np.ndarray]:
    """Training loss at delta* and the effective flat gradient fed to SGD.

    g = grad_theta l_tr + (alpha2/alpha1) * IG^T grad_delta l_tr, with
    alpha2/alpha1 = alpha2_ratio * lam so that alpha2/lam = alpha2_ratio * alpha1.
    """
    x, y = batch
    box = build_box(x, cfg.epsilon)
    z = make_linearization_point(cfg.linearization, pair, theta, x, y, box, rng, lam)
    delta_star = (lower_solver or lower_level_solve)(pair, theta, x, y, z, lam, box)
    if cfg.alpha2_ratio == 0:
        return _theta_grad(pair, theta, x, y, delta_star)
    loss, g_theta, v = upper_level_parts(pair, theta, x, y, delta_star)
    mask = active_mask(delta_star, box)
    ig = ig_vector_product(pair.attack_fn(x, y), theta.to_dict(), delta_star, v, mask, lam, cfg.ig_mode)
    return loss, g_theta + (cfg.alpha2_ratio * lam) * theta.flatten(ig)


def fast_bat_step(pair, theta, batch, cfg: TrainRunConfig, state, rng, lr,
                  lower_solver: Optional[Callable] = None, lam: Optional[float] = None) -> StepResult:
    """Lower level in closed form at a linearization point, then one SGD step on the IG-augmented gradient."""
    lam = cfg.resolved_lambda() if lam is None else lam
    loss, g = fast_bat_direction(pair, theta, batch, cfg, rng, lam, lower_solver)
    theta, state = _apply(theta, g, cfg, state, lr)
    return StepResult(theta, state, loss)


STEP_FUNCTIONS = {
    "fast_at": fast_at_step,
    "pgd2_at": pgd2_at_step,
    "fast_at_ga": fast_at_ga_step,
    "fast_bat": fast_bat_step,
}


@dataclass
class TrainResult:
    theta: ParamVector  # best-RA checkpoint when early stopping, else final
    final_theta: ParamVector
    history: list[MetricsRow]
    best_epoch: Optional[int]
    spec: ModelSpec


def select_checkpoint(ra_history: list[float]) -> Optional[int]:
    """1-based epoch of the first maximum robust accuracy."""
    if not ra_history:
        return None
    return int(np.argmax(ra_history)) + 1


def model_spec_for(cfg: TrainRunConfig, dataset: Dataset) -> ModelSpec:
    return ModelSpec(
        input_dim=dataset.features.shape[1],
        num_classes=dataset.num_classes,
        hidden_dims=cfg.hidden_dims,
        activation=cfg.activation,
        seed=cfg.seed,
    )


def train(
    cfg: TrainRunConfig,
    dataset: Dataset,
    on_epoch: Optional[Callable[[MetricsRow], None]] = None,
    lam_override: Optional[float] = None,
) -> TrainResult:
    if len(dataset.train_idx) == 0:
        raise ContractViolation("training split is empty")
    dtype = np.dtype(cfg.dtype)
    spec = model_spec_for(cfg, dataset)
    pair = LossPair(spec)
    theta = init_params(spec, dtype=dtype)
    state = OptimizerState.zeros_like(theta)
    features = dataset.features.astype(dtype, copy=False)
    x_train = features[dataset.train_idx]
    y_train = dataset.labels[dataset.train_idx]
    eval_idx = dataset.test_idx if len(dataset.test_idx) else dataset.train_idx
    if cfg.eval_size is not None:
        eval_idx = eval_idx[: cfg.eval_size]
    x_eval, y_eval = features[eval_idx], dataset.labels[eval_idx]

    lam = lam_override
    if cfg.method == "fast_bat" and lam is None:
        lam = cfg.resolved_lambda(dataset.image_domain)
    step_fn = STEP_FUNCTIONS[cfg.method]
    extra = {"lam": lam} if cfg.method == "fast_bat" else {}

    n = len(y_train)
    per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    step_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, STREAM_STEP]))
    pgd = PgdConfig(steps=cfg.eval_pgd_steps, restarts=cfg.eval_pgd_restarts, rng_seed=cfg.seed)

    history: list[MetricsRow] = []
    best_theta = theta.copy()
    best_ra = -np.inf
    best_epoch = None
    t = 0
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, STREAM_SHUFFLE, epoch])).permutation(n)
        losses = []
        lr = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if cfg.lr_schedule == "cyclic":
                lr = cyclic_lr(t + 1, total_steps, cfg.lr_peak)
            else:
                lr = cfg.lr_peak
            result = step_fn(pair, theta, (x_train[idx], y_train[idx]), cfg, state, step_rng, lr, **extra)
            if not np.isfinite(result.loss) or not np.all(np.isfinite(result.theta.values)):
                raise TrainingDiverged(f"non-finite loss or parameters at step {t} (epoch {epoch})")
            theta, state = result.theta, result.state
            losses.append(result.loss)
            t += 1
        sa = standard_accuracy(spec, theta, x_eval, y_eval)
        ra = robust_accuracy(pair, theta, x_eval, y_eval, pgd, cfg.epsilon)
        ga = ga_score(pair, theta, x_eval, y_eval, cfg.epsilon, cfg.ga_samples,
                      seed=int(np.random.SeedSequence([cfg.seed, STREAM_EVAL, epoch]).generate_state(1)[0]))
        row = MetricsRow(
            epoch=epoch,
            lr=float(lr),
            train_loss=float(np.mean(losses)),
            sa_percent=sa,
            ra_pgd_percent=ra,
            ga_score=ga,
            epoch_seconds=time.perf_counter() - started,
        )
        history.append(row)
        log.info("epoch %d lr %.4f loss %.4f SA %.2f RA %.2f GA %.3f", epoch, row.lr,
                 row.train_loss, sa, ra, ga)
        if on_epoch is not None:
            on_epoch(row)
        if ra > best_ra:
            best_ra, best_epoch, best_theta = ra, epoch, theta.copy()

    if not history:
        return TrainResult(theta, theta, history, None, spec)
    chosen = best_theta if cfg.early_stop else theta
    return TrainResult(chosen, theta, history, best_epoch if cfg.early_stop else cfg.epochs, spec)

