"""Oracle-backed verification suite.

Each ``check_*`` function builds its own random instances, compares a fast
code path with an independent reference from :mod:`fastbat.oracles` and
returns a :class:`CheckResult`. The ``check`` CLI subcommand runs them with
reduced instance counts; the acceptance tests run them at full size.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from fastbat import oracles
from fastbat.attacks import LinearizationScheme, input_gradient, lower_level_solve
from fastbat.autodiff import ParamVector, Tensor, hvp_delta, mixed_partial_apply, neg, sum_
from fastbat.autodiff.functional import value_and_grad
from fastbat.constraints import active_mask, build_box, uniform_in_box
from fastbat.data import gen_blobs
from fastbat.implicit_grad import (
    IgMode,
    ig_jvp_aware,
    ig_jvp_free,
    ig_vp_aware,
    ig_vp_free,
    total_upper_gradient,
    upper_level_parts,
)
from fastbat.models import LossPair, ModelSpec, init_params
from fastbat.trainers import (
    OptimizerState,
    TrainRunConfig,
    fast_at_step,
    fast_bat_direction,
    fast_bat_step,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    metrics: dict = field(default_factory=dict)
    gating: bool = True  # informational results do not affect the exit code

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        if not self.gating:
            tag = "INFO-" + tag
        return f"[{tag}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str, dict]], gating: bool = True) -> CheckResult:
    start = time.perf_counter()
    passed, detail, metrics = fn()
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start, metrics, gating)


@dataclass
class Instance:
    pair: LossPair
    theta: ParamVector
    x: np.ndarray
    y: np.ndarray


def random_instance(rng: np.random.Generator, activation: str = "softplus", input_dim: Optional[int] = None,
                    hidden: Optional[int] = None, batch: Optional[int] = None, classes: int = 3,
                    weight_scale: float = 1.0) -> Instance:
    d = input_dim or int(rng.integers(3, 7))
    h = hidden or int(rng.integers(3, 7))
    b = batch or int(rng.integers(2, 4))
    spec = ModelSpec(d, classes, (h,), activation, seed=int(rng.integers(2**31)))
    theta = init_params(spec)
    theta = theta.like(theta.values * weight_scale)
    x = rng.uniform(0.0, 1.0, size=(b, d))
    y = rng.integers(0, classes, size=b)
    return Instance(LossPair(spec), theta, x, y)


# ---------------------------------------------------------------- derivatives


def check_derivatives(instances: int = 10, seed: int = 0) -> CheckResult:
    """Autodiff gradient, HVP and mixed partial against central differences."""

    def run():
        rng = np.random.default_rng(seed)
        worst = {"grad": 0.0, "hvp": 0.0, "mixed": 0.0}
        for _ in range(instances):
            inst = random_instance(rng, weight_scale=2.0)
            f = inst.pair.train_fn(inst.x, inst.y)
            delta = rng.uniform(-0.2, 0.2, size=inst.x.shape)
            params = inst.theta.to_dict()

            _, (g_theta, g_delta) = value_and_grad(f, params, delta)
            flat = lambda vec: float(f(inst.theta.like(vec).to_dict(), delta).data)
            fd_theta = oracles.fd_gradient(flat, inst.theta.values.copy())
            fd_delta = oracles.fd_gradient(lambda d: float(f(params, d).data), delta.copy())
            worst["grad"] = max(worst["grad"], oracles.rel_error(inst.theta.flatten(g_theta), fd_theta),
                                oracles.rel_error(g_delta, fd_delta))

            v = rng.normal(size=delta.shape)
            grad_delta = lambda d: value_and_grad(f, params, d, wrt=(1,))[1][0]
            fd_hv = oracles.fd_directional(grad_delta, delta, v, 1e-5)
            worst["hvp"] = max(worst["hvp"], oracles.rel_error(hvp_delta(f, params, delta, v), fd_hv))

            inner = lambda vec: float(np.vdot(value_and_grad(f, inst.theta.like(vec).to_dict(), delta,
                                                             wrt=(1,))[1][0], v))
            fd_mixed = oracles.fd_gradient(inner, inst.theta.values.copy())
            mixed = inst.theta.flatten(mixed_partial_apply(f, params, delta, v))
            worst["mixed"] = max(worst["mixed"], oracles.rel_error(mixed, fd_mixed))
        ok = worst["grad"] <= 1e-5 and worst["hvp"] <= 1e-4 and worst["mixed"] <= 1e-4
        detail = "max rel err grad {grad:.2e} (<=1e-5), hvp {hvp:.2e} (<=1e-4), mixed {mixed:.2e} (<=1e-4)".format(**worst)
        return ok, f"{instances} softplus MLPs, " + detail, worst

    return _timed("derivative oracles", run)


# ---------------------------------------------------------------- lower level


def check_lower_level(instances: int = 100, seed: int = 1, iters: int = 500) -> CheckResult:
    """Closed forms against projected gradient descent on the two linearized objectives."""

    def run():
        rng = np.random.default_rng(seed)
        worst_lin = worst_sign = 0.0
        for _ in range(instances):
            inst = random_instance(rng, activation=str(rng.choice(["relu", "softplus", "swish"])))
            eps = float(rng.uniform(0.05, 0.5))
            lam = float(rng.uniform(0.5, 20.0))
            box = build_box(inst.x, eps)
            z = uniform_in_box(rng, box)
            g = oracles._attack_grad(inst.pair, inst.theta, inst.x, inst.y, z)
            s = np.sign(g)
            # Per-example objectives (delta - z)^T c + lam/2 ||delta - z||^2; gradient c + lam (delta - z).
            pgd_lin = oracles.projected_gd(lambda d: g + lam * (d - z), z, box.p, box.q, 0.5 / lam, iters)
            pgd_sign = oracles.projected_gd(lambda d: s + lam * (d - z), z, box.p, box.q, 0.5 / lam, iters)
            fast = lower_level_solve(inst.pair, inst.theta, inst.x, inst.y, z, lam, box)
            sign = oracles.sign_linearized_solve(inst.pair, inst.theta, inst.x, inst.y, z, lam, box)
            worst_lin = max(worst_lin, float(np.max(np.abs(fast - pgd_lin))))
            worst_sign = max(worst_sign, float(np.max(np.abs(sign - pgd_sign))))
        ok = worst_lin <= 1e-8 and worst_sign <= 1e-8
        return ok, (f"{instances} instances, max |closed form - PGD| linearized {worst_lin:.1e}, "
                    f"sign-linearized {worst_sign:.1e} (<=1e-8)"), {"linearized": worst_lin, "sign": worst_sign}

    return _timed("lower-level closed forms", run)


# ---------------------------------------------------------------- implicit gradient


def check_implicit_gradient(valid_target: int = 50, seed: int = 2, max_attempts: int = 400,
                            lam: float = 0.5, epsilon: float = 0.3) -> CheckResult:
    """Forward-mode IG against finite differences of the lower-level solution.

    The Hessian-aware product is the sensitivity of the exact proximal
    problem (attack loss plus lam/2 ||delta - z||^2), so it is compared with
    that problem's solution path. The Hessian-free product evaluated at the
    linearization point is the exact sensitivity of the closed form and is
    compared with that. Instances whose active set moves under the
    perturbation are counted and skipped.
    """

    def run():
        rng = np.random.default_rng(seed)
        cfg = IgMode("hessian_aware", cg_tol=1e-12, cg_max_iters=200)
        valid = skipped = 0
        worst_aware = worst_free = worst_active = 0.0
        attempts = 0
        while valid < valid_target and attempts < max_attempts:
            attempts += 1
            inst = random_instance(rng, weight_scale=2.0)
            box = build_box(inst.x, epsilon)
            z = uniform_in_box(rng, box)
            w = rng.normal(size=inst.theta.size)
            w_tree = inst.theta.like(w).to_dict()
            attack = inst.pair.attack_fn(inst.x, inst.y)
            params = inst.theta.to_dict()

            prox = oracles.fd_lower_level_sensitivity(inst.pair, inst.theta, inst.x, inst.y, w, z, lam, box,
                                                      problem="proximal")
            lin = oracles.fd_lower_level_sensitivity(inst.pair, inst.theta, inst.x, inst.y, w, z, lam, box,
                                                     problem="linearized")
            if not (prox.stable and lin.stable):
                skipped += 1
                continue
            valid += 1
            d_prox = oracles.proximal_solve(inst.pair, inst.theta, inst.x, inst.y, z, lam, box)
            mask = active_mask(d_prox, box)
            aware = ig_jvp_aware(attack, params, d_prox, w_tree, mask, lam, cfg)
            worst_aware = max(worst_aware, oracles.rel_error(aware, prox.derivative))
            worst_active = max(worst_active, float(np.max(np.abs(aware[mask.active]), initial=0.0)))

            d_lin = lower_level_solve(inst.pair, inst.theta, inst.x, inst.y, z, lam, box)
            free = ig_jvp_free(attack, params, z, w_tree, active_mask(d_lin, box), lam)
            worst_free = max(worst_free, oracles.rel_error(free, lin.derivative))
        ok = valid >= valid_target and worst_aware <= 1e-3 and worst_free <= 1e-3 and worst_active <= 1e-10
        detail = (f"{valid} valid / {skipped} skipped; Hessian-aware vs FD {worst_aware:.1e}, "
                  f"Hessian-free (closed form) vs FD {worst_free:.1e} (<=1e-3); "
                  f"max |active component| {worst_active:.1e} (<=1e-10)")
        return ok, detail, {"valid": valid, "skipped": skipped, "aware": worst_aware, "free": worst_free,
                            "active": worst_active}

    return _timed("implicit gradient vs finite differences", run)


def bilinear_head(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Negated true-class logit: bilinear in (weights, delta) for a linear model."""
    onehot = np.eye(logits.shape[1])[labels]
    per = neg(sum_(logits * onehot, axis=1))
    return per.mean() if reduction == "mean" else per.sum() if reduction == "sum" else per


def check_hessian_free_bilinear(instances: int = 10, seed: int = 3, tol: float = 1e-8) -> CheckResult:
    """With a bilinear attack loss the attack Hessian vanishes and both IG modes coincide."""

    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        cfg = IgMode("hessian_aware", cg_tol=1e-13, cg_max_iters=50)
        for _ in range(instances):
            d, b = int(rng.integers(3, 9)), int(rng.integers(2, 5))
            spec = ModelSpec(d, 3, (), "relu", seed=int(rng.integers(2**31)))
            pair = LossPair(spec, attack_head=bilinear_head)
            theta = init_params(spec)
            x = rng.uniform(0, 1, size=(b, d))
            y = rng.integers(0, 3, size=b)
            eps, lam = 0.3, float(rng.uniform(0.5, 5.0))
            box = build_box(x, eps)
            delta = lower_level_solve(pair, theta, x, y, uniform_in_box(rng, box), lam, box)
            mask = active_mask(delta, box)
            v = rng.normal(size=x.shape)
            attack = pair.attack_fn(x, y)
            free = theta.flatten(ig_vp_free(attack, theta.to_dict(), delta, v, mask, lam))
            aware = theta.flatten(ig_vp_aware(attack, theta.to_dict(), delta, v, mask, lam, cfg))
            worst = max(worst, oracles.rel_error(aware, free))
        return worst <= tol, f"{instances} linear models, max rel diff aware vs free {worst:.1e} (<={tol:.0e})", {
            "rel_diff": worst}

    return _timed("Hessian-free IG exact under a bilinear attack loss", run)


def relu_hessian_study(instances: int = 10, seed: int = 4, input_dim: int = 20, hidden: int = 32,
                       epsilon: float = 0.3, lam: Optional[float] = None) -> dict:
    """Aware vs free IG agreement and attack-Hessian norm on ReLU MLPs at generic points."""
    rng = np.random.default_rng(seed)
    lam = 1.0 / (1.25 * epsilon) if lam is None else lam
    cfg = IgMode("hessian_aware", cg_tol=1e-12, cg_max_iters=500)
    agreement, norms, margin_norms = [], [], []
    for _ in range(instances):
        inst = random_instance(rng, "relu", input_dim, hidden, 8, classes=10)
        box = build_box(inst.x, epsilon)
        delta = lower_level_solve(inst.pair, inst.theta, inst.x, inst.y, uniform_in_box(rng, box), lam, box)
        mask = active_mask(delta, box)
        attack = inst.pair.attack_fn(inst.x, inst.y)
        params = inst.theta.to_dict()
        _, _, v = upper_level_parts(inst.pair, inst.theta, inst.x, inst.y, delta)
        free = inst.theta.flatten(ig_vp_free(attack, params, delta, v, mask, lam))
        aware = inst.theta.flatten(ig_vp_aware(attack, params, delta, v, mask, lam, cfg))
        agreement.append(oracles.rel_error(free, aware))
        # Per-example Hessian norm: probe the summed loss so each row sees its own curvature.
        norms.append(oracles.hessian_norm_probe(inst.pair.attack_fn(inst.x, inst.y, "sum"), params, delta,
                                                probes=1, seed=int(rng.integers(2**31)), iters=50))
        margin = LossPair(inst.pair.spec, attack_head=bilinear_head)
        margin_norms.append(oracles.hessian_norm_probe(margin.attack_fn(inst.x, inst.y, "sum"), params, delta,
                                                       probes=1, seed=0, iters=20))
    return {"lam": lam, "agreement": max(agreement), "hessian_norm": max(norms),
            "logit_hessian_norm": max(margin_norms)}


def check_hessian_free_relu(instances: int = 10, seed: int = 4) -> list[CheckResult]:
    start = time.perf_counter()
    study = relu_hessian_study(instances, seed)
    elapsed = time.perf_counter() - start
    agree = CheckResult(
        "Hessian-free vs Hessian-aware IG on ReLU MLPs",
        study["agreement"] <= 1e-2,
        f"{instances} instances at lam={study['lam']:.3g}, max rel diff {study['agreement']:.2e} (<=1e-2)",
        elapsed, study,
    )
    probe = CheckResult(
        "attack-loss Hessian norm on ReLU MLPs",
        study["hessian_norm"] <= 1e-6,
        (f"max spectral norm of d2(-CE)/d delta2 {study['hessian_norm']:.2e} (<=1e-6); "
         f"logit-margin loss on the same nets {study['logit_hessian_norm']:.1e}"),
        0.0, study,
    )
    return [agree, probe]


# ---------------------------------------------------------------- training-level properties


def check_fast_at_equivalence(steps: int = 100, seed: int = 5, epsilon: float = 0.3, batch: int = 32) -> CheckResult:
    """Degenerate Fast-BAT with the sign-linearized solver reproduces Fast-AT bit for bit."""

    def run():
        rng = np.random.default_rng(seed)
        d, n = 10, batch * 4
        spec = ModelSpec(d, 3, (16,), "relu", seed=seed)
        pair = LossPair(spec)
        x_all = rng.uniform(0, 1, size=(n, d))
        y_all = rng.integers(0, 3, size=n)
        lam = 1.0 / (1.25 * epsilon)
        at_cfg = TrainRunConfig(method="fast_at", epsilon=epsilon, batch_size=batch)
        bat_cfg = TrainRunConfig(method="fast_bat", epsilon=epsilon, batch_size=batch, lam=lam, alpha2_ratio=0.0,
                                 linearization=LinearizationScheme("uniform_random"))
        theta_a = theta_b = init_params(spec)
        state_a = state_b = OptimizerState.zeros_like(theta_a)
        rng_a = np.random.default_rng(seed + 1000)
        rng_b = np.random.default_rng(seed + 1000)
        mismatch = None
        for t in range(steps):
            idx = slice((t * batch) % n, (t * batch) % n + batch)
            bt = (x_all[idx], y_all[idx])
            ra = fast_at_step(pair, theta_a, bt, at_cfg, state_a, rng_a, 0.05)
            rb = fast_bat_step(pair, theta_b, bt, bat_cfg, state_b, rng_b, 0.05,
                               lower_solver=oracles.sign_linearized_solve, lam=lam)
            theta_a, state_a, theta_b, state_b = ra.theta, ra.state, rb.theta, rb.state
            if not (np.array_equal(theta_a.values, theta_b.values)
                    and np.array_equal(state_a.velocity, state_b.velocity) and ra.loss == rb.loss):
                mismatch = t
                break
        moved = float(np.max(np.abs(theta_a.values - init_params(spec).values)))
        ok = mismatch is None and moved > 0
        detail = (f"{steps} steps bit-identical, parameters moved {moved:.2e}" if ok
                  else f"first mismatch at step {mismatch}")
        return ok, detail, {"mismatch": mismatch}

    return _timed("Fast-AT as degenerate Fast-BAT", run)


def boundary_instance(seed: int = 6):
    """Inputs at 0.5 with a step that pushes roughly half the coordinates onto the box."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec(6, 3, (8,), "softplus", seed=seed)
    pair = LossPair(spec)
    theta = init_params(spec)
    x = np.full((4, 6), 0.5)
    y = rng.integers(0, 3, size=4)
    eps = 0.1
    box = build_box(x, eps)
    z = np.zeros_like(x)
    g = input_gradient(pair.attack_fn(x, y, "sum"), theta, z)
    lam = float(np.median(np.abs(g))) / eps
    return pair, theta, x, y, z, lam, box


def check_boundary_ig(seed: int = 6) -> CheckResult:
    """Some constraints bind, so the implicit term survives and changes the gradient."""

    def run():
        pair, theta, x, y, z, lam, box = boundary_instance(seed)
        up = total_upper_gradient(pair, theta, x, y, z, lam, box)
        diff = float(np.linalg.norm(up.total.values - up.grad_theta.values))
        n_active = int(up.mask.active.sum())
        ok = diff >= 1e-6 and 0 < n_active < up.mask.interior.size
        return ok, f"{n_active}/{up.mask.interior.size} coordinates binding, ||total - partial|| = {diff:.2e} (>=1e-6)", {
            "diff": diff, "active": n_active}

    return _timed("implicit term with binding constraints", run)


def convergence_history(steps: int = 2000, seed: int = 7, epsilon: float = 0.05, lr: float = 0.5) -> np.ndarray:
    """Squared norm of the full-batch Fast-BAT direction on a linear logistic model."""
    ds = gen_blobs(200, centers=2, spread=1.5, seed=seed, test_fraction=0.0)
    spec = ModelSpec(2, 2, (), "relu", seed=seed)
    pair = LossPair(spec)
    cfg = TrainRunConfig(method="fast_bat", epsilon=epsilon, lr_schedule="constant", lr_peak=lr,
                         momentum=0.0, weight_decay=0.0)
    lam = cfg.resolved_lambda(image_domain=False)
    theta = init_params(spec)
    state = OptimizerState.zeros_like(theta)
    rng = np.random.default_rng(seed)
    batch = (ds.features, ds.labels)
    hist = np.empty(steps)
    for t in range(steps):
        _, g = fast_bat_direction(pair, theta, batch, cfg, rng, lam)
        hist[t] = float(g @ g)
        theta = theta.like(theta.values - lr * g)
    return hist


def check_convergence(seed: int = 7) -> CheckResult:
    def run():
        hist = convergence_history(2000, seed)
        early = oracles.convergence_monitor(hist[:500])
        late = oracles.convergence_monitor(hist)
        ratio = late.mean_full / early.mean_full
        return ratio <= 0.6, (f"mean ||g||^2 over T=500 {early.mean_full:.3e}, T=2000 {late.mean_full:.3e}, "
                              f"ratio {ratio:.3f} (<=0.6)"), {"ratio": ratio}

    return _timed("convergence trend on a convex logistic toy", run)


def run_suite(quick: bool = True) -> list[CheckResult]:
    """The oracle suite behind the ``check`` subcommand.

    The ReLU Hessian-norm probe is reported but does not gate: it measures a
    property of cross-entropy on ReLU networks, not of this implementation.
    """
    n = 3 if quick else 10
    results = [
        check_derivatives(n),
        check_lower_level(20 if quick else 100),
        check_implicit_gradient(10 if quick else 50),
        check_hessian_free_bilinear(n),
    ]
    agree, probe = check_hessian_free_relu(n)
    results += [agree, replace(probe, gating=False)]
    results += [
        check_fast_at_equivalence(20 if quick else 100),
        check_boundary_ig(),
        check_convergence(),
    ]
    return results
