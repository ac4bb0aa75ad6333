"""Flat ``key = value`` run configuration.

Every setting has a parser and a built-in default. Values are layered as
defaults, then a config file, then command-line flags; later layers win.
Unknown keys are rejected so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

from fastbat.attacks import LinearizationScheme, PgdConfig
from fastbat.data import Dataset, gen_blobs, gen_two_moons, load_mnist_idx
from fastbat.errors import ContractViolation
from fastbat.implicit_grad import IgMode
from fastbat.trainers import TrainRunConfig


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)

    return inner


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text: str) -> tuple[int, ...]:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    return tuple(int(p) for p in parts)


@dataclass(frozen=True)
class Setting:
    parse: Callable[[str], Any]
    default: Any
    help: str


SETTINGS: dict[str, Setting] = {
    # training
    "method": Setting(str, "fast_bat", "fast_at | pgd2_at | fast_at_ga | fast_bat"),
    "epochs": Setting(int, 10, "number of epochs"),
    "batch_size": Setting(int, 128, "minibatch size"),
    "epsilon": Setting(float, 8.0 / 255.0, "l_inf budget"),
    "lam": Setting(_optional(float), None, "lower-level weight (fast_bat); none = default rule"),
    "alpha2_ratio": Setting(float, 0.1, "alpha2 = ratio * alpha1 * lam"),
    "lr_peak": Setting(float, 0.2, "peak learning rate"),
    "lr_schedule": Setting(str, "cyclic", "cyclic | constant"),
    "momentum": Setting(float, 0.9, "SGD momentum"),
    "weight_decay": Setting(float, 5e-4, "coupled weight decay"),
    "ga_coeff": Setting(_optional(float), None, "GA penalty weight (fast_at_ga)"),
    "linearization": Setting(str, "one_step_pgd_no_sign", "linearization point scheme"),
    "linearization_step": Setting(_optional(float), None, "step for the linearization point; none = 1/lam"),
    "ig_mode": Setting(str, "hessian_free", "hessian_free | hessian_aware"),
    "cg_tol": Setting(float, 1e-10, "CG relative tolerance"),
    "cg_max_iters": Setting(int, 500, "CG iteration cap"),
    "seed": Setting(int, 0, "master seed for every RNG stream"),
    "early_stop": Setting(_bool, True, "keep the best robust-accuracy checkpoint"),
    "hidden_dims": Setting(_int_tuple, (64, 64), "comma-separated hidden widths"),
    "activation": Setting(str, "relu", "relu | softplus | swish"),
    "dtype": Setting(str, "float64", "float64 | float32"),
    "eval_pgd_steps": Setting(int, 20, "PGD steps for per-epoch and eval robustness"),
    "eval_pgd_restarts": Setting(int, 3, "PGD restarts"),
    "eval_size": Setting(_optional(int), None, "cap on evaluated test examples"),
    "ga_samples": Setting(int, 1, "eta draws per example for the GA score"),
    # data
    "dataset": Setting(str, "two_moons", "two_moons | gaussian_blobs | mnist"),
    "n_samples": Setting(int, 512, "toy dataset size"),
    "noise": Setting(float, 0.1, "two-moons noise"),
    "centers": Setting(int, 3, "blob count"),
    "spread": Setting(float, 1.0, "blob standard deviation"),
    "test_fraction": Setting(float, 0.25, "held-out fraction"),
    "mnist_images": Setting(_optional(str), None, "IDX image file"),
    "mnist_labels": Setting(_optional(str), None, "IDX label file"),
    "limit": Setting(_optional(int), None, "keep the first N IDX examples"),
}


def defaults() -> dict[str, Any]:
    return {k: s.default for k, s in SETTINGS.items()}


def parse_value(key: str, text: str) -> Any:
    if key not in SETTINGS:
        raise ContractViolation(f"unknown config key {key!r}")
    try:
        return SETTINGS[key].parse(text)
    except ValueError as exc:
        raise ContractViolation(f"bad value for {key}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            out[key] = parse_value(key, value)
        except ContractViolation as exc:
            raise ContractViolation(f"{source}:{lineno}: {exc}") from None
    return out


def load_config_file(path) -> dict[str, Any]:
    return parse_config_text(Path(path).read_text(), str(path))


def merge(file_values: Optional[Mapping[str, Any]] = None, cli_values: Optional[Mapping[str, Any]] = None) -> dict:
    """Precedence: command line > config file > built-in default."""
    merged = defaults()
    for layer in (file_values or {}, cli_values or {}):
        for key, value in layer.items():
            if key not in SETTINGS:
                raise ContractViolation(f"unknown config key {key!r}")
            merged[key] = value
    return merged


def train_config(values: Mapping[str, Any]) -> TrainRunConfig:
    return TrainRunConfig(
        method=values["method"],
        epochs=values["epochs"],
        batch_size=values["batch_size"],
        epsilon=values["epsilon"],
        lam=values["lam"],
        alpha2_ratio=values["alpha2_ratio"],
        lr_peak=values["lr_peak"],
        lr_schedule=values["lr_schedule"],
        momentum=values["momentum"],
        weight_decay=values["weight_decay"],
        ga_coeff=values["ga_coeff"],
        linearization=LinearizationScheme(values["linearization"], values["linearization_step"]),
        ig_mode=IgMode(values["ig_mode"], values["cg_tol"], values["cg_max_iters"]),
        seed=values["seed"],
        early_stop=values["early_stop"],
        hidden_dims=values["hidden_dims"],
        activation=values["activation"],
        dtype=values["dtype"],
        eval_pgd_steps=values["eval_pgd_steps"],
        eval_pgd_restarts=values["eval_pgd_restarts"],
        eval_size=values["eval_size"],
        ga_samples=values["ga_samples"],
    )


def pgd_config(values: Mapping[str, Any]) -> PgdConfig:
    return PgdConfig(steps=values["eval_pgd_steps"], restarts=values["eval_pgd_restarts"], rng_seed=values["seed"])


def build_dataset(values: Mapping[str, Any]) -> Dataset:
    kind = values["dataset"]
    if kind == "two_moons":
        return gen_two_moons(values["n_samples"], values["noise"], values["seed"], values["test_fraction"])
    if kind == "gaussian_blobs":
        return gen_blobs(values["n_samples"], values["centers"], values["spread"], values["seed"],
                         values["test_fraction"])
    if kind == "mnist":
        if not values["mnist_images"] or not values["mnist_labels"]:
            raise ContractViolation("dataset = mnist needs mnist_images and mnist_labels")
        return load_mnist_idx(values["mnist_images"], values["mnist_labels"], values["limit"],
                              values["test_fraction"], values["seed"])
    raise ContractViolation(f"unknown dataset {kind!r}")
