"""Accuracy, robustness and gradient-alignment diagnostics."""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from fastbat.attacks import PgdConfig, input_gradient, pgd_search
from fastbat.autodiff import ParamVector, Tensor, no_record, softmax_cross_entropy
from fastbat.constraints import build_box
from fastbat.errors import ContractViolation
from fastbat.models import LossPair, ModelSpec, predict

CSV_HEADER = ("epoch", "lr", "train_loss", "sa", "ra_pgd", "ga_score", "epoch_seconds")


@dataclass
class MetricsRow:
    epoch: int
    lr: float
    train_loss: float
    sa_percent: float
    ra_pgd_percent: float
    ga_score: float
    epoch_seconds: float

    def __post_init__(self):
        for name in ("sa_percent", "ra_pgd_percent"):
            val = getattr(self, name)
            if not 0.0 <= val <= 100.0:
                raise ContractViolation(f"{name}={val} outside [0, 100]")
        if not -1.0 - 1e-12 <= self.ga_score <= 1.0 + 1e-12:
            raise ContractViolation(f"ga_score={self.ga_score} outside [-1, 1]")

    def csv_fields(self) -> list[str]:
        # repr of a Python float is the shortest round-trip form and never
        # depends on locale.
        return [str(int(self.epoch))] + [repr(float(v)) for v in astuple(self)[1:]]


class MetricsWriter:
    """Append-only metrics CSV; the header is written on open."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(CSV_HEADER)

    def append(self, row: MetricsRow) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(row.csv_fields())


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ContractViolation(f"unexpected metrics header {reader.fieldnames}")
        return list(reader)


def _nonempty(x: np.ndarray) -> None:
    if len(x) == 0:
        raise ContractViolation("evaluation set is empty")


def standard_accuracy(spec: ModelSpec, theta: ParamVector, x: np.ndarray, y: np.ndarray) -> float:
    _nonempty(x)
    return 100.0 * float(np.mean(predict(spec, theta, x) == y))


def robust_accuracy(
    pair: LossPair, theta: ParamVector, x: np.ndarray, y: np.ndarray, cfg: PgdConfig, epsilon: float
) -> float:
    """Percent of examples that no visited PGD iterate manages to misclassify.

    The clean point is not visited (iterates start from a random draw), so
    an example already misclassified on clean input is counted as fooled
    separately.
    """
    _nonempty(x)
    clean_ok = predict(pair.spec, theta, x) == y
    if epsilon == 0:
        return 100.0 * float(np.mean(clean_ok))
    result = pgd_search(pair, theta, x, y, build_box(x, epsilon), cfg)
    return 100.0 * float(np.mean(clean_ok & ~result.fooled))


def ga_cosines(pair: LossPair, theta: ParamVector, x, y, epsilon: float, samples: int, seed: int) -> np.ndarray:
    """Per-example cosines, shape [samples, N]. Zero-norm gradients give 0."""
    if samples < 1:
        raise ContractViolation("samples must be >= 1")
    rng = np.random.default_rng(seed)
    fn = pair.train_fn(x, y, "sum")
    g0 = input_gradient(fn, theta, np.zeros_like(x)).reshape(len(x), -1)
    out = np.empty((samples, len(x)))
    for s in range(samples):
        eta = rng.uniform(-epsilon, epsilon, size=x.shape) if epsilon > 0 else np.zeros_like(x)
        g1 = input_gradient(fn, theta, eta).reshape(len(x), -1)
        n0 = np.linalg.norm(g0, axis=1)
        n1 = np.linalg.norm(g1, axis=1)
        ok = (n0 > 0) & (n1 > 0)
        cos = np.einsum("ij,ij->i", g0, g1) / np.where(ok, n0 * n1, 1.0)
        out[s] = np.clip(np.where(ok, cos, 0.0), -1.0, 1.0)
    return out


def ga_score(pair: LossPair, theta: ParamVector, x, y, epsilon: float, samples: int = 1, seed: int = 0) -> float:
    _nonempty(x)
    return float(np.mean(ga_cosines(pair, theta, x, y, epsilon, samples, seed)))


@dataclass
class LandscapeGrid:
    xs: np.ndarray
    ys: np.ndarray
    z: np.ndarray  # z[i, j] at (xs[i], ys[j])
    r1_kind: str
    r2_seed: int

    def center(self) -> float:
        return float(self.z[len(self.xs) // 2, len(self.ys) // 2])

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["y\\x"] + [repr(float(v)) for v in self.xs])
            for j, yv in enumerate(self.ys):
                w.writerow([repr(float(yv))] + [repr(float(v)) for v in self.z[:, j]])


def _symmetric_grid(extent: float, n: int) -> np.ndarray:
    k = n // 2
    if k == 0:
        return np.zeros(1)
    return extent * np.arange(-k, k + 1) / k


def loss_landscape(
    pair: LossPair, theta: ParamVector, image: np.ndarray, label: int,
    grid_extent: float, grid_n: int, r2_seed: int,
) -> LandscapeGrid:
    """Training loss on the plane I + a * sign(grad_I loss) + b * rademacher."""
    if grid_n < 1 or grid_n % 2 == 0:
        raise ContractViolation("grid_n must be odd")
    image = np.asarray(image, dtype=np.float64).reshape(1, -1)
    y = np.array([int(label)])
    g = input_gradient(pair.train_fn(image, y, "sum"), theta, np.zeros_like(image))
    r1 = np.sign(g)
    r2 = np.where(np.random.default_rng(r2_seed).random(image.shape) < 0.5, -1.0, 1.0)
    xs = _symmetric_grid(grid_extent, grid_n)
    ys = _symmetric_grid(grid_extent, grid_n)
    a, b = np.meshgrid(xs, ys, indexing="ij")
    inputs = image + a.reshape(-1, 1) * r1 + b.reshape(-1, 1) * r2
    with no_record():
        logits = pair.logits(theta.to_dict(), inputs, None)
        losses = softmax_cross_entropy(logits, np.full(len(inputs), y[0]), "none").data
    return LandscapeGrid(xs=xs, ys=ys, z=losses.reshape(grid_n, grid_n), r1_kind="sign_gradient", r2_seed=r2_seed)


@dataclass
class OverfitFlag:
    flagged: bool
    epoch: Optional[int]  # 1-based


def detect_catastrophic_overfitting(history: Sequence[float], drop: float = 0.5) -> OverfitFlag:
    """First epoch whose robust accuracy is below ``drop`` times the best so far."""
    h = list(history)
    if len(h) < 2:
        raise ContractViolation("need at least two epochs of history")
    best = h[0]
    for i, ra in enumerate(h[1:], start=2):
        if ra < drop * best:
            return OverfitFlag(True, i)
        best = max(best, ra)
    return OverfitFlag(False, None)


def ra_series(rows: Iterable[MetricsRow]) -> list[float]:
    return [r.ra_pgd_percent for r in rows]
