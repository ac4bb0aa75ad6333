"""Small classifiers and their train/attack losses.

An MLP with ``hidden_dims=()`` is a plain linear (softmax-regression) model,
which the analytic tests lean on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np

from fastbat.autodiff import ACTIVATIONS, ParamVector, Tensor, neg, softmax_cross_entropy
from fastbat.errors import ContractViolation

CHECKPOINT_MAGIC = b"FBAT"
CHECKPOINT_VERSION = 1

# Stream ids for np.random.SeedSequence([seed, stream]); one per consumer.
STREAM_INIT = 0


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.input_dim <= 0 or self.num_classes <= 0:
            raise ContractViolation("input_dim and num_classes must be positive")
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(
                f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}"
            )
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]

    @property
    def num_params(self) -> int:
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def init_params(spec: ModelSpec, dtype=np.float64) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, seeded."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, STREAM_INIT]))
    tensors = {}
    sizes = spec.layer_sizes
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        tensors[f"layer{i}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        tensors[f"layer{i}.bias"] = rng.uniform(-bound, bound, size=(fan_out,))
    return ParamVector.pack(tensors, dtype=dtype)


def forward(spec: ModelSpec, params: Mapping[str, Tensor], inputs) -> Tensor:
    """Logits [B, num_classes] for an input batch [B, input_dim]."""
    h = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    if h.ndim != 2 or h.shape[1] != spec.input_dim:
        raise ContractViolation(f"expected input [B, {spec.input_dim}], got {h.shape}")
    act = ACTIVATIONS[spec.activation]
    n_layers = len(spec.layer_sizes) - 1
    for i in range(n_layers):
        h = h @ params[f"layer{i}.weight"] + params[f"layer{i}.bias"]
        if i < n_layers - 1:
            h = act(h)
    return h


def _as_param_tensors(params) -> Mapping[str, Tensor]:
    if isinstance(params, ParamVector):
        params = params.to_dict()
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


AttackHead = Callable[[Tensor, np.ndarray, str], Tensor]


@dataclass
class LossPair:
    """Training loss (cross-entropy) and the lower-level attack objective.

    ``attack_head`` maps ``(logits, labels, reduction)`` to the attack loss;
    ``None`` means the negated training loss, which the attack minimizes.
    """

    spec: ModelSpec
    attack_head: Optional[AttackHead] = field(default=None)

    def logits(self, params, x, delta) -> Tensor:
        inputs = Tensor(x) + delta if delta is not None else Tensor(x)
        return forward(self.spec, _as_param_tensors(params), inputs)

    def train_loss(self, params, x, delta, y, reduction: str = "mean") -> Tensor:
        return softmax_cross_entropy(self.logits(params, x, delta), y, reduction)

    def attack_loss(self, params, x, delta, y, reduction: str = "mean") -> Tensor:
        logits = self.logits(params, x, delta)
        if self.attack_head is None:
            return neg(softmax_cross_entropy(logits, y, reduction))
        return self.attack_head(logits, y, reduction)

    def train_fn(self, x, y, reduction: str = "mean") -> Callable:
        """``(params, delta) -> loss`` closure with the batch bound."""
        return lambda params, delta: self.train_loss(params, x, delta, y, reduction)

    def attack_fn(self, x, y, reduction: str = "mean") -> Callable:
        return lambda params, delta: self.attack_loss(params, x, delta, y, reduction)


def predict(spec: ModelSpec, theta: ParamVector, x: np.ndarray) -> np.ndarray:
    """Argmax class; ties go to the lowest class index."""
    logits = forward(spec, _as_param_tensors(theta), x).data
    return np.argmax(logits, axis=1)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, theta: ParamVector) -> None:
    """Write ``theta`` in the FBAT v1 format (little-endian, float32 payload)."""
    tensors = theta.to_dict()
    out = bytearray(CHECKPOINT_MAGIC)
    out.append(CHECKPOINT_VERSION)
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, dtype=np.float64) -> ParamVector:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{path}: not an FBAT checkpoint")
    if len(buf) < 9 or buf[4] != CHECKPOINT_VERSION:
        raise ContractViolation(f"{path}: unsupported checkpoint version")
    pos = 5

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise ContractViolation(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims, dtype=np.int64))
        if pos + 4 * n > len(buf):
            raise ContractViolation(f"{path}: truncated tensor {name!r} at byte {pos}")
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        tensors[name] = arr.astype(dtype)
    if pos != len(buf):
        raise ContractViolation(f"{path}: {len(buf) - pos} trailing bytes")
    return ParamVector.pack(tensors, dtype=dtype)
