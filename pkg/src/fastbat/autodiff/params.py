from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from fastbat.errors import ContractViolation


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamVector:
    """All model parameters as one flat buffer plus named, shaped segments.

    ``to_dict`` returns views into ``values``; mutate through ``values`` only
    when you mean to change the vector in place.
    """

    def __init__(self, segments: list[Segment], values: np.ndarray):
        total = 0
        for seg in segments:
            if seg.offset != total:
                raise ContractViolation(f"segment {seg.name!r} is not contiguous")
            total += seg.size
        values = np.asarray(values)
        if values.ndim != 1 or values.size != total:
            raise ContractViolation(f"expected flat buffer of {total} values, got {values.shape}")
        self.segments = list(segments)
        self.values = values

    @classmethod
    def pack(cls, tensors: Mapping[str, np.ndarray], dtype=None) -> "ParamVector":
        segments = []
        offset = 0
        chunks = []
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            segments.append(Segment(name, tuple(arr.shape), offset))
            offset += arr.size
            chunks.append(arr.reshape(-1))
        flat = np.concatenate(chunks) if chunks else np.zeros(0)
        if dtype is not None:
            flat = flat.astype(dtype)
        return cls(segments, flat)

    def unpack(self) -> dict[str, np.ndarray]:
        return {
            s.name: self.values[s.offset : s.offset + s.size].reshape(s.shape) for s in self.segments
        }

    to_dict = unpack

    def like(self, values: np.ndarray) -> "ParamVector":
        """Same layout, new values."""
        return ParamVector(self.segments, values)

    def flatten(self, tensors: Mapping[str, np.ndarray]) -> np.ndarray:
        """Flatten a dict with this vector's layout, in segment order."""
        names = [s.name for s in self.segments]
        if set(tensors) != set(names):
            raise ContractViolation(f"keys {sorted(tensors)} do not match layout {names}")
        return np.concatenate([np.asarray(tensors[n]).reshape(-1) for n in names])

    def copy(self) -> "ParamVector":
        return ParamVector(self.segments, self.values.copy())

    @property
    def size(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ParamVector)
            and self.segments == other.segments
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self) -> str:
        names = ", ".join(s.name for s in self.segments)
        return f"ParamVector(n={self.size}, segments=[{names}])"
