"""Dense float64 tensors and named parameter/gradient collections."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np


class TensorError(ValueError):
    """Raised when a tensor violates its construction invariants."""


def _as_array(values, shape=None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(tuple(int(s) for s in shape))
    arr = np.ascontiguousarray(arr)
    if arr.size and not np.isfinite(arr).all():
        raise TensorError("tensor values must be finite (no NaN/Inf)")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class TensorRecord:
    """An immutable dense n-dimensional real array (row-major, float64)."""

    array: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "array", _as_array(self.array))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def size(self) -> int:
        return int(self.array.size)

    @classmethod
    def of(cls, values, shape=None) -> "TensorRecord":
        return cls(_as_array(values, shape))

    @classmethod
    def zeros(cls, shape) -> "TensorRecord":
        return cls(np.zeros(tuple(int(s) for s in shape)))

    @classmethod
    def full(cls, shape, value: float) -> "TensorRecord":
        return cls(np.full(tuple(int(s) for s in shape), float(value)))

    def item(self) -> float:
        if self.size != 1:
            raise TensorError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def allclose(self, other: "TensorRecord", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return self.shape == other.shape and np.allclose(
            self.array, other.array, atol=atol, rtol=rtol
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorRecord):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.array, other.array)

    def __hash__(self):
        return hash((self.shape, self.array.tobytes()))

    def __repr__(self) -> str:
        return f"TensorRecord(shape={self.shape})"


@dataclass
class ParameterSet:
    """Named parameter tensors. Names are unique; shapes stay stable."""

    entries: dict[str, TensorRecord] = field(default_factory=dict)
    version: int = 1

    def names(self) -> list[str]:
        return sorted(self.entries)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> TensorRecord:
        return self.entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, name: str, record: TensorRecord) -> None:
        if name in self.entries:
            raise TensorError(f"duplicate parameter name {name!r}")
        self.entries[name] = record

    def replaced(self, updates: Mapping[str, TensorRecord]) -> "ParameterSet":
        """A new set with some entries replaced; shapes must be preserved."""
        out = dict(self.entries)
        for name, record in updates.items():
            if name not in out:
                raise TensorError(f"unknown parameter {name!r}")
            if out[name].shape != record.shape:
                raise TensorError(
                    f"shape of {name!r} changed from {out[name].shape} to {record.shape}"
                )
            out[name] = record
        return ParameterSet(out, self.version)

    def copy(self) -> "ParameterSet":
        return ParameterSet(dict(self.entries), self.version)

    def n_scalars(self) -> int:
        return sum(rec.size for rec in self.entries.values())

    def equals(self, other: "ParameterSet") -> bool:
        return self.names() == other.names() and all(
            self.entries[k] == other.entries[k] for k in self.entries
        )


@dataclass
class GradientSet:
    """Per-parameter gradients; key set mirrors the differentiated ParameterSet."""

    entries: dict[str, TensorRecord] = field(default_factory=dict)

    def names(self) -> list[str]:
        return sorted(self.entries)

    def __getitem__(self, name: str) -> TensorRecord:
        return self.entries[name]

    def __len__(self) -> int:
        return len(self.entries)

    def matches(self, params: ParameterSet) -> bool:
        return self.names() == params.names() and all(
            self.entries[k].shape == params[k].shape for k in self.entries
        )

    def max_abs(self) -> float:
        vals = [np.abs(rec.array).max() for rec in self.entries.values() if rec.size]
        return float(max(vals)) if vals else 0.0
