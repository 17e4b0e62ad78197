"""Dense float64 tensors.

A Tensor wraps a C-contiguous, read-only float64 ndarray. Finite values are
enforced at construction (probes that need NaN/Inf on purpose pass
``allow_nonfinite=True``). Completed tensors are immutable and safe to share
across threads.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np


class TensorError(ValueError):
    """Invalid tensor construction or use."""


class Tensor:
    __slots__ = ("data",)

    def __init__(self, values, allow_nonfinite: bool = False):
        arr = np.array(values, dtype=np.float64, order="C", copy=True)
        if not allow_nonfinite and not np.all(np.isfinite(arr)):
            raise TensorError("tensor contains non-finite values")
        arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def ravel(self) -> np.ndarray:
        """Flat row-major copy of the data."""
        return self.data.reshape(-1).copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Tensor)
            and self.shape == other.shape
            and np.array_equal(self.data, other.data)
        )

    def __hash__(self):
        raise TypeError("Tensor is not hashable")


def tensor(values, allow_nonfinite: bool = False) -> Tensor:
    return Tensor(values, allow_nonfinite=allow_nonfinite)


def zeros(shape: Iterable[int] | int) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def ones(shape: Iterable[int] | int) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float64))


def as_array(value) -> np.ndarray:
    """Coerce a Tensor or array-like to a float64 ndarray (no copy if possible)."""
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)
