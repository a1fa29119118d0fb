"""Dense 64-bit float tensors with finiteness enforced at construction."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError


class Tensor:
    """Immutable row-major array of float64 values.

    Construction copies the input, casts to float64 and rejects NaN/Inf, so
    every Tensor in the system is finite by construction. The underlying
    ndarray is exposed read-only through .data.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise ContractError("Tensor entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __array__(self, dtype=None, copy=None):
        if dtype is not None:
            return self.data.astype(dtype)
        return self.data


def as_array(x) -> np.ndarray:
    """ndarray view of a Tensor, or float64 ndarray of any array-like."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)
