"""Deterministic numeric substrate: tensors, autodiff tape, random streams."""

from . import autodiff
from .autodiff import Node, backward, leaf
from .rng import RngStream
from .tensor import Tensor, as_array


def randn(stream: RngStream, shape) -> Tensor:
    """Standard-normal Tensor drawn from the given stream."""
    return Tensor(stream.normals(shape))


def matmul(a, b):
    """Matrix product; differentiable when given Nodes."""
    return autodiff.matmul(a, b)


__all__ = [
    "Node", "RngStream", "Tensor", "as_array", "autodiff", "backward",
    "leaf", "matmul", "randn",
]
