"""N-body states and the joint action of point relabelling and O(3).

A state is a pair z = [x, h]: positions x in R^(N x 3) and optional per-point
features h in R^(N x d). A group element g = (perm, rot) acts by

    act(g, z)_i = (rot x_(perm(i)), h_(perm(i)))

which has unit Jacobian. Diffusion states live on the centered subspace
(positions summing to zero); proj_u projects onto it by mean subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .numcore import Tensor

_ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class NBodyState:
    """Positions (N x 3) and features (N x d, d may be 0)."""

    x: Tensor
    h: Tensor

    def __post_init__(self):
        if self.x.data.ndim != 2 or self.x.data.shape[1] != 3:
            raise ShapeError(f"positions must be N x 3, got {self.x.shape}")
        n = self.x.data.shape[0]
        if n < 1:
            raise ContractError("need at least one point")
        if self.h.data.ndim != 2 or self.h.data.shape[0] != n:
            raise ShapeError(f"features must be {n} x d, got {self.h.shape}")

    @property
    def n_points(self) -> int:
        return self.x.data.shape[0]

    @property
    def n_features(self) -> int:
        return self.h.data.shape[1]

    def flat(self) -> np.ndarray:
        """Row-major positions then features, as one vector."""
        return np.concatenate([self.x.data.ravel(), self.h.data.ravel()])


def state(x, h=None) -> NBodyState:
    """NBodyState from array-likes; h defaults to an N x 0 block."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    if h is None:
        h = np.zeros((xt.data.shape[0], 0))
    ht = h if isinstance(h, Tensor) else Tensor(h)
    return NBodyState(xt, ht)


def zero_state(n: int, d: int) -> NBodyState:
    return state(np.zeros((n, 3)), np.zeros((n, d)))


def check_rotation(rot: np.ndarray, tol: float = _ORTHO_TOL) -> np.ndarray:
    """Validate a 3x3 orthogonal matrix (reflections allowed)."""
    r = np.asarray(rot, dtype=np.float64)
    if r.shape != (3, 3):
        raise ShapeError(f"rotation must be 3 x 3, got {r.shape}")
    if np.abs(r.T @ r - np.eye(3)).max() > tol:
        raise ContractError("matrix is not orthogonal within tolerance")
    if abs(abs(np.linalg.det(r)) - 1.0) > tol:
        raise ContractError("matrix determinant is not of unit magnitude")
    return r


@dataclass(frozen=True)
class GroupElement:
    """A relabelling perm (perm[i] = source row of output row i) and a rotation."""

    perm: np.ndarray
    rot: Tensor

    def __post_init__(self):
        p = np.asarray(self.perm, dtype=np.int64)
        if sorted(p.tolist()) != list(range(p.size)):
            raise ContractError("perm is not a permutation")
        object.__setattr__(self, "perm", p)
        check_rotation(self.rot.data)

    @property
    def n_points(self) -> int:
        return self.perm.size


def identity_element(n: int) -> GroupElement:
    return GroupElement(np.arange(n), Tensor(np.eye(3)))


def random_element(stream, n: int) -> GroupElement:
    """Haar rotation plus uniform relabelling."""
    from .ortho import sample_haar

    return GroupElement(stream.permutation(n), sample_haar(stream))


def compose(g: GroupElement, g2: GroupElement) -> GroupElement:
    """Element acting as g after g2: act(compose(g, g2), z) = act(g, act(g2, z))."""
    if g.n_points != g2.n_points:
        raise ShapeError("group elements act on different point counts")
    return GroupElement(g2.perm[g.perm], Tensor(g.rot.data @ g2.rot.data))


def inverse(g: GroupElement) -> GroupElement:
    inv = np.empty_like(g.perm)
    inv[g.perm] = np.arange(g.perm.size)
    return GroupElement(inv, Tensor(g.rot.data.T))


def act(g: GroupElement, z: NBodyState) -> NBodyState:
    """Apply (perm, rot): output row i is (rot x_(perm(i)), h_(perm(i)))."""
    if g.n_points != z.n_points:
        raise ShapeError(f"element on {g.n_points} points, state has {z.n_points}")
    r = g.rot.data
    return state(z.x.data[g.perm] @ r.T, z.h.data[g.perm])


def rotate(rot, z: NBodyState) -> NBodyState:
    """Rotation-only action; features untouched."""
    r = rot.data if isinstance(rot, Tensor) else np.asarray(rot, dtype=np.float64)
    return state(z.x.data @ r.T, z.h)


def com(x) -> Tensor:
    """Arithmetic mean of position rows."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return Tensor(arr.mean(axis=0))


def proj_u(z: NBodyState) -> NBodyState:
    """Center positions; features pass through untouched."""
    centered = z.x.data - z.x.data.mean(axis=0, keepdims=True)
    return NBodyState(Tensor(centered), z.h)


def is_centered(z: NBodyState, tol: float) -> bool:
    if tol <= 0:
        raise ContractError("tol must be positive")
    return bool(np.abs(z.x.data.mean(axis=0)).max() <= tol)


def require_centered(z: NBodyState, tol: float = 1e-9, what: str = "state"):
    if not is_centered(z, tol):
        raise ContractError(f"{what} is not centered within {tol}")
