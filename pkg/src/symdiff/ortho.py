"""Haar-distributed orthogonal matrices and the QR orthogonalisation map.

Both use Householder QR with the diagonal-sign correction Q <- Q sign(diag(R)),
which makes the factorisation unique and the Gaussian-input sampler exactly
Haar on O(3). A library QR without the correction is NOT Haar: the sign
convention of the triangular factor biases the distribution.

qr_orthogonalize is exactly equivariant under left multiplication by any
orthogonal matrix, which is what lets a learned 3x3 head inherit equivariance
from a Haar-rotated input.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateError
from .numcore import Tensor, autodiff as ad

_DEGENERATE_SV = 1e-8

# degenerate-head events (rank-deficient input mapped to identity); readable
# by tests, which expect 0 in healthy runs
_degenerate_count = 0


def degenerate_count() -> int:
    return _degenerate_count


def reset_degenerate_count():
    global _degenerate_count
    _degenerate_count = 0


def _flag_degenerate():
    global _degenerate_count
    _degenerate_count += 1


def _signed_q(m: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(m)
    return q * np.sign(np.diag(r))


def signed_qr_batch(ms: np.ndarray) -> np.ndarray:
    """Sign-corrected Q factors for a stack of 3x3 matrices."""
    q, r = np.linalg.qr(ms)
    d = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    return q * d[..., None, :]


_RETRY_SV = 1e-12


def sample_haar(stream) -> Tensor:
    """One Haar draw from O(3): QR of a Gaussian matrix, sign-corrected."""
    for _ in range(8):
        g = stream.normals((3, 3))
        if np.linalg.svd(g, compute_uv=False)[-1] >= _RETRY_SV:
            return Tensor(_signed_q(g))
    raise DegenerateError("could not draw a full-rank Gaussian matrix")


def sample_haar_batch(stream, count: int) -> np.ndarray:
    """count Haar draws from one stream, as a (count, 3, 3) block."""
    gs = stream.normals((count, 3, 3))
    sv = np.linalg.svd(gs, compute_uv=False)
    bad = np.nonzero(sv[:, -1] < _RETRY_SV)[0]
    out = signed_qr_batch(gs)
    for i in bad:  # probability ~0 per draw
        out[i] = sample_haar(stream).data
    return out


def ensure_orthogonal(m, tol: float = 1e-10) -> np.ndarray:
    """Repair numerical drift in a product of orthogonal matrices.

    Exactly-orthogonal inputs are returned unchanged (signed QR fixes them),
    so this is safe to call unconditionally where rotations accumulate.
    """
    arr = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if np.abs(arr.T @ arr - np.eye(3)).max() <= tol:
        return arr
    return _signed_q(arr)


def qr_orthogonalize(m) -> Tensor:
    """Nearest-in-construction orthogonal matrix for a full-rank 3x3 input.

    Rank-deficient inputs (smallest singular value below 1e-8) fall back to
    the identity and bump the degenerate counter.
    """
    arr = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if np.linalg.svd(arr, compute_uv=False)[-1] < _DEGENERATE_SV:
        _flag_degenerate()
        return Tensor(np.eye(3))
    return Tensor(_signed_q(arr))


def qr_orthogonalize_node(m):
    """Differentiable qr_orthogonalize for tape inputs.

    The pullback for the Q factor of A = QR is

        A_bar = Q tril(Q^T Q_bar - Q_bar^T Q, -1) R^-T

    with the sign flip absorbed into Q_bar. The degenerate fallback is
    piecewise constant, so its gradient is zero.
    """
    if not isinstance(m, ad.Node):
        return qr_orthogonalize(m)
    arr = m.value.data
    if np.linalg.svd(arr, compute_uv=False)[-1] < _DEGENERATE_SV:
        _flag_degenerate()
        return ad.primitive(np.eye(3), (m,), (lambda g: np.zeros((3, 3)),))
    q, r = np.linalg.qr(arr)
    d = np.sign(np.diag(r))
    out = q * d

    def back(g):
        qbar = g * d  # pull the column sign flips back onto the raw Q
        s = q.T @ qbar - qbar.T @ q
        return q @ np.tril(s, -1) @ np.linalg.inv(r).T

    return ad.primitive(out, (m,), (back,))
