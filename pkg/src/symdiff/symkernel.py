"""Stochastic symmetrisation of Markov kernels over O(3).

A kernel k is symmetrised by a rotation-valued base sampler gamma:

    g ~ gamma(dg | x),  y ~ k(dy | g^-1 x),  return g y

The composite is stochastically equivariant whenever gamma is. Permutation
equivariance is kept intrinsic (the kernels used here are already
exchangeable), so gamma only carries the rotation part.

The conjugated density k(y | g, x) = k(g^-1 y | g^-1 x) uses the unit
Jacobian of the orthogonal action; the density of the symmetrised kernel is
its gamma-expectation, estimated here by log-mean-exp Monte Carlo for
diagnostics only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ContractError
from .geometry import NBodyState, require_centered, rotate
from .numcore import RngStream, Tensor
from .ortho import ensure_orthogonal, sample_haar
from .schedule import log_density_projected_gaussian, sample_projected_gaussian


@dataclass
class KernelSampler:
    """A Markov kernel: one sample per call, i.i.d. across independent streams.

    sample_batch, when set, must return the same list as repeated sample
    calls with streams split off the given one in order.
    """

    sample: Callable[[NBodyState, RngStream], NBodyState]
    log_density: Optional[Callable[[NBodyState, NBodyState], float]] = None
    sample_batch: Optional[Callable[[NBodyState, int, RngStream], list]] = None


@dataclass
class GammaSampler:
    """Rotation-valued base kernel; sample returns an orthogonal 3x3 Tensor."""

    sample: Callable[[NBodyState, RngStream], Tensor]


def gaussian_kernel(sigma: float) -> KernelSampler:
    """Projected Gaussian centered at the input, for tests and baselines."""
    return KernelSampler(
        sample=lambda x, stream: sample_projected_gaussian(x, sigma, stream),
        log_density=lambda y, x: log_density_projected_gaussian(y, x, sigma),
    )


def dirac_gamma() -> GammaSampler:
    """Always the identity rotation; consumes no randomness."""
    return GammaSampler(sample=lambda x, stream: Tensor(np.eye(3)))


def haar_gamma() -> GammaSampler:
    """Input-independent Haar rotation."""
    return GammaSampler(sample=lambda x, stream: sample_haar(stream))


def symmetrise_sample(gamma: GammaSampler, k: KernelSampler, x: NBodyState,
                      stream: RngStream) -> NBodyState:
    """One draw from the symmetrised kernel sym_gamma(k).

    The stream is consumed sequentially: gamma first, then k, so a Dirac
    gamma leaves k's draws identical to an unsymmetrised call.
    """
    require_centered(x, what="input")
    r = gamma.sample(x, stream).data
    y = k.sample(rotate(r.T, x), stream)
    out = rotate(r, y)
    require_centered(out, what="symmetrised sample")
    return out


def symmetrised_kernel(gamma: GammaSampler, k: KernelSampler) -> KernelSampler:
    """Package sym_gamma(k) as a KernelSampler."""
    return KernelSampler(
        sample=lambda x, stream: symmetrise_sample(gamma, k, x, stream))


def conjugated_log_density(k: KernelSampler, g, y: NBodyState,
                           x: NBodyState) -> float:
    """log k(y | g, x) = log k(g^-1 y | g^-1 x), with g^-1 = g^T."""
    if k.log_density is None:
        raise ContractError("kernel does not expose a log density")
    r = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
    return k.log_density(rotate(r.T, y), rotate(r.T, x))


def make_recursive_gamma(f_net: Callable[[NBodyState, np.ndarray], object]
                         ) -> GammaSampler:
    """Equivariant rotation sampler R0 f(R0^T z, eta), R0 ~ Haar.

    Left-invariance of Haar makes the output distribution equivariant for any
    f, so f is free to be learned. eta is a fresh standard normal N x 3 block.
    The stream order is Haar draw first, then eta; with f identically I the
    returned rotation equals a plain sample_haar call on the same stream.
    """

    def sample(z: NBodyState, stream: RngStream) -> Tensor:
        r0 = sample_haar(stream).data
        eta = stream.normals((z.n_points, 3))
        m = f_net(rotate(r0.T, z), eta)
        marr = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
        return Tensor(ensure_orthogonal(r0 @ marr))

    return GammaSampler(sample=sample)


def mc_log_density_symmetrised(gamma: GammaSampler, k: KernelSampler,
                               y: NBodyState, x: NBodyState, n_mc: int,
                               stream: RngStream) -> float:
    """log-mean-exp estimate of log E_gamma[k(y | g, x)]; diagnostics only.

    Downward biased for finite n_mc (Jensen); exact when the conjugated
    density does not depend on g.
    """
    if n_mc < 1:
        raise ContractError("need n_mc >= 1")
    vals = np.array([
        conjugated_log_density(k, gamma.sample(x, stream), y, x)
        for _ in range(n_mc)
    ])
    m = vals.max()
    return float(m + np.log(np.mean(np.exp(vals - m))))
