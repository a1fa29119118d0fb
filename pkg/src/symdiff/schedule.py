"""Discrete variance-preserving noise schedules and the projected Gaussian.

A schedule stores alpha_t, sigma_t for t = 0..T with alpha_t^2 + sigma_t^2 = 1
and strictly decreasing signal-to-noise ratio SNR(t) = alpha_t^2 / sigma_t^2.
Transition constants between adjacent steps:

    alpha_{t|t-1} = alpha_t / alpha_{t-1}
    sigma_{t|t-1}^2 = sigma_t^2 - alpha_{t|t-1}^2 sigma_{t-1}^2

The projected Gaussian N_U(mu, sigma^2 I) lives on the subspace U of states
whose positions sum to zero; its density needs the subspace dimension
D = (N-1)*3 + N*d, not the ambient one, for the normaliser to be correct.

Note sigma_0 > 0: the cumulative signal at t=0 is kept slightly below one so
that SNR(0) is finite and the t=1 reconstruction term is well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .geometry import NBodyState, proj_u, require_centered, state, zero_state
from .numcore import RngStream, Tensor

# per-step signal retention alpha_{t|t-1}^2 is clipped to this range; the
# lower clip keeps alpha_T positive, the upper keeps SNR strictly decreasing
_RATIO_LO = 0.001
_RATIO_HI = 1.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays alpha_0..alpha_T and sigma_0..sigma_T of a VP schedule."""

    T: int
    alpha: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        a, s = np.asarray(self.alpha, float), np.asarray(self.sigma, float)
        if a.shape != (self.T + 1,) or s.shape != (self.T + 1,):
            raise ContractError("alpha and sigma must have length T+1")
        if not (np.all(a > 0) and np.all(s > 0)):
            raise ContractError("alpha and sigma must be positive")
        if np.abs(a**2 + s**2 - 1.0).max() > 1e-12:
            raise ContractError("schedule is not variance preserving")
        snr = a**2 / s**2
        if not np.all(np.diff(snr) < 0):
            raise ContractError("SNR must be strictly decreasing")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "sigma", s)

    def _check_t(self, t: int, lo: int):
        if not lo <= t <= self.T:
            raise ContractError(f"step {t} outside [{lo}, {self.T}]")

    def snr(self, t: int) -> float:
        return float(self.alpha[t] ** 2 / self.sigma[t] ** 2)

    def alpha_ts(self, t: int) -> float:
        """Transition signal alpha_{t|t-1}."""
        self._check_t(t, 1)
        return float(self.alpha[t] / self.alpha[t - 1])

    def sigma2_ts(self, t: int) -> float:
        """Transition variance sigma_{t|t-1}^2."""
        self._check_t(t, 1)
        return float(self.sigma[t] ** 2
                     - self.alpha_ts(t) ** 2 * self.sigma[t - 1] ** 2)

    def sigma_q(self, t: int) -> float:
        """Posterior std of z_{t-1} given (z_t, z_0)."""
        self._check_t(t, 2)
        var = self.sigma2_ts(t) * self.sigma[t - 1] ** 2 / self.sigma[t] ** 2
        return float(np.sqrt(var))

    def w_snr(self, t: int) -> float:
        """SNR(t-1)/SNR(t) - 1, the diffusion-loss weight; positive."""
        self._check_t(t, 1)
        return self.snr(t - 1) / self.snr(t) - 1.0


def _schedule_from_signal(T: int, abar_raw: np.ndarray) -> NoiseSchedule:
    """Build a VP schedule from a raw cumulative-signal grid via ratio clipping."""
    ratios = np.clip(abar_raw[1:] / abar_raw[:-1], _RATIO_LO, _RATIO_HI)
    abar = np.concatenate([[abar_raw[0]], abar_raw[0] * np.cumprod(ratios)])
    return NoiseSchedule(T, np.sqrt(abar), np.sqrt(1.0 - abar))


def make_cosine_schedule(T: int, s: float = 0.008) -> NoiseSchedule:
    """Cosine-squared cumulative signal, unnormalised so sigma_0 > 0."""
    if T < 2:
        raise ContractError("need T >= 2")
    t = np.arange(T + 1) / T
    abar_raw = np.cos((t + s) / (1.0 + s) * np.pi / 2.0) ** 2
    return _schedule_from_signal(T, abar_raw)


def make_linear_schedule(T: int, lo: float = 1e-4) -> NoiseSchedule:
    """Cumulative signal descending linearly from 1-lo to lo."""
    if T < 2:
        raise ContractError("need T >= 2")
    abar_raw = np.linspace(1.0 - lo, lo, T + 1)
    return _schedule_from_signal(T, abar_raw)


@dataclass(frozen=True)
class PosteriorParams:
    """Mean state and scalar std of one reverse-posterior step."""

    mu_q: NBodyState
    sigma_q: float


def forward_sample(z0: NBodyState, t: int, eps: NBodyState,
                   sched: NoiseSchedule) -> NBodyState:
    """Noising step alpha_t z0 + sigma_t eps on both position and feature blocks."""
    sched._check_t(t, 1)
    require_centered(z0, what="z0")
    require_centered(eps, what="eps")
    a, s = sched.alpha[t], sched.sigma[t]
    return state(a * z0.x.data + s * eps.x.data,
                 a * z0.h.data + s * eps.h.data)


def posterior_params(zt: NBodyState, z0: NBodyState, t: int,
                     sched: NoiseSchedule) -> PosteriorParams:
    """Parameters of q(z_{t-1} | z_t, z_0); valid for 2 <= t <= T."""
    sched._check_t(t, 2)
    require_centered(zt, what="zt")
    require_centered(z0, what="z0")
    a_ts = sched.alpha_ts(t)
    s2_t, s2_prev = sched.sigma[t] ** 2, sched.sigma[t - 1] ** 2
    s2_ts = sched.sigma2_ts(t)
    c_t = a_ts * s2_prev / s2_t
    c_0 = sched.alpha[t - 1] * s2_ts / s2_t
    mu = state(c_t * zt.x.data + c_0 * z0.x.data,
               c_t * zt.h.data + c_0 * z0.h.data)
    return PosteriorParams(mu, sched.sigma_q(t))


def sample_noise(n: int, d: int, stream: RngStream) -> NBodyState:
    """One draw from N_U(0, I) on n points with d features."""
    return sample_projected_gaussian(zero_state(n, d), 1.0, stream)


def sample_projected_gaussian(mu: NBodyState, sigma: float,
                              stream: RngStream) -> NBodyState:
    """mu + sigma * proj_U(eps) with ambient standard normal eps.

    Consumes one normals((N, 3+d)) block regardless of sigma, so coupled
    streams stay aligned across code paths.
    """
    if sigma < 0:
        raise ContractError("sigma must be nonnegative")
    require_centered(mu, what="mu")
    n, d = mu.n_points, mu.n_features
    eps = stream.normals((n, 3 + d))
    noise = proj_u(state(eps[:, :3], eps[:, 3:]))
    return state(mu.x.data + sigma * noise.x.data,
                 mu.h.data + sigma * noise.h.data)


def subspace_dim(n: int, d: int) -> int:
    """Dimension of the centered subspace U: (n-1)*3 + n*d."""
    return (n - 1) * 3 + n * d


def log_density_projected_gaussian(z: NBodyState, mu: NBodyState,
                                   sigma: float) -> float:
    """Log N_U(z; mu, sigma^2 I) with the subspace normaliser."""
    if sigma <= 0:
        raise ContractError("sigma must be positive")
    require_centered(z, what="z")
    require_centered(mu, what="mu")
    if z.x.data.shape != mu.x.data.shape or z.h.data.shape != mu.h.data.shape:
        raise ContractError("z and mu have mismatched shapes")
    dim = subspace_dim(z.n_points, z.n_features)
    sq = float(((z.x.data - mu.x.data) ** 2).sum()
               + ((z.h.data - mu.h.data) ** 2).sum())
    return -sq / (2.0 * sigma**2) - 0.5 * dim * np.log(2.0 * np.pi * sigma**2)
