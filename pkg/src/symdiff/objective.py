"""Training and evaluation losses for the symmetrised diffusion model.

Every loss takes a parameter view: either a ParamStore (plain arrays, cheap
value-only evaluation returning a Tensor) or the dict from ParamStore.tape()
(returns a Node; backward() on it yields per-parameter gradients).

The step losses share one residual body so the coupling identities below are
structural rather than accidental:

  * symdiff with a Dirac gamma runs exactly the plain diffusion loss code
    (no rotation ops at all), so the two are bit-identical on coupled draws.
  * the augmentation loss evaluated at (z0, R eps, R) equals the Haar-gamma
    symdiff loss evaluated at (z0, eps, R^T), because
    ||R eps - eps_hat(R z_t)|| = ||eps - R^T eps_hat(R z_t)||.

Stream consumption order is part of each loss's contract: eps block first,
then the gamma draws (Haar rotation, then eta for the recursive gamma).
"""

import numpy as np

from .errors import ContractError
from .geometry import NBodyState, require_centered, rotate
from .nets import NetConfig, eps_core, f_core
from .numcore import autodiff as ad
from .numcore.autodiff import Node
from .numcore.rng import RngStream
from .numcore.tensor import Tensor
from .ortho import sample_haar
from .schedule import (
    NoiseSchedule,
    forward_sample,
    sample_noise,
    subspace_dim,
)

__all__ = [
    "symdiff_step_loss",
    "symdiff_step_loss_at",
    "aug_step_loss",
    "aug_step_loss_at",
    "plain_step_loss",
    "prior_kl",
    "final_step_loss",
    "final_step_loss_at",
    "estimate_nll_bound",
    "GAMMA_MODES",
]

GAMMA_MODES = ("recursive", "haar", "dirac")


def _scalar(x) -> float:
    return float(x.value.data if isinstance(x, Node) else np.asarray(
        x.data if isinstance(x, Tensor) else x))


def _weight(sched: NoiseSchedule, t: int, w_mode: str) -> float:
    if w_mode == "unit":
        return 1.0
    if w_mode == "snr":
        return sched.w_snr(t)
    raise ContractError(f"unknown weight mode {w_mode!r}")


def _check_step(sched: NoiseSchedule, t: int):
    if not 2 <= t <= sched.T:
        raise ContractError(f"step t={t} outside [2, {sched.T}]; "
                            "t=1 is handled by final_step_loss")


def _transposed(rot):
    if isinstance(rot, Node):
        return ad.transpose(rot)
    return (rot.data if isinstance(rot, Tensor) else np.asarray(rot)).T


def gamma_rotation(params, gamma_mode: str, z_ref: NBodyState, t_norm: float,
                   stream: RngStream, cfg: NetConfig):
    """Draw the symmetrising rotation for one loss evaluation.

    Returns None for the Dirac gamma (identity, consumes no randomness), a
    plain 3x3 array for the Haar gamma, and a node (differentiable through
    the f parameters by reparameterisation) for the recursive gamma.
    """
    if gamma_mode == "dirac":
        return None
    if gamma_mode not in GAMMA_MODES:
        raise ContractError(f"unknown gamma mode {gamma_mode!r}")
    r0 = sample_haar(stream).data
    if gamma_mode == "haar":
        return r0
    eta = stream.normals((z_ref.n_points, 3))
    x_in = z_ref.x.data @ r0
    f_out = f_core(params, x_in, z_ref.h.data, eta, t_norm, cfg)
    return ad.matmul(r0, f_out)


def _eps_residual(params, z_t: NBodyState, eps: NBodyState, rot,
                  t_norm: float, cfg: NetConfig):
    """||eps - R eps_hat(R^T z_t)||^2 over both blocks; rot None skips the
    rotation ops entirely (identity gamma and the plain loss)."""
    if rot is None:
        xc, hp = eps_core(params, z_t.x.data, z_t.h.data, t_norm, cfg)
        dx = ad.sub(eps.x.data, xc)
    else:
        x_in = ad.matmul(z_t.x.data, rot)
        xc, hp = eps_core(params, x_in, z_t.h.data, t_norm, cfg)
        dx = ad.sub(eps.x.data, ad.matmul(xc, _transposed(rot)))
    total = ad.sumsq(dx)
    if hp is not None:
        total = ad.add(total, ad.sumsq(ad.sub(eps.h.data, hp)))
    return total


def symdiff_step_loss(params, z0: NBodyState, t: int, stream: RngStream,
                      sched: NoiseSchedule, cfg: NetConfig,
                      w_mode: str = "unit", gamma_mode: str = "recursive"):
    """One-step symmetrised denoising loss 1/2 w(t) ||eps - R eps_hat||^2.

    Draws eps ~ N_U(0, I), forms z_t, then draws R from the chosen gamma at
    z_t; the recursive gamma keeps the rotation differentiable through the
    f parameters.
    """
    _check_step(sched, t)
    require_centered(z0, what="loss input")
    w = _weight(sched, t, w_mode)
    eps = sample_noise(z0.n_points, z0.n_features, stream)
    z_t = forward_sample(z0, t, eps, sched)
    rot = gamma_rotation(params, gamma_mode, z_t, t / sched.T, stream, cfg)
    return ad.mul(_eps_residual(params, z_t, eps, rot, t / sched.T, cfg),
                  0.5 * w)


def symdiff_step_loss_at(params, z0: NBodyState, t: int, eps: NBodyState,
                         rot, sched: NoiseSchedule, cfg: NetConfig,
                         w_mode: str = "unit"):
    """Symdiff step loss at an explicit noise draw and rotation (None for
    identity); deterministic, used for coupling checks."""
    _check_step(sched, t)
    require_centered(z0, what="loss input")
    z_t = forward_sample(z0, t, eps, sched)
    return ad.mul(_eps_residual(params, z_t, eps, rot, t / sched.T, cfg),
                  0.5 * _weight(sched, t, w_mode))


def plain_step_loss(params, z0: NBodyState, t: int, stream: RngStream,
                    sched: NoiseSchedule, cfg: NetConfig,
                    w_mode: str = "unit"):
    """Unsymmetrised diffusion loss; same code path as the Dirac gamma."""
    return symdiff_step_loss(params, z0, t, stream, sched, cfg,
                             w_mode=w_mode, gamma_mode="dirac")


def aug_step_loss(params, z0: NBodyState, t: int, stream: RngStream,
                  sched: NoiseSchedule, cfg: NetConfig,
                  w_mode: str = "unit"):
    """Data-augmentation loss: rotate z0 by a Haar draw before noising.

    Consumes the eps block first, then the rotation, matching the symdiff
    stream layout.
    """
    _check_step(sched, t)
    require_centered(z0, what="loss input")
    eps = sample_noise(z0.n_points, z0.n_features, stream)
    rot = sample_haar(stream).data
    return aug_step_loss_at(params, z0, t, eps, rot, sched, cfg,
                            w_mode=w_mode)


def aug_step_loss_at(params, z0: NBodyState, t: int, eps: NBodyState, rot,
                     sched: NoiseSchedule, cfg: NetConfig,
                     w_mode: str = "unit"):
    """Augmentation loss at explicit draws: 1/2 w ||eps - eps_hat(alpha_t
    R z0 + sigma_t eps)||^2 with rot None meaning no augmentation."""
    _check_step(sched, t)
    require_centered(z0, what="loss input")
    z_in = z0 if rot is None else rotate(rot, z0)
    z_t = forward_sample(z_in, t, eps, sched)
    return ad.mul(_eps_residual(params, z_t, eps, None, t / sched.T, cfg),
                  0.5 * _weight(sched, t, w_mode))


def prior_kl(z0: NBodyState, sched: NoiseSchedule) -> float:
    """Closed-form KL(N_U(alpha_T z0, sigma_T^2 I) || N_U(0, I)) on the
    centered subspace, dimension D = (N-1)*3 + N*d."""
    require_centered(z0, what="z0")
    dim = subspace_dim(z0.n_points, z0.n_features)
    a, s2 = sched.alpha[sched.T], sched.sigma[sched.T] ** 2
    sq = float(np.dot(z0.flat(), z0.flat()))
    return 0.5 * (dim * s2 + a * a * sq - dim - dim * np.log(s2))


def _final_nll(params, z0: NBodyState, z1: NBodyState, rot,
               sched: NoiseSchedule, cfg: NetConfig):
    """Negative log of the conjugated continuous reconstruction kernel
    N_U(z0; z1/alpha_1 - (sigma_1/alpha_1) R eps_hat(R^T z1), sigma_1^2 /
    alpha_1^2), both blocks folded into the one isotropic density."""
    a1 = float(sched.alpha[1])
    sig = float(sched.sigma[1]) / a1
    if rot is None:
        x_in, x_tgt = z1.x.data, z0.x.data
    else:
        x_in = ad.matmul(z1.x.data, rot)
        x_tgt = ad.matmul(z0.x.data, rot)
    xc, hp = eps_core(params, x_in, z1.h.data, 1.0 / sched.T, cfg)
    dx = ad.sub(x_tgt, ad.sub(ad.div(x_in, a1), ad.mul(xc, sig)))
    total = ad.sumsq(dx)
    if hp is not None:
        mu_h = ad.sub(ad.div(z1.h.data, a1), ad.mul(hp, sig))
        total = ad.add(total, ad.sumsq(ad.sub(z0.h.data, mu_h)))
    dim = subspace_dim(z0.n_points, z0.n_features)
    return ad.add(ad.div(total, 2.0 * sig * sig),
                  0.5 * dim * np.log(2.0 * np.pi * sig * sig))


def final_step_loss(params, z0: NBodyState, stream: RngStream,
                    sched: NoiseSchedule, cfg: NetConfig,
                    gamma_mode: str = "recursive"):
    """Reconstruction term: -log conjugated density of z0 under the
    continuous final-step kernel, with z_1 and R drawn fresh."""
    require_centered(z0, what="loss input")
    eps = sample_noise(z0.n_points, z0.n_features, stream)
    z1 = forward_sample(z0, 1, eps, sched)
    rot = gamma_rotation(params, gamma_mode, z1, 1.0 / sched.T, stream, cfg)
    return _final_nll(params, z0, z1, rot, sched, cfg)


def final_step_loss_at(params, z0: NBodyState, eps: NBodyState, rot,
                       sched: NoiseSchedule, cfg: NetConfig):
    """Reconstruction term at an explicit noise draw and rotation."""
    require_centered(z0, what="loss input")
    z1 = forward_sample(z0, 1, eps, sched)
    return _final_nll(params, z0, z1, rot, sched, cfg)


def nll_bound_terms(params, z0: NBodyState, stream: RngStream,
                    sched: NoiseSchedule, cfg: NetConfig,
                    n_t_samples: int = 16,
                    gamma_mode: str = "recursive") -> dict:
    """The three bound terms separately: prior KL, (T-1)-weighted average of
    uniformly drawn step losses (snr weighting), one reconstruction draw."""
    if n_t_samples < 1:
        raise ContractError(f"n_t_samples must be >= 1, got {n_t_samples}")
    acc = 0.0
    for _ in range(n_t_samples):
        t = 2 + int(stream.integers(1, sched.T - 1)[0])
        loss = symdiff_step_loss(params, z0, t, stream, sched, cfg,
                                 w_mode="snr", gamma_mode=gamma_mode)
        acc += _scalar(loss) * (sched.T - 1)
    final = _scalar(final_step_loss(params, z0, stream, sched, cfg,
                                    gamma_mode=gamma_mode))
    return {"prior_kl": prior_kl(z0, sched),
            "diffusion": acc / n_t_samples,
            "final": final}


def estimate_nll_bound(params, z0: NBodyState, stream: RngStream,
                       sched: NoiseSchedule, cfg: NetConfig,
                       n_t_samples: int = 16,
                       gamma_mode: str = "recursive") -> float:
    """Unbiased one-datum estimate of the negative surrogate ELBO in nats."""
    terms = nll_bound_terms(params, z0, stream, sched, cfg,
                            n_t_samples=n_t_samples, gamma_mode=gamma_mode)
    return terms["prior_kl"] + terms["diffusion"] + terms["final"]
