"""Symmetrised score-matching and flow-matching losses.

Both losses wrap an arbitrary state-to-state field net (by default the
denoiser trunk) in the same learned-rotation machinery the step losses use:
evaluate the field at R^T x_t, rotate the output back by R, and regress on
the plain conditional target. A Dirac gamma skips the rotation ops, so the
losses collapse to their standard unsymmetrised counterparts bit for bit.

Continuous forward process: the VP conditional N(alpha(t) x0, sigma(t)^2 I)
with a linear beta(t) on [beta_min, beta_max]; chosen to mirror the discrete
variance-preserving schedule. The flow side uses the linear interpolant
x_t = (1-t) x0 + t x1 from a projected-Gaussian source, whose conditional
velocity is x1 - x0.

A field is a callable (params, x, h, t, cfg) -> (x_out, h_out) operating on
raw blocks; x_out must be centered. Custom fields let tests substitute exact
algebraic maps for the net.
"""

import math

import numpy as np

from .errors import ContractError, NumericsError
from .geometry import NBodyState, require_centered, state
from .nets import NetConfig, eps_core
from .numcore import autodiff as ad
from .numcore.autodiff import Node
from .numcore.rng import RngStream
from .numcore.tensor import Tensor
from .objective import gamma_rotation
from .ortho import ensure_orthogonal
from .schedule import sample_noise

__all__ = [
    "vp_alpha_sigma",
    "sym_score_loss",
    "sym_score_loss_at",
    "sym_flow_loss",
    "sym_flow_loss_at",
    "euler_generate_flow",
    "BETA_MIN",
    "BETA_MAX",
    "SCORE_SIGMA_FLOOR",
]

BETA_MIN = 0.1
BETA_MAX = 20.0

SCORE_SIGMA_FLOOR = 1e-4


def _value(x) -> np.ndarray:
    if isinstance(x, Node):
        return x.value.data
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


def vp_alpha_sigma(t: float) -> tuple[float, float]:
    """Continuous VP conditional coefficients alpha(t), sigma(t) for a
    linear beta(t); alpha(0) = 1, alpha(1) is essentially zero."""
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"continuous time {t} outside [0, 1]")
    ib = BETA_MIN * t + 0.5 * (BETA_MAX - BETA_MIN) * t * t
    a = math.exp(-0.5 * ib)
    return a, math.sqrt(max(1.0 - a * a, 0.0))


def _net_field(params, x, h, t: float, cfg: NetConfig):
    xc, hp = eps_core(params, x, h, t, cfg)
    if hp is None:
        hp = np.zeros((_value(x).shape[0], 0))
    return xc, hp


def _rotated_field(params, field, x, h, rot, t: float, cfg: NetConfig):
    """R field(R^T x) on the position block; features pass through the
    field unrotated. rot None applies the field directly."""
    if rot is None:
        return field(params, x, h, t, cfg)
    fx, fh = field(params, ad.matmul(x, rot), h, t, cfg)
    rt = ad.transpose(rot) if isinstance(rot, Node) else _value(rot).T
    return ad.matmul(fx, rt), fh


def _residual(vx, vh, tx, th):
    total = ad.sumsq(ad.sub(vx, tx))
    if _value(th).size:
        total = ad.add(total, ad.sumsq(ad.sub(vh, th)))
    return total


def _draw_t(t, stream: RngStream) -> float:
    if t is None:
        return float(stream.uniforms(1)[0])
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"continuous time {t} outside [0, 1]")
    return float(t)


def sym_score_loss(params, x0: NBodyState, t, stream: RngStream,
                   cfg: NetConfig, gamma_mode: str = "recursive",
                   field=None):
    """Denoising score matching with a symmetrised score field:
    sigma(t)^2 ||R s_theta(R^T x_t) - grad log p(x_t|x0)||^2.

    t None draws the time uniformly; draw order is t, the conditional noise
    block, then the gamma draws.
    """
    require_centered(x0, what="score-matching input")
    t = _draw_t(t, stream)
    eps = sample_noise(x0.n_points, x0.n_features, stream)
    return _score_loss_body(params, x0, t, eps, None, stream, cfg,
                            gamma_mode, field)


def sym_score_loss_at(params, x0: NBodyState, t: float, eps: NBodyState,
                      rot, cfg: NetConfig, field=None):
    """Score loss at explicit draws (rot None means identity)."""
    require_centered(x0, what="score-matching input")
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"continuous time {t} outside [0, 1]")
    return _score_loss_body(params, x0, t, eps, rot, None, cfg, None, field)


def _score_loss_body(params, x0, t, eps, rot, stream, cfg, gamma_mode, field):
    field = field or _net_field
    a, s = vp_alpha_sigma(t)
    s = max(s, SCORE_SIGMA_FLOOR)
    xt = state(a * x0.x.data + s * eps.x.data,
               a * x0.h.data + s * eps.h.data)
    if gamma_mode is not None:
        rot = gamma_rotation(params, gamma_mode, xt, t, stream, cfg)
    tx = -eps.x.data / s
    th = -eps.h.data / s
    vx, vh = _rotated_field(params, field, xt.x.data, xt.h.data, rot, t, cfg)
    return ad.mul(_residual(vx, vh, tx, th), s * s)


def sym_flow_loss(params, x1: NBodyState, t, stream: RngStream,
                  cfg: NetConfig, gamma_mode: str = "recursive",
                  field=None):
    """Conditional flow matching with a symmetrised velocity field:
    ||R v_theta(R^T x_t) - (x1 - x0)||^2 on the linear path
    x_t = (1-t) x0 + t x1 from a projected-Gaussian source.

    Draw order: t (when None), the source block, then the gamma draws.
    """
    require_centered(x1, what="flow-matching input")
    t = _draw_t(t, stream)
    x0 = sample_noise(x1.n_points, x1.n_features, stream)
    xt = state((1.0 - t) * x0.x.data + t * x1.x.data,
               (1.0 - t) * x0.h.data + t * x1.h.data)
    rot = gamma_rotation(params, gamma_mode, xt, t, stream, cfg)
    return _flow_loss_body(params, x1, t, x0, xt, rot, cfg, field)


def sym_flow_loss_at(params, x1: NBodyState, t: float, x0: NBodyState,
                     rot, cfg: NetConfig, field=None):
    """Flow loss at an explicit source draw and rotation."""
    require_centered(x1, what="flow-matching input")
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"continuous time {t} outside [0, 1]")
    xt = state((1.0 - t) * x0.x.data + t * x1.x.data,
               (1.0 - t) * x0.h.data + t * x1.h.data)
    return _flow_loss_body(params, x1, t, x0, xt, rot, cfg, field)


def _flow_loss_body(params, x1, t, x0, xt, rot, cfg, field):
    field = field or _net_field
    tx = x1.x.data - x0.x.data
    th = x1.h.data - x0.h.data
    vx, vh = _rotated_field(params, field, xt.x.data, xt.h.data, rot, t, cfg)
    return _residual(vx, vh, tx, th)


def euler_generate_flow(params, n: int, d: int, steps: int,
                        stream: RngStream, cfg: NetConfig,
                        gamma_mode: str = "recursive",
                        field=None) -> NBodyState:
    """Integrate the symmetrised flow ODE x <- x + dt R v_theta(R^T x) from
    a projected-Gaussian source with a fresh rotation every step."""
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    if n < 2:
        raise ContractError(f"need at least 2 points, got {n}")
    field = field or _net_field
    z = sample_noise(n, d, stream)
    dt = 1.0 / steps
    for i in range(steps):
        t = i * dt
        try:
            rot = gamma_rotation(params, gamma_mode, z, t, stream, cfg)
            if rot is not None:
                rot = ensure_orthogonal(_value(rot))
            vx, vh = _rotated_field(params, field, z.x.data, z.h.data, rot,
                                    t, cfg)
        except ContractError as exc:
            raise NumericsError(
                f"field evaluation failed at step {i + 1}/{steps}") from exc
        x = z.x.data + dt * _value(vx)
        h = z.h.data + dt * _value(vh)
        if not (np.isfinite(x).all() and np.isfinite(h).all()):
            raise NumericsError(f"non-finite flow state at step {i + 1}/{steps}")
        if np.abs(x.mean(axis=0)).max() > 1e-9:
            raise NumericsError(
                f"flow state left the centered subspace at step {i + 1}/{steps}")
        z = state(x, h)
    return z
