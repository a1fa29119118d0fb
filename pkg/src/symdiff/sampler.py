"""Reverse-chain sampling for the symmetrised diffusion model.

A chain starts at z_T ~ N_U(0, I) and iterates

    z_{t-1} = z_t / a_{t|t-1}
              - (s_{t|t-1}^2 / (a_{t|t-1} s_t)) R eps_hat(R^T z_t)
              + sigma_q(t) eps

with a fresh rotation R and fresh projected noise eps at every step (reusing
R across steps would break the per-kernel symmetrisation argument). The last
step draws from the continuous reconstruction kernel with mean
z_1/a_1 - (s_1/a_1) R eps_hat(R^T z_1) and std s_1/a_1.

Per-chain stream layout at each step: the gamma draws first (Haar rotation,
then eta for the recursive gamma), then one projected-noise block. All
chains in a batch advance in lockstep through vectorised net evaluations,
chunked at a fixed width so results never depend on the worker count.
"""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import ContractError, NumericsError
from .geometry import NBodyState, state
from .nets import NetConfig, ParamStore, eps_forward_batch, f_forward_batch
from .numcore.rng import RngStream
from .ortho import ensure_orthogonal, sample_haar
from .schedule import NoiseSchedule, sample_noise

__all__ = ["generate", "generate_batch", "chain_chunk_size"]

# fixed vectorisation width: worker count must never change GEMM shapes
_CHUNK = 64

_COM_TOL = 1e-9


def chain_chunk_size() -> int:
    return _CHUNK


def _workers() -> int:
    raw = os.environ.get("SYMDIFF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ContractError(f"SYMDIFF_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def _check_states(xs: np.ndarray, hs: np.ndarray, t: int):
    if not (np.isfinite(xs).all() and np.isfinite(hs).all()):
        raise NumericsError(f"non-finite chain state at reverse step t={t}")
    drift = np.abs(xs.mean(axis=1)).max()
    if drift > _COM_TOL:
        raise NumericsError(
            f"chain left the centered subspace at reverse step t={t} "
            f"(center of mass {drift:.3e})")


def _gamma_batch(params: ParamStore, xs, hs, t_norm: float, streams,
                 cfg: NetConfig, gamma_mode: str):
    """Per-chain symmetrising rotations, or None for the Dirac gamma."""
    if gamma_mode == "dirac":
        return None
    if gamma_mode not in ("recursive", "haar"):
        raise ContractError(f"unknown gamma mode {gamma_mode!r}")
    b, n = xs.shape[:2]
    r0 = np.empty((b, 3, 3))
    for i, st in enumerate(streams):
        r0[i] = sample_haar(st).data
    if gamma_mode == "haar":
        return r0
    etas = np.empty((b, n, 3))
    for i, st in enumerate(streams):
        etas[i] = st.normals((n, 3))
    fs = f_forward_batch(params, np.matmul(xs, r0), hs, etas, t_norm, cfg)
    rots = np.matmul(r0, fs)
    for i in range(b):
        rots[i] = ensure_orthogonal(rots[i])
    return rots


def _rotated_eps_hat(params, xs, hs, rots, t_norm: float, cfg: NetConfig):
    """R eps_hat(R^T z) for every chain; skips the rotations when rots is
    None (identity gamma)."""
    x_in = xs if rots is None else np.matmul(xs, rots)
    ex, eh = eps_forward_batch(params, x_in, hs, t_norm, cfg)
    if rots is not None:
        ex = np.matmul(ex, np.swapaxes(rots, 1, 2))
    return ex, eh


def _noise_batch(streams, n: int, d: int):
    """One N_U(0, I) draw per chain; same block layout and arithmetic as
    schedule.sample_noise, without the per-draw state objects."""
    b = len(streams)
    nx = np.empty((b, n, 3))
    nh = np.empty((b, n, d))
    for i, st in enumerate(streams):
        eps = st.normals((n, 3 + d))
        x = eps[:, :3]
        nx[i] = x - x.mean(axis=0, keepdims=True)
        nh[i] = eps[:, 3:]
    return nx, nh


def _chain_chunk(params: ParamStore, streams, n: int, d: int,
                 sched: NoiseSchedule, cfg: NetConfig, gamma_mode: str):
    xs, hs = _noise_batch(streams, n, d)
    _check_states(xs, hs, sched.T)
    for t in range(sched.T, 1, -1):
        t_norm = t / sched.T
        rots = _gamma_batch(params, xs, hs, t_norm, streams, cfg, gamma_mode)
        ex, eh = _rotated_eps_hat(params, xs, hs, rots, t_norm, cfg)
        a_ts = sched.alpha_ts(t)
        coef = sched.sigma2_ts(t) / (a_ts * sched.sigma[t])
        sq = sched.sigma_q(t)
        nx, nh = _noise_batch(streams, n, d)
        xs = xs / a_ts - coef * ex + sq * nx
        hs = hs / a_ts - coef * eh + sq * nh
        _check_states(xs, hs, t - 1)
    rots = _gamma_batch(params, xs, hs, 1.0 / sched.T, streams, cfg, gamma_mode)
    ex, eh = _rotated_eps_hat(params, xs, hs, rots, 1.0 / sched.T, cfg)
    a1 = sched.alpha[1]
    sig = sched.sigma[1] / a1
    nx, nh = _noise_batch(streams, n, d)
    xs = xs / a1 - sig * ex + sig * nx
    hs = hs / a1 - sig * eh + sig * nh
    _check_states(xs, hs, 0)
    return [state(xs[i], hs[i]) for i in range(len(streams))]


def _check_args(count: int, n: int, d: int):
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    if n < 2:
        raise ContractError(f"need at least 2 points, got {n}")
    if d < 0:
        raise ContractError(f"feature dimension must be >= 0, got {d}")


def generate(params: ParamStore, n: int, d: int, sched: NoiseSchedule,
             stream: RngStream, cfg: NetConfig,
             gamma_mode: str = "recursive") -> NBodyState:
    """Run one reverse chain to completion and return the generated state."""
    _check_args(1, n, d)
    return _chain_chunk(params, [stream], n, d, sched, cfg, gamma_mode)[0]


def generate_batch(params: ParamStore, count: int, n: int, d: int,
                   sched: NoiseSchedule, stream: RngStream, cfg: NetConfig,
                   gamma_mode: str = "recursive") -> list[NBodyState]:
    """Independent chains on split child streams; bit-reproducible for a
    fixed seed no matter how many worker threads run the chunks."""
    _check_args(count, n, d)
    streams = [stream.split() for _ in range(count)]
    chunks = [streams[i:i + _CHUNK] for i in range(0, count, _CHUNK)]

    def run(chunk):
        return _chain_chunk(params, chunk, n, d, sched, cfg, gamma_mode)

    workers = _workers()
    if workers == 1 or len(chunks) == 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    return [z for part in parts for z in part]
