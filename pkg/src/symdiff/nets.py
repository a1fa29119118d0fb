"""Set networks for the denoiser and the rotation head.

Both nets share one trunk design: per-point MLP with shared weights, a
mean-pooled context vector and a sinusoidal time embedding injected at every
block, and Gaussian distance embeddings concatenated to the inputs. Weight
sharing plus symmetric pooling make the denoiser exactly permutation
equivariant and the rotation head (which pools before its 3x3 output)
exactly permutation invariant. Neither is rotation equivariant; rotation
behaviour is supplied outside by symmetrisation.

Forwards accept either a ParamStore (plain arrays in, plain values out) or
the dict of tape leaves from ParamStore.tape(), in which case outputs are
differentiable nodes for loss building.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError
from .geometry import NBodyState, state
from .numcore import RngStream, Tensor, autodiff as ad
from .ortho import qr_orthogonalize_node, signed_qr_batch

_SIG_FLOOR = 1e-3
_F_DEGENERATE_SV = 1e-8


@dataclass(frozen=True)
class NetConfig:
    """Widths and structural switches shared by both nets."""

    hidden: int = 64
    depth: int = 2
    k_dist: int = 16  # distance kernels, about half the embedding width
    n_emb: int = 32
    t_emb: int = 64
    activation: str = "gelu"
    attention: bool = False

    def __post_init__(self):
        for name in ("hidden", "depth", "k_dist", "n_emb", "t_emb"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.t_emb % 2 != 0:
            raise ContractError("t_emb must be even")
        if self.activation not in ("gelu", "tanh"):
            raise ContractError(f"unknown activation {self.activation!r}")


class ParamStore:
    """Named float64 tensors with gradient slots and a bit-exact flat view."""

    def __init__(self, arrays: dict):
        self._arrays = {}
        for name, value in arrays.items():
            self._arrays[name] = np.array(value, dtype=np.float64, order="C")
        self.grads = {name: None for name in self._arrays}

    @property
    def names(self) -> list:
        return list(self._arrays)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def shapes(self) -> dict:
        return {name: a.shape for name, a in self._arrays.items()}

    def set(self, name: str, value) -> None:
        if name not in self._arrays:
            raise ContractError(f"unknown parameter {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._arrays[name].shape:
            raise ShapeError(f"shape {arr.shape} for {name} expected "
                             f"{self._arrays[name].shape}")
        self._arrays[name] = np.array(arr, order="C")

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def set_flat(self, vec) -> None:
        v = np.asarray(vec, dtype=np.float64)
        if v.shape != (self.n_params,):
            raise ShapeError(f"flat vector length {v.shape} expected "
                             f"({self.n_params},)")
        at = 0
        for name, a in self._arrays.items():
            self._arrays[name] = v[at:at + a.size].reshape(a.shape).copy()
            at += a.size

    def tape(self) -> dict:
        """Named leaves for one loss evaluation; gradients come from backward."""
        return {name: ad.leaf(a, name) for name, a in self._arrays.items()}

    def zero_grads(self) -> None:
        self.grads = {name: np.zeros_like(a)
                      for name, a in self._arrays.items()}

    def accumulate_grads(self, grad_map: dict) -> None:
        for name, g in grad_map.items():
            if name not in self._arrays:
                raise ContractError(f"gradient for unknown parameter {name!r}")
            if self.grads[name] is None:
                self.grads[name] = np.zeros_like(self._arrays[name])
            self.grads[name] += g

    def copy(self) -> "ParamStore":
        return ParamStore(self._arrays)


def _fan_in(stream: RngStream, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(shape[0])
    u = stream.uniforms(int(np.prod(shape)))
    return ((2.0 * u - 1.0) * bound).reshape(shape)


def init_params(cfg: NetConfig, n_features: int, stream: RngStream) -> ParamStore:
    """Fresh parameters for the denoiser and the rotation head.

    Final layers start at zero output: the denoiser output layer is zeroed,
    and the rotation head starts as the identity matrix via its bias (not via
    all-zero weights, which would park it on the degenerate-input fallback
    where the gradient vanishes).
    """
    arrays = {}

    def trunk(prefix: str, in_dim: int):
        arrays[f"{prefix}.emb.mu"] = np.linspace(0.0, 4.0, cfg.k_dist)
        arrays[f"{prefix}.emb.sig"] = np.full(cfg.k_dist, 1.0)
        arrays[f"{prefix}.emb.wd"] = _fan_in(stream, (cfg.k_dist, cfg.n_emb))
        arrays[f"{prefix}.in.w"] = _fan_in(stream, (in_dim, cfg.hidden))
        arrays[f"{prefix}.in.b"] = np.zeros(cfg.hidden)
        for layer in range(cfg.depth):
            blk = f"{prefix}.blk{layer}"
            arrays[f"{blk}.w"] = _fan_in(stream, (cfg.hidden, cfg.hidden))
            arrays[f"{blk}.b"] = np.zeros(cfg.hidden)
            arrays[f"{blk}.cw"] = _fan_in(stream, (cfg.hidden, cfg.hidden))
            arrays[f"{blk}.tw"] = _fan_in(stream, (cfg.t_emb, cfg.hidden))
        if cfg.attention:
            for mat in ("wq", "wk", "wv"):
                arrays[f"{prefix}.att.{mat}"] = _fan_in(
                    stream, (cfg.hidden, cfg.hidden))

    trunk("eps", 3 + n_features + cfg.n_emb)
    arrays["eps.out.w"] = np.zeros((cfg.hidden, 3 + n_features))
    arrays["eps.out.b"] = np.zeros(3 + n_features)

    trunk("f", 3 + n_features + 3 + cfg.n_emb)
    arrays["f.head.w1"] = _fan_in(stream, (cfg.hidden, cfg.hidden))
    arrays["f.head.b1"] = np.zeros(cfg.hidden)
    arrays["f.head.w2"] = np.zeros((cfg.hidden, 9))
    arrays["f.head.b2"] = np.eye(3).ravel()

    return ParamStore(arrays)


def time_embedding(t: float, width: int) -> np.ndarray:
    """Sinusoidal features of a normalised step t in [0, 1]."""
    half = width // 2
    # width 2 keeps the single base frequency instead of dividing by zero
    freqs = np.exp(np.arange(half) / max(half - 1, 1) * np.log(10_000.0))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _act(cfg: NetConfig):
    return ad.gelu if cfg.activation == "gelu" else ad.tanh


def _value(v) -> np.ndarray:
    if isinstance(v, ad.Node):
        return v.value.data
    if isinstance(v, Tensor):
        return v.data
    return np.asarray(v, dtype=np.float64)


def gaussian_embeddings(x, params, prefix: str = "eps.emb"):
    """Per-point distance features: negated Gaussian bumps on the pairwise
    distance matrix, mean-pooled over partners and mixed to n_emb channels.

    A function of distances only, hence exactly rotation invariant and
    permutation equivariant. Accepts a position node, in which case gradients
    flow through the distances back to the positions.
    """
    xv = _value(x)
    if xv.ndim != 2 or xv.shape[1] != 3:
        raise ShapeError(f"positions must be N x 3, got {xv.shape}")
    n = xv.shape[0]
    if isinstance(x, ad.Node):
        dist3 = ad.reshape(ad.pairwise_dist(x), (n, n, 1))
    else:
        diff = xv[:, None, :] - xv[None, :, :]
        dist3 = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))[:, :, None]
    mu = params[f"{prefix}.mu"]
    s = ad.abs_floor(params[f"{prefix}.sig"], _SIG_FLOOR)
    zarg = ad.div(ad.sub(dist3, mu), s)
    bump = ad.mul(ad.div(-1.0 / np.sqrt(2.0 * np.pi), s),
                  ad.exp(ad.mul(ad.mul(zarg, zarg), -0.5)))
    return ad.matmul(ad.mean(bump, axis=1), params[f"{prefix}.wd"])


def _trunk(params, prefix: str, feats, t: float, cfg: NetConfig):
    act = _act(cfg)
    u = act(ad.add(ad.matmul(feats, params[f"{prefix}.in.w"]),
                   params[f"{prefix}.in.b"]))
    tv = time_embedding(t, cfg.t_emb).reshape(1, cfg.t_emb)
    for layer in range(cfg.depth):
        blk = f"{prefix}.blk{layer}"
        ctx = ad.mean(u, axis=0, keepdims=True)
        pre = ad.add(ad.add(ad.matmul(u, params[f"{blk}.w"]),
                            params[f"{blk}.b"]),
                     ad.add(ad.matmul(ctx, params[f"{blk}.cw"]),
                            ad.matmul(tv, params[f"{blk}.tw"])))
        u = act(pre)
    if cfg.attention:
        q = ad.matmul(u, params[f"{prefix}.att.wq"])
        k = ad.matmul(u, params[f"{prefix}.att.wk"])
        v = ad.matmul(u, params[f"{prefix}.att.wv"])
        scores = ad.div(ad.matmul(q, ad.transpose(k)), np.sqrt(cfg.hidden))
        u = ad.add(u, ad.matmul(ad.softmax_rows(scores), v))
    return u


def _check_t(t: float):
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"normalised step {t} outside [0, 1]")


def _check_xh(x, h, what: str):
    xv, hv = _value(x), _value(h)
    if xv.ndim != 2 or xv.shape[1] != 3:
        raise ShapeError(f"{what} positions must be N x 3, got {xv.shape}")
    if hv.ndim != 2 or hv.shape[0] != xv.shape[0]:
        raise ShapeError(f"{what} features must be {xv.shape[0]} x d, "
                         f"got {hv.shape}")
    if np.abs(xv.mean(axis=0)).max() > 1e-9:
        raise ContractError(f"{what} positions are not centered")


def eps_core(params, x, h, t: float, cfg: NetConfig):
    """Denoiser trunk on raw (x, h) operands; returns (centered x output,
    feature output or None).

    x may be a node, so the caller can rotate the input by a learned matrix
    and differentiate through the rotation.
    """
    _check_t(t)
    _check_xh(x, h, "denoiser input")
    d = _value(h).shape[1]
    emb = gaussian_embeddings(x, params, prefix="eps.emb")
    feats = ad.concat([x, h, emb], axis=1)
    u = _trunk(params, "eps", feats, t, cfg)
    out = ad.add(ad.matmul(u, params["eps.out.w"]), params["eps.out.b"])
    xpart = ad.cols(out, 0, 3)
    xc = ad.sub(xpart, ad.mean(xpart, axis=0, keepdims=True))
    hpart = ad.cols(out, 3, 3 + d) if d > 0 else None
    return xc, hpart


def eps_forward(params, z: NBodyState, t: float, cfg: NetConfig) -> NBodyState:
    """Noise prediction for one state; output x block is centered."""
    xc, hpart = eps_core(params, z.x.data, z.h.data, t, cfg)
    harr = _value(hpart) if hpart is not None else np.zeros((z.n_points, 0))
    return state(_value(xc), harr)


def f_core(params, x, h, eta: np.ndarray, t: float, cfg: NetConfig):
    """Rotation-head trunk on raw (x, h) operands; returns the
    orthogonalised 3x3 output."""
    _check_t(t)
    _check_xh(x, h, "rotation-head input")
    n = _value(x).shape[0]
    eta_arr = _value(eta)
    if eta_arr.shape != (n, 3):
        raise ShapeError(f"eta must be {n} x 3, got {eta_arr.shape}")
    act = _act(cfg)
    emb = gaussian_embeddings(x, params, prefix="f.emb")
    feats = ad.concat([x, h, eta_arr, emb], axis=1)
    u = _trunk(params, "f", feats, t, cfg)
    m = ad.mean(u, axis=0, keepdims=True)
    hmid = act(ad.add(ad.matmul(m, params["f.head.w1"]), params["f.head.b1"]))
    v = ad.add(ad.matmul(hmid, params["f.head.w2"]), params["f.head.b2"])
    return qr_orthogonalize_node(ad.reshape(v, (3, 3)))


def f_forward(params, z: NBodyState, eta, t: float, cfg: NetConfig) -> Tensor:
    """Learned orthogonal 3x3 matrix; permutation invariant in (z, eta)."""
    out = f_core(params, z.x.data, z.h.data, eta, t, cfg)
    return out if isinstance(out, Tensor) else Tensor(out.value.data)


# ---------------------------------------------------------------------------
# batched plain-numpy forwards for the sampling loop; same math as the tape
# path, vectorised over a leading chain axis


def _act_np(cfg: NetConfig):
    if cfg.activation == "gelu":
        return lambda x: x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    return np.tanh


def _embeddings_batch(store: ParamStore, xs: np.ndarray, prefix: str
                      ) -> np.ndarray:
    diff = xs[:, :, None, :] - xs[:, None, :, :]
    dist = np.sqrt(np.einsum("bijk,bijk->bij", diff, diff))
    mu = store[f"{prefix}.mu"]
    s = np.maximum(np.abs(store[f"{prefix}.sig"]), _SIG_FLOOR)
    zarg = (dist[..., None] - mu) / s
    bump = (-1.0 / (np.sqrt(2.0 * np.pi) * s)) * np.exp(-0.5 * zarg * zarg)
    return bump.mean(axis=2) @ store[f"{prefix}.wd"]


def _trunk_batch(store: ParamStore, prefix: str, feats: np.ndarray, t: float,
                 cfg: NetConfig) -> np.ndarray:
    b, n, _ = feats.shape
    act = _act_np(cfg)
    u = act(feats.reshape(b * n, -1) @ store[f"{prefix}.in.w"]
            + store[f"{prefix}.in.b"])
    tv = time_embedding(t, cfg.t_emb).reshape(1, cfg.t_emb)
    for layer in range(cfg.depth):
        blk = f"{prefix}.blk{layer}"
        ctx = u.reshape(b, n, -1).mean(axis=1) @ store[f"{blk}.cw"]
        pre = (u @ store[f"{blk}.w"] + store[f"{blk}.b"]
               + np.repeat(ctx, n, axis=0) + tv @ store[f"{blk}.tw"])
        u = act(pre)
    if cfg.attention:
        h = cfg.hidden
        q = (u @ store[f"{prefix}.att.wq"]).reshape(b, n, h)
        k = (u @ store[f"{prefix}.att.wk"]).reshape(b, n, h)
        v = (u @ store[f"{prefix}.att.wv"]).reshape(b, n, h)
        scores = np.einsum("bik,bjk->bij", q, k) / np.sqrt(h)
        scores -= scores.max(axis=2, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(axis=2, keepdims=True)
        u = u + np.einsum("bij,bjk->bik", att, v).reshape(b * n, h)
    return u.reshape(b, n, -1)


def eps_forward_batch(store: ParamStore, xs: np.ndarray, hs: np.ndarray,
                      t: float, cfg: NetConfig):
    """Denoiser on (B, N, .) chain blocks; returns (x out centered, h out)."""
    _check_t(t)
    emb = _embeddings_batch(store, xs, "eps.emb")
    feats = np.concatenate([xs, hs, emb], axis=2)
    u = _trunk_batch(store, "eps", feats, t, cfg)
    b, n, _ = u.shape
    out = u.reshape(b * n, -1) @ store["eps.out.w"] + store["eps.out.b"]
    out = out.reshape(b, n, -1)
    x_out = out[:, :, :3]
    x_out = x_out - x_out.mean(axis=1, keepdims=True)
    return x_out, out[:, :, 3:]


def f_forward_batch(store: ParamStore, xs: np.ndarray, hs: np.ndarray,
                    etas: np.ndarray, t: float, cfg: NetConfig) -> np.ndarray:
    """Rotation head on (B, N, .) chain blocks; returns (B, 3, 3)."""
    _check_t(t)
    from . import ortho

    emb = _embeddings_batch(store, xs, "f.emb")
    feats = np.concatenate([xs, hs, etas, emb], axis=2)
    u = _trunk_batch(store, "f", feats, t, cfg)
    m = u.mean(axis=1)
    act = _act_np(cfg)
    hmid = act(m @ store["f.head.w1"] + store["f.head.b1"])
    mats = (hmid @ store["f.head.w2"] + store["f.head.b2"]).reshape(-1, 3, 3)
    sv = np.linalg.svd(mats, compute_uv=False)
    out = signed_qr_batch(mats)
    for i in np.nonzero(sv[:, -1] < _F_DEGENERATE_SV)[0]:
        ortho._flag_degenerate()
        out[i] = np.eye(3)
    return out
