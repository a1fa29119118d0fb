"""Toy dataset generation and bit-exact artifact files.

The synthetic dataset is the measurement bench for every statistical test:
each sample is a fixed rigid template pushed through a random permutation, a
random orthogonal matrix, Gaussian jitter, and mean centering, so the data
distribution is invariant under the joint group action by construction.

Three file formats, all little-endian, all round-tripping bit-exactly:

parameters ("SYMD")
    magic "SYMD" | version u32 | entry count u64 | entries
    entry: name length u64 | name utf-8 | rank u64 | dims u64 each | f64 payload
datasets ("SYMB")
    magic "SYMB" | version u32 | count u64 | N u64 | d u64 | samples
    sample: positions f64 N x 3 row-major | features f64 N x d row-major
run configs
    canonical JSON: sorted keys, no whitespace, one trailing newline

Payloads are row-major float64. Readers work off a byte cursor and report
the cursor position in every error, so a truncated or corrupted file names
the offset where parsing failed instead of crashing.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .geometry import NBodyState, act, proj_u, random_element, state
from .nets import ParamStore
from .numcore import RngStream

_MAGIC_PARAMS = b"SYMD"
_MAGIC_DATA = b"SYMB"
_FORMAT_VERSION = 1
_GEN_CHUNK = 256


@dataclass(frozen=True)
class ToyDatasetSpec:
    """Recipe for a synthetic invariant-by-construction dataset."""

    n_templates: int = 4
    n_points: int = 6
    d: int = 1
    jitter: float = 0.05
    count: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.n_templates < 1:
            raise ContractError("need at least one template")
        if self.n_points < 2:
            raise ContractError("need at least two points per body")
        if self.d < 0:
            raise ContractError("feature dimension must be nonnegative")
        if self.jitter < 0.0:
            raise ContractError("jitter must be nonnegative")
        if self.count < 1:
            raise ContractError("count must be positive")


def _workers() -> int:
    raw = os.environ.get("SYMDIFF_THREADS", "1")
    try:
        w = int(raw)
    except ValueError:
        raise ContractError(f"SYMDIFF_THREADS must be an integer, got {raw!r}")
    return max(w, 1)


def _toy_sample(child: RngStream, templates: list, jitter: float) -> NBodyState:
    # Child stream order: template index, group element, one jitter block.
    idx = int(child.integers(1, len(templates))[0])
    g = random_element(child, templates[idx].n_points)
    z = act(g, templates[idx])
    n, d = z.n_points, z.n_features
    blk = child.normals((n, 3 + d))
    return proj_u(state(z.x.data + jitter * blk[:, :3],
                        z.h.data + jitter * blk[:, 3:]))


def generate_toy_dataset(spec: ToyDatasetSpec) -> list:
    """Samples from a mixture of rigidly transformed, jittered templates.

    Templates are drawn once from the seed; every sample then picks a
    template and applies a random permutation, a Haar-orthogonal rotation,
    and N(0, jitter^2) noise on all coordinates before mean centering. Each
    sample consumes one child stream split from the root, so the result is
    reproducible bit for bit regardless of worker count.
    """
    root = RngStream(spec.seed)
    templates = []
    for _ in range(spec.n_templates):
        blk = root.normals((spec.n_points, 3 + spec.d))
        templates.append(proj_u(state(blk[:, :3], blk[:, 3:])))
    children = [root.split() for _ in range(spec.count)]

    out = [None] * spec.count
    def run(lo: int, hi: int):
        for i in range(lo, hi):
            out[i] = _toy_sample(children[i], templates, spec.jitter)

    bounds = [(lo, min(lo + _GEN_CHUNK, spec.count))
              for lo in range(0, spec.count, _GEN_CHUNK)]
    workers = _workers()
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda b: run(*b), bounds))
    else:
        for b in bounds:
            run(*b)
    return out


class _Cursor:
    """Byte reader that reports its offset in every failure."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.at = 0

    def take(self, n: int, what: str) -> bytes:
        if self.at + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.at)
        out = self.buf[self.at:self.at + n]
        self.at += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f64s(self, count: int, shape, what: str) -> np.ndarray:
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    def done(self):
        if self.at != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.at} trailing bytes "
                              "after final entry", self.at)


def _check_header(cur: _Cursor, magic: bytes, kind: str):
    got = cur.take(4, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r} for a {kind} file, "
                          f"expected {magic!r}", 0)
    version = cur.u32("format version")
    if version != _FORMAT_VERSION:
        raise FormatError(f"unsupported {kind} format version {version}, "
                          f"this build reads version {_FORMAT_VERSION}", 4)


def save_params(store: ParamStore, path) -> None:
    """Write named parameter tensors; see the module docstring for layout."""
    parts = [_MAGIC_PARAMS, struct.pack("<I", _FORMAT_VERSION),
             struct.pack("<Q", len(store.names))]
    for name in store.names:
        arr = store[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_params(path) -> ParamStore:
    with open(path, "rb") as f:
        cur = _Cursor(f.read())
    _check_header(cur, _MAGIC_PARAMS, "parameter")
    count = cur.u64("entry count")
    arrays = {}
    for k in range(count):
        what = f"entry {k}"
        name_at = cur.at
        name_len = cur.u64(f"{what} name length")
        try:
            name = cur.take(name_len, f"{what} name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what} name is not valid utf-8", name_at + 8)
        if name in arrays:
            raise FormatError(f"duplicate parameter name {name!r}", name_at)
        rank = cur.u64(f"{what} rank")
        if rank > 64:
            raise FormatError(f"{what} rank {rank} is implausible", cur.at - 8)
        dims = tuple(cur.u64(f"{what} dim {i}") for i in range(rank))
        size = 1
        for dim in dims:
            size *= dim
        arrays[name] = cur.f64s(size, dims, f"{what} payload")
    cur.done()
    return ParamStore(arrays)


def save_dataset(data: list, path) -> None:
    """Write N-body states with one shared (count, N, d) header."""
    if len(data) == 0:
        raise ContractError("refusing to write an empty dataset")
    n, d = data[0].n_points, data[0].n_features
    for z in data:
        if z.n_points != n or z.n_features != d:
            raise ContractError(f"mixed shapes in dataset: ({n}, {d}) vs "
                                f"({z.n_points}, {z.n_features})")
    parts = [_MAGIC_DATA, struct.pack("<I", _FORMAT_VERSION),
             struct.pack("<3Q", len(data), n, d)]
    for z in data:
        parts.append(z.x.data.astype("<f8").tobytes(order="C"))
        parts.append(z.h.data.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_dataset(path) -> list:
    with open(path, "rb") as f:
        cur = _Cursor(f.read())
    _check_header(cur, _MAGIC_DATA, "dataset")
    count = cur.u64("sample count")
    if count == 0:
        raise FormatError("dataset holds zero samples", cur.at - 8)
    n = cur.u64("points per body")
    d = cur.u64("feature dimension")
    if n < 1:
        raise FormatError("points per body must be positive", cur.at - 16)
    out = []
    for k in range(count):
        x = cur.f64s(n * 3, (n, 3), f"sample {k} positions")
        h = cur.f64s(n * d, (n, d), f"sample {k} features")
        out.append(state(x, h))
    cur.done()
    return out


def save_config(cfg: dict, path) -> None:
    """Canonical JSON: sorted keys, compact separators, one trailing newline."""
    if not isinstance(cfg, dict):
        raise ContractError("config must be a dict")
    try:
        text = json.dumps(cfg, sort_keys=True, separators=(",", ":"),
                          allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise ContractError(f"config is not JSON-serialisable: {exc}")
    with open(path, "wb") as f:
        f.write(text.encode("utf-8") + b"\n")


def load_config(path) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        cfg = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise FormatError("config is not valid utf-8", exc.start)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", exc.pos)
    if not isinstance(cfg, dict):
        raise FormatError("config root must be a JSON object", 0)
    return cfg
