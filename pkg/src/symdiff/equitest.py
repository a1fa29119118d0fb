"""Statistical equivariance and invariance testing via energy distance.

Two distributions are compared with the energy distance

    E(A, B) = 2 E||a - b|| - E||a - a'|| - E||b - b'||

estimated in U-statistic form and assessed by a permutation test under pooled
relabelling. Energy distance needs no bandwidth choice and is zero iff the
distributions coincide.

Point clouds are compared after canonical flattening (row-major positions,
then features). The group element under test is applied explicitly to one
side, so both sides share one ordering convention and no permutation-invariant
metric is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .geometry import GroupElement, NBodyState, act
from .numcore.rng import RngStream


@dataclass
class TestReport:
    """Outcome of one two-sample comparison."""

    name: str
    statistic: float
    p_value: float
    reject: bool
    n: int
    alpha: float
    mean_a: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mean_b: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_text(self) -> str:
        lines = [
            f"name: {self.name}",
            f"statistic: {self.statistic:.6g}",
            f"p_value: {self.p_value:.6g}",
            f"reject: {str(self.reject).lower()}",
            f"n: {self.n}",
            f"alpha: {self.alpha:g}",
            "mean_a: " + " ".join(f"{v:.4g}" for v in self.mean_a),
            "mean_b: " + " ".join(f"{v:.4g}" for v in self.mean_b),
        ]
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "reject": self.reject,
            "n": self.n,
            "alpha": self.alpha,
            "mean_a": self.mean_a.tolist(),
            "mean_b": self.mean_b.tolist(),
        }


def flatten_states(states) -> np.ndarray:
    """Stack NBodyStates into an (n, dim) sample matrix."""
    return np.stack([s.flat() for s in states])


def _as_matrix(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def _pairwise_distances(p: np.ndarray) -> np.ndarray:
    """Full Euclidean distance matrix of pooled rows (GEMM form)."""
    sq = np.einsum("ij,ij->i", p, p)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (p @ p.T)
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2, out=d2)


def _energy_from_sums(s_aa, s_ab, s_bb, n, m):
    return (2.0 * s_ab / (n * m)
            - s_aa / (n * (n - 1))
            - s_bb / (m * (m - 1)))


def _sorted_pair_sum_coef(k: int) -> np.ndarray:
    # sum over ordered pairs of |z_i - z_j| = 2 * sum_j z_(j) * (2j - k + 1)
    return 2.0 * (2.0 * np.arange(k) - k + 1)


def energy_distance(a, b) -> float:
    """U-statistic energy distance between two sample sets."""
    av, bv = _as_matrix(a), _as_matrix(b)
    if av.shape[1] != bv.shape[1]:
        raise ContractError(
            f"sample dimensions differ: {av.shape[1]} vs {bv.shape[1]}")
    n, m = av.shape[0], bv.shape[0]
    if n < 2 or m < 2:
        raise ContractError("need at least 2 samples per side")
    if av.shape[1] == 1:
        za, zb = np.sort(av[:, 0]), np.sort(bv[:, 0])
        s_aa = za @ _sorted_pair_sum_coef(n)
        s_bb = zb @ _sorted_pair_sum_coef(m)
        pool = np.sort(np.concatenate([za, zb]))
        s_pp = pool @ _sorted_pair_sum_coef(n + m)
        s_ab = (s_pp - s_aa - s_bb) / 2.0
        return _energy_from_sums(s_aa, s_ab, s_bb, n, m)
    d = _pairwise_distances(np.concatenate([av, bv], axis=0))
    s_aa = d[:n, :n].sum()
    s_bb = d[n:, n:].sum()
    s_ab = d[:n, n:].sum()
    return _energy_from_sums(s_aa, s_ab, s_bb, n, m)


def _perm_stats_general(pool, n, n_perm, stream):
    m_pool = pool.shape[0]
    m = m_pool - n
    d = _pairwise_distances(pool)
    rowsum = d.sum(axis=1)
    total = rowsum.sum()
    cols = [np.zeros(m_pool)]
    cols[0][:n] = 1.0  # identity labelling gives the observed statistic
    for _ in range(n_perm):
        x = np.zeros(m_pool)
        x[stream.permutation(m_pool)[:n]] = 1.0
        cols.append(x)
    x_mat = np.stack(cols, axis=1)
    v = d @ x_mat
    s_aa = np.einsum("ij,ij->j", x_mat, v)
    r_a = rowsum @ x_mat
    s_ab = r_a - s_aa
    s_bb = total - 2.0 * r_a + s_aa
    stats = _energy_from_sums(s_aa, s_ab, s_bb, n, m)
    return stats[0], stats[1:]


def _perm_stats_1d(pool, n, n_perm, stream):
    m_pool = pool.shape[0]
    m = m_pool - n
    order = np.argsort(pool[:, 0])
    z = pool[order, 0]
    coef_a = _sorted_pair_sum_coef(n)
    coef_b = _sorted_pair_sum_coef(m)
    s_pp = z @ _sorted_pair_sum_coef(m_pool)

    def stat_for(mask_orig):
        mask = mask_orig[order]
        s_aa = z[mask] @ coef_a
        s_bb = z[~mask] @ coef_b
        s_ab = (s_pp - s_aa - s_bb) / 2.0
        return _energy_from_sums(s_aa, s_ab, s_bb, n, m)

    ident = np.zeros(m_pool, dtype=bool)
    ident[:n] = True
    obs = stat_for(ident)
    perm_stats = np.empty(n_perm)
    for i in range(n_perm):
        mask = np.zeros(m_pool, dtype=bool)
        mask[stream.permutation(m_pool)[:n]] = True
        perm_stats[i] = stat_for(mask)
    return obs, perm_stats


def perm_two_sample_test(a, b, n_perm: int, alpha: float,
                         stream: RngStream, name: str = "two-sample") -> TestReport:
    """Permutation test of equal distribution using the energy statistic."""
    if n_perm < 200:
        raise ContractError("need at least 200 permutations")
    av, bv = _as_matrix(a), _as_matrix(b)
    if av.shape[1] != bv.shape[1]:
        raise ContractError(
            f"sample dimensions differ: {av.shape[1]} vs {bv.shape[1]}")
    n = av.shape[0]
    pool = np.concatenate([av, bv], axis=0)
    if av.shape[1] == 1:
        obs, perm_stats = _perm_stats_1d(pool, n, n_perm, stream)
    else:
        obs, perm_stats = _perm_stats_general(pool, n, n_perm, stream)
    p = (1.0 + np.count_nonzero(perm_stats >= obs)) / (n_perm + 1.0)
    return TestReport(
        name=name,
        statistic=float(obs),
        p_value=float(p),
        reject=bool(p < alpha),
        n=n,
        alpha=alpha,
        mean_a=av.mean(axis=0),
        mean_b=bv.mean(axis=0),
    )


def _kernel_draws(kernel, x: NBodyState, n: int, stream: RngStream):
    batch = getattr(kernel, "sample_batch", None)
    if batch is not None:
        return batch(x, n, stream)
    return [kernel.sample(x, stream.split()) for _ in range(n)]


def test_stochastic_equivariance(kernel, x: NBodyState, g: GroupElement,
                                 n: int, alpha: float,
                                 stream: RngStream,
                                 n_perm: int = 200) -> TestReport:
    """Compare kernel(g . x) against g . kernel(x) as distributions."""
    if n < 1000:
        raise ContractError("need n >= 1000 per side")
    gx = act(g, x)
    side_a = flatten_states(_kernel_draws(kernel, gx, n, stream))
    side_b = flatten_states(
        [act(g, y) for y in _kernel_draws(kernel, x, n, stream)])
    return perm_two_sample_test(side_a, side_b, n_perm, alpha, stream,
                                name="stochastic-equivariance")


def test_distributional_invariance(sampler, g: GroupElement, n: int,
                                   alpha: float, stream: RngStream,
                                   n_perm: int = 200) -> TestReport:
    """Compare fresh draws against group-transformed fresh draws."""
    side_a = flatten_states([sampler() for _ in range(n)])
    side_b = flatten_states([act(g, sampler()) for _ in range(n)])
    return perm_two_sample_test(side_a, side_b, n_perm, alpha, stream,
                                name="distributional-invariance")


def invariance_battery(pool_a, pool_b, elements, alpha: float,
                       stream: RngStream, n_perm: int = 200) -> list[TestReport]:
    """One invariance test per group element, reusing two pre-drawn pools.

    pool_a and pool_b must be independent draws from the sampler under test;
    each element g is applied to pool_b only.
    """
    flat_a = flatten_states(pool_a)
    reports = []
    for i, g in enumerate(elements):
        flat_b = flatten_states([act(g, s) for s in pool_b])
        rep = perm_two_sample_test(flat_a, flat_b, n_perm, alpha, stream,
                                   name=f"invariance-{i}")
        reports.append(rep)
    return reports
