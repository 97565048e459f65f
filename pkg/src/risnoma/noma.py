"""User clustering, zero-forcing precoding and NOMA/OMA rate evaluation.

The rate kernels (`noma_sinr`, `oma_sinr`) are written against the tape's
dispatching primitives, so they accept either plain arrays or tape values
and carry an optional leading batch axis.  Power vectors are ordered by
cluster: (p_1s, p_1w, p_2s, p_2w, ...).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .channel import ChannelSet, Scenario, combined_rows
from .errors import OddUserCount, TooLarge

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class Clustering:
    pairs: tuple  # ((strong, weak), ...)

    @property
    def strong(self) -> np.ndarray:
        return np.array([s for s, _ in self.pairs], dtype=int)

    @property
    def weak(self) -> np.ndarray:
        return np.array([w for _, w in self.pairs], dtype=int)

    @property
    def order(self) -> np.ndarray:
        """User indices in power-vector order (s1, w1, s2, w2, ...)."""
        return np.array([u for pair in self.pairs for u in pair], dtype=int)

    def min_deviation(self, qos) -> float:
        qos = np.asarray(qos, dtype=float)
        return float(min(qos[s] - qos[w] for s, w in self.pairs))


@dataclass
class Precoder:
    W: object  # (..., M, K/2) complex, unit-norm columns
    rho: object  # (..., K/2)


@dataclass
class RateReport:
    sinr: np.ndarray  # per user, user-index order
    rate: np.ndarray  # bit/s
    sum_rate: float
    qos_violation: np.ndarray  # bit/s

    @classmethod
    def build(cls, sinr, bandwidth, qos) -> RateReport:
        sinr = np.asarray(sinr, dtype=float)
        rate = np.asarray(bandwidth, dtype=float) * np.log2(1.0 + sinr)
        return cls(sinr, rate, float(rate.sum()), np.maximum(np.asarray(qos) - rate, 0.0))


def _fold(ranked, K):
    half = K // 2
    return Clustering(tuple((int(ranked[k]), int(ranked[k + half])) for k in range(half)))


def _descending(values):
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or len(values) % 2:
        raise OddUserCount(f"need an even number of users, got {values.shape}")
    # stable sort on -value: ties keep ascending user index
    return np.argsort(-values, kind="stable")


def cluster_by_qos(qos) -> Clustering:
    """Sort users by descending QoS, pair rank k with rank k + K/2."""
    ranked = _descending(qos)
    return _fold(ranked, len(ranked))


def cluster_by_channel(gains) -> Clustering:
    """Same folding rule on the direct-link gains ||h_B,k||^2."""
    ranked = _descending(gains)
    return _fold(ranked, len(ranked))


def direct_gains(channels: ChannelSet) -> np.ndarray:
    return np.sum(np.abs(channels.h_direct) ** 2, axis=-1)


def _perfect_matchings(users):
    if not users:
        yield ()
        return
    first, rest = users[0], users[1:]
    for i, partner in enumerate(rest):
        for tail in _perfect_matchings(rest[:i] + rest[i + 1:]):
            yield ((first, partner),) + tail


def oracle_best_clustering(qos) -> tuple[Clustering, float]:
    """Exhaustive max-min QoS-deviation clustering (K <= 10)."""
    qos = np.asarray(qos, dtype=float)
    K = len(qos)
    if K % 2:
        raise OddUserCount(f"need an even number of users, got {K}")
    if K > 10:
        raise TooLarge(f"exhaustive clustering limited to K <= 10, got {K}")
    best, best_dev = None, -np.inf
    for matching in _perfect_matchings(list(range(K))):
        pairs = tuple((a, b) if (qos[a], -a) >= (qos[b], -b) else (b, a) for a, b in matching)
        dev = min(qos[s] - qos[w] for s, w in pairs)
        if dev > best_dev:
            best, best_dev = Clustering(pairs), dev
    return best, float(best_dev)


def count_matchings(K: int) -> int:
    return int(np.prod(np.arange(K - 1, 0, -2))) if K else 1


# ---------------------------------------------------------------------------
# precoding and SINR kernels

def _take_users(x, idx):
    """x[..., idx, :] with idx (K',) or batched (B, K')."""
    idx = np.asarray(idx)
    if idx.ndim == 1:
        return x[idx]
    return x[np.arange(idx.shape[0])[:, None], idx]


def _append_axis(x):
    return tp.reshape(x, tuple(tp.shape_of(x)) + (1,))


def zf_from_rows(strong_rows) -> Precoder:
    """Zero-forcing precoder from strong-user rows h_s^H, shape (..., L, M)."""
    S = tp.ComplexVar.of(strong_rows)
    L = S.shape[-2]
    gram = S @ S.H
    inv = tp.solve_on_tape(gram, np.broadcast_to(np.eye(L), gram.shape).astype(complex))
    V = S.H @ inv
    rho = V.abs2().sum(axis=-2)
    scale = 1.0 / tp.sqrt(rho)
    scale = tp.reshape(scale, tuple(tp.shape_of(scale))[:-1] + (1, L))
    return Precoder(V * scale, rho)


def zf_precoder(strong_channels) -> Precoder:
    """ZF precoder for strong-user channel vectors h_{l,s}, shape (..., L, M).

    Columns w_l satisfy h_{j,s}^H w_l = 0 for j != l and
    h_{l,s}^H w_l = 1/sqrt(rho_l).  Plain-array input gives plain output.
    """
    if isinstance(strong_channels, tp.ComplexVar):
        return zf_from_rows(strong_channels.conj())
    pre = zf_from_rows(np.conj(np.asarray(strong_channels, dtype=complex)))
    return Precoder(pre.W.value, np.asarray(pre.rho))


def sinr_strong(p_ls, rho_l, sigma2):
    """p / (rho * sigma^2): interference-free after ZF and SIC."""
    return p_ls / (rho_l * sigma2)


def sinr_weak(h_lw, W, P, sigma2, l):
    """Weak-user SINR of cluster l for a single (unbatched) instance.

    Inter-cluster interference is averaged over independent unit-power
    symbols of the other clusters.
    """
    h_lw = np.asarray(h_lw, dtype=complex)
    W = np.asarray(W, dtype=complex)
    P = np.asarray(P, dtype=float)
    gains = np.abs(h_lw.conj() @ W) ** 2
    ps, pw = P[0::2], P[1::2]
    inter = sum(gains[j] * (ps[j] + pw[j]) for j in range(W.shape[1]) if j != l)
    return gains[l] * pw[l] / (gains[l] * ps[l] + inter + sigma2)


def noma_sinr(rows, order, P, sigma2):
    """Cluster-ordered SINRs (gamma_1s, gamma_1w, ...) plus the precoder.

    rows: combined rows h_k^H, (..., K, M) ComplexVar or complex array.
    order: (K,) or (B, K) users in power-vector order.
    P: (..., K) powers in the same order.  sigma2: scalar or (B,).
    """
    rows = tp.ComplexVar.of(rows)
    order = np.asarray(order)
    strong, weak = order[..., 0::2], order[..., 1::2]
    pre = zf_from_rows(_take_users(rows, strong))
    ps, pw = P[..., 0::2], P[..., 1::2]
    sig = np.asarray(sigma2, dtype=float)
    sig_col = sig[..., None] if sig.ndim else sig

    gamma_s = ps / (pre.rho * sig_col)

    A = (_take_users(rows, weak) @ pre.W).abs2()  # |h_{l,w}^H w_j|^2
    L = tp.shape_of(A)[-1]
    eye = np.eye(L)
    own = tp.vsum(A * eye, axis=-1)
    inter = tp.vsum((A * (1.0 - eye)) @ _append_axis(ps + pw), axis=-1)
    gamma_w = own * pw / (own * ps + inter + sig_col)
    gamma = tp.stack([gamma_s, gamma_w], axis=-1)
    K = 2 * L
    gamma = tp.reshape(gamma, tuple(tp.shape_of(gamma))[:-2] + (K,))
    return gamma, pre


def oma_sinr(rows, P, sigma2_full):
    """Per-user SINR with MRT beams on K equal sub-bands (user order)."""
    rows = tp.ComplexVar.of(rows)
    K = rows.shape[-2]
    sig = np.asarray(sigma2_full, dtype=float) / K
    sig_col = sig[..., None] if sig.ndim else sig
    gain = rows.abs2().sum(axis=-1)
    return P * gain / sig_col


def rates_mbps(sinr, bandwidth):
    """bandwidth * log2(1 + sinr) in Mbit/s (tape-aware)."""
    return (bandwidth / 1e6 / LN2) * tp.log(1.0 + sinr)


def _to_user_order(values, order):
    values = np.asarray(values)
    out = np.empty_like(values)
    np.put_along_axis(out, np.asarray(order), values, axis=-1)
    return out


def sum_rate(channels: ChannelSet, theta, clustering: Clustering, P, scenario: Scenario) -> RateReport:
    """NOMA rates for one scenario; every cluster uses the full bandwidth."""
    rows = combined_rows(channels, np.asarray(theta, dtype=float))
    gamma, _ = noma_sinr(rows, clustering.order, np.asarray(P, dtype=float), scenario.noise_power)
    sinr = _to_user_order(gamma, clustering.order)
    return RateReport.build(sinr, scenario.config.bandwidth, scenario.qos)


def oma_sum_rate(channels: ChannelSet, theta, P, scenario: Scenario) -> RateReport:
    """FDMA baseline: user k gets B/K Hz, power P[k] and an MRT beam."""
    rows = combined_rows(channels, np.asarray(theta, dtype=float))
    K = scenario.num_users
    sinr = oma_sinr(rows, np.asarray(P, dtype=float), scenario.noise_power)
    return RateReport.build(sinr, scenario.config.bandwidth / K, scenario.qos)


__all__ = [
    "Clustering", "Precoder", "RateReport", "cluster_by_qos", "cluster_by_channel",
    "oracle_best_clustering", "direct_gains", "zf_precoder", "zf_from_rows", "sinr_strong",
    "sinr_weak", "noma_sinr", "oma_sinr", "rates_mbps", "sum_rate", "oma_sum_rate",
    "count_matchings",
]
