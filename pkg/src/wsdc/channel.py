"""Gray-coded square QAM, AWGN channel, and closed-form capacity/entropy.

Index layout: for K = L*L, the high log2(L) bits of an index select the
in-phase level and the low bits the quadrature level. On each axis the L
levels, ordered from most negative to most positive, carry the
binary-reflected Gray codes 0, 1, 3, 2, 6, ... so lattice neighbours differ
in exactly one index bit. Constellations are scaled to unit average energy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from .errors import ConfigError, ContractError

SUPPORTED_ORDERS = (4, 16, 64, 256)


def _gray(n):
    return n ^ (n >> 1)


@dataclass(frozen=True)
class Constellation:
    K: int
    symbols: np.ndarray = field(repr=False)
    levels: np.ndarray = field(repr=False)  # per-axis amplitudes, ascending
    gray: np.ndarray = field(repr=False)  # Gray code of each level position

    @property
    def side(self) -> int:
        return int(round(math.isqrt(self.K)))

    @property
    def bits_per_axis(self) -> int:
        return self.side.bit_length() - 1


def build_constellation(K: int) -> Constellation:
    if K not in SUPPORTED_ORDERS:
        raise ConfigError(f"unsupported QAM order {K}; expected one of {SUPPORTED_ORDERS}")
    L = math.isqrt(K)
    h = L.bit_length() - 1
    scale = 1.0 / math.sqrt(2.0 * (K - 1) / 3.0)
    pos = np.arange(L)
    levels = (2 * pos - (L - 1)) * scale
    gray = _gray(pos)
    symbols = np.empty(K, dtype=np.complex128)
    for pi in range(L):
        for pq in range(L):
            symbols[(gray[pi] << h) | gray[pq]] = levels[pi] + 1j * levels[pq]
    return Constellation(K, symbols, levels, gray)


@dataclass(frozen=True)
class ChannelConfig:
    """AWGN link at a given Es/N0. ``snr_db = inf`` means a noiseless link."""

    snr_db: float
    seed: int = 0
    power: float = 1.0

    @property
    def noise_var(self) -> float:
        if math.isinf(self.snr_db) and self.snr_db > 0:
            return 0.0
        return self.power / 10.0 ** (self.snr_db / 10.0)


def modulate(indices, c: Constellation):
    idx = np.asarray(indices)
    if idx.size and (not np.issubdtype(idx.dtype, np.integer) or idx.min() < 0 or idx.max() >= c.K):
        raise ContractError(f"indices must be integers in [0, {c.K})")
    return c.symbols[idx]


def awgn(s, cfg: ChannelConfig, rng=None):
    """Add circularly-symmetric complex Gaussian noise of total variance sigma^2.

    The generator defaults to ``default_rng(cfg.seed)``; pass ``rng`` to draw
    from a caller-owned stream.
    """
    s = np.asarray(s, dtype=np.complex128)
    var = cfg.noise_var
    if var == 0.0:
        return s.copy()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    std = math.sqrt(var / 2.0)
    noise = rng.standard_normal(s.shape + (2,))
    return s + std * (noise[..., 0] + 1j * noise[..., 1])


def _slice_axis(x, c: Constellation):
    """Nearest level position on one axis; exact midpoints go to the lower Gray code."""
    L = c.side
    scale = c.levels[1] - c.levels[0]
    t = (x - c.levels[0]) / scale
    lo = np.clip(np.floor(t), 0, L - 1).astype(np.int64)
    hi = np.minimum(lo + 1, L - 1)
    dlo = np.abs(x - c.levels[lo])
    dhi = np.abs(x - c.levels[hi])
    pick = np.where(dhi < dlo, hi, lo)
    tie = (dhi == dlo) & (hi != lo)
    pick = np.where(tie & (c.gray[hi] < c.gray[lo]), hi, pick)
    return c.gray[pick]


def demodulate(r, c: Constellation):
    """Minimum-distance detection, ties resolved to the lowest index.

    The square lattice makes the decision separable per axis; because the
    in-phase code sits in the high bits, taking the lower code on each axis
    gives the lowest index among tied points.
    """
    r = np.asarray(r, dtype=np.complex128)
    h = c.bits_per_axis
    return (_slice_axis(r.real, c) << h) | _slice_axis(r.imag, c)


def qfunc(x):
    return 0.5 * erfc(np.asarray(x, dtype=np.float64) / math.sqrt(2.0))


def ser_theoretical(K: int, snr_db: float) -> float:
    """Exact symbol error probability of minimum-distance square K-QAM in AWGN."""
    if K not in SUPPORTED_ORDERS:
        raise ConfigError(f"unsupported QAM order {K}")
    if math.isinf(snr_db):
        return 0.0 if snr_db > 0 else 1.0 - 1.0 / K
    gamma = 10.0 ** (snr_db / 10.0)
    p = 2.0 * (1.0 - 1.0 / math.sqrt(K)) * float(qfunc(math.sqrt(3.0 * gamma / (K - 1))))
    return 1.0 - (1.0 - p) ** 2


def discrete_entropy(pmf) -> float:
    """Shannon entropy in bits, with 0 log 0 = 0."""
    p = np.asarray(pmf, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ContractError("expected a nonnegative pmf summing to 1")
    nz = p[p > 0]
    return float(max(0.0, -np.sum(nz * np.log2(nz))))


def _check_var(sigma2):
    if not sigma2 > 0:
        raise ContractError(f"noise variance must be positive, got {sigma2}")


def gaussian_cond_entropy(sigma2: float) -> float:
    """Differential entropy (bits) of real Gaussian noise with variance sigma2."""
    _check_var(sigma2)
    return 0.5 * math.log2(2.0 * math.pi * math.e * sigma2)


def gaussian_output_entropy(power: float, sigma2: float) -> float:
    """Output entropy for a Gaussian input of the given power plus noise."""
    _check_var(sigma2)
    if power < 0:
        raise ContractError(f"power must be nonnegative, got {power}")
    return gaussian_cond_entropy(power + sigma2)


def capacity_awgn(power: float, sigma2: float) -> float:
    """0.5 * log2(1 + P/sigma2) bits per real channel use."""
    _check_var(sigma2)
    if power < 0:
        raise ContractError(f"power must be nonnegative, got {power}")
    return 0.5 * math.log2(1.0 + power / sigma2)
