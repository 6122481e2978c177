"""Learnable VQ codebook: nearest-neighbour quantization and usage statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

INIT_SCHEMES = ("uniform-box", "gaussian", "kmeans-on-sample")


@dataclass
class Codebook:
    """K codewords of dimension D plus softmax logits over them.

    ``logits`` has shape (K,) when shared across the Q latent components and
    (Q, K) when ``per_q`` is set.
    """

    codewords: np.ndarray
    logits: np.ndarray
    Q: int
    per_q: bool = False

    @property
    def K(self) -> int:
        return self.codewords.shape[0]

    @property
    def D(self) -> int:
        return self.codewords.shape[1]

    def weights(self) -> np.ndarray:
        """Codeword weights pi = softmax(logits), same shape as ``logits``."""
        return codeword_weights(self.logits)

    def copy(self) -> "Codebook":
        return Codebook(self.codewords.copy(), self.logits.copy(), self.Q, self.per_q)

    def validate(self) -> None:
        if self.K < 2 or self.D < 1 or self.Q < 1:
            raise ContractError(f"bad codebook dims K={self.K} D={self.D} Q={self.Q}")
        if not np.all(np.isfinite(self.codewords)):
            raise ContractError("codewords contain non-finite entries")
        want = (self.Q, self.K) if self.per_q else (self.K,)
        if self.logits.shape != want:
            raise ContractError(f"logits shape {self.logits.shape}, expected {want}")


def lloyd(points, init, iters=100, tol=0.0):
    """Plain Lloyd k-means from a given initialization.

    Empty cells keep their previous centre. Returns ``(centres, labels)``.
    """
    centres = np.array(init, dtype=np.float64, copy=True)
    points = np.asarray(points, dtype=np.float64)
    labels = None
    for _ in range(iters):
        d2 = _sq_dists(points, centres)
        new_labels = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        moved = 0.0
        for k in range(centres.shape[0]):
            members = points[labels == k]
            if len(members):
                c = members.mean(axis=0)
                moved = max(moved, float(np.max(np.abs(c - centres[k]))))
                centres[k] = c
        if moved <= tol:
            break
    labels = np.argmin(_sq_dists(points, centres), axis=1)
    return centres, labels


def new_codebook(K, D, Q, init="gaussian", seed=0, per_q=False, sample=None) -> Codebook:
    """Create a codebook with uniform activation logits.

    ``gaussian`` draws entries from N(0, 1/D) so each codeword has unit
    expected power. ``uniform-box`` draws from U[-1, 1]. ``kmeans-on-sample``
    needs ``sample`` (N x D, N >= K) and runs Lloyd from K sampled points.
    """
    if not (isinstance(K, (int, np.integer)) and K >= 2):
        raise ConfigError(f"K must be an integer >= 2, got {K!r}")
    if not (isinstance(D, (int, np.integer)) and D >= 1):
        raise ConfigError(f"D must be an integer >= 1, got {D!r}")
    if not (isinstance(Q, (int, np.integer)) and Q >= 1):
        raise ConfigError(f"Q must be an integer >= 1, got {Q!r}")
    rng = np.random.default_rng(seed)
    if init == "uniform-box":
        codewords = rng.uniform(-1.0, 1.0, size=(K, D))
    elif init == "gaussian":
        codewords = rng.standard_normal((K, D)) / np.sqrt(D)
    elif init == "kmeans-on-sample":
        if sample is None:
            raise ConfigError("kmeans-on-sample initialization needs a sample")
        sample = np.asarray(sample, dtype=np.float64).reshape(-1, D)
        if sample.shape[0] < K:
            raise ConfigError(f"need at least K={K} sample points, got {sample.shape[0]}")
        start = sample[rng.choice(sample.shape[0], size=K, replace=False)]
        codewords, _ = lloyd(sample, start, iters=50)
    else:
        raise ConfigError(f"unknown init scheme {init!r}; expected one of {INIT_SCHEMES}")
    logits = np.zeros((Q, K) if per_q else (K,))
    return Codebook(codewords.astype(np.float64), logits, int(Q), bool(per_q))


def _sq_dists(z, e):
    # direct differences rather than the expanded norm form; exact zeros matter
    # for the idempotence contract
    diff = z[:, None, :] - e[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def quantize(cb: Codebook, z):
    """Nearest-codeword quantization of a B x Q x D latent batch.

    Returns:
        indices: (B, Q) int array, ties resolved to the lowest index.
        z_c: (B, Q, D) selected codewords.
        distortion: mean squared Euclidean distance over all (b, q).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3 or z.shape[1] != cb.Q or z.shape[2] != cb.D:
        raise ContractError(f"latent batch shape {z.shape} does not match (B, {cb.Q}, {cb.D})")
    if not np.all(np.isfinite(z)):
        raise ContractError("latent batch contains non-finite entries")
    B = z.shape[0]
    flat = z.reshape(B * cb.Q, cb.D)
    d2 = _sq_dists(flat, cb.codewords)
    idx = np.argmin(d2, axis=1)  # first minimum == lowest index
    distortion = float(d2[np.arange(len(idx)), idx].mean()) if len(idx) else 0.0
    indices = idx.reshape(B, cb.Q)
    return indices, cb.codewords[indices], distortion


def activation_pmf(indices, K):
    """Empirical usage frequency of each of the K codewords."""
    idx = np.asarray(indices).ravel()
    if idx.size == 0:
        raise ContractError("no indices given")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("indices must be integers")
    if idx.min() < 0 or idx.max() >= K:
        raise ContractError(f"index out of range [0, {K})")
    return np.bincount(idx, minlength=K) / idx.size


def codeword_weights(beta):
    """Softmax over the last axis with max-subtraction."""
    beta = np.asarray(beta, dtype=np.float64)
    if not np.all(np.isfinite(beta)):
        raise ContractError("logits must be finite")
    shifted = beta - beta.max(axis=-1, keepdims=True)
    w = np.exp(shifted)
    return w / w.sum(axis=-1, keepdims=True)


def perplexity(pmf):
    """2 ** entropy(pmf) in bits; 1 for a one-hot pmf, K for uniform."""
    p = np.asarray(pmf, dtype=np.float64)
    if np.any(p < 0):
        raise ContractError("pmf has negative entries")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ContractError(f"pmf sums to {p.sum()}, not 1")
    nz = p[p > 0]
    return float(2.0 ** (-np.sum(nz * np.log2(nz))))
