"""Evaluation metrics: accuracy, plug-in MI, index errors, symbol-space OT."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .channel import Constellation
from .errors import ContractError
from .transport import DiscreteMeasure, cost_matrix, ot_exact

GAUSS_TARGET_VAR = 0.5  # per-axis variance of the unit-power complex Gaussian


@dataclass
class MetricsRecord:
    K: int = 0
    D: int = 0
    Q: int = 0
    alpha: float = 0.0
    lam: float = 0.0
    snr_db: float = math.inf
    seed: int = 0
    epoch: int = -1
    task_loss: float = math.nan
    accuracy: float = math.nan
    ot_cost: float = math.nan
    perplexity: float = math.nan
    delta_mi_bits: float = math.nan
    index_error_rate: float = math.nan
    symbol_ws: float = math.nan
    distortion: float = math.nan
    wall_time_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def as_row(self):
        row = asdict(self)
        row.update(row.pop("extra"))
        return row


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ContractError("empty input")
    return float(np.mean(preds == labels))


def mi_plugin(a, b) -> float:
    """Plug-in mutual information (bits) from the empirical joint histogram."""
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    if a.size == 0:
        raise ContractError("empty input")
    if a.size != b.size:
        raise ContractError("sequences differ in length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= a.size
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    # fsum is exactly rounded, so swapping a and b cannot change the result
    mi = math.fsum(joint[nz] * np.log2(joint[nz] / (pa @ pb)[nz]))
    return float(max(mi, 0.0))


def delta_mi(pre_idx, post_idx, labels) -> float:
    """Mean over latent positions of I(post; Y) - I(pre; Y), in bits."""
    pre, post = np.asarray(pre_idx), np.asarray(post_idx)
    labels = np.asarray(labels).ravel()
    if pre.ndim == 1:
        pre, post = pre[:, None], post[:, None]
    if pre.shape != post.shape or pre.shape[0] != labels.size:
        raise ContractError("index streams and labels have inconsistent shapes")
    diffs = [mi_plugin(post[:, q], labels) - mi_plugin(pre[:, q], labels) for q in range(pre.shape[1])]
    return float(np.mean(diffs))


def index_error_rate(sent, received) -> float:
    sent, received = np.asarray(sent), np.asarray(received)
    if sent.shape != received.shape:
        raise ContractError(f"shape mismatch: {sent.shape} vs {received.shape}")
    if sent.size == 0:
        raise ContractError("empty input")
    return float(np.mean(sent != received))


def symbol_target_pmf(constellation: Constellation, target="gaussian"):
    """Uniform pmf, or the unit-power complex Gaussian restricted to the constellation."""
    if target == "uniform":
        return np.full(constellation.K, 1.0 / constellation.K)
    if target == "gaussian":
        w = np.exp(-np.abs(constellation.symbols) ** 2 / (2.0 * GAUSS_TARGET_VAR))
        return w / w.sum()
    raise ContractError(f"unknown target {target!r}")


def symbol_ws_diagnostic(pmf, constellation: Constellation, target="gaussian") -> float:
    """Exact OT between the activation-weighted and target-weighted constellations."""
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.shape != (constellation.K,) or np.any(pmf < 0) or abs(pmf.sum() - 1.0) > 1e-9:
        raise ContractError("activation pmf must be a valid pmf over the constellation")
    pts = np.column_stack([constellation.symbols.real, constellation.symbols.imag])
    src = DiscreteMeasure(pts, pmf / pmf.sum())
    dst = DiscreteMeasure(pts, symbol_target_pmf(constellation, target))
    C = cost_matrix(src, dst)
    return ot_exact(src, dst, C, max_cells=constellation.K ** 2).value
