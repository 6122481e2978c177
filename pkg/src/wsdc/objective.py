"""Hybrid-target Wasserstein regularizer on the codeword distribution.

The regularizer transports a hybrid target

    P_H = alpha * (empirical latents) + (1 - alpha) * (isotropic Gaussian sample)

onto the codebook measure ``sum_k pi_k delta(e_k)`` with ``pi = softmax(beta)``
and returns the entropic OT value together with gradients for the codewords,
the logits and the latent atoms (which feed back into the encoder).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codebook import Codebook, codeword_weights
from .errors import ConfigError, ContractError
from .transport import DiscreteMeasure, TransportPlan, cost_matrix, ot_grad_points, ot_grad_weights, sinkhorn


@dataclass
class HybridTarget:
    alpha: float
    gaussian_std: float
    n_batch: int
    n_gauss: int
    measure: DiscreteMeasure

    @property
    def latent_points(self):
        return self.measure.points[: self.n_batch]


@dataclass
class WsConfig:
    lam: float = 1.0
    eps: float | None = None  # None: 0.05 * mean cost, per solve
    metric: str = "sqeuclidean"
    per_q: bool = False
    max_iter: int = 2000
    tol: float = 1e-6

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.eps is not None and not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")


@dataclass
class WsResult:
    value: float
    transport_cost: float
    grad_codewords: np.ndarray
    grad_logits: np.ndarray
    grad_latents: list
    plans: list = field(repr=False, default_factory=list)
    converged: bool = True


def build_hybrid_target(z, alpha, gaussian_std=1.0, n_gauss=None, seed=0) -> HybridTarget:
    """Mix the latent atoms (total mass alpha) with Gaussian atoms (mass 1 - alpha).

    ``z`` is an N x D array of latent slices. ``n_gauss`` defaults to N.
    ``seed`` may also be a ``numpy.random.Generator``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ContractError(f"latent slice must be N x D, got shape {z.shape}")
    n, d = z.shape
    G = n if n_gauss is None else int(n_gauss)
    if alpha < 1.0 and G < 1:
        raise ConfigError("need at least one Gaussian atom when alpha < 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    parts, weights = [], []
    n_batch = n if alpha > 0 else 0
    n_g = G if alpha < 1 else 0
    if n_batch:
        parts.append(z)
        weights.append(np.full(n, alpha / n))
    if n_g:
        parts.append(gaussian_std * rng.standard_normal((G, d)))
        weights.append(np.full(G, (1.0 - alpha) / G))
    w = np.concatenate(weights)
    w = w / w.sum()  # guard the last ulp so the measure validates
    return HybridTarget(float(alpha), float(gaussian_std), n_batch, n_g,
                        DiscreteMeasure(np.concatenate(parts), w))


def softmax_vjp(pi, upstream):
    """Vector-Jacobian product of softmax: pi * (u - <pi, u>) along the last axis."""
    return pi * (upstream - np.sum(pi * upstream, axis=-1, keepdims=True))


def ws_regularizer(targets, cb: Codebook, cfg: WsConfig | None = None, warm=None) -> WsResult:
    """Average entropic OT cost between each target and the codebook measure.

    ``targets`` holds one :class:`HybridTarget` (pooled over all latent
    components) or Q of them when the codebook has per-component logits.
    ``warm`` optionally maps target position to a codeword-side potential
    used to warm-start Sinkhorn.
    """
    cfg = cfg or WsConfig()
    targets = list(targets)
    if cb.per_q:
        if len(targets) != cb.Q:
            raise ContractError(f"per-component logits need {cb.Q} targets, got {len(targets)}")
        pis = codeword_weights(cb.logits)
    else:
        if len(targets) != 1:
            raise ContractError(f"shared logits need exactly one pooled target, got {len(targets)}")
        pis = codeword_weights(cb.logits)[None, :]

    n_t = len(targets)
    value = cost = 0.0
    g_code = np.zeros_like(cb.codewords)
    g_logit = np.zeros((n_t, cb.K))
    g_lat, plans = [], []
    converged = True
    for t, target in enumerate(targets):
        if target.measure.points.shape[1] != cb.D:
            raise ContractError("target dimension does not match the codebook")
        cw = DiscreteMeasure(cb.codewords, pis[t])
        C = cost_matrix(target.measure, cw, cfg.metric)
        init = None if warm is None else warm.get(t)
        plan = sinkhorn(target.measure, cw, C, eps=cfg.eps, max_iter=cfg.max_iter, tol=cfg.tol,
                        metric=cfg.metric, init_v=init)
        plans.append(plan)
        converged &= plan.converged
        value += plan.reg_value
        cost += plan.value
        g_code += ot_grad_points(plan, target.measure, cw, side="target")
        g_lat.append(ot_grad_points(plan, target.measure, cw, side="source")[: target.n_batch] / n_t)
        g_logit[t] = softmax_vjp(pis[t], ot_grad_weights(plan))

    g_logit /= n_t
    return WsResult(
        value=value / n_t,
        transport_cost=cost / n_t,
        grad_codewords=g_code / n_t,
        grad_logits=g_logit if cb.per_q else g_logit[0],
        grad_latents=g_lat,
        plans=plans,
        converged=bool(converged),
    )


def frozen_ws_value(plans, targets, cb: Codebook):
    """Surrogate of the regularizer with every transport plan held fixed.

    Linear in the dual potentials for the weights, quadratic in the support
    points. Its exact gradient equals the one assembled by
    :func:`ws_regularizer` at the point where the plans were solved, which is
    what makes a finite-difference check of the training gradients possible.
    """
    pis = codeword_weights(cb.logits)
    if not cb.per_q:
        pis = pis[None, :]
    total = 0.0
    for t, (plan, target) in enumerate(zip(plans, targets)):
        C = cost_matrix(target.measure.points, cb.codewords, plan.metric)
        total += float(np.sum(plan.coupling * C)) + float(plan.dual_v @ pis[t])
    return total / len(plans)


def composite_loss(task_value, task_grads, ws_value, ws_grads, lam):
    """Total loss ``task + lam * ws`` with gradient dictionaries summed blockwise."""
    if not (np.isfinite(task_value) and np.isfinite(ws_value)):
        raise ContractError("non-finite loss component")
    total = task_value + lam * ws_value
    grads = {k: np.array(v, copy=True) for k, v in task_grads.items()}
    if lam:
        for k, v in ws_grads.items():
            grads[k] = grads[k] + lam * v if k in grads else lam * np.asarray(v)
    return total, grads


def ws_cluster(z, init, iters=40, eps_start=0.1, eps_end=3e-3, logits=None):
    """Fit codewords to a fixed latent batch by minimizing the regularizer alone.

    The target is the batch itself (alpha = 1). Each iteration takes a
    gradient step preconditioned by ``1 / (2 pi_k)``, which moves every
    codeword to the barycentre of the mass its plan assigns to it. The
    entropic scale is annealed geometrically from ``eps_start`` to ``eps_end``
    (as fractions of the mean cost). Logits stay fixed; zeros mean uniform pi.
    """
    z = np.asarray(z, dtype=np.float64)
    cw = np.array(init, dtype=np.float64)
    beta = np.zeros(len(cw)) if logits is None else np.asarray(logits, dtype=np.float64)
    cb = Codebook(cw, beta, Q=1)
    pi = codeword_weights(beta)
    target = [build_hybrid_target(z, 1.0)]
    warm = None
    for frac in np.geomspace(eps_start, eps_end, iters):
        eps = frac * float(np.mean(cost_matrix(z, cb.codewords)))
        res = ws_regularizer(target, cb, WsConfig(eps=eps), warm=warm)
        warm = {0: res.plans[0].dual_v}
        cb.codewords -= res.grad_codewords / (2.0 * pi[:, None])
    return cb.codewords
