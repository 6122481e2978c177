"""Discrete optimal transport between weighted point sets.

Two solvers share one result type:

* :func:`ot_exact` solves the transport linear program (assignment fast path
  for equal-size uniform measures, HiGHS otherwise).
* :func:`sinkhorn` solves the entropic problem
  ``min <P, C> + eps * KL(P || a b^T)`` in the log domain and returns dual
  potentials, which give gradients in the marginal weights.

Gradients in the support points use the envelope (Danskin) rule: the plan is
held fixed and only the cost is differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog

from .errors import CapacityError, ContractError, UnsupportedError

METRICS = ("sqeuclidean", "euclidean")
DEFAULT_MAX_CELLS = 4096


@dataclass
class DiscreteMeasure:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        self.weights = np.asarray(self.weights, dtype=np.float64)
        M = self.points.shape[0]
        if M < 1 or self.weights.shape != (M,):
            raise ContractError(
                f"measure needs M >= 1 points and M weights, got {self.points.shape} / {self.weights.shape}"
            )
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.weights))):
            raise ContractError("measure has non-finite entries")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ContractError("measure weights must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        points = np.asarray(points, dtype=np.float64)
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    def __len__(self):
        return self.points.shape[0]


@dataclass
class TransportPlan:
    """Coupling between two measures.

    ``value`` is the linear transport cost ``sum(P * C)``. For Sinkhorn
    plans ``reg_value`` is the entropic objective (``value`` plus
    ``eps * KL(P || a b^T)``); the point and weight gradients are exact for
    that quantity. Exact plans carry ``eps == 0`` and no duals.
    """

    coupling: np.ndarray
    value: float
    cost: np.ndarray
    eps: float = 0.0
    dual_u: np.ndarray | None = None
    dual_v: np.ndarray | None = None
    reg_value: float | None = None
    converged: bool = True
    n_iter: int = 0
    metric: str = "sqeuclidean"
    marginal_error: float = 0.0


def cost_matrix(a, b, metric="sqeuclidean"):
    """Pairwise ground cost between the supports of ``a`` and ``b``.

    Accepts measures or raw point arrays.
    """
    pa = a.points if isinstance(a, DiscreteMeasure) else np.atleast_2d(np.asarray(a, dtype=np.float64))
    pb = b.points if isinstance(b, DiscreteMeasure) else np.atleast_2d(np.asarray(b, dtype=np.float64))
    if pa.shape[1] != pb.shape[1]:
        raise ContractError(f"point dimension mismatch: {pa.shape[1]} vs {pb.shape[1]}")
    if metric not in METRICS:
        raise UnsupportedError(f"unknown metric {metric!r}")
    diff = pa[:, None, :] - pb[None, :, :]
    sq = np.einsum("mnd,mnd->mn", diff, diff)
    return sq if metric == "sqeuclidean" else np.sqrt(sq)


def _check_cost(a, b, C):
    C = np.asarray(C, dtype=np.float64)
    if C.shape != (len(a), len(b)):
        raise ContractError(f"cost shape {C.shape} does not match measures ({len(a)}, {len(b)})")
    if not np.all(np.isfinite(C)):
        raise ContractError("cost matrix has non-finite entries")
    return C


def ot_exact(a: DiscreteMeasure, b: DiscreteMeasure, C=None, max_cells=DEFAULT_MAX_CELLS,
             metric="sqeuclidean") -> TransportPlan:
    """Exact optimal transport by linear programming.

    Raises:
        CapacityError: if ``M * N`` exceeds ``max_cells``; use :func:`sinkhorn`.
    """
    if C is None:
        C = cost_matrix(a, b, metric)
    C = _check_cost(a, b, C)
    M, N = C.shape
    if M * N > max_cells:
        raise CapacityError(f"{M}x{N} transport exceeds the {max_cells}-cell cap; use sinkhorn")

    if M == N and np.allclose(a.weights, 1.0 / M, rtol=0, atol=1e-15) \
            and np.allclose(b.weights, 1.0 / N, rtol=0, atol=1e-15):
        rows, cols = linear_sum_assignment(C)
        P = np.zeros((M, N))
        P[rows, cols] = 1.0 / M
    else:
        # equality rows: M source constraints then N target constraints
        ii, jj = np.divmod(np.arange(M * N), N)
        A = sparse.vstack([
            sparse.csr_matrix((np.ones(M * N), (ii, np.arange(M * N))), shape=(M, M * N)),
            sparse.csr_matrix((np.ones(M * N), (jj, np.arange(M * N))), shape=(N, M * N)),
        ]).tocsr()
        rhs = np.concatenate([a.weights, b.weights])
        res = linprog(C.ravel(), A_eq=A, b_eq=rhs, bounds=(0, None), method="highs")
        if res.status != 0:
            raise ContractError(f"transport LP failed: {res.message}")
        P = np.maximum(res.x.reshape(M, N), 0.0)
    value = float(np.sum(P * C))
    err = _marginal_err(P, a.weights, b.weights)
    return TransportPlan(P, value, C, eps=0.0, metric=metric, marginal_error=float(err))


def _lse(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.log(np.sum(np.exp(x - m), axis=axis)) + np.squeeze(m, axis=axis)


def _marginal_err(P, wa, wb):
    return max(np.abs(P.sum(axis=1) - wa).sum(), np.abs(P.sum(axis=0) - wb).sum())


def sinkhorn(a: DiscreteMeasure, b: DiscreteMeasure, C=None, eps=None, max_iter=2000, tol=1e-6,
             metric="sqeuclidean", init_v=None, scaling="auto") -> TransportPlan:
    """Log-domain Sinkhorn iterations.

    Args:
        eps: regularization; defaults to ``0.05 * mean(C)``.
        tol: stop once the L1 row-marginal violation drops below this
            (column marginals are exact after every g-update).
        init_v: optional warm start for the target potential.
        scaling: ``"auto"`` anneals eps geometrically from ``max(C)`` when
            eps is small relative to the costs; ``True``/``False`` force it.

    The returned ``dual_v`` is centred to zero mean (``dual_u`` absorbs the
    shift), so ``dual_v`` is directly the simplex-tangent gradient of
    ``reg_value`` with respect to ``b.weights``.
    """
    if C is None:
        C = cost_matrix(a, b, metric)
    C = _check_cost(a, b, C)
    if eps is None:
        eps = 0.05 * float(C.mean())
        if eps <= 0:
            eps = 1e-12
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")

    with np.errstate(divide="ignore"):
        loga = np.log(a.weights)
        logb = np.log(b.weights)
    g = np.zeros(C.shape[1]) if init_v is None else np.array(init_v, dtype=np.float64)

    cmax = float(C.max())
    if scaling == "auto":
        scaling = eps < 0.01 * cmax
    schedule = []
    if scaling:
        e = cmax
        while e > eps:
            schedule.append(e)
            e *= 0.5
    schedule.append(eps)

    def f_of(g, e):
        return -e * _lse(logb[None, :] + (g[None, :] - C) / e, axis=1)

    def g_of(f, e):
        return -e * _lse(loga[:, None] + (f[:, None] - C) / e, axis=0)

    n_iter = 0
    converged = False
    for stage, e in enumerate(schedule):
        final = stage == len(schedule) - 1
        budget = max_iter - n_iter if final else min(100, max_iter - n_iter)
        for it in range(budget):
            f = f_of(g, e)
            g = g_of(f, e)
            n_iter += 1
            if it % 5 == 4 or it == budget - 1:
                logP = loga[:, None] + logb[None, :] + (f[:, None] + g[None, :] - C) / e
                err = np.abs(np.exp(_lse(logP, axis=1)) - a.weights).sum()
                if err < (tol if final else max(tol, 1e-3)):
                    converged = final
                    break
        if n_iter >= max_iter and not final:
            # out of budget mid-schedule: finish with one pass at the target eps
            f = f_of(g, eps)
            g = g_of(f, eps)
            break

    if not np.any(np.isfinite(g)):
        g = np.zeros_like(g)
    f = f_of(g, eps)
    g = g_of(f, eps)
    # zero-weight atoms carry -inf logs; their potentials are irrelevant
    g = np.where(np.isfinite(g), g, 0.0)
    f = np.where(np.isfinite(f), f, 0.0)
    logP = loga[:, None] + logb[None, :] + (f[:, None] + g[None, :] - C) / eps
    P = np.exp(logP)
    err = _marginal_err(P, a.weights, b.weights)
    converged = converged or err < tol
    shift = g.mean()
    u, v = f + shift, g - shift
    value = float(np.sum(P * C))
    reg_value = float(np.sum(P * (f[:, None] + g[None, :])))
    plan = TransportPlan(P, value, C, eps=float(eps), dual_u=u, dual_v=v, reg_value=reg_value,
                         converged=bool(converged), n_iter=n_iter, metric=metric,
                         marginal_error=float(err))
    return plan


def ot_grad_points(plan: TransportPlan, a: DiscreteMeasure, b: DiscreteMeasure, side="source"):
    """Gradient of ``sum_ij P_ij |x_i - y_j|^2`` in one support, plan fixed.

    ``side="source"`` differentiates in ``a.points`` (M x D),
    ``side="target"`` in ``b.points`` (N x D).
    """
    if plan.metric != "sqeuclidean":
        raise UnsupportedError("point gradients are only implemented for the squared Euclidean cost")
    P = plan.coupling
    if side == "source":
        return 2.0 * (P.sum(axis=1)[:, None] * a.points - P @ b.points)
    if side == "target":
        return 2.0 * (P.sum(axis=0)[:, None] * b.points - P.T @ a.points)
    raise ContractError(f"side must be 'source' or 'target', got {side!r}")


def ot_grad_weights(plan: TransportPlan):
    """Centred target potential: gradient of ``reg_value`` in ``b.weights``.

    Only defined up to an additive constant, hence the zero-mean convention.
    """
    if plan.dual_v is None:
        raise UnsupportedError("plan has no dual potentials; solve with sinkhorn")
    return plan.dual_v
