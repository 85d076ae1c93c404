"""Entropy-regularized optimal transport between empirical count measures.

Both measures carry uniform weights 1/d over d samples. The solver alternates
row and column scalings of the Gibbs kernel exp(-beta * M), in the log domain
by default so large ``beta`` cannot underflow the kernel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import lstsq
from scipy.special import logsumexp, xlogy

logger = logging.getLogger(__name__)

DEFAULT_BETA = 10.0
DEFAULT_MAX_ITER = 500
DEFAULT_TOL = 1e-6


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniform-weight sample set of non-negative counts."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.size == 0:
            raise ValueError("an empirical measure needs at least one sample")
        if not np.all(np.isfinite(values)):
            raise ValueError("empirical measure values must be finite")
        if np.any(values < 0):
            raise ValueError("empirical measure values must be non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def weights(self) -> np.ndarray:
        return np.full(len(self), 1.0 / len(self))

    def subset(self, mask: np.ndarray) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.values[np.asarray(mask, dtype=bool)])


@dataclass(frozen=True)
class TransportPlan:
    matrix: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray

    def marginal_error(self) -> float:
        """Largest deviation of the plan's row/column sums from the marginals."""
        rows = np.abs(self.matrix.sum(axis=1) - self.row_marginal).max()
        cols = np.abs(self.matrix.sum(axis=0) - self.col_marginal).max()
        return float(max(rows, cols))


@dataclass(frozen=True)
class SinkhornResult:
    """Regularized plan plus its transport cost.

    ``loss`` is the plan cost <P, M>. ``objective`` adds the entropic term,
    <P, M> - E(P) / beta, the quantity the plan actually minimizes.
    """

    loss: float
    plan: TransportPlan
    iterations: int
    converged: bool
    beta: float
    entropy: float = 0.0
    cost: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)), repr=False)

    @property
    def objective(self) -> float:
        return self.loss - self.entropy / self.beta


def cost_matrix(a: EmpiricalMeasure, b: EmpiricalMeasure) -> np.ndarray:
    """Squared count differences, M[i, j] = (a_i - b_j) ** 2."""
    diff = a.values[:, None] - b.values[None, :]
    return diff * diff


def _sinkhorn_log(
    log_r: np.ndarray,
    log_c: np.ndarray,
    cost: np.ndarray,
    beta: float,
    max_iter: int,
    tol: float,
) -> tuple[np.ndarray, int, bool]:
    neg = -beta * cost
    f = np.zeros_like(log_r)
    g = np.zeros_like(log_c)
    r = np.exp(log_r)
    for it in range(1, max_iter + 1):
        f = log_r - logsumexp(neg + g[None, :], axis=1)
        g = log_c - logsumexp(neg + f[:, None], axis=0)
        log_plan = neg + f[:, None] + g[None, :]
        # columns are exact after the g update; rows carry the violation
        err = np.abs(np.exp(logsumexp(log_plan, axis=1)) - r).max()
        if err < tol:
            return np.exp(log_plan), it, True
    return np.exp(neg + f[:, None] + g[None, :]), max_iter, False


def _sinkhorn_direct(
    r: np.ndarray,
    c: np.ndarray,
    cost: np.ndarray,
    beta: float,
    max_iter: int,
    tol: float,
) -> tuple[np.ndarray, int, bool]:
    kernel = np.exp(-beta * cost)
    if not np.all(kernel.sum(axis=1) > 0) or not np.all(kernel.sum(axis=0) > 0):
        raise FloatingPointError("Gibbs kernel underflowed; use the log-domain solver")
    u = np.ones_like(r)
    v = np.ones_like(c)
    for it in range(1, max_iter + 1):
        u = r / (kernel @ v)
        v = c / (kernel.T @ u)
        plan = u[:, None] * kernel * v[None, :]
        err = np.abs(plan.sum(axis=1) - r).max()
        if err < tol:
            return plan, it, True
    return u[:, None] * kernel * v[None, :], max_iter, False


def sinkhorn(
    a: EmpiricalMeasure,
    b: EmpiricalMeasure,
    beta: float = DEFAULT_BETA,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    method: str = "log",
) -> SinkhornResult:
    """Entropy-regularized transport between two equal-size uniform measures.

    Args:
        a: Source measure (prior samples, rows of the plan).
        b: Target measure (predicted counts, columns of the plan).
        beta: Inverse regularization strength; larger is closer to exact OT.
        max_iter: Iteration cap; hitting it flags ``converged=False``.
        tol: Stop once the largest marginal violation drops below this.
        method: ``"log"`` (stable, default) or ``"direct"`` kernel scaling.
    """
    if len(a) != len(b):
        raise ValueError(f"measures must have equal size, got {len(a)} and {len(b)}")
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be at least 1, got {max_iter}")

    cost = cost_matrix(a, b)
    r = a.weights
    c = b.weights
    if method == "log":
        plan, iterations, converged = _sinkhorn_log(
            np.log(r), np.log(c), cost, beta, max_iter, tol
        )
    elif method == "direct":
        plan, iterations, converged = _sinkhorn_direct(r, c, cost, beta, max_iter, tol)
    else:
        raise ValueError(f"unknown sinkhorn method {method!r}")

    if not converged:
        logger.warning(
            "Sinkhorn did not converge in %d iterations (beta=%g, d=%d)",
            max_iter,
            beta,
            len(a),
        )

    entropy = float(-xlogy(plan, plan).sum())
    return SinkhornResult(
        loss=float(np.sum(plan * cost)),
        plan=TransportPlan(matrix=plan, row_marginal=r, col_marginal=c),
        iterations=iterations,
        converged=converged,
        beta=beta,
        entropy=entropy,
        cost=cost,
    )


def sinkhorn_grad(
    result: SinkhornResult, a: EmpiricalMeasure, b: EmpiricalMeasure, exact: bool = True
) -> np.ndarray:
    """Gradient of ``result.loss`` (<P, M>) with respect to ``b.values``.

    Two parts: the cost change under the fixed plan,
    sum_i P[i, j] * 2 * (b_j - a_i), and the plan's own response. The plan is
    P = exp(f_i + g_j - beta * M), so its response follows from differentiating
    the marginal constraints for the potentials f and g. That linear system is
    solved once in adjoint form against the row and column sums of P * M. Its
    matrix is singular along the (f + t, g - t) gauge, which changes no plan,
    hence the least-squares solve.

    With ``exact=False`` only the fixed-plan part is returned.
    """
    plan = result.plan.matrix
    if plan.shape != (len(a), len(b)):
        raise ValueError("result was not produced from these measures")
    cost = result.cost if result.cost.shape == plan.shape else cost_matrix(a, b)

    slope = 2.0 * (b.values[None, :] - a.values[:, None])  # dM[i, j] / db_j
    weighted = plan * slope
    fixed_plan = weighted.sum(axis=0)
    if not exact:
        return fixed_plan

    plan_cost = plan * cost
    system = np.block(
        [
            [np.diag(plan.sum(axis=1)), plan],
            [plan.T, np.diag(plan.sum(axis=0))],
        ]
    )
    rhs = np.concatenate([plan_cost.sum(axis=1), plan_cost.sum(axis=0)])
    adjoint = lstsq(system, rhs)[0]
    y_f, y_g = adjoint[: len(a)], adjoint[len(a) :]
    response = result.beta * (
        y_f @ weighted + y_g * fixed_plan - (cost * weighted).sum(axis=0)
    )
    return fixed_plan + response


def emd_1d_exact(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    """Exact squared-cost OT between equal-size uniform 1-D measures.

    For a convex cost on the line the monotone (sorted) pairing is optimal.
    """
    if len(a) != len(b):
        raise ValueError(f"measures must have equal size, got {len(a)} and {len(b)}")
    diff = np.sort(a.values) - np.sort(b.values)
    return float(np.mean(diff * diff))


@dataclass(frozen=True)
class SplitSinkhornResult:
    loss: float
    grad: np.ndarray
    results: Sequence[SinkhornResult]
    split: bool


def split_sinkhorn(
    a: EmpiricalMeasure,
    b: EmpiricalMeasure,
    a_groups: np.ndarray,
    b_groups: np.ndarray,
    beta: float = DEFAULT_BETA,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> SplitSinkhornResult:
    """Sum of per-group Sinkhorn losses for a sparse (0) / dense (1) split.

    Samples of ``b`` are only transported to samples of ``a`` carrying the
    same label. Falls back to a single plain Sinkhorn problem when a group is
    empty or the two sides disagree on a group's size.
    """
    a_groups = np.asarray(a_groups).astype(bool)
    b_groups = np.asarray(b_groups).astype(bool)
    if a_groups.shape != (len(a),) or b_groups.shape != (len(b),):
        raise ValueError("group labels must match the measure sizes")

    sizes = [
        (int(np.sum(~a_groups)), int(np.sum(~b_groups))),
        (int(np.sum(a_groups)), int(np.sum(b_groups))),
    ]
    degenerate = any(na == 0 or nb == 0 or na != nb for na, nb in sizes)
    if degenerate:
        logger.warning(
            "split Sinkhorn groups unusable (sizes %s); using plain Sinkhorn", sizes
        )
        result = sinkhorn(a, b, beta=beta, max_iter=max_iter, tol=tol)
        return SplitSinkhornResult(
            loss=result.loss, grad=sinkhorn_grad(result, a, b), results=(result,), split=False
        )

    grad = np.zeros(len(b))
    results = []
    loss = 0.0
    for label in (False, True):
        a_part = a.subset(a_groups == label)
        b_mask = b_groups == label
        b_part = b.subset(b_mask)
        result = sinkhorn(a_part, b_part, beta=beta, max_iter=max_iter, tol=tol)
        grad[b_mask] = sinkhorn_grad(result, a_part, b_part)
        loss += result.loss
        results.append(result)
    return SplitSinkhornResult(loss=loss, grad=grad, results=tuple(results), split=True)
