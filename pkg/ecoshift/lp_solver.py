"""
Linear programming backends for ecoshift.

Both backends solve ``min c.x  s.t.  A_ub x <= b_ub, A_eq x == b_eq,
lb <= x <= ub`` and fill the same ``LpResult`` contract:

* ``highs``   - the HiGHS dual simplex shipped with scipy (default)
* ``simplex`` - an in-house bounded-variable primal simplex with a two-pass
  (Harris) ratio test, Dantzig pricing and a Bland fallback on stalling.
  Dense and meant for small relaxations and cross-checks.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import linprog

logger = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-9
OPTIMALITY_TOL = 1e-9
PIVOT_TOL = 1e-11
HARRIS_TOL = 1e-10
DEGENERATE_LIMIT = 50


class LpStallError(RuntimeError):
    """Exception for an LP backend that made no progress.

    Carries the iteration count, the phase and the objective reached so the
    caller can log a diagnostic.
    """

    def __init__(self, message: str, iterations: int = 0, phase: int = 0, objective: float = float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.phase = phase
        self.objective = objective


class LpStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


@dataclass(frozen=True, eq=False)
class LinearProgram:
    """Continuous relaxation in inequality/equality form with box bounds."""

    c: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.c).size
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        for name in ("A_ub", "A_eq"):
            matrix = getattr(self, name)
            matrix = sp.csr_matrix(matrix if matrix is not None else (0, n), dtype=float)
            if matrix.shape[1] != n:
                raise ValueError(f"{name} has {matrix.shape[1]} columns, expected {n}")
            object.__setattr__(self, name, matrix)
        for name in ("b_ub", "b_eq", "lb", "ub"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if self.b_ub.size != self.A_ub.shape[0] or self.b_eq.size != self.A_eq.shape[0]:
            raise ValueError("Right-hand sides do not match the constraint matrices")
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("Bounds must have one entry per variable")

    @property
    def n(self) -> int:
        return self.c.size

    def with_bounds(self, lb: np.ndarray, ub: np.ndarray) -> "LinearProgram":
        return LinearProgram(self.c, self.A_ub, self.b_ub, self.A_eq, self.b_eq, lb, ub)

    def primal_residual(self, x: np.ndarray) -> float:
        """Largest violation of rows and bounds at ``x``."""
        parts = [0.0]
        if self.b_ub.size:
            parts.append(float(np.max(self.A_ub @ x - self.b_ub)))
        if self.b_eq.size:
            parts.append(float(np.max(np.abs(self.A_eq @ x - self.b_eq))))
        parts.append(float(np.max(self.lb - x, initial=0.0)))
        parts.append(float(np.max(x - self.ub, initial=0.0)))
        return max(parts)


@dataclass(frozen=True, eq=False)
class LpResult:
    """Outcome of one LP solve.

    ``duals_ub`` are non-positive multipliers of the inequality rows (the
    change of the objective per unit increase of ``b_ub``).
    """

    status: LpStatus
    objective: float = float("nan")
    x: Optional[np.ndarray] = None
    duals_ub: np.ndarray = field(default_factory=lambda: np.zeros(0))
    duals_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0
    primal_residual: float = float("nan")
    cs_residual: float = float("nan")

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


def _complementarity(lp: LinearProgram, x: np.ndarray, duals_ub: np.ndarray) -> float:
    if not lp.b_ub.size or duals_ub.size != lp.b_ub.size:
        return 0.0
    slack = lp.b_ub - lp.A_ub @ x
    return float(np.max(np.abs(duals_ub * slack)))


def _solve_highs(lp: LinearProgram) -> LpResult:
    bounds = np.column_stack([
        np.where(np.isfinite(lp.lb), lp.lb, -np.inf),
        np.where(np.isfinite(lp.ub), lp.ub, np.inf),
    ])
    res = linprog(
        lp.c,
        A_ub=lp.A_ub if lp.b_ub.size else None,
        b_ub=lp.b_ub if lp.b_ub.size else None,
        A_eq=lp.A_eq if lp.b_eq.size else None,
        b_eq=lp.b_eq if lp.b_eq.size else None,
        bounds=bounds,
        method="highs",
    )
    iterations = int(getattr(res, "nit", 0) or 0)
    if res.status == 2:
        return LpResult(LpStatus.INFEASIBLE, iterations=iterations)
    if res.status == 3:
        return LpResult(LpStatus.UNBOUNDED, iterations=iterations)
    if res.status != 0 or res.x is None:
        raise LpStallError(f"HiGHS stopped: {res.message}", iterations=iterations)

    x = np.asarray(res.x, dtype=float)
    duals_ub = np.asarray(res.ineqlin.marginals) if lp.b_ub.size else np.zeros(0)
    duals_eq = np.asarray(res.eqlin.marginals) if lp.b_eq.size else np.zeros(0)
    return LpResult(
        status=LpStatus.OPTIMAL,
        objective=float(res.fun),
        x=x,
        duals_ub=duals_ub,
        duals_eq=duals_eq,
        iterations=iterations,
        primal_residual=lp.primal_residual(x),
        cs_residual=_complementarity(lp, x, duals_ub),
    )


class BoundedSimplex:
    """Two-phase primal simplex on ``M y = b, l <= y <= u``.

    Inequality rows receive a slack column; phase one adds one artificial
    column per row, signed so the starting basis is feasible. Non-basic
    variables sit at a bound (free ones at zero). Entering columns are priced
    by largest reduced cost until ``DEGENERATE_LIMIT`` consecutive zero-length
    steps, after which Bland's smallest-index rule picks both the entering
    column and, among tied ratios, the leaving row until progress resumes.
    """

    def __init__(self, lp: LinearProgram, max_iterations: int = 50000):
        self.lp = lp
        self.max_iterations = max_iterations
        a_ub = lp.A_ub.toarray()
        a_eq = lp.A_eq.toarray()
        m_ub, m_eq = a_ub.shape[0], a_eq.shape[0]
        self.n_struct = lp.n
        self.m_ub = m_ub
        self.m = m_ub + m_eq

        a = np.zeros((self.m, lp.n + m_ub))
        a[:m_ub, : lp.n] = a_ub
        a[m_ub:, : lp.n] = a_eq
        a[:m_ub, lp.n:] = np.eye(m_ub)
        self.b = np.concatenate([lp.b_ub, lp.b_eq])
        self.lower = np.concatenate([lp.lb, np.zeros(m_ub)])
        self.upper = np.concatenate([lp.ub, np.full(m_ub, np.inf)])
        self.cost = np.concatenate([lp.c, np.zeros(m_ub)])
        self.n_real = a.shape[1]

        # nonbasic starting point
        x = np.where(np.isfinite(self.lower), self.lower, np.where(np.isfinite(self.upper), self.upper, 0.0))
        self.at_upper = ~np.isfinite(self.lower) & np.isfinite(self.upper)
        residual = self.b - a @ x
        signs = np.where(residual >= 0, 1.0, -1.0)

        self.M = np.hstack([a, np.diag(signs)])
        self.x = np.concatenate([x, np.abs(residual)])
        self.lower = np.concatenate([self.lower, np.zeros(self.m)])
        self.upper = np.concatenate([self.upper, np.full(self.m, np.inf)])
        self.at_upper = np.concatenate([self.at_upper, np.zeros(self.m, dtype=bool)])
        self.basis = list(range(self.n_real, self.n_real + self.m))
        self.is_basic = np.zeros(self.n_real + self.m, dtype=bool)
        self.is_basic[self.basis] = True
        self.iterations = 0

    def _eligible(self, reduced: np.ndarray, allowed: np.ndarray) -> np.ndarray:
        """Signed improvement direction per column (0 when not eligible)."""
        direction = np.zeros_like(reduced)
        can_rise = ~self.at_upper & (reduced < -OPTIMALITY_TOL)
        can_fall = (self.at_upper | ~np.isfinite(self.lower)) & (reduced > OPTIMALITY_TOL)
        direction[can_rise] = 1.0
        direction[can_fall] = -1.0
        direction[~allowed | self.is_basic] = 0.0
        return direction

    def _ratio_test(self, w: np.ndarray, delta: float, bland: bool = False):
        """Two-pass ratio test; returns (step, leaving row or None).

        In Bland mode the exact minimum ratio is taken and ties go to the
        smallest basic column index.
        """
        basic = np.asarray(self.basis)
        xb = self.x[basic]
        lo, hi = self.lower[basic], self.upper[basic]
        rate = delta * w  # rate at which each basic variable decreases

        relaxed = np.full(self.m, np.inf)
        exact = np.full(self.m, np.inf)
        falling = (rate > PIVOT_TOL) & np.isfinite(lo)
        rising = (rate < -PIVOT_TOL) & np.isfinite(hi)
        relaxed[falling] = (xb[falling] - lo[falling] + HARRIS_TOL) / rate[falling]
        exact[falling] = (xb[falling] - lo[falling]) / rate[falling]
        relaxed[rising] = (hi[rising] - xb[rising] + HARRIS_TOL) / -rate[rising]
        exact[rising] = (hi[rising] - xb[rising]) / -rate[rising]

        bound = relaxed.min() if self.m else np.inf
        if not np.isfinite(bound):
            return np.inf, None
        if bland:
            step = float(exact.min())
            tied = np.flatnonzero(exact <= step + PIVOT_TOL)
            row = int(tied[np.argmin(basic[tied])])
            return max(step, 0.0), row
        candidates = np.flatnonzero(exact <= bound)
        row = int(candidates[np.argmax(np.abs(w[candidates]))])
        return max(float(exact[row]), 0.0), row

    def _iterate(self, cost: np.ndarray, allowed: np.ndarray, phase: int) -> LpStatus:
        degenerate = 0
        while True:
            if self.iterations >= self.max_iterations:
                raise LpStallError(
                    f"Simplex hit {self.max_iterations} iterations in phase {phase}",
                    iterations=self.iterations,
                    phase=phase,
                    objective=float(cost @ self.x),
                )
            self.iterations += 1
            basic = np.asarray(self.basis)
            lu = lu_factor(self.M[:, basic])
            nonbasic = ~self.is_basic
            rhs = self.b - self.M[:, nonbasic] @ self.x[nonbasic]
            self.x[basic] = lu_solve(lu, rhs)
            y = lu_solve(lu, cost[basic], trans=1)
            reduced = cost - self.M.T @ y

            direction = self._eligible(reduced, allowed)
            candidates = np.flatnonzero(direction)
            if candidates.size == 0:
                self.y = y
                return LpStatus.OPTIMAL
            bland = degenerate >= DEGENERATE_LIMIT
            if bland:
                entering = int(candidates[0])
            else:
                entering = int(candidates[np.argmax(np.abs(reduced[candidates]))])
            delta = direction[entering]

            w = lu_solve(lu, self.M[:, entering])
            step, row = self._ratio_test(w, delta, bland)
            flip = self.upper[entering] - self.lower[entering]
            if row is None and not np.isfinite(flip):
                return LpStatus.UNBOUNDED

            if np.isfinite(flip) and flip <= step:
                self.x[entering] = self.upper[entering] if delta > 0 else self.lower[entering]
                self.at_upper[entering] = delta > 0
                step = flip
            else:
                leaving = self.basis[row]
                self.x[basic] -= delta * step * w
                self.x[entering] += delta * step
                falls = delta * w[row] > 0
                self.x[leaving] = self.lower[leaving] if falls else self.upper[leaving]
                self.at_upper[leaving] = not falls
                self.at_upper[entering] = False
                self.is_basic[leaving] = False
                self.is_basic[entering] = True
                self.basis[row] = entering
            degenerate = degenerate + 1 if step <= FEASIBILITY_TOL else 0

    def solve(self) -> LpResult:
        n_total = self.n_real + self.m
        phase_one_cost = np.concatenate([np.zeros(self.n_real), np.ones(self.m)])
        everything = np.ones(n_total, dtype=bool)
        self._iterate(phase_one_cost, everything, phase=1)
        infeasibility = float(self.x[self.n_real:].sum())
        if infeasibility > FEASIBILITY_TOL * max(1.0, float(np.max(np.abs(self.b), initial=0.0))):
            logger.debug("Simplex phase one ended with infeasibility %.3e", infeasibility)
            return LpResult(LpStatus.INFEASIBLE, iterations=self.iterations)

        # artificials stay at zero for phase two
        self.upper[self.n_real:] = 0.0
        self.x[self.n_real:] = 0.0
        real_only = np.concatenate([np.ones(self.n_real, dtype=bool), np.zeros(self.m, dtype=bool)])
        phase_two_cost = np.concatenate([self.cost, np.zeros(self.m)])
        status = self._iterate(phase_two_cost, real_only, phase=2)
        if status is LpStatus.UNBOUNDED:
            return LpResult(LpStatus.UNBOUNDED, iterations=self.iterations)

        x = self.x[: self.n_struct].copy()
        duals_ub = self.y[: self.m_ub].copy()
        duals_eq = self.y[self.m_ub:].copy()
        return LpResult(
            status=LpStatus.OPTIMAL,
            objective=float(self.lp.c @ x),
            x=x,
            duals_ub=duals_ub,
            duals_eq=duals_eq,
            iterations=self.iterations,
            primal_residual=self.lp.primal_residual(x),
            cs_residual=_complementarity(self.lp, x, duals_ub),
        )


def solve_lp(lp: LinearProgram, method: str = "highs") -> LpResult:
    """Solve a continuous relaxation.

    Args:
        lp: Problem to solve
        method: ``"highs"`` or ``"simplex"``

    Returns:
        LpResult; when optimal, ``x`` is primal feasible within 1e-7

    Raises:
        LpStallError: the backend stopped without a verdict
    """
    if np.any(lp.lb > lp.ub + FEASIBILITY_TOL):
        return LpResult(LpStatus.INFEASIBLE)
    if method == "highs":
        result = _solve_highs(lp)
    elif method == "simplex":
        result = BoundedSimplex(lp).solve()
    else:
        raise ValueError(f"Unknown LP method: {method}")
    if result.optimal and result.primal_residual > 1e-7:
        logger.warning("LP solution violates constraints by %.2e", result.primal_residual)
    return result
