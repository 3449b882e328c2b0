"""
Branch-and-bound over LP relaxations for ecoshift problems.

Nodes are explored best-first by relaxation bound; from every node taken off
the queue the search plunges depth-first into the child that agrees with the
relaxation until the plunge is pruned, infeasible or integral. Fractional
binaries are branched first (most fractional), then the most violated SOS2
set is split at its weighted-midpoint breakpoint.
"""

import heapq
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from .lp_solver import LpResult, LpStallError, LpStatus, solve_lp
from .problem import CompiledProblem, ProblemSpec

logger = logging.getLogger(__name__)

MAX_DIVE_DEPTH = 500


class MipStatus(Enum):
    OPTIMAL = "optimal"
    GAP_LIMIT = "gap-limit"
    NODE_LIMIT = "node-limit"
    TIME_LIMIT = "time-limit"
    INFEASIBLE = "infeasible"
    STALLED = "stalled"


@dataclass(frozen=True)
class SolverLimits:
    time_budget_s: float = 0.9
    node_limit: int = 100000
    gap_tol: float = 1e-3
    int_tol: float = 1e-6
    lp_method: str = "highs"
    workers: int = 1

    def __post_init__(self):
        if self.time_budget_s <= 0 or self.node_limit <= 0:
            raise ValueError("Time budget and node limit must be positive")
        if self.gap_tol <= 0 or self.int_tol <= 0:
            raise ValueError("Tolerances must be positive")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


@dataclass(frozen=True, eq=False)
class MipResult:
    """Outcome of a branch-and-bound run.

    ``x`` holds the structural columns of the incumbent, or None when no
    integer-feasible point was found within the limits.
    """

    status: MipStatus
    x: Optional[np.ndarray]
    objective: float
    best_bound: float
    nodes: int
    wall_time_s: float
    dive_nodes: int = 0
    bound_history: Tuple[float, ...] = ()

    @property
    def has_incumbent(self) -> bool:
        return self.x is not None

    @property
    def gap(self) -> float:
        if not self.has_incumbent:
            return float("inf")
        return max(self.objective - self.best_bound, 0.0) / max(1.0, abs(self.objective))


@dataclass(order=True)
class _Node:
    bound: float
    seq: int
    depth: int = field(compare=False)
    lb: np.ndarray = field(compare=False, repr=False)
    ub: np.ndarray = field(compare=False, repr=False)


def _most_fractional(x: np.ndarray, binaries: np.ndarray, tol: float) -> Optional[int]:
    if binaries.size == 0:
        return None
    values = x[binaries]
    distance = np.abs(values - np.round(values))
    if distance.max() <= tol:
        return None
    return int(binaries[int(np.argmax(distance))])


def sos2_violation(weights: np.ndarray, tol: float) -> float:
    """Weight outside the best adjacent pair (0 when the set is SOS2-feasible)."""
    w = np.where(weights > tol, weights, 0.0)
    if w.size < 3:
        return 0.0
    return float(w.sum() - np.max(w[:-1] + w[1:]))


def _sos2_split(compiled: CompiledProblem, x: np.ndarray, tol: float) -> Optional[Tuple[int, int]]:
    """(set index, split position) of the most violated SOS2 set."""
    worst, choice = tol, None
    for s, members in enumerate(compiled.sos2):
        violation = sos2_violation(x[members], tol)
        if violation > worst:
            worst, choice = violation, s
    if choice is None:
        return None
    w = np.where(x[compiled.sos2[choice]] > tol, x[compiled.sos2[choice]], 0.0)
    nonzero = np.flatnonzero(w)
    mid = int(round(float(np.arange(w.size) @ w) / w.sum()))
    split = min(max(mid, int(nonzero[0]) + 1), int(nonzero[-1]) - 1)
    return choice, split


def is_integer_feasible(compiled: CompiledProblem, x: np.ndarray, tol: float = 1e-6) -> bool:
    """Integrality of binaries and adjacency of every SOS2 set."""
    if _most_fractional(x, compiled.binaries, tol) is not None:
        return False
    return all(sos2_violation(x[m], tol) <= tol for m in compiled.sos2)


class BranchAndBound:
    """One branch-and-bound search over a compiled problem."""

    def __init__(self, compiled: CompiledProblem, limits: SolverLimits):
        self.compiled = compiled
        self.limits = limits
        self.heap: List[_Node] = []
        self.seq = 0
        self.nodes = 0
        self.dive_nodes = 0
        self.incumbent: Optional[np.ndarray] = None
        self.incumbent_obj = np.inf
        self.history: List[float] = []
        # bounds of nodes whose LP stalled; they stay open
        self.stalled: List[float] = []
        self.start = time.perf_counter()

    def _solve(self, lb: np.ndarray, ub: np.ndarray) -> Optional[LpResult]:
        try:
            return solve_lp(self.compiled.lp.with_bounds(lb, ub), self.limits.lp_method)
        except LpStallError as e:
            logger.warning("Node LP stalled after %s iterations: %s", e.iterations, e)
            return None

    def _children(self, node_lb, node_ub, x) -> Optional[List[Tuple[np.ndarray, np.ndarray]]]:
        """Children of a node, preferred child first; None when integer feasible."""
        j = _most_fractional(x, self.compiled.binaries, self.limits.int_tol)
        if j is not None:
            down_ub, up_lb = node_ub.copy(), node_lb.copy()
            down_ub[j] = 0.0
            up_lb[j] = 1.0
            down, up = (node_lb, down_ub), (up_lb, node_ub)
            return [up, down] if x[j] >= 0.5 else [down, up]
        split = _sos2_split(self.compiled, x, self.limits.int_tol)
        if split is None:
            return None
        s, r = split
        members = self.compiled.sos2[s]
        left_ub, right_ub = node_ub.copy(), node_ub.copy()
        left_ub[members[r + 1:]] = 0.0
        right_ub[members[:r]] = 0.0
        left, right = (node_lb, left_ub), (node_lb, right_ub)
        weights = x[members]
        return [left, right] if weights[: r + 1].sum() >= weights[r:].sum() else [right, left]

    def _push(self, bound: float, depth: int, lb: np.ndarray, ub: np.ndarray) -> None:
        heapq.heappush(self.heap, _Node(bound, self.seq, depth, lb, ub))
        self.seq += 1

    def _prunable(self, bound: float) -> bool:
        if self.incumbent is None:
            return False
        return self.incumbent_obj - bound <= self.limits.gap_tol * max(1.0, abs(self.incumbent_obj))

    def _accept(self, x: np.ndarray, objective: float, source: str) -> None:
        if objective < self.incumbent_obj:
            self.incumbent = x.copy()
            self.incumbent_obj = objective
            logger.debug("New incumbent %.6f from %s at node %s", objective, source, self.nodes)
            self.heap = [n for n in self.heap if not self._prunable(n.bound)]
            heapq.heapify(self.heap)

    def _record_bound(self, current: float) -> float:
        bounds = [n.bound for n in self.heap] + self.stalled + [current]
        bound = min(bounds)
        if self.incumbent is not None:
            bound = min(bound, self.incumbent_obj)
        if self.history:
            bound = max(bound, self.history[-1])
        self.history.append(bound)
        return bound

    def _out_of_budget(self) -> Optional[MipStatus]:
        if time.perf_counter() - self.start > self.limits.time_budget_s:
            return MipStatus.TIME_LIMIT
        if self.nodes >= self.limits.node_limit:
            return MipStatus.NODE_LIMIT
        return None

    def warm_start(self, spec: ProblemSpec, hint: np.ndarray) -> None:
        """Seed the incumbent from a full solution or a partial (NaN-padded) one.

        A complete feasible vector is accepted as is; otherwise the finite
        binary entries are fixed and the search dives depth-first along the
        preferred children until an integer-feasible leaf appears.
        """
        compiled, tol = self.compiled, self.limits.int_tol
        hint = np.asarray(hint, dtype=float)
        if hint.size != compiled.n_structural:
            raise ValueError(f"Warm start has {hint.size} entries, expected {compiled.n_structural}")
        if np.all(np.isfinite(hint)) and spec.max_violation(hint) <= 1e-7:
            padded = np.concatenate([hint, np.zeros(compiled.lp.n - compiled.n_structural)])
            if is_integer_feasible(compiled, padded, tol):
                self._accept(padded, spec.objective_value(hint), "warm start")
                return

        lb, ub = compiled.lp.lb.copy(), compiled.lp.ub.copy()
        for j in compiled.binaries:
            if np.isfinite(hint[j]):
                lb[j] = ub[j] = float(np.round(hint[j]))
        for _ in range(MAX_DIVE_DEPTH):
            if self._out_of_budget() is not None:
                return
            result = self._solve(lb, ub)
            self.dive_nodes += 1
            if result is None or not result.optimal:
                logger.debug("Warm-start dive ended without a feasible leaf")
                return
            children = self._children(lb, ub, result.x)
            if children is None:
                self._accept(result.x, result.objective + compiled.constant, "warm start")
                return
            lb, ub = children[0]

    def _evaluate(self, node: _Node, result: Optional[LpResult]) -> Optional[Tuple[float, List]]:
        """Process a solved node; returns (bound, children) when it must be branched."""
        if result is None:
            self.stalled.append(node.bound)
            return None
        if result.status is LpStatus.INFEASIBLE:
            return None
        if result.status is LpStatus.UNBOUNDED:
            raise ValueError("LP relaxation is unbounded; the problem needs finite costs")
        bound = result.objective + self.compiled.constant
        if self._prunable(bound):
            return None
        children = self._children(node.lb, node.ub, result.x)
        if children is None:
            self._accept(result.x, bound, "tree")
            return None
        return bound, children

    def run(self) -> MipStatus:
        compiled = self.compiled
        self._push(-np.inf, 0, compiled.lp.lb.copy(), compiled.lp.ub.copy())
        if self.limits.workers > 1:
            return self._run_parallel()
        while self.heap:
            node = heapq.heappop(self.heap)
            if self._prunable(node.bound):
                continue
            # plunge
            while node is not None:
                stop = self._out_of_budget()
                if stop is not None:
                    heapq.heappush(self.heap, node)
                    return stop
                self.nodes += 1
                outcome = self._evaluate(node, self._solve(node.lb, node.ub))
                self._record_bound(node.bound if outcome is None else outcome[0])
                if outcome is None:
                    node = None
                    continue
                bound, children = outcome
                for lb, ub in children[1:]:
                    self._push(bound, node.depth + 1, lb, ub)
                lb, ub = children[0]
                node = _Node(bound, self.seq, node.depth + 1, lb, ub)
                self.seq += 1
            if self._gap_closed():
                return MipStatus.GAP_LIMIT if self.heap else MipStatus.OPTIMAL
        return self._exhausted()

    def _run_parallel(self) -> MipStatus:
        with ThreadPoolExecutor(max_workers=self.limits.workers) as pool:
            while self.heap:
                stop = self._out_of_budget()
                if stop is not None:
                    return stop
                batch = []
                while self.heap and len(batch) < self.limits.workers:
                    node = heapq.heappop(self.heap)
                    if not self._prunable(node.bound):
                        batch.append(node)
                results = list(pool.map(lambda n: self._solve(n.lb, n.ub), batch))
                for node, result in zip(batch, results):
                    self.nodes += 1
                    outcome = self._evaluate(node, result)
                    if outcome is not None:
                        bound, children = outcome
                        for lb, ub in children:
                            self._push(bound, node.depth + 1, lb, ub)
                if batch:
                    self._record_bound(min(n.bound for n in batch))
                if self._gap_closed():
                    return MipStatus.GAP_LIMIT if self.heap else MipStatus.OPTIMAL
        return self._exhausted()

    def _gap_closed(self) -> bool:
        if self.incumbent is None:
            return False
        open_bounds = [n.bound for n in self.heap] + self.stalled
        if not open_bounds:
            return True
        return self._prunable(min(open_bounds))

    def _exhausted(self) -> MipStatus:
        """Status once the queue is empty; stalled subtrees keep it from being proven."""
        if any(not self._prunable(b) for b in self.stalled):
            logger.warning("%s node LP(s) stalled; optimality is not proven", len(self.stalled))
            return MipStatus.STALLED
        return MipStatus.OPTIMAL if self.incumbent is not None else MipStatus.INFEASIBLE


def solve(
    spec: ProblemSpec,
    limits: SolverLimits = SolverLimits(),
    warm_start: Optional[np.ndarray] = None,
    compiled: Optional[CompiledProblem] = None,
) -> MipResult:
    """Solve a ProblemSpec to proven optimality or until a limit is hit.

    Args:
        spec: Problem to solve
        limits: Time, node, gap and integrality limits
        warm_start: Structural vector; NaN entries are left to the search
        compiled: Pre-compiled form of ``spec`` to skip lowering

    Returns:
        MipResult; ``has_incumbent`` is False when no integer-feasible point
        was found within the limits
    """
    compiled = compiled if compiled is not None else spec.compile()
    search = BranchAndBound(compiled, limits)
    if warm_start is not None:
        search.warm_start(spec, warm_start)
    status = search.run()

    best_bound = search.history[-1] if search.history else -np.inf
    if search.incumbent is not None:
        best_bound = min(best_bound, search.incumbent_obj)
        if status is MipStatus.OPTIMAL:
            best_bound = max(best_bound, search.incumbent_obj - limits.gap_tol * max(1.0, abs(search.incumbent_obj)))
    if status is MipStatus.INFEASIBLE:
        best_bound = np.inf

    x = search.incumbent[: compiled.n_structural] if search.incumbent is not None else None
    result = MipResult(
        status=status,
        x=x,
        objective=search.incumbent_obj if x is not None else np.inf,
        best_bound=float(best_bound),
        nodes=search.nodes,
        wall_time_s=time.perf_counter() - search.start,
        dive_nodes=search.dive_nodes,
        bound_history=tuple(search.history),
    )
    logger.debug(
        "MIP %s: objective %.6f bound %.6f nodes %s (%s dive) in %.3f s",
        status.value,
        result.objective,
        result.best_bound,
        result.nodes,
        result.dive_nodes,
        result.wall_time_s,
    )
    return result
