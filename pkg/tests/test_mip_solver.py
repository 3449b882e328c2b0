"""
Branch-and-bound tests.

A small gear-selection toy (big-M linked binaries, a convex piecewise cost
and step coupling) is small enough to enumerate: every gear sequence is
fixed in turn and its LP solved, and the search must match the best one.
"""

import itertools
import logging
import statistics

import numpy as np
import pytest

from ecoshift import mip_solver
from ecoshift.formulation import CycleInput, build_problem, gear_hint
from ecoshift.lp_solver import LpStallError, solve_lp
from ecoshift.mip_solver import (
    MipResult,
    MipStatus,
    SolverLimits,
    is_integer_feasible,
    solve,
    sos2_violation,
)
from ecoshift.powertrain import VehicleState
from ecoshift.problem import ProblemSpec

EXACT = SolverLimits(time_budget_s=60.0, gap_tol=1e-9)


def gear_toy(seed: int, n_steps: int = 4, n_gears: int = 3) -> ProblemSpec:
    rng = np.random.default_rng(seed)
    ratios = rng.uniform(0.5, 3.0, n_gears)
    spec = ProblemSpec()
    xs = []
    for k in range(n_steps):
        x = spec.add_variable(f"x[{k}]", 0.0, 10.0)
        y = spec.add_variable(f"y[{k}]", 0.0, 30.0)
        g = [spec.add_variable(f"g[{k},{i + 1}]", binary=True) for i in range(n_gears)]
        spec.add_row(f"one[{k}]", [(j, 1.0) for j in g], "==", 1.0)
        for i, (gi, r) in enumerate(zip(g, ratios)):
            m = 30.0 + 10.0 * r
            spec.add_row(f"lo[{k},{i}]", {y: 1.0, x: -r, gi: -m}, ">=", -m)
            spec.add_row(f"hi[{k},{i}]", {y: 1.0, x: -r, gi: m}, "<=", m)
            spec.add_objective(gi, float(rng.uniform(0.0, 2.0)))
        spec.add_row(f"demand[{k}]", {y: 1.0}, ">=", float(rng.uniform(1.0, 4.0)))
        spec.add_piecewise_cost(f"cost[{k}]", x, [0.0, 2.5, 5.0, 7.5, 10.0], [0.0, 1.0, 3.0, 6.0, 10.0])
        xs.append(x)
    for k in range(n_steps - 1):
        spec.add_row(f"up[{k}]", {xs[k + 1]: 1.0, xs[k]: -1.0}, "<=", 3.0)
        spec.add_row(f"down[{k}]", {xs[k + 1]: 1.0, xs[k]: -1.0}, ">=", -3.0)
    spec.constant = 0.25
    return spec


def enumerate_optimum(spec: ProblemSpec, n_steps: int = 4, n_gears: int = 3) -> float:
    compiled = spec.compile()
    best = np.inf
    for sequence in itertools.product(range(n_gears), repeat=n_steps):
        lb, ub = compiled.lp.lb.copy(), compiled.lp.ub.copy()
        for k, chosen in enumerate(sequence):
            for i in range(n_gears):
                j = spec.index(f"g[{k},{i + 1}]")
                lb[j] = ub[j] = float(i == chosen)
        result = solve_lp(compiled.lp.with_bounds(lb, ub))
        if result.optimal:
            best = min(best, result.objective + compiled.constant)
    return best


class TestAgainstEnumeration:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_best_gear_sequence(self, seed):
        spec = gear_toy(seed)
        result = solve(spec, EXACT)
        assert result.status is MipStatus.OPTIMAL
        assert result.objective == pytest.approx(enumerate_optimum(spec), abs=1e-6)
        assert spec.max_violation(result.x) <= 1e-7
        assert result.objective == pytest.approx(spec.objective_value(result.x), abs=1e-6)

    def test_parallel_workers_agree(self):
        spec = gear_toy(4)
        serial = solve(spec, EXACT)
        parallel = solve(spec, SolverLimits(time_budget_s=60.0, gap_tol=1e-9, workers=2))
        assert parallel.status is MipStatus.OPTIMAL
        assert parallel.objective == pytest.approx(serial.objective, abs=1e-6)

    def test_simplex_backend_agrees(self):
        spec = gear_toy(5, n_steps=3, n_gears=2)
        highs = solve(spec, EXACT)
        simplex = solve(spec, SolverLimits(time_budget_s=60.0, gap_tol=1e-9, lp_method="simplex"))
        assert simplex.objective == pytest.approx(highs.objective, abs=1e-6)


class TestSearchBookkeeping:
    def test_bound_history_is_monotone(self):
        result = solve(gear_toy(6), EXACT)
        history = np.array(result.bound_history)
        assert history.size == result.nodes
        assert np.all(np.diff(history) >= -1e-12)
        assert result.best_bound <= result.objective + 1e-9
        assert result.gap <= 1e-9

    def test_node_limit(self):
        result = solve(gear_toy(7), SolverLimits(time_budget_s=60.0, node_limit=1))
        assert result.nodes <= 1
        assert result.status in (MipStatus.NODE_LIMIT, MipStatus.OPTIMAL)

    def test_infeasible_problem(self):
        spec = gear_toy(8)
        spec.add_row("impossible", {spec.index("y[0]"): 1.0}, ">=", 40.0)
        result = solve(spec, EXACT)
        assert result.status is MipStatus.INFEASIBLE
        assert not result.has_incumbent
        assert result.best_bound == np.inf
        assert result.gap == np.inf

    def test_unbounded_relaxation_raises(self):
        spec = ProblemSpec()
        x = spec.add_variable("x", -np.inf, np.inf)
        spec.add_objective(x, -1.0)
        with pytest.raises(ValueError, match="unbounded"):
            solve(spec, EXACT)


class TestWarmStart:
    def test_full_solution_is_accepted_without_dive(self):
        spec = gear_toy(9)
        cold = solve(spec, EXACT)
        warm = solve(spec, EXACT, warm_start=cold.x)
        assert warm.dive_nodes == 0
        assert warm.nodes <= cold.nodes
        assert warm.objective == pytest.approx(cold.objective, abs=1e-6)

    def test_partial_hint_dives(self):
        spec = gear_toy(10)
        cold = solve(spec, EXACT)
        hint = np.full(spec.n_vars, np.nan)
        for j in spec.binaries:
            hint[j] = cold.x[j]
        warm = solve(spec, EXACT, warm_start=hint)
        assert warm.dive_nodes >= 1
        assert warm.objective == pytest.approx(cold.objective, abs=1e-6)

    def test_gear_hint_explores_no_more_nodes(self):
        spec = gear_toy(12)
        cold = solve(spec, EXACT)
        gears = [
            1 + int(np.argmax([cold.x[spec.index(f"g[{k},{i + 1}]")] for i in range(3)])) for k in range(4)
        ]
        warm = solve(spec, EXACT, warm_start=gear_hint(spec, gears, 3))
        # fixing the gears leaves a convex LP, so the dive lands at once
        assert warm.dive_nodes == 1
        assert warm.nodes <= cold.nodes
        assert warm.objective == pytest.approx(cold.objective, abs=1e-6)

    def test_hint_size_checked(self):
        spec = gear_toy(11)
        with pytest.raises(ValueError, match="entries"):
            solve(spec, EXACT, warm_start=np.zeros(3))


class TestHelpers:
    @pytest.mark.parametrize(
        "weights, expected",
        [([0.0, 0.5, 0.5, 0.0], 0.0), ([0.5, 0.0, 0.5], 0.5), ([0.2, 0.3, 0.5], 0.2), ([1.0, 0.0], 0.0)],
    )
    def test_sos2_violation(self, weights, expected):
        assert sos2_violation(np.array(weights), 1e-9) == pytest.approx(expected)

    def test_integer_feasibility(self):
        spec = ProblemSpec()
        spec.add_variable("b", binary=True)
        lam = [spec.add_variable(f"l{i}", 0.0, 1.0) for i in range(3)]
        spec.add_sos2("s", lam, [0.0, 1.0, 2.0])
        compiled = spec.compile()
        assert is_integer_feasible(compiled, np.array([1.0, 0.0, 0.4, 0.6]))
        assert not is_integer_feasible(compiled, np.array([0.5, 0.0, 0.4, 0.6]))
        assert not is_integer_feasible(compiled, np.array([1.0, 0.5, 0.0, 0.5]))

    def test_limits_validation(self):
        with pytest.raises(ValueError):
            SolverLimits(workers=0)
        with pytest.raises(ValueError):
            SolverLimits(gap_tol=0.0)

    def test_gap_without_incumbent(self):
        result = MipResult(MipStatus.TIME_LIMIT, None, np.inf, -np.inf, 0, 0.1)
        assert result.gap == np.inf
        assert not result.has_incumbent


def two_item_knapsack() -> ProblemSpec:
    """Root relaxation takes half of item b; the integer optimum takes a alone."""
    spec = ProblemSpec()
    a = spec.add_variable("a", binary=True)
    b = spec.add_variable("b", binary=True)
    spec.add_row("capacity", {a: 2.0, b: 2.0}, "<=", 3.0)
    spec.add_objective(a, -3.0)
    spec.add_objective(b, -2.0)
    return spec


def stalling_on(calls):
    """solve_lp that raises LpStallError on the given (1-based) calls."""
    counter = itertools.count(1)

    def run(lp, method="highs"):
        if next(counter) in calls:
            raise LpStallError("no progress", iterations=7)
        return solve_lp(lp, method)

    return run


class TestStalledNodes:
    def test_stalled_root_is_not_infeasible(self, monkeypatch):
        monkeypatch.setattr(mip_solver, "solve_lp", stalling_on({1}))
        result = solve(two_item_knapsack(), EXACT)
        assert result.status is MipStatus.STALLED
        assert not result.has_incumbent
        assert result.best_bound == -np.inf

    def test_stalled_subtree_keeps_its_bound(self, monkeypatch, caplog):
        # the preferred child (b = 1) stalls; its sibling gives the incumbent
        monkeypatch.setattr(mip_solver, "solve_lp", stalling_on({2}))
        with caplog.at_level(logging.WARNING, logger="ecoshift.mip_solver"):
            result = solve(two_item_knapsack(), EXACT)
        assert result.status is MipStatus.STALLED
        assert result.objective == pytest.approx(-3.0)
        assert result.best_bound == pytest.approx(-4.0)
        assert result.gap == pytest.approx(1.0 / 3.0)
        assert "optimality is not proven" in caplog.text

    def test_without_stalls_the_same_search_is_optimal(self):
        result = solve(two_item_knapsack(), EXACT)
        assert result.status is MipStatus.OPTIMAL
        assert result.objective == pytest.approx(-3.0)

    def test_parallel_search_reports_stall(self, monkeypatch):
        monkeypatch.setattr(mip_solver, "solve_lp", stalling_on({2}))
        result = solve(two_item_knapsack(), SolverLimits(time_budget_s=60.0, gap_tol=1e-9, workers=2))
        assert result.status is MipStatus.STALLED
        assert result.best_bound <= -4.0 + 1e-9


@pytest.mark.slow
def test_full_horizon_cycles_meet_the_replan_budget(three_speed, cruising_lead):
    starts = [(VehicleState(0.0, v, 0.6, gear=2), 3.0 * v) for v in (6.0, 8.0, 10.0, 12.0, 13.0)]
    times = []
    for state, gap in starts:
        cycle = CycleInput(state, cruising_lead(d0=gap, v=state.v), three_speed, n_steps=50, dt=0.2)
        spec = build_problem(cycle)
        result = solve(spec, SolverLimits(), warm_start=gear_hint(spec, [2] * 50, 3))
        # gap- and time-limited returns count as on time
        assert result.status is not MipStatus.INFEASIBLE
        times.append(result.wall_time_s)
    assert statistics.median(times) <= 1.0
