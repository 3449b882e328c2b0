"""
Dynamic-programming oracle for short eco-driving horizons.

Acceleration is quantised to multiples of ``a_q``; speed and position then
live on exact lattices (``dv = a_q * dt``, ``dd = dv * dt``) so no state is
ever interpolated and halving ``a_q`` nests the old lattice in the new one.
The search runs forward over (speed, acceleration, position) states, keeping
the cheapest path into each state, with the hard spacing corridor and all
bounds as feasibility filters. Gear is a free choice per step and enters
through a per-(speed, acceleration) stage-cost table minimised over gears.
The grade and the battery power window are frozen at the start state, as in
the MIP cycle.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .battery import battery_power_limits, current_from_power, soc_rate
from .formulation import CycleInput, FormulationConfig, Weights, build_problem
from .mip_solver import SolverLimits, solve
from .motor_map import drive_power_exact, drive_power_fitted
from .powertrain import PowertrainConfig, VehicleState
from .state_estimation import LeadPrediction

logger = logging.getLogger(__name__)

MAX_HORIZON_S = 6.0
LATTICE_EPS = 1e-9


class DpGrid(NamedTuple):
    """Lattice resolution.

    ``accel_lo``/``accel_hi`` optionally narrow the acceleration range
    inside the vehicle limits.
    """

    a_q: float = 0.5
    dt: float = 0.2
    accel_lo: Optional[float] = None
    accel_hi: Optional[float] = None

    @property
    def dv(self) -> float:
        return self.a_q * self.dt

    @property
    def dd(self) -> float:
        return self.dv * self.dt

    def refined(self) -> "DpGrid":
        return self._replace(a_q=self.a_q / 2.0)


@dataclass(frozen=True, eq=False)
class DpResult:
    """Optimal trajectory on the lattice.

    ``d`` and ``v`` and ``soc`` have one more point than the control arrays.
    """

    status: str
    objective: float = float("inf")
    d: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))
    a: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gear: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    t_m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    f_b: np.ndarray = field(default_factory=lambda: np.zeros(0))
    p_b: np.ndarray = field(default_factory=lambda: np.zeros(0))
    soc: np.ndarray = field(default_factory=lambda: np.zeros(0))
    max_states: int = 0

    @property
    def feasible(self) -> bool:
        return self.status == "optimal"


class StageTable(NamedTuple):
    cost: np.ndarray
    gear: np.ndarray
    t_m: np.ndarray
    f_b: np.ndarray
    p_b: np.ndarray


def _accel_levels(grid: DpGrid, cfg: PowertrainConfig) -> np.ndarray:
    veh = cfg.vehicle
    lo = veh.a_min if grid.accel_lo is None else max(veh.a_min, grid.accel_lo)
    hi = veh.a_max if grid.accel_hi is None else min(veh.a_max, grid.accel_hi)
    j_lo = math.ceil(lo / grid.a_q - LATTICE_EPS)
    j_hi = math.floor(hi / grid.a_q + LATTICE_EPS)
    return np.arange(j_lo, j_hi + 1)


def stage_table(
    grid: DpGrid,
    levels: np.ndarray,
    n_speeds: int,
    soc: float,
    d: float,
    weights: Weights,
    cfg: PowertrainConfig,
    power: str = "exact",
) -> StageTable:
    """Cheapest stage cost per (speed index, acceleration level) over gears.

    Regenerative torque is used up to its limits (envelope, ``a_reg`` cap and
    the low-speed cutoff) with friction braking for the remainder; battery
    power must stay within the window at ``soc``.
    """
    veh, motor, gears = cfg.vehicle, cfg.motor, cfg.gears
    v = (np.arange(n_speeds) * grid.dv)[:, None]
    a = (levels * grid.a_q)[None, :]
    force = veh.m * a + veh.f_phi(d) + veh.c_wind * v ** 2
    p_chg, p_dis = battery_power_limits(soc, cfg.battery)

    shape = (n_speeds, levels.size)
    best = np.full(shape, np.inf)
    best_gear = np.zeros(shape, dtype=int)
    best_t = np.zeros(shape)
    best_fb = np.zeros(shape)
    best_pb = np.zeros(shape)
    for gear in range(1, gears.d_g + 1):
        r = gears.ratio(gear)
        w = np.broadcast_to(r * v, shape)
        t_hi = np.asarray(motor.t_max(w))
        t_lo = np.maximum(-t_hi, veh.m * veh.a_reg / r)
        t_lo = np.where(np.broadcast_to(v, shape) <= veh.v_lscp, np.maximum(t_lo, 0.0), t_lo)
        wanted = force / r
        ok = (w <= motor.w_max + 1e-9) & (wanted <= t_hi + 1e-9)
        torque = np.clip(wanted, t_lo, t_hi)
        f_b = np.maximum(torque * r - force, 0.0)
        ok &= f_b <= veh.f_b_max
        if power == "exact":
            safe_t = np.where(ok, torque, 0.0)
            safe_w = np.where(ok, w, 0.0)
            p_drv = np.asarray(drive_power_exact(safe_t, safe_w, motor))
        elif power == "fitted":
            p_drv = np.asarray(drive_power_fitted(torque, w, motor))
        else:
            raise ValueError(f"Unknown power model: {power}")
        p_b = cfg.battery.p_aux + p_drv / gears.eta_gear
        ok &= (p_b >= p_chg) & (p_b <= p_dis)
        cost = np.where(ok, weights.w1 * p_b * grid.dt + weights.w2 * a ** 2 * grid.dt, np.inf)
        better = cost < best
        best = np.where(better, cost, best)
        best_gear = np.where(better, gear, best_gear)
        best_t = np.where(better, torque, best_t)
        best_fb = np.where(better, f_b, best_fb)
        best_pb = np.where(better, p_b, best_pb)
    return StageTable(best, best_gear, best_t, best_fb, best_pb)


def dp_solve(
    initial: VehicleState,
    lead: LeadPrediction,
    horizon_s: float,
    grid: DpGrid = DpGrid(),
    weights: Weights = Weights(),
    cfg: Optional[PowertrainConfig] = None,
    power: str = "exact",
) -> DpResult:
    """Exact minimum of the discretised cycle objective on the lattice.

    Args:
        initial: Start state; its speed is snapped to the nearest lattice
            speed and its acceleration anchors the first jerk window
        lead: Lead prediction covering the horizon
        horizon_s: Horizon (s), at most six seconds
        grid: Lattice resolution
        weights: Objective weights (``beta`` scales the corridor margin)
        cfg: Powertrain variant
        power: ``"exact"`` motor map or ``"fitted"`` polynomial

    Returns:
        DpResult with status ``"optimal"`` or ``"infeasible"``
    """
    if cfg is None:
        cfg = PowertrainConfig(name="single-speed")
    if horizon_s > MAX_HORIZON_S + 1e-9:
        raise ValueError(f"DP horizon {horizon_s} s exceeds the {MAX_HORIZON_S} s guard")
    n = int(round(horizon_s / grid.dt))
    if n < 1:
        raise ValueError("DP horizon needs at least one step")
    veh = cfg.vehicle
    lead = lead.resample(grid.dt, n)

    levels = _accel_levels(grid, cfg)
    n_speeds = int(math.floor(veh.v_lim / grid.dv + LATTICE_EPS)) + 1
    table = stage_table(grid, levels, n_speeds, initial.soc, initial.d, weights, cfg, power)
    jerk_lo = math.ceil(veh.j_min * grid.dt / grid.a_q - LATTICE_EPS)
    jerk_hi = math.floor(veh.j_max * grid.dt / grid.a_q + LATTICE_EPS)

    v0 = int(round(min(max(initial.v, 0.0), veh.v_lim) / grid.dv))
    a_prev = initial.a
    first = levels[
        (levels * grid.a_q >= a_prev + veh.j_min * grid.dt - LATTICE_EPS)
        & (levels * grid.a_q <= a_prev + veh.j_max * grid.dt + LATTICE_EPS)
    ]
    margin = weights.beta * lead.sigma_d

    # stage arrays: speed index, accel level index, position index, cost, parent
    vi = np.array([v0])
    ai = np.array([-1])
    pos = np.array([0], dtype=np.int64)
    cost = np.array([0.0])
    stages: List[Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
    max_states = 1
    j_offset = int(levels[0])

    for k in range(n):
        if k == 0:
            moves = np.broadcast_to(first - j_offset, (vi.size, first.size))
        else:
            steps = np.arange(jerk_lo, jerk_hi + 1)
            moves = ai[:, None] + steps[None, :]
        parent = np.repeat(np.arange(vi.size), moves.shape[1])
        move = moves.ravel()
        valid = (move >= 0) & (move < levels.size)
        parent, move = parent[valid], move[valid]

        v_from = vi[parent]
        stage = table.cost[v_from, move]
        v_next = v_from + levels[move]
        pos_next = pos[parent] + v_from
        d_next = initial.d + grid.dd * pos_next
        speed_next = v_next * grid.dv
        ok = np.isfinite(stage) & (v_next >= 0) & (v_next < n_speeds)
        ok &= d_next <= lead.d_lead[k + 1] - margin[k + 1] - veh.d_min - veh.h_min * speed_next + 1e-9
        ok &= d_next >= lead.d_lead[k + 1] + margin[k + 1] - veh.d_max - 1e-9
        if not np.any(ok):
            logger.debug("DP corridor empty at step %s", k + 1)
            return DpResult(status="infeasible", max_states=max_states)

        parent, move, v_next, pos_next = parent[ok], move[ok], v_next[ok], pos_next[ok]
        total = cost[parent] + stage[ok]
        # cheapest path into each (speed, accel, position) state
        order = np.lexsort((total, pos_next, move, v_next))
        keys = np.stack([v_next[order], move[order], pos_next[order]])
        first_of_group = np.ones(order.size, dtype=bool)
        first_of_group[1:] = np.any(keys[:, 1:] != keys[:, :-1], axis=0)
        keep = order[first_of_group]

        vi, ai, pos, cost = v_next[keep], move[keep], pos_next[keep], total[keep]
        stages.append((parent[keep], ai, vi, pos))
        max_states = max(max_states, vi.size)

    d_final = initial.d + grid.dd * pos
    d_z = lead.d_lead[-1] - 2.0 * veh.h_min * lead.v_lead[-1]
    total = cost + weights.w0 * (d_final - d_z) ** 2
    best = int(np.argmin(total))

    path = [best]
    for parent, *_ in reversed(stages[1:]):
        path.append(int(parent[path[-1]]))
    path.reverse()

    v_idx = [v0] + [int(stages[k][2][path[k]]) for k in range(n)]
    moves = [int(stages[k][1][path[k]]) for k in range(n)]
    pos_idx = [0] + [int(stages[k][3][path[k]]) for k in range(n)]
    v_from = np.asarray(v_idx[:-1])
    move = np.asarray(moves)

    p_b = table.p_b[v_from, move]
    gear = table.gear[v_from, move]
    t_m = table.t_m[v_from, move]
    # the SOC trace always uses the map the plant uses
    w_m = np.array([cfg.gears.ratio(int(g)) for g in gear]) * v_from * grid.dv
    p_plant = cfg.battery.p_aux + np.asarray(drive_power_exact(t_m, w_m, cfg.motor)) / cfg.gears.eta_gear
    soc = [initial.soc]
    for p in p_plant:
        i_b = current_from_power(float(p), soc[-1], cfg.battery)
        soc.append(soc[-1] + soc_rate(i_b, cfg.battery) * grid.dt)

    result = DpResult(
        status="optimal",
        objective=float(total[best]),
        d=initial.d + grid.dd * np.asarray(pos_idx, dtype=float),
        v=np.asarray(v_idx) * grid.dv,
        a=levels[move] * grid.a_q,
        gear=gear,
        t_m=t_m,
        f_b=table.f_b[v_from, move],
        p_b=p_b,
        soc=np.asarray(soc),
        max_states=max_states,
    )
    logger.debug("DP %s: objective %.4f, up to %s states per stage", power, result.objective, max_states)
    return result


class OracleComparison(NamedTuple):
    """MIP incumbent against both DP oracles on one instance.

    ``fit_gap`` is the DP objective change caused by the drive-power
    polynomial; ``relaxation_gap`` is what remains between the MIP and the
    polynomial DP.
    """

    mip_objective: float
    dp_fitted: float
    dp_exact: float
    fit_gap: float
    relaxation_gap: float
    relative_gap: float
    mip_status: str


def compare_with_mip(
    initial: VehicleState,
    lead: LeadPrediction,
    horizon_s: float,
    cfg: PowertrainConfig,
    grid: DpGrid = DpGrid(),
    weights: Weights = Weights(),
    limits: SolverLimits = SolverLimits(time_budget_s=30.0),
    form: FormulationConfig = FormulationConfig(),
) -> OracleComparison:
    """Run the MIP and both DP variants on the same instance."""
    n = int(round(horizon_s / grid.dt))
    cycle = CycleInput(state=initial, lead=lead, cfg=cfg, n_steps=n, dt=grid.dt)
    spec = build_problem(cycle, weights, form)
    mip = solve(spec, limits)
    fitted = dp_solve(initial, lead, horizon_s, grid, weights, cfg, power="fitted")
    exact = dp_solve(initial, lead, horizon_s, grid, weights, cfg, power="exact")
    fit_gap = exact.objective - fitted.objective
    relaxation_gap = mip.objective - fitted.objective
    relative = relaxation_gap / max(1.0, abs(fitted.objective))
    return OracleComparison(
        mip_objective=mip.objective,
        dp_fitted=fitted.objective,
        dp_exact=exact.objective,
        fit_gap=fit_gap,
        relaxation_gap=relaxation_gap,
        relative_gap=relative,
        mip_status=mip.status.value,
    )


def dp_batch(
    starts: Sequence[VehicleState],
    lead: LeadPrediction,
    horizon_s: float,
    grid: DpGrid,
    weights: Weights,
    cfg: PowertrainConfig,
    workers: int = 1,
) -> List[DpResult]:
    """Solve from several initial states; results keep the input order."""
    def run(state: VehicleState) -> DpResult:
        return dp_solve(state, lead, horizon_s, grid, weights, cfg)

    if workers <= 1:
        return [run(s) for s in starts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, starts))
