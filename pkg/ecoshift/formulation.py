"""
Mixed-integer formulation of one eco-driving MPC cycle.

``build_problem`` discretises the horizon into ``N`` Euler steps of ``dt``
and composes the encoders below into a ``ProblemSpec``. Per control step
``k < N`` it declares acceleration, motor torque and speed, brake force,
wheel force, the McCormick product, battery power, the v^2 surrogate, one
binary per gear, the two SOS2 weight vectors, the energy-balance slack and
the two car-following slacks; position and speed are declared for
``k <= N``, and the final speed gets its own v^2 surrogate. One free column
carries the terminal deviation.

Census with ``G`` gears and ``B`` speed breakpoints::

    variables = (13 + G + 2B) * N + B + 4
    rows      = (20 + 5G) * N + 2      (+2 when the first jerk is anchored)
    binaries  = G * N
    sos2 sets = 2 * N + 1
    convex piecewise terms = 3 * N + 1

so ``N=50, G=3, B=33`` gives 4137 variables and 1754 rows (anchored).

Quadratic costs (a^2, terminal deviation^2, slack^2) enter as convex
piecewise-linear terms so every relaxation stays a pure LP. Torque limits
are boxed to the envelope extremes with |T_m * w_m| <= P_max kept on the
McCormick column; the plant enforces the exact curves. Over that box the
McCormick envelope alone lets P_m fall far below w_m * T_m, so a penalised
energy-balance row bounds it from below as well.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .battery import battery_power_limits
from .powertrain import GearSet, PowertrainConfig, VehicleState
from .problem import ProblemSpec
from .state_estimation import LeadPrediction

logger = logging.getLogger(__name__)

# energy-balance slack price relative to the energy weight on P_m
ENERGY_SLACK_FACTOR = 10.0


class FormulationError(ValueError):
    """Exception for cycle inputs that cannot be formulated."""


@dataclass(frozen=True)
class Weights:
    """Objective weights and the confidence multiplier on lead uncertainty."""

    w0: float = 1.0
    w1: float = 1e-4
    w2: float = 0.5
    w_max: float = 1e3
    w_min: float = 1e3
    beta: float = 1.0

    def __post_init__(self):
        for name in ("w0", "w1", "w2", "w_max", "w_min", "beta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"Weight {name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class FormulationConfig:
    """Breakpoint resolution of the piecewise-linear pieces."""

    speed_breakpoints: int = 33
    accel_breakpoints: int = 31
    terminal_breakpoints: int = 41
    terminal_span_m: float = 200.0
    slack_breakpoints: int = 21
    slack_span_m: float = 50.0
    anchor_jerk: bool = True

    def __post_init__(self):
        for name in ("speed_breakpoints", "accel_breakpoints", "terminal_breakpoints", "slack_breakpoints"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} needs at least two breakpoints")
        if self.terminal_span_m <= 0 or self.slack_span_m <= 0:
            raise ValueError("Breakpoint spans must be positive")


@dataclass(frozen=True, eq=False)
class CycleInput:
    """Everything one cycle is formulated from.

    The battery is linearised once per cycle: the open-circuit voltage,
    resistance and power limits are evaluated at the cycle-start SOC.
    """

    state: VehicleState
    lead: LeadPrediction
    cfg: PowertrainConfig
    n_steps: int = 50
    dt: float = 0.2
    voc: float = field(init=False)
    r_b: float = field(init=False)
    p_chg: float = field(init=False)
    p_dis: float = field(init=False)

    def __post_init__(self):
        if self.n_steps < 1 or self.dt <= 0:
            raise FormulationError("Horizon needs at least one positive step")
        if self.lead.horizon_s < self.n_steps * self.dt - 1e-9:
            raise FormulationError(
                f"Lead prediction covers {self.lead.horizon_s:.2f} s, "
                f"horizon needs {self.n_steps * self.dt:.2f} s"
            )
        pack = self.cfg.battery
        p_chg, p_dis = battery_power_limits(self.state.soc, pack)
        object.__setattr__(self, "voc", pack.voc(self.state.soc))
        object.__setattr__(self, "r_b", pack.r_b(self.state.soc))
        object.__setattr__(self, "p_chg", p_chg)
        object.__setattr__(self, "p_dis", p_dis)

    @property
    def horizon_s(self) -> float:
        return self.n_steps * self.dt


class BigMBounds(NamedTuple):
    v_max: float
    w_m_ub: float
    f_r_min: float
    f_r_max: float
    t_m_max: float


class McCormickBox(NamedTuple):
    t_lo: float
    t_hi: float
    w_lo: float
    w_hi: float


class StepColumns(NamedTuple):
    """Column indices of one control step."""

    d: int
    v: int
    a: int
    t_m: int
    w_m: int
    f_b: int
    f_r: int
    p_m: int
    p_b: int
    gears: Tuple[int, ...]


def census(n_steps: int, d_g: int, n_breakpoints: int = 33, anchored: bool = True) -> Dict[str, int]:
    """Closed-form size of the problem ``build_problem`` emits."""
    return {
        "variables": (13 + d_g + 2 * n_breakpoints) * n_steps + n_breakpoints + 4,
        "rows": (20 + 5 * d_g) * n_steps + 2 + (2 if anchored else 0),
        "binaries": d_g * n_steps,
        "sos2": 2 * n_steps + 1,
        "piecewise": 3 * n_steps + 1,
    }


def speed_breakpoints(v_lim: float, count: int = 33) -> np.ndarray:
    return np.linspace(0.0, v_lim, count)


def lscp_step(breakpoints: np.ndarray, v_lscp: float, t_m_min: float) -> np.ndarray:
    """Lower torque bound at each breakpoint: 0 up to the cutoff, else the envelope floor."""
    return np.where(np.asarray(breakpoints) <= v_lscp, 0.0, t_m_min)


def encode_gear_bigM(spec: ProblemSpec, step: int, cols: StepColumns, gears: GearSet, bounds: BigMBounds) -> None:
    """Link motor speed and wheel force to the active gear.

    With ``g_i = 1`` the rows pin ``w_m = r_i v`` and ``F_r = r_i T_m``; with
    ``g_i = 0`` they hold for every point of the variable box.
    """
    for i, (g, r) in enumerate(zip(cols.gears, gears.ratios)):
        tag = f"{step},{i + 1}"
        m_speed = r * bounds.v_max
        spec.add_row(f"gear_w_lo[{tag}]", {cols.w_m: 1.0, cols.v: -r, g: -m_speed}, ">=", -m_speed)
        spec.add_row(f"gear_w_hi[{tag}]", {cols.w_m: 1.0, cols.v: -r, g: bounds.w_m_ub}, "<=", bounds.w_m_ub)
        m_hi = bounds.f_r_max + bounds.t_m_max * r
        spec.add_row(f"gear_f_hi[{tag}]", {cols.t_m: r, cols.f_r: -1.0, g: -m_hi}, ">=", -m_hi)
        m_lo = bounds.f_r_min - bounds.t_m_max * r
        spec.add_row(f"gear_f_lo[{tag}]", {cols.t_m: r, cols.f_r: -1.0, g: -m_lo}, "<=", -m_lo)


def encode_sos2_square(spec: ProblemSpec, step: int, v_col: int, breakpoints: Sequence[float]) -> int:
    """SOS2 interpolation of v^2; returns the surrogate column."""
    bp = np.asarray(breakpoints, dtype=float)
    if bp[0] != 0.0 or np.any(np.diff(bp) <= 0):
        raise FormulationError("Speed breakpoints must start at 0 and increase")
    lam = [spec.add_variable(f"lam[{step},{i}]", 0.0, 1.0) for i in range(bp.size)]
    vsq = spec.add_variable(f"vsq[{step}]", 0.0, float(bp[-1] ** 2))
    spec.add_row(f"lam_v[{step}]", [(v_col, -1.0)] + list(zip(lam, bp)), "==", 0.0)
    spec.add_row(f"lam_sq[{step}]", [(vsq, -1.0)] + list(zip(lam, bp ** 2)), "==", 0.0)
    spec.add_row(f"lam_sum[{step}]", [(j, 1.0) for j in lam], "==", 1.0)
    spec.add_sos2(f"sq[{step}]", lam, bp)
    return vsq


def encode_mccormick(spec: ProblemSpec, step: int, t_col: int, w_col: int, p_col: int, box: McCormickBox) -> None:
    """Four envelope rows bounding ``P_m`` by ``w_m * T_m`` over the box."""
    if box.t_lo > box.t_hi or box.w_lo > box.w_hi:
        raise FormulationError(f"Empty McCormick box {box}")
    tl, tu, wl, wu = box
    spec.add_row(f"mc_1[{step}]", {p_col: 1.0, t_col: -wl, w_col: -tl}, ">=", -wl * tl)
    spec.add_row(f"mc_2[{step}]", {p_col: 1.0, t_col: -wu, w_col: -tu}, ">=", -wu * tu)
    spec.add_row(f"mc_3[{step}]", {p_col: 1.0, t_col: -wu, w_col: -tl}, "<=", -wu * tl)
    spec.add_row(f"mc_4[{step}]", {p_col: 1.0, t_col: -wl, w_col: -tu}, "<=", -wl * tu)


def encode_lscp(
    spec: ProblemSpec, step: int, v_col: int, t_col: int, breakpoints: Sequence[float], g_step: Sequence[float]
) -> None:
    """Forbid regenerative torque below the low-speed cutoff.

    Between the last breakpoint under the cutoff and the next one the bound
    is the chord from 0 to the envelope floor.
    """
    bp = np.asarray(breakpoints, dtype=float)
    floor = np.asarray(g_step, dtype=float)
    tau = [spec.add_variable(f"tau[{step},{i}]", 0.0, 1.0) for i in range(bp.size)]
    spec.add_row(f"tau_v[{step}]", [(v_col, -1.0)] + list(zip(tau, bp)), "==", 0.0)
    spec.add_row(f"tau_sum[{step}]", [(j, 1.0) for j in tau], "==", 1.0)
    spec.add_row(f"lscp[{step}]", [(t_col, 1.0)] + [(j, -f) for j, f in zip(tau, floor)], ">=", 0.0)
    spec.add_sos2(f"cut[{step}]", tau, bp)


def encode_regen_bigM(
    spec: ProblemSpec, step: int, cols: StepColumns, gears: GearSet, m: float, a_reg: float, t_m_max: float
) -> None:
    """Cap regenerative wheel torque at ``m * a_reg`` in the active gear."""
    for i, (g, r) in enumerate(zip(cols.gears, gears.ratios)):
        spec.add_row(
            f"regen[{step},{i + 1}]",
            {cols.t_m: r, g: -t_m_max * r},
            ">=",
            m * a_reg - t_m_max * r,
        )


class EnergyTerms(NamedTuple):
    """Constants of the wheel-side energy balance for one cycle."""

    m: float
    dt: float
    c_wind: float
    f_phi: float
    penalty: float


def encode_energy_balance(
    spec: ProblemSpec,
    step: int,
    p_col: int,
    v_col: int,
    vsq_next: int,
    breakpoints: Sequence[float],
    terms: EnergyTerms,
    start_speed: Optional[float] = None,
) -> int:
    """Soft lower bound on ``P_m`` from the wheel-side energy balance.

    In the active gear ``P_m = v F_r`` with ``F_r = m a + F_b + c v^2 + f_phi``.
    Under the Euler update ``m a v_k`` is ``m (v_{k+1}^2 - v_k^2) / (2 dt)``
    less ``m a^2 dt / 2``, so the row

        P_m >= m (vsq_{k+1} - vsq_k) / (2 dt) + c v_k^3 + f_phi v_k - s_k

    over-states the traction power by ``m a^2 dt / 2`` and leaves out the
    friction power ``v F_b``. ``v_k^3`` is read off the v^2 surrogate's SOS2
    weights; with ``start_speed`` the step's speed is fixed and enters as a
    constant. The penalised slack ``s_k`` absorbs launches from standstill,
    where the McCormick rows hold ``P_m <= 0``.

    Returns:
        The slack column
    """
    bp = np.asarray(breakpoints, dtype=float)
    half = terms.m / (2.0 * terms.dt)
    slack = spec.add_variable(f"se[{step}]", 0.0, np.inf)
    coefs = {p_col: 1.0, vsq_next: -half, slack: 1.0}
    if start_speed is None:
        coefs[spec.index(f"vsq[{step}]")] = half
        coefs[v_col] = -terms.f_phi
        for i, b in enumerate(bp):
            coefs[spec.index(f"lam[{step},{i}]")] = -terms.c_wind * b ** 3
        rhs = 0.0
    else:
        v = float(start_speed)
        rhs = -half * v ** 2 + terms.c_wind * v ** 3 + terms.f_phi * v
    spec.add_row(f"energy[{step}]", coefs, ">=", rhs)
    spec.add_objective(slack, terms.penalty)
    return slack


def _square_curve(lo: float, hi: float, count: int) -> Tuple[np.ndarray, np.ndarray]:
    x = np.linspace(lo, hi, count)
    return x, x ** 2


def soften_car_following(
    spec: ProblemSpec,
    steps: Sequence[Tuple[int, int]],
    lead: LeadPrediction,
    weights: Weights,
    cfg: PowertrainConfig,
    form: FormulationConfig = FormulationConfig(),
) -> List[Tuple[int, int]]:
    """Spacing corridor with penalised slacks.

    Args:
        spec: Problem under construction
        steps: (d column, v column) for horizon points 1..N
        lead: Lead prediction on the controller grid
        weights: Slack penalties and confidence multiplier
        cfg: Powertrain configuration (spacing constants)
        form: Slack breakpoint resolution

    Returns:
        (s_max column, s_min column) per horizon point
    """
    veh = cfg.vehicle
    slack_x, slack_y = _square_curve(0.0, form.slack_span_m, form.slack_breakpoints)
    slacks = []
    for k, (d_col, v_col) in enumerate(steps, start=1):
        margin = weights.beta * float(lead.sigma_d[k])
        d_lead = float(lead.d_lead[k])
        s_max = spec.add_variable(f"smax[{k}]", 0.0, np.inf)
        s_min = spec.add_variable(f"smin[{k}]", 0.0, np.inf)
        spec.add_row(f"follow_far[{k}]", {d_col: 1.0, s_max: 1.0}, ">=", d_lead + margin - veh.d_max)
        spec.add_row(
            f"follow_near[{k}]",
            {d_col: 1.0, v_col: veh.h_min, s_min: -1.0},
            "<=",
            d_lead - margin - veh.d_min,
        )
        spec.add_piecewise_cost(f"pen_max[{k}]", s_max, slack_x, slack_y, weights.w_max)
        spec.add_piecewise_cost(f"pen_min[{k}]", s_min, slack_x, slack_y, weights.w_min)
        slacks.append((s_max, s_min))
    return slacks


def build_problem(
    cycle: CycleInput,
    weights: Weights = Weights(),
    form: FormulationConfig = FormulationConfig(),
    anchor_jerk: Optional[bool] = None,
) -> ProblemSpec:
    """Formulate one MPC cycle.

    Args:
        cycle: Frozen cycle inputs
        weights: Objective weights
        form: Breakpoint resolution
        anchor_jerk: Bound the first acceleration change against the last
            applied acceleration; defaults to ``form.anchor_jerk``

    Returns:
        ProblemSpec ready for the branch-and-bound solver
    """
    cfg, veh, gears, motor = cycle.cfg, cycle.cfg.vehicle, cycle.cfg.gears, cycle.cfg.motor
    n, dt = cycle.n_steps, cycle.dt
    anchored = form.anchor_jerk if anchor_jerk is None else anchor_jerk
    lead = cycle.lead.resample(dt, n)
    spec = ProblemSpec()

    v0 = min(max(cycle.state.v, 0.0), veh.v_lim)
    v_reach = min(veh.v_lim, v0 + veh.a_max * n * dt)
    t_box = motor.t_peak
    w_ub = min(motor.w_max, gears.r_max * veh.v_lim)
    bigm = BigMBounds(
        v_max=veh.v_lim,
        w_m_ub=w_ub,
        f_r_min=-t_box * gears.r_max,
        f_r_max=t_box * gears.r_max,
        t_m_max=t_box,
    )
    box = McCormickBox(-t_box, t_box, 0.0, min(w_ub, gears.r_max * v_reach))
    bp = speed_breakpoints(veh.v_lim, form.speed_breakpoints)
    floor = lscp_step(bp, veh.v_lscp, -t_box)
    f_phi = veh.f_phi(cycle.state.d)
    fit = motor.fit

    d_cols = [spec.add_variable("d[0]", cycle.state.d, cycle.state.d)]
    v_cols = [spec.add_variable("v[0]", v0, v0)]
    step_cols: List[StepColumns] = []
    accel_x, accel_y = _square_curve(veh.a_min, veh.a_max, form.accel_breakpoints)

    for k in range(n):
        a = spec.add_variable(f"a[{k}]", veh.a_min, veh.a_max)
        t_m = spec.add_variable(f"Tm[{k}]", -t_box, t_box)
        w_m = spec.add_variable(f"wm[{k}]", 0.0, w_ub)
        f_b = spec.add_variable(f"Fb[{k}]", 0.0, veh.f_b_max)
        f_r = spec.add_variable(f"Fr[{k}]", bigm.f_r_min, bigm.f_r_max)
        p_m = spec.add_variable(f"Pm[{k}]", -motor.p_max, motor.p_max)
        p_b = spec.add_variable(f"Pb[{k}]", cycle.p_chg, cycle.p_dis)
        g = tuple(spec.add_variable(f"g[{k},{i + 1}]", 0.0, 1.0, binary=True) for i in range(gears.d_g))
        d_next = spec.add_variable(f"d[{k + 1}]", -np.inf, np.inf)
        v_next = spec.add_variable(f"v[{k + 1}]", 0.0, veh.v_lim)
        cols = StepColumns(d_cols[k], v_cols[k], a, t_m, w_m, f_b, f_r, p_m, p_b, g)

        spec.add_row(f"pos[{k}]", {d_next: 1.0, cols.d: -1.0, cols.v: -dt}, "==", 0.0)
        spec.add_row(f"vel[{k}]", {v_next: 1.0, cols.v: -1.0, a: -dt}, "==", 0.0)
        spec.add_row(f"gear_one[{k}]", [(j, 1.0) for j in g], "==", 1.0)

        vsq = encode_sos2_square(spec, k, cols.v, bp)
        spec.add_row(
            f"force[{k}]",
            {a: veh.m, f_r: -1.0, f_b: 1.0, vsq: veh.c_wind},
            "==",
            -f_phi,
        )
        encode_gear_bigM(spec, k, cols, gears, bigm)
        encode_mccormick(spec, k, t_m, w_m, p_m, box)
        # P_b = P_aux + (p00 + p10 w + p01 T + p11 P_m) / eta
        eta = gears.eta_gear
        spec.add_row(
            f"power[{k}]",
            {p_b: 1.0, w_m: -fit.p10 / eta, t_m: -fit.p01 / eta, p_m: -fit.p11 / eta},
            "==",
            cfg.battery.p_aux + fit.p00 / eta,
        )
        encode_lscp(spec, k, cols.v, t_m, bp, floor)
        encode_regen_bigM(spec, k, cols, gears, veh.m, veh.a_reg, t_box)

        spec.add_objective(p_b, weights.w1 * dt)
        spec.add_piecewise_cost(f"comfort[{k}]", a, accel_x, accel_y, weights.w2 * dt)

        d_cols.append(d_next)
        v_cols.append(v_next)
        step_cols.append(cols)

    vsq_last = encode_sos2_square(spec, n, v_cols[n], bp)
    energy = EnergyTerms(
        m=veh.m,
        dt=dt,
        c_wind=veh.c_wind,
        f_phi=f_phi,
        penalty=ENERGY_SLACK_FACTOR * weights.w1 * dt * abs(fit.p11) / gears.eta_gear,
    )
    for k, cols in enumerate(step_cols):
        vsq_next = vsq_last if k == n - 1 else spec.index(f"vsq[{k + 1}]")
        start = v0 if k == 0 else None
        encode_energy_balance(spec, k, cols.p_m, cols.v, vsq_next, bp, energy, start_speed=start)

    for k in range(n - 1):
        jerk = {step_cols[k + 1].a: 1.0, step_cols[k].a: -1.0}
        spec.add_row(f"jerk_lo[{k}]", jerk, ">=", veh.j_min * dt)
        spec.add_row(f"jerk_hi[{k}]", jerk, "<=", veh.j_max * dt)
    if anchored:
        a_prev = min(max(cycle.state.a, veh.a_min), veh.a_max)
        spec.add_row("jerk_lo[start]", {step_cols[0].a: 1.0}, ">=", a_prev + veh.j_min * dt)
        spec.add_row("jerk_hi[start]", {step_cols[0].a: 1.0}, "<=", a_prev + veh.j_max * dt)

    soften_car_following(spec, list(zip(d_cols[1:], v_cols[1:])), lead, weights, cfg, form)

    d_z = float(lead.d_lead[-1] - 2.0 * veh.h_min * lead.v_lead[-1])
    dev = spec.add_variable("dev", -np.inf, np.inf)
    spec.add_row("terminal", {dev: 1.0, d_cols[-1]: -1.0}, "==", -d_z)
    span = form.terminal_span_m
    dev_x, dev_y = _square_curve(-span, span, form.terminal_breakpoints)
    spec.add_piecewise_cost("terminal_cost", dev, dev_x, dev_y, weights.w0)

    logger.debug(
        "Built cycle problem: %d variables, %d rows, %d binaries, terminal target %.1f m",
        spec.n_vars,
        len(spec.rows),
        len(spec.binaries),
        d_z,
    )
    return spec


def decode_solution(spec: ProblemSpec, x: np.ndarray, n_steps: int, d_g: int) -> Dict[str, np.ndarray]:
    """Per-step arrays of a structural solution vector.

    Returns:
        Dictionary with ``d`` and ``v`` (N+1 points), ``a``, ``t_m``, ``w_m``,
        ``f_b``, ``p_b``, ``gear`` (1-based), ``s_max`` and ``s_min`` (N points)
    """
    def column(prefix: str, start: int, stop: int) -> np.ndarray:
        return np.array([x[spec.index(f"{prefix}[{k}]")] for k in range(start, stop)])

    weights = np.array(
        [[x[spec.index(f"g[{k},{i + 1}]")] for i in range(d_g)] for k in range(n_steps)]
    )
    return {
        "d": column("d", 0, n_steps + 1),
        "v": column("v", 0, n_steps + 1),
        "a": column("a", 0, n_steps),
        "t_m": column("Tm", 0, n_steps),
        "w_m": column("wm", 0, n_steps),
        "f_b": column("Fb", 0, n_steps),
        "p_b": column("Pb", 0, n_steps),
        "gear": np.argmax(weights, axis=1) + 1,
        "s_max": column("smax", 1, n_steps + 1),
        "s_min": column("smin", 1, n_steps + 1),
    }


def gear_hint(spec: ProblemSpec, gears: Sequence[int], d_g: int) -> np.ndarray:
    """Structural vector with only the gear binaries set (others NaN)."""
    hint = np.full(spec.n_vars, np.nan)
    for k, gear in enumerate(gears):
        for i in range(d_g):
            hint[spec.index(f"g[{k},{i + 1}]")] = 1.0 if gear == i + 1 else 0.0
    return hint
