"""
Receding-horizon eco-driving controller for ecoshift.

Every replan period the controller freezes the battery at the current SOC,
predicts the preceding vehicle, formulates and solves one cycle, and applies
the first replan period of the plan to the plant after projecting each
control onto the exact plant limits. When the solver returns no incumbent the
previous plan is shifted; once that runs out the vehicle brakes at ``a_reg``
with regeneration first.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from .battery import BatteryPowerError, battery_power_limits
from .formulation import (
    CycleInput,
    FormulationConfig,
    Weights,
    build_problem,
    decode_solution,
    gear_hint,
)
from .mip_solver import MipStatus, SolverLimits, solve
from .motor_map import MotorEnvelopeError, drive_power_exact
from .powertrain import Controls, PowertrainConfig, VehicleState, power_flow, simulate_step
from .state_estimation import CvMeasurement, LeadPrediction, TrafficEstimator
from .traffic_flow import SignalPlan

logger = logging.getLogger(__name__)

LOG_COLUMNS = [
    "t_s",
    "d_m",
    "v_mps",
    "a_mps2",
    "gear",
    "Tm_Nm",
    "Fb_N",
    "Pb_W",
    "SOC",
    "s_max_m",
    "s_min_m",
    "solve_ms",
    "gap",
]

PROJECTION_WARN = 0.05
ACCEL_TOL = 1e-6


class EpisodeAborted(RuntimeError):
    """Exception for an episode the plant could not continue.

    The partial log is attached as ``log``.
    """

    def __init__(self, message: str, log: "EpisodeLog"):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class ControllerConfig:
    horizon_s: float = 10.0
    dt: float = 0.2
    replan_s: float = 1.0
    limits: SolverLimits = field(default_factory=SolverLimits)
    weights: Weights = field(default_factory=Weights)
    formulation: FormulationConfig = field(default_factory=FormulationConfig)
    variant: str = "three-speed"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("Control step must be positive")
        ratio = self.replan_s / self.dt
        if ratio < 1 or not math.isclose(ratio, round(ratio), abs_tol=1e-9):
            raise ValueError(f"Replan period {self.replan_s} s is not a multiple of dt {self.dt} s")
        if self.horizon_s < self.replan_s:
            raise ValueError("Horizon must cover at least one replan period")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon_s / self.dt))

    @property
    def steps_per_replan(self) -> int:
        return int(round(self.replan_s / self.dt))


@dataclass(frozen=True, eq=False)
class CyclePlan:
    """Per-step controls of one cycle plus its solve summary.

    ``fallback`` is empty for solved plans, ``"shifted"`` for a reused
    previous plan and ``"regen-brake"`` for the braking fallback, whose
    controls are computed from the state at application time.
    """

    d: np.ndarray
    v: np.ndarray
    a: np.ndarray
    t_m: np.ndarray
    f_b: np.ndarray
    gear: np.ndarray
    p_b: np.ndarray
    s_max: np.ndarray
    s_min: np.ndarray
    status: str = MipStatus.OPTIMAL.value
    objective: float = float("nan")
    gap: float = float("nan")
    nodes: int = 0
    solve_ms: float = 0.0
    fallback: str = ""
    anchored: bool = True

    @property
    def n_steps(self) -> int:
        return self.a.size

    def shifted(self, steps: int) -> "CyclePlan":
        """Drop the first ``steps`` steps and pad by repeating the last one."""
        def shift(values: np.ndarray, points: int) -> np.ndarray:
            tail = values[steps:]
            pad = np.repeat(values[-1:], points - tail.size)
            return np.concatenate([tail, pad])

        n = self.n_steps
        return CyclePlan(
            d=shift(self.d, n + 1),
            v=shift(self.v, n + 1),
            a=shift(self.a, n),
            t_m=shift(self.t_m, n),
            f_b=shift(self.f_b, n),
            gear=shift(self.gear, n),
            p_b=shift(self.p_b, n),
            s_max=shift(self.s_max, n),
            s_min=shift(self.s_min, n),
            status=self.status,
            objective=self.objective,
            gap=self.gap,
            fallback="shifted",
            anchored=self.anchored,
        )

    @classmethod
    def regen_brake(cls, n_steps: int, status: str, solve_ms: float) -> "CyclePlan":
        zeros = np.zeros(n_steps)
        return cls(
            d=np.zeros(n_steps + 1),
            v=np.zeros(n_steps + 1),
            a=zeros,
            t_m=zeros,
            f_b=zeros,
            gear=np.ones(n_steps, dtype=int),
            p_b=zeros,
            s_max=zeros,
            s_min=zeros,
            status=status,
            solve_ms=solve_ms,
            fallback="regen-brake",
        )


def _feasible_gear(v: float, gear: int, cfg: PowertrainConfig) -> int:
    """``gear`` if the motor can spin at ``v`` in it, else the largest ratio that can."""
    gears, motor = cfg.gears, cfg.motor
    if gears.ratio(gear) * v <= motor.w_max:
        return gear
    allowed = [g for g in range(1, gears.d_g + 1) if gears.ratio(g) * v <= motor.w_max]
    if not allowed:
        raise MotorEnvelopeError(f"No gear keeps the motor under {motor.w_max} rad/s at {v:.2f} m/s")
    return max(allowed, key=gears.ratio)


def regen_brake_controls(state: VehicleState, cfg: PowertrainConfig, dt: float) -> Controls:
    """Ramp the deceleration toward ``a_reg`` within the jerk limits.

    Regenerative torque is used first and friction covers the rest.
    """
    veh = cfg.vehicle
    gear = _feasible_gear(state.v, max(state.gear, 1), cfg)
    if state.v <= 0:
        return Controls(t_m=0.0, f_b=0.0, gear=gear)
    r = cfg.gears.ratio(gear)
    target = min(max(veh.a_reg, state.a + veh.j_min * dt), state.a + veh.j_max * dt)
    needed = veh.m * target + veh.f_phi(state.d) + veh.c_wind * state.v ** 2
    t_m = max(needed / r, cfg.motor.t_min(r * state.v))
    if state.v <= veh.v_lscp:
        t_m = max(t_m, 0.0)
    return Controls(t_m=t_m, f_b=max(t_m * r - needed, 0.0), gear=gear)


def _limit_acceleration(state: VehicleState, traction: float, f_b: float, dt: float, cfg: PowertrainConfig) -> float:
    """Friction force that keeps the next acceleration within the upper limits."""
    veh = cfg.vehicle
    a_hi = min(veh.a_max, state.a + veh.j_max * dt)
    a_lo = max(veh.a_min, state.a + veh.j_min * dt)
    a = (traction - f_b - veh.f_phi(state.d) - veh.c_wind * state.v ** 2) / veh.m
    if a > a_hi + ACCEL_TOL:
        f_b = min(f_b + (a - a_hi) * veh.m, veh.f_b_max)
        logger.debug("Added %.1f N of friction to hold acceleration at %.3f m/s^2", (a - a_hi) * veh.m, a_hi)
    elif a < a_lo - ACCEL_TOL and state.v > 0:
        logger.warning("Projected acceleration %.3f m/s^2 is below the limit %.3f m/s^2", a, a_lo)
    return f_b


def project_controls(
    state: VehicleState, controls: Controls, cfg: PowertrainConfig, dt: Optional[float] = None
) -> Tuple[Controls, float]:
    """Enforce the exact plant limits on commanded controls.

    Clips torque to the speed-dependent envelope, removes regenerative
    torque below the low-speed cutoff and beyond the ``a_reg`` cap, and
    scales torque into the battery power window. Braking torque removed from
    the motor moves to the friction brake. With ``dt`` the resulting
    acceleration is checked against the acceleration and jerk limits:
    friction is added when it is too high, and a warning is logged when it
    is too low, since braking is never released.

    Returns:
        Projected controls and the torque change as a fraction of the
        envelope width at the current motor speed
    """
    veh, motor = cfg.vehicle, cfg.motor
    gear = _feasible_gear(state.v, int(controls.gear), cfg)
    r = cfg.gears.ratio(gear)
    w_m = r * state.v
    t_hi = motor.t_max(w_m)
    t_lo = -t_hi

    t_m = min(max(controls.t_m, t_lo), t_hi)
    if state.v <= veh.v_lscp:
        t_m = max(t_m, 0.0)
    t_m = max(t_m, veh.m * veh.a_reg / r)

    p_chg, p_dis = battery_power_limits(state.soc, cfg.battery)

    def battery_power(torque: float) -> float:
        return cfg.battery.p_aux + drive_power_exact(torque, w_m, motor) / cfg.gears.eta_gear

    margin = 1e-6 * max(abs(p_dis), abs(p_chg))
    if battery_power(t_m) > p_dis - margin:
        t_m = brentq(lambda q: battery_power(q) - (p_dis - margin), 0.0, t_m, xtol=1e-9)
    elif battery_power(t_m) < p_chg + margin:
        t_m = brentq(lambda q: battery_power(q) - (p_chg + margin), t_m, 0.0, xtol=1e-9)

    f_b = max(controls.f_b, 0.0)
    if t_m > controls.t_m:
        f_b += (min(t_m, 0.0) - min(controls.t_m, 0.0)) * r
    f_b = min(f_b, veh.f_b_max)

    if dt is not None:
        f_b = _limit_acceleration(state, t_m * r, f_b, dt, cfg)

    distance = abs(t_m - controls.t_m) / max(t_hi - t_lo, 1e-9)
    if distance > PROJECTION_WARN:
        logger.warning(
            "Projection moved torque %.1f -> %.1f N*m (%.1f%% of range)",
            controls.t_m,
            t_m,
            100.0 * distance,
        )
    return Controls(t_m=float(t_m), f_b=float(f_b), gear=gear), float(distance)


@dataclass
class EcoDrivingController:
    """Owns the previous plan for warm starts and fallbacks."""

    cfg: PowertrainConfig
    config: ControllerConfig = field(default_factory=ControllerConfig)
    previous: Optional[CyclePlan] = None
    _shifts_left: int = 0

    def _warm_gears(self) -> Optional[List[int]]:
        if self.previous is None or self.previous.fallback == "regen-brake":
            return None
        return [int(g) for g in self.previous.shifted(self.config.steps_per_replan).gear]

    def _solve(self, cycle: CycleInput, anchored: bool):
        spec = build_problem(cycle, self.config.weights, self.config.formulation, anchor_jerk=anchored)
        gears = self._warm_gears()
        hint = gear_hint(spec, gears, self.cfg.gears.d_g) if gears else None
        return spec, solve(spec, self.config.limits, warm_start=hint)

    def run_cycle(self, state: VehicleState, lead: LeadPrediction) -> CyclePlan:
        """Plan one horizon from ``state`` against the lead prediction."""
        config = self.config
        cycle = CycleInput(state=state, lead=lead, cfg=self.cfg, n_steps=config.n_steps, dt=config.dt)
        anchored = config.formulation.anchor_jerk
        spec, result = self._solve(cycle, anchored)
        elapsed = result.wall_time_s
        if not result.has_incumbent and result.status is MipStatus.INFEASIBLE and anchored:
            logger.info("Jerk-anchored cycle infeasible at d=%.1f m; retrying unanchored", state.d)
            anchored = False
            spec, result = self._solve(cycle, anchored)
            elapsed += result.wall_time_s

        if result.has_incumbent:
            values = decode_solution(spec, result.x, config.n_steps, self.cfg.gears.d_g)
            plan = CyclePlan(
                d=values["d"],
                v=values["v"],
                a=values["a"],
                t_m=values["t_m"],
                f_b=values["f_b"],
                gear=values["gear"],
                p_b=values["p_b"],
                s_max=values["s_max"],
                s_min=values["s_min"],
                status=result.status.value,
                objective=result.objective,
                gap=result.gap,
                nodes=result.nodes,
                solve_ms=1e3 * elapsed,
                anchored=anchored,
            )
            self._shifts_left = config.n_steps // config.steps_per_replan - 1
        elif self.previous is not None and self.previous.fallback != "regen-brake" and self._shifts_left > 0:
            logger.warning("No incumbent (%s); reusing the previous plan shifted", result.status.value)
            plan = self.previous.shifted(config.steps_per_replan)
            plan = replace(plan, status=result.status.value, solve_ms=1e3 * elapsed)
            self._shifts_left -= 1
        else:
            logger.warning("No incumbent (%s) and no plan left; braking at a_reg", result.status.value)
            plan = CyclePlan.regen_brake(config.n_steps, result.status.value, 1e3 * elapsed)

        logger.info(
            "Cycle at d=%.1f m: %s objective %.3f gap %.2e nodes %s in %.0f ms%s",
            state.d,
            plan.status,
            plan.objective,
            plan.gap,
            plan.nodes,
            plan.solve_ms,
            f" [{plan.fallback}]" if plan.fallback else "",
        )
        self.previous = plan
        return plan


class TrafficFeed(Protocol):
    """Source of the preceding vehicle and connected-vehicle reports."""

    dt: float
    plans: Sequence[SignalPlan]

    def lead_state(self, k: int) -> Tuple[float, float]:
        ...

    def measurements(self, k: int) -> List[CvMeasurement]:
        ...


@dataclass
class EpisodeLog:
    """Per-step history of one episode."""

    variant: str
    rows: List[Dict[str, float]] = field(default_factory=list)
    final_state: Optional[VehicleState] = None
    plans: List[CyclePlan] = field(default_factory=list)
    projections: List[float] = field(default_factory=list)
    aborted: str = ""

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows)
        if frame.empty:
            return pd.DataFrame(columns=LOG_COLUMNS + ["lead_d_m", "lead_v_mps"])
        return frame

    def to_csv(self, path) -> None:
        """Write the episode schema columns."""
        self.to_frame()[LOG_COLUMNS].to_csv(path, index=False, float_format="%.6g")

    @property
    def completed(self) -> bool:
        return not self.aborted


def _prediction(
    estimator: Optional[TrafficEstimator], lead_d: float, lead_v: float, horizon_s: float, dt: float
) -> LeadPrediction:
    if estimator is None:
        return LeadPrediction.constant_speed(lead_d, lead_v, horizon_s, dt)
    estimator.reanchor(lead_d)
    return estimator.predict_lead(lead_d, lead_v, horizon_s)


def run_episode(
    feed: TrafficFeed,
    cfg: PowertrainConfig,
    config: ControllerConfig,
    initial: VehicleState,
    duration_s: float,
    estimator: Optional[TrafficEstimator] = None,
) -> EpisodeLog:
    """Close the loop between controller, plant and traffic for ``duration_s``.

    Args:
        feed: Preceding vehicle and connected-vehicle reports on the traffic step
        cfg: Powertrain variant
        config: Controller settings
        initial: Ego state at t=0
        duration_s: Episode length (s)
        estimator: Traffic estimator; None predicts the lead at constant speed

    Returns:
        EpisodeLog with one row per control step

    Raises:
        EpisodeAborted: the plant rejected a control (battery or motor limit)
    """
    log = EpisodeLog(variant=cfg.name)
    controller = EcoDrivingController(cfg, config)
    n_control = int(round(duration_s / config.dt))
    sub_steps = int(round(config.dt / feed.dt))
    if not math.isclose(sub_steps * feed.dt, config.dt, rel_tol=1e-9):
        raise ValueError(f"Control step {config.dt} s is not a multiple of the traffic step {feed.dt} s")

    if estimator is not None:
        lead_d, lead_v = feed.lead_state(0)
        estimator.initialize(lead_d, lead_v, k=0)

    state = initial
    plan: Optional[CyclePlan] = None
    for i in range(n_control):
        t = i * config.dt
        k = i * sub_steps
        lead_d, lead_v = feed.lead_state(k)
        index = i % config.steps_per_replan
        if index == 0:
            prediction = _prediction(estimator, lead_d, lead_v, config.horizon_s, feed.dt)
            plan = controller.run_cycle(state, prediction)
            log.plans.append(plan)

        if plan.fallback == "regen-brake":
            commanded = regen_brake_controls(state, cfg, config.dt)
        else:
            commanded = Controls(t_m=float(plan.t_m[index]), f_b=float(plan.f_b[index]), gear=int(plan.gear[index]))

        try:
            controls, distance = project_controls(state, commanded, cfg, config.dt)
            flow = power_flow(state, controls, cfg)
            next_state = simulate_step(state, controls, config.dt, cfg)
        except (BatteryPowerError, MotorEnvelopeError) as e:
            log.aborted = f"{type(e).__name__}: {e}"
            log.final_state = state
            logger.error("Episode %s aborted at t=%.1f s: %s", cfg.name, t, e)
            raise EpisodeAborted(log.aborted, log) from e

        log.projections.append(distance)
        log.rows.append({
            "t_s": t,
            "d_m": state.d,
            "v_mps": state.v,
            "a_mps2": next_state.a,
            "gear": controls.gear,
            "Tm_Nm": controls.t_m,
            "Fb_N": controls.f_b,
            "Pb_W": flow.p_b,
            "SOC": state.soc,
            "s_max_m": float(plan.s_max[index]),
            "s_min_m": float(plan.s_min[index]),
            "solve_ms": plan.solve_ms if index == 0 else 0.0,
            "gap": plan.gap if index == 0 else float("nan"),
            "lead_d_m": lead_d,
            "lead_v_mps": lead_v,
        })
        state = next_state

        if estimator is not None:
            for sub in range(sub_steps):
                lead_now, _ = feed.lead_state(k + sub)
                estimator.reanchor(lead_now)
                estimator.advance(feed.measurements(k + sub + 1))

    log.final_state = state
    logger.info("Episode %s finished: %d steps, %.1f m", cfg.name, len(log.rows), state.d - initial.d)
    return log
