"""
Ego-vehicle plant for ecoshift.

Longitudinal dynamics with a lumped gear ratio, exact motor-map drive power,
an internal-resistance battery and SOC integration, plus the gear-ratio design
audit (gradeability at the largest ratio, top speed at the smallest).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Tuple

import numpy as np

from .battery import BatteryPack, current_from_power, soc_rate
from .motor_map import MotorEnvelopeError, MotorMap, drive_power_exact

logger = logging.getLogger(__name__)

GRAVITY = 9.81


@dataclass(frozen=True)
class VehicleParams:
    """Vehicle body, limits and car-following constants.

    ``grade_points`` holds (position m, slope rad) pairs interpolated along
    the road; empty means flat.
    """

    m: float = 1848.0
    g: float = GRAVITY
    mu: float = 0.01
    c_wind: float = 0.42
    grade_points: Tuple[Tuple[float, float], ...] = ()
    v_lim: float = 32.0
    a_min: float = -4.0
    a_max: float = 3.0
    j_min: float = -3.0
    j_max: float = 3.0
    h_min: float = 1.5
    d_min: float = 5.0
    d_max: float = 40.0
    v_lscp: float = 10.0 / 3.6
    a_reg: float = -0.2 * GRAVITY
    design_grade_rad: float = math.atan(0.3)
    v_max_design: float = 35.0

    def __post_init__(self):
        if self.m <= 0:
            raise ValueError("Vehicle mass must be positive")
        if not self.a_min < 0 < self.a_max:
            raise ValueError(f"Need a_min < 0 < a_max, got {self.a_min}, {self.a_max}")
        if not self.j_min < 0 < self.j_max:
            raise ValueError(f"Need j_min < 0 < j_max, got {self.j_min}, {self.j_max}")
        if not self.d_min < self.d_max:
            raise ValueError("d_min must be below d_max")
        if self.a_reg >= 0:
            raise ValueError("a_reg must be negative")
        if self.v_lim <= 0 or self.v_lscp < 0:
            raise ValueError("Speed limits must be positive")

    def slope(self, d: float) -> float:
        if not self.grade_points:
            return 0.0
        positions, angles = zip(*self.grade_points)
        return float(np.interp(d, positions, angles))

    def f_phi(self, d: float) -> float:
        """Grade plus rolling resistance (N) at position ``d``."""
        phi = self.slope(d)
        return self.m * self.g * (math.sin(phi) + self.mu * math.cos(phi))

    @property
    def f_phi_max(self) -> float:
        phi = self.design_grade_rad
        return self.m * self.g * (math.sin(phi) + self.mu * math.cos(phi))

    @property
    def f_b_max(self) -> float:
        """Hydraulic brake force bound sufficient for a_min at any speed."""
        return self.m * -self.a_min + self.c_wind * self.v_lim ** 2


@dataclass(frozen=True)
class GearSet:
    """Lumped gear ratios (motor rad/s per vehicle m/s) and driveline efficiency."""

    ratios: Tuple[float, ...]
    eta_gear: float

    def __post_init__(self):
        ratios = tuple(float(r) for r in self.ratios)
        object.__setattr__(self, "ratios", ratios)
        if not ratios:
            raise ValueError("A gear set needs at least one ratio")
        if any(r <= 0 for r in ratios):
            raise ValueError("Gear ratios must be positive")
        steps = np.diff(ratios)
        if steps.size and not (np.all(steps > 0) or np.all(steps < 0)):
            raise ValueError(f"Gear ratios must be strictly monotone, got {ratios}")
        if not 0 < self.eta_gear <= 1:
            raise ValueError(f"eta_gear must lie in (0, 1], got {self.eta_gear}")

    @property
    def d_g(self) -> int:
        return len(self.ratios)

    @property
    def r_min(self) -> float:
        return min(self.ratios)

    @property
    def r_max(self) -> float:
        return max(self.ratios)

    def ratio(self, gear: int) -> float:
        """Ratio of 1-based ``gear``."""
        if not 1 <= gear <= self.d_g:
            raise ValueError(f"Gear {gear} outside 1..{self.d_g}")
        return self.ratios[gear - 1]


@dataclass(frozen=True)
class PowertrainConfig:
    """Everything the plant needs for one transmission variant."""

    name: str
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    gears: GearSet = field(default_factory=lambda: GearSet((23.6,), 0.93))
    motor: MotorMap = field(default_factory=MotorMap.synthetic)
    battery: BatteryPack = field(default_factory=BatteryPack.synthetic)


class VehicleState(NamedTuple):
    """Ego state: position, speed, SOC, 1-based gear and last acceleration."""

    d: float
    v: float
    soc: float
    gear: int = 1
    a: float = 0.0


class Controls(NamedTuple):
    t_m: float
    f_b: float
    gear: int


class PowerFlow(NamedTuple):
    """Electrical quantities of one plant step."""

    w_m: float
    p_drv: float
    p_b: float
    i_b: float


def power_flow(state: VehicleState, controls: Controls, cfg: PowertrainConfig) -> PowerFlow:
    """Motor speed, drive power, battery power and current for ``controls``.

    Raises:
        MotorEnvelopeError: torque or speed outside the motor envelope
        BatteryPowerError: power beyond what the pack can deliver
    """
    r = cfg.gears.ratio(controls.gear)
    w_m = r * state.v
    if w_m > cfg.motor.w_max + 1e-9:
        raise MotorEnvelopeError(
            f"Motor speed {w_m:.1f} rad/s exceeds {cfg.motor.w_max:.1f} in gear {controls.gear}"
        )
    p_drv = drive_power_exact(controls.t_m, w_m, cfg.motor)
    p_b = cfg.battery.p_aux + p_drv / cfg.gears.eta_gear
    i_b = current_from_power(p_b, state.soc, cfg.battery)
    return PowerFlow(w_m=w_m, p_drv=p_drv, p_b=p_b, i_b=i_b)


def simulate_step(
    state: VehicleState, controls: Controls, dt: float, cfg: PowertrainConfig
) -> VehicleState:
    """Advance the plant by ``dt`` with explicit Euler.

    Args:
        state: Current vehicle state
        controls: Motor torque (N*m), brake force (N) and 1-based gear
        dt: Step (s)
        cfg: Powertrain configuration

    Returns:
        Next VehicleState; the recorded acceleration is the realised one
        after flooring the speed at zero
    """
    if controls.f_b < -1e-9:
        raise ValueError(f"Brake force must be non-negative, got {controls.f_b}")
    veh = cfg.vehicle
    flow = power_flow(state, controls, cfg)

    r = cfg.gears.ratio(controls.gear)
    traction = controls.t_m * r
    resistance = veh.f_phi(state.d) + veh.c_wind * state.v ** 2
    a = (traction - max(controls.f_b, 0.0) - resistance) / veh.m

    v_next = max(state.v + a * dt, 0.0)
    d_next = state.d + state.v * dt
    soc_next = state.soc + soc_rate(flow.i_b, cfg.battery) * dt
    if not 0.0 <= soc_next <= 1.0:
        logger.warning("SOC %.6f left [0, 1]; clamping", soc_next)
        soc_next = min(max(soc_next, 0.0), 1.0)

    return VehicleState(
        d=d_next,
        v=v_next,
        soc=soc_next,
        gear=controls.gear,
        a=(v_next - state.v) / dt,
    )


def cruise_torque(v: float, d: float, gear: int, cfg: PowertrainConfig) -> float:
    """Torque that holds speed ``v`` on the road at ``d``."""
    veh = cfg.vehicle
    return (veh.f_phi(d) + veh.c_wind * v ** 2) / cfg.gears.ratio(gear)


def torque_for_accel(state: VehicleState, a: float, gear: int, cfg: PowertrainConfig) -> float:
    """Motor torque giving acceleration ``a`` with no hydraulic braking."""
    veh = cfg.vehicle
    force = veh.m * a + veh.f_phi(state.d) + veh.c_wind * state.v ** 2
    return force / cfg.gears.ratio(gear)


class GearDesignCheck(NamedTuple):
    passed: bool
    grade_margin_n: float
    speed_margin_mps: float


def check_gear_design(gears: GearSet, cfg: PowertrainConfig) -> GearDesignCheck:
    """Audit a gear set for gradeability and top speed.

    The largest ratio must climb the design grade at peak torque through the
    driveline, and the smallest ratio must reach the design top speed within
    the motor speed limit.
    """
    veh = cfg.vehicle
    grade_margin = cfg.motor.t_peak * gears.r_max * gears.eta_gear - veh.f_phi_max
    speed_margin = cfg.motor.w_max / gears.r_min - veh.v_max_design
    passed = grade_margin >= 0 and speed_margin >= 0
    if not passed:
        logger.warning(
            "Gear set %s fails design check: grade margin %.1f N, speed margin %.2f m/s",
            gears.ratios,
            grade_margin,
            speed_margin,
        )
    return GearDesignCheck(
        passed=passed, grade_margin_n=grade_margin, speed_margin_mps=speed_margin
    )
