"""
Scenario loading and traffic generation for ecoshift.

A scenario is a YAML file describing the road section, its fixed-time
signals and a platoon of traffic vehicles ahead of the ego vehicle, or a
recorded trace of the immediate preceding vehicle in CSV form. The generator
drives a signal-obeying head vehicle with constant-time-headway followers
behind it; the last follower is the ego vehicle's lead.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import yaml
from scipy.ndimage import gaussian_filter1d

from .powertrain import VehicleParams, VehicleState
from .state_estimation import CvMeasurement, LeadPrediction
from .traffic_flow import SignalPlan

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["t_s", "pos_m", "speed_mps"]
TRACE_MARGIN_S = 15.0

# follower gains (1/s^2, 1/s) and free-road speed relaxation (s)
K_GAP = 0.2
K_SPEED = 0.7
RELAX_S = 2.0
STOP_MARGIN_M = 2.0
HOLD_M = 1.0
VEHICLE_LENGTH_M = 5.0


class ScenarioError(ValueError):
    """Exception for malformed scenario files."""


class TraceFormatError(ValueError):
    """Exception for a trace file that violates the trace schema.

    ``line`` is the 1-based line of the file (the header is line 1).
    """

    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass(frozen=True)
class PlatoonSpec:
    """Traffic vehicles ahead of the ego vehicle.

    ``size`` counts the ego vehicle, as a platoon of ten is nine traffic
    vehicles plus the ego at the rear.
    """

    size: int = 10
    free_speed_mps: float = 15.0
    speed_spread: float = 0.05
    headway_s: float = 1.5
    standstill_m: float = 7.0
    accel_mps2: float = 1.5
    decel_mps2: float = 2.0
    hard_decel_mps2: float = 4.0
    cv_penetration: float = 0.5
    spawn_m: float = 40.0

    def __post_init__(self):
        if self.size < 2:
            raise ScenarioError("A platoon needs the ego vehicle and at least one lead")
        if not 0.0 <= self.cv_penetration <= 1.0:
            raise ScenarioError(f"cv_penetration must lie in [0, 1], got {self.cv_penetration}")
        if self.free_speed_mps < 0 or not 0 <= self.speed_spread < 0.5:
            raise ScenarioError("free_speed_mps must be non-negative and speed_spread in [0, 0.5)")
        for name in ("headway_s", "accel_mps2", "decel_mps2", "hard_decel_mps2"):
            if getattr(self, name) <= 0:
                raise ScenarioError(f"{name} must be positive")
        if self.standstill_m < VEHICLE_LENGTH_M:
            raise ScenarioError(f"standstill_m must cover the vehicle length ({VEHICLE_LENGTH_M} m)")
        if self.hard_decel_mps2 < self.decel_mps2:
            raise ScenarioError("hard_decel_mps2 must not be below decel_mps2")

    @property
    def n_traffic(self) -> int:
        return self.size - 1


@dataclass(frozen=True, eq=False)
class Trace:
    """Sampled positions and speeds of traffic vehicles, front to back.

    Arrays are ``(steps, vehicles)``; the last column is the ego vehicle's
    immediate preceding vehicle.
    """

    t: np.ndarray
    pos: np.ndarray
    speed: np.ndarray
    ids: Tuple[str, ...]
    connected: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float))
        object.__setattr__(self, "pos", np.atleast_2d(np.asarray(self.pos, dtype=float)))
        object.__setattr__(self, "speed", np.atleast_2d(np.asarray(self.speed, dtype=float)))
        object.__setattr__(self, "connected", np.asarray(self.connected, dtype=bool))
        if self.pos.shape != self.speed.shape or self.pos.shape[0] != self.t.size:
            raise ValueError("Trace arrays must be (steps, vehicles) with one row per sample")
        if self.pos.shape[1] != len(self.ids) or self.connected.size != len(self.ids):
            raise ValueError("Trace needs one id and one connected flag per vehicle")
        if self.t.size < 2 or np.any(np.diff(self.t) <= 0):
            raise ValueError("Trace times must be strictly increasing")
        if np.any(np.diff(self.pos, axis=0) < -1e-9):
            raise ValueError("Trace positions must be non-decreasing")

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def duration_s(self) -> float:
        return float(self.t[-1] - self.t[0])

    @property
    def lead_pos(self) -> np.ndarray:
        return self.pos[:, -1]

    @property
    def lead_speed(self) -> np.ndarray:
        return self.speed[:, -1]

    def lead_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t_s": self.t, "pos_m": self.lead_pos, "speed_mps": self.lead_speed})

    def to_csv(self, path) -> None:
        """Write the lead vehicle in trace file format."""
        self.lead_frame().to_csv(path, index=False, float_format="%.3f")

    def stops(self, column: int = -1) -> int:
        return count_stops(self.speed[:, column])


def count_stops(speed: np.ndarray, stopped_below: float = 0.1, moving_above: float = 2.0) -> int:
    """Number of moving-to-standstill transitions with hysteresis."""
    stops = 0
    moving = False
    for v in np.asarray(speed, dtype=float):
        if moving and v < stopped_below:
            stops += 1
            moving = False
        elif not moving and v > moving_above:
            moving = True
    return stops


@dataclass(frozen=True)
class Scenario:
    """One road section, its signals and the traffic ahead of the ego vehicle."""

    name: str
    duration_s: float
    road_length_m: float = 1800.0
    dt: float = 0.1
    seed: int = 0
    signals: Tuple[SignalPlan, ...] = ()
    platoon: PlatoonSpec = field(default_factory=PlatoonSpec)
    trace_path: Optional[Path] = None
    ego_gap_m: Optional[float] = None
    initial_soc: float = 0.6
    measurement_std: float = 0.5

    def __post_init__(self):
        if self.duration_s <= 0 or self.road_length_m <= 0 or self.dt <= 0:
            raise ScenarioError("duration_s, road_length_m and dt must be positive")
        if not 0.0 < self.initial_soc <= 1.0:
            raise ScenarioError(f"initial_soc must lie in (0, 1], got {self.initial_soc}")
        if self.measurement_std < 0:
            raise ScenarioError("measurement_std must be non-negative")
        for plan in self.signals:
            if not 0.0 <= plan.position_m <= self.road_length_m:
                raise ScenarioError(
                    f"Signal at {plan.position_m} m lies outside the {self.road_length_m} m road"
                )

    @property
    def road_test(self) -> bool:
        """Replay of a recorded preceding vehicle instead of a generated platoon."""
        return self.trace_path is not None

    def build_trace(self, seed: Optional[int] = None) -> Trace:
        if self.trace_path is not None:
            return ingest_trace(self.trace_path, dt=self.dt)
        return generate_lead_trace(self, self.seed if seed is None else seed)

    def feed(self, seed: Optional[int] = None) -> "ScenarioFeed":
        seed = self.seed if seed is None else seed
        return ScenarioFeed(
            trace=self.build_trace(seed),
            plans=self.signals,
            measurement_std=self.measurement_std,
            seed=seed,
        )

    def initial_state(self, trace: Trace, vehicle: VehicleParams) -> VehicleState:
        """Ego state behind the lead, inside the car-following corridor."""
        v = float(trace.lead_speed[0])
        near = vehicle.d_min + vehicle.h_min * v
        gap = self.ego_gap_m
        if gap is None:
            gap = 0.5 * (near + vehicle.d_max)
        if not near <= gap <= vehicle.d_max:
            raise ScenarioError(f"Ego gap {gap:.1f} m outside the corridor [{near:.1f}, {vehicle.d_max}] m")
        return VehicleState(d=float(trace.lead_pos[0]) - gap, v=v, soc=self.initial_soc, gear=1)


def _signal_cap(
    pos: np.ndarray, v: np.ndarray, t: float, plans: Tuple[SignalPlan, ...], spec: PlatoonSpec, dt: float
) -> np.ndarray:
    """Speed caps for the next step from red lights ahead.

    A vehicle that cannot stop with the hard deceleration when the light
    turns red is committed and proceeds. Otherwise it brakes late, at the
    constant deceleration that stops it short of the stop bar, and holds
    there until green.
    """
    cap = np.full(pos.shape, np.inf)
    for plan in plans:
        if not plan.is_red(t):
            continue
        gap = plan.position_m - pos
        committed = gap < v ** 2 / (2.0 * spec.hard_decel_mps2)
        active = (gap > 0) & ~committed
        room = gap - STOP_MARGIN_M
        need = v ** 2 / (2.0 * np.maximum(room, 1e-6))
        braking = need >= spec.decel_mps2
        limit = np.where(
            braking,
            np.maximum(v - need * dt, 0.0),
            np.sqrt(2.0 * spec.decel_mps2 * np.maximum(room, 0.0)),
        )
        limit = np.where(room <= HOLD_M, 0.0, limit)
        cap = np.minimum(cap, np.where(active, limit, np.inf))
    return cap


def generate_lead_trace(spec: Scenario, seed: int) -> Trace:
    """Simulate the platoon ahead of the ego vehicle.

    The head vehicle cruises at its free speed and stops at red lights; every
    follower tracks a constant time headway behind its predecessor and obeys
    the same signals. Free speeds, and which vehicles are connected, are drawn
    from ``seed``; the signal schedule is the same for every seed.

    Args:
        spec: Scenario with a platoon section
        seed: Seed for free speeds and the connected-vehicle roster

    Returns:
        Trace covering the scenario duration plus a prediction margin
    """
    platoon = spec.platoon
    n = platoon.n_traffic
    speeds_rng, roster_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))

    v_free = platoon.free_speed_mps * speeds_rng.uniform(1 - platoon.speed_spread, 1 + platoon.speed_spread, n)
    n_cv = int(np.floor(platoon.cv_penetration * n + 0.5))
    connected = np.zeros(n, dtype=bool)
    connected[roster_rng.choice(n, size=n_cv, replace=False)] = True

    steps = int(round((spec.duration_s + TRACE_MARGIN_S) / spec.dt))
    dt = spec.dt
    v0 = platoon.free_speed_mps
    spacing = platoon.standstill_m + platoon.headway_s * v0
    pos = np.zeros((steps + 1, n))
    speed = np.zeros((steps + 1, n))
    pos[0] = platoon.spawn_m + spacing * np.arange(n - 1, -1, -1)
    speed[0] = v0

    for k in range(steps):
        p, v = pos[k], speed[k]
        a = np.minimum(platoon.accel_mps2, (v_free - v) / RELAX_S)
        gap = p[:-1] - p[1:] - platoon.standstill_m
        a[1:] = np.minimum(a[1:], K_GAP * (gap - platoon.headway_s * v[1:]) + K_SPEED * (v[:-1] - v[1:]))
        v_next = np.maximum(v + np.maximum(a, -platoon.hard_decel_mps2) * dt, 0.0)
        v_next = np.minimum(v_next, _signal_cap(p, v, k * dt, spec.signals, platoon, dt))
        v_next[1:] = np.minimum(v_next[1:], np.maximum(p[:-1] - VEHICLE_LENGTH_M - p[1:], 0.0) / dt)
        speed[k + 1] = v_next
        pos[k + 1] = p + v_next * dt

    trace = Trace(
        t=dt * np.arange(steps + 1),
        pos=pos,
        speed=speed,
        ids=tuple(f"veh{i}" for i in range(n)),
        connected=connected,
    )
    logger.debug(
        "Generated %s vehicles over %.1f s (seed %s): lead stops %s, %s connected",
        n,
        trace.duration_s,
        seed,
        trace.stops(),
        n_cv,
    )
    return trace


def _bad_row(mask: np.ndarray) -> Optional[int]:
    rows = np.flatnonzero(mask)
    return int(rows[0]) if rows.size else None


def ingest_trace(path, dt: float = 0.1) -> Trace:
    """Read a recorded preceding-vehicle trace and resample it to ``dt``.

    The file is UTF-8 CSV with the header ``t_s,pos_m,speed_mps``. Times are
    shifted to start at zero.

    Raises:
        TraceFormatError: unreadable file, wrong header, non-numeric cell,
            non-increasing time, decreasing position or negative speed
    """
    try:
        frame = pd.read_csv(path, dtype=str, skipinitialspace=True, encoding="utf-8")
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise TraceFormatError(f"Cannot read trace {path}: {e}") from e

    if list(frame.columns) != TRACE_COLUMNS:
        raise TraceFormatError(f"Expected header {','.join(TRACE_COLUMNS)}, got {','.join(frame.columns)}", line=1)
    values = frame.apply(pd.to_numeric, errors="coerce")
    row = _bad_row(values.isna().any(axis=1).to_numpy())
    if row is not None:
        raise TraceFormatError("Non-numeric or missing value", line=row + 2)
    if len(values) < 2:
        raise TraceFormatError("Trace needs at least two samples", line=len(values) + 1)

    t = values["t_s"].to_numpy()
    pos = values["pos_m"].to_numpy()
    speed = values["speed_mps"].to_numpy()
    row = _bad_row(np.diff(t) <= 0)
    if row is not None:
        raise TraceFormatError(f"Timestamp {t[row + 1]} does not increase", line=row + 3)
    row = _bad_row(np.diff(pos) < 0)
    if row is not None:
        raise TraceFormatError(f"Position {pos[row + 1]} decreases", line=row + 3)
    row = _bad_row(speed < 0)
    if row is not None:
        raise TraceFormatError(f"Negative speed {speed[row]}", line=row + 2)

    grid = t[0] + dt * np.arange(int(np.floor((t[-1] - t[0]) / dt + 1e-9)) + 1)
    logger.info("Ingested %s samples over %.1f s from %s", len(t), t[-1] - t[0], path)
    return Trace(
        t=grid - t[0],
        pos=np.interp(grid, t, pos)[:, None],
        speed=np.interp(grid, t, speed)[:, None],
        ids=("lead",),
        connected=np.ones(1, dtype=bool),
    )


def _leg_speeds(length_m: float, cruise: float, rng: np.random.Generator, dt: float, final: bool) -> np.ndarray:
    accel, decel = 1.2, 1.5
    ramp_up = np.arange(0.0, cruise, accel * dt)
    ramp_down = np.arange(cruise, 0.0, -decel * dt)
    cruise_m = length_m - cruise ** 2 / (2 * accel) - (0.0 if final else cruise ** 2 / (2 * decel))
    samples = max(int(cruise_m / (cruise * dt)), 1)
    wobble = gaussian_filter1d(rng.normal(size=samples), sigma=150.0, mode="nearest")
    # taper so the cruise joins both ramps without a speed step
    wobble *= np.sin(np.pi * np.linspace(0.0, 1.0, samples)) / max(np.max(np.abs(wobble)), 1e-9)
    pieces = [ramp_up, cruise * (1.0 + 0.08 * wobble)]
    if not final:
        pieces.append(ramp_down)
    return np.concatenate(pieces)


def synthesize_road_test_trace(
    seed: int = 0, distance_m: float = 18000.0, stops: int = 3, dt: float = 0.1
) -> Trace:
    """Stand-in for a recorded road test: about 18 km with three stops.

    Each leg accelerates, cruises at a slowly wandering speed and brakes to a
    standstill; the last leg ends in a cruise so only the intermediate stops
    count.
    """
    rng = np.random.default_rng(seed)
    legs = rng.dirichlet(np.full(stops + 1, 8.0)) * distance_m
    pieces: List[np.ndarray] = []
    for i, leg in enumerate(legs):
        pieces.append(_leg_speeds(leg, rng.uniform(15.0, 20.0), rng, dt, final=i == stops))
        if i < stops:
            pieces.append(np.zeros(int(rng.uniform(15.0, 35.0) / dt)))
    speed = np.concatenate([[0.0], *pieces])
    pos = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * dt)])
    return Trace(
        t=dt * np.arange(speed.size),
        pos=pos[:, None],
        speed=speed[:, None],
        ids=("lead",),
        connected=np.ones(1, dtype=bool),
    )


@dataclass
class ScenarioFeed:
    """Serves a trace to the closed loop as the preceding vehicle and CV reports.

    Measurement noise is drawn once per feed so reports do not depend on the
    order in which they are requested.
    """

    trace: Trace
    plans: Tuple[SignalPlan, ...] = ()
    measurement_std: float = 0.5
    seed: int = 0
    _noise: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        noise_rng = np.random.default_rng(np.random.SeedSequence(self.seed).spawn(3)[2])
        self._noise = noise_rng.normal(0.0, self.measurement_std, self.trace.pos.shape)

    @property
    def dt(self) -> float:
        return self.trace.dt

    @property
    def steps(self) -> int:
        return self.trace.t.size - 1

    def _clip(self, k: int) -> int:
        return min(max(k, 0), self.steps)

    def lead_state(self, k: int) -> Tuple[float, float]:
        k = self._clip(k)
        return float(self.trace.lead_pos[k]), float(self.trace.lead_speed[k])

    def measurements(self, k: int) -> List[CvMeasurement]:
        if k > self.steps:
            return []
        reports = []
        for j in np.flatnonzero(self.trace.connected):
            reports.append(
                CvMeasurement(
                    vehicle_id=self.trace.ids[j],
                    position_m=float(self.trace.pos[k, j]),
                    speed_mps=float(self.trace.speed[k, j] + self._noise[k, j]),
                    step=k,
                )
            )
        return reports

    def lead_window(self, k: int, horizon_s: float, dt: float) -> LeadPrediction:
        """Recorded lead trajectory from step ``k`` as an exact prediction."""
        n = int(round(horizon_s / dt))
        t = dt * np.arange(n + 1)
        index = np.minimum(self._clip(k) + np.round(t / self.dt).astype(int), self.steps)
        return LeadPrediction(
            t=t,
            d_lead=self.trace.lead_pos[index],
            v_lead=self.trace.lead_speed[index],
            sigma_d=np.zeros(n + 1),
            dt=dt,
        )


_PLATOON_KEYS = set(PlatoonSpec.__dataclass_fields__)
_SCENARIO_KEYS = {
    "name",
    "duration_s",
    "road_length_m",
    "dt",
    "seed",
    "signals",
    "platoon",
    "trace",
    "ego",
    "initial_soc",
    "measurement_std",
}


def _load_signals(raw: Any, base: Path) -> Tuple[SignalPlan, ...]:
    if raw is None:
        return ()
    if isinstance(raw, str):
        # external schedule file (JSON or YAML)
        with open(base / raw, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
        if isinstance(raw, dict):
            raw = raw.get("signals", [])
    if not isinstance(raw, list):
        raise ScenarioError("signals must be a list of signal plans")
    plans = []
    for i, entry in enumerate(raw):
        try:
            plans.append(SignalPlan(**entry))
        except (TypeError, ValueError) as e:
            raise ScenarioError(f"Signal {i}: {e}") from e
    return tuple(sorted(plans, key=lambda plan: plan.position_m))


def scenario_from_dict(data: Dict[str, Any], base: Path = Path(".")) -> Scenario:
    """Build a Scenario from parsed YAML, resolving paths against ``base``."""
    if not isinstance(data, dict):
        raise ScenarioError("Scenario must be a mapping")
    unknown = set(data) - _SCENARIO_KEYS
    if unknown:
        raise ScenarioError(f"Unknown scenario keys: {', '.join(sorted(unknown))}")
    platoon_data = data.get("platoon") or {}
    unknown = set(platoon_data) - _PLATOON_KEYS
    if unknown:
        raise ScenarioError(f"Unknown platoon keys: {', '.join(sorted(unknown))}")
    ego = data.get("ego") or {}

    try:
        trace = data.get("trace")
        return Scenario(
            name=str(data.get("name", "scenario")),
            duration_s=float(data["duration_s"]),
            road_length_m=float(data.get("road_length_m", 1800.0)),
            dt=float(data.get("dt", 0.1)),
            seed=int(data.get("seed", 0)),
            signals=_load_signals(data.get("signals"), base),
            platoon=PlatoonSpec(**platoon_data),
            trace_path=(base / trace) if trace else None,
            ego_gap_m=ego.get("gap_m"),
            initial_soc=float(data.get("initial_soc", 0.6)),
            measurement_std=float(data.get("measurement_std", 0.5)),
        )
    except ScenarioError:
        raise
    except KeyError as e:
        raise ScenarioError(f"Missing scenario key: {e}") from e
    except (OSError, yaml.YAMLError) as e:
        raise ScenarioError(f"Cannot read signal schedule: {e}") from e
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"Invalid scenario value: {e}") from e


def load_scenario(path) -> Scenario:
    """Load a scenario file.

    The file and any external signal schedule it names are read with the
    YAML loader. JSON is a subset of YAML, so JSON signal schedules and
    JSON scenario files load unchanged.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Scenario file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ScenarioError(f"Error parsing scenario {path}: {e}") from e
    scenario = scenario_from_dict(data, base=path.parent)
    logger.debug("Loaded scenario %s from %s", scenario.name, path)
    return scenario


EXAMPLE_SCENARIO = {
    "name": "two-signal",
    "road_length_m": 1800.0,
    "duration_s": 130.0,
    "dt": 0.1,
    "seed": 0,
    "initial_soc": 0.6,
    "measurement_std": 0.5,
    "signals": [
        {"position_m": 500.0, "cycle_s": 60.0, "green_s": 30.0, "offset_s": 40.0},
        {"position_m": 1400.0, "cycle_s": 60.0, "green_s": 30.0, "offset_s": 5.0},
    ],
    "platoon": {
        "size": 10,
        "free_speed_mps": 15.0,
        "headway_s": 1.5,
        "cv_penetration": 0.5,
    },
}


def create_example_scenario(path: str = "scenario.yml.example") -> None:
    """Create an example two-signal scenario file."""
    with open(path, "w", encoding="utf-8") as f:
        yaml.dump(EXAMPLE_SCENARIO, f, default_flow_style=False, indent=2, sort_keys=False)


def road_test_scenario(trace_path, duration_s: Optional[float] = None) -> Scenario:
    """Scenario replaying a recorded lead with only that vehicle connected."""
    trace = ingest_trace(trace_path)
    duration = trace.duration_s - TRACE_MARGIN_S if duration_s is None else duration_s
    return Scenario(
        name=Path(trace_path).stem,
        duration_s=max(duration, trace.dt),
        road_length_m=float(trace.lead_pos[-1]) + 1.0,
        trace_path=Path(trace_path),
    )
