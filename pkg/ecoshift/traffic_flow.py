"""
Second-order macroscopic traffic model for ecoshift.

A discretised Payne-Whitham model over a road window of equal-length cells:
per-cell density rho (veh/m) and speed v (m/s) evolve by a conservation law
and a speed equation with convection, relaxation towards a triangular
equilibrium speed, and a pressure (anticipation) term. Red lights pin the
speed of the cell holding the stop bar to zero. Connected vehicles observe
the speed field by linear interpolation between the two cells around them.

Units are SI throughout: metres, seconds, vehicles per metre.

Boundaries use zero-gradient ghost cells: the upstream ghost repeats cell 0
and the downstream ghost repeats the last cell, so the inflow into cell 0 is
the flux of cell 0 itself.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class TrafficModelError(ValueError):
    """Exception for out-of-domain traffic model inputs."""


@dataclass(frozen=True)
class TrafficParams:
    """Model constants and discretisation for one road window.

    Defaults are synthetic values chosen for an urban arterial; they are not
    calibrated against field data.
    """

    v0: float = 16.0
    c: float = 5.0
    rho_jam: float = 0.14
    tau: float = 6.0
    c0: float = 3.0
    epsilon: float = 0.01
    dx: float = 25.0
    dt: float = 0.1
    n_cells: int = 20

    def __post_init__(self):
        for name in ("v0", "c", "rho_jam", "tau", "epsilon", "dx", "dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.c0 < 0:
            raise ValueError(f"c0 must be non-negative, got {self.c0}")
        if self.n_cells < 2:
            raise ValueError(f"n_cells must be at least 2, got {self.n_cells}")
        if self.v0 * self.dt >= self.dx:
            raise ValueError(
                f"v0*dt ({self.v0 * self.dt:.3f} m) must stay below dx ({self.dx} m)"
            )

    @property
    def rho_c(self) -> float:
        """Critical density where the free-flow and congested branches meet."""
        return self.rho_jam / (self.v0 / self.c + 1.0)

    @property
    def length_m(self) -> float:
        return self.dx * self.n_cells


@dataclass(frozen=True)
class NoiseSpec:
    """Standard deviations of process and measurement noise."""

    rho_std: float = 0.001
    v_std: float = 0.3
    measurement_std: float = 0.5

    def __post_init__(self):
        for name in ("rho_std", "v_std", "measurement_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True, eq=False)
class TrafficGridState:
    """Per-cell densities and speeds.

    ``clamped`` counts the entries that had to be clamped back into range by
    the step that produced this state.
    """

    rho: np.ndarray
    v: np.ndarray
    clamped: int = 0

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if rho.shape != v.shape or rho.ndim != 1:
            raise ValueError(
                f"rho and v must be 1-D arrays of equal length, got {rho.shape} and {v.shape}"
            )
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "v", v)

    @property
    def n_cells(self) -> int:
        return self.rho.size

    @classmethod
    def uniform(cls, rho: float, params: TrafficParams) -> "TrafficGridState":
        """Uniform equilibrium state at density ``rho``."""
        speed = equilibrium_speed(rho, params)
        return cls(
            rho=np.full(params.n_cells, float(rho)),
            v=np.full(params.n_cells, float(speed)),
        )

    def as_vector(self) -> np.ndarray:
        """Stack as [rho_0..rho_{n-1}, v_0..v_{n-1}]."""
        return np.concatenate([self.rho, self.v])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "TrafficGridState":
        x = np.asarray(x, dtype=float)
        n = x.size // 2
        return cls(rho=x[:n].copy(), v=x[n:].copy())

    def vehicle_count(self, params: TrafficParams) -> float:
        return float(np.sum(self.rho) * params.dx)


class SignalHead(NamedTuple):
    """Red intervals of one signal projected onto a grid cell.

    Intervals are half-open ``[start, end)`` ranges of absolute step indices.
    """

    cell: int
    red_intervals: Tuple[Tuple[int, int], ...]

    def is_red(self, k: int) -> bool:
        return any(start <= k < end for start, end in self.red_intervals)


@dataclass(frozen=True)
class SignalSchedule:
    """Signals affecting a grid window."""

    heads: Tuple[SignalHead, ...] = ()
    n_cells: Optional[int] = None

    def __post_init__(self):
        for head in self.heads:
            if self.n_cells is not None and not 0 <= head.cell < self.n_cells:
                raise ValueError(
                    f"Signal cell {head.cell} outside grid of {self.n_cells} cells"
                )
            for start, end in head.red_intervals:
                if start < 0 or end <= start:
                    raise ValueError(
                        f"Malformed red interval ({start}, {end}) at cell {head.cell}"
                    )

    def red_cells(self, k: int) -> List[int]:
        return [head.cell for head in self.heads if head.is_red(k)]

    def red_mask(self, k: int, n_cells: int) -> np.ndarray:
        mask = np.zeros(n_cells, dtype=bool)
        for cell in self.red_cells(k):
            mask[cell] = True
        return mask


NO_SIGNALS = SignalSchedule()


@dataclass(frozen=True)
class SignalPlan:
    """Fixed-time plan of one signalised intersection.

    The green phase starts at ``offset_s`` (modulo ``cycle_s``) and lasts
    ``green_s``; the remainder of the cycle is red.
    """

    position_m: float
    cycle_s: float
    green_s: float
    offset_s: float = 0.0

    def __post_init__(self):
        if self.cycle_s <= 0:
            raise ValueError(f"cycle_s must be positive, got {self.cycle_s}")
        if not 0 <= self.green_s <= self.cycle_s:
            raise ValueError(
                f"green_s must lie in [0, cycle_s], got {self.green_s} for cycle {self.cycle_s}"
            )

    def is_red(self, t_s) -> np.ndarray:
        phase = np.mod(np.asarray(t_s, dtype=float) - self.offset_s, self.cycle_s)
        return phase >= self.green_s

    def next_green(self, t_s: float) -> float:
        """Earliest time >= t_s at which the light is green."""
        if not self.is_red(t_s):
            return t_s
        phase = (t_s - self.offset_s) % self.cycle_s
        return t_s + (self.cycle_s - phase)


def _red_runs(red: np.ndarray, k0: int) -> Tuple[Tuple[int, int], ...]:
    padded = np.concatenate([[False], red, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return tuple((k0 + int(s), k0 + int(e)) for s, e in zip(starts, ends))


def signal_schedule(
    plans: Iterable[SignalPlan],
    origin_m: float,
    params: TrafficParams,
    k0: int,
    n_steps: int,
    comm_range_m: float = 500.0,
) -> SignalSchedule:
    """Project road-level signal plans onto a grid window.

    Each plan whose stop bar lies inside the window, and within
    ``comm_range_m`` of the window origin, becomes a head on the cell holding
    the stop bar with its red intervals over steps ``k0 .. k0+n_steps``.
    """
    heads = []
    steps = np.arange(k0, k0 + n_steps + 1)
    for plan in plans:
        offset = plan.position_m - origin_m
        if offset < 0 or offset >= params.length_m or offset > comm_range_m:
            continue
        cell = int(offset // params.dx)
        runs = _red_runs(plan.is_red(steps * params.dt), k0)
        if runs:
            heads.append(SignalHead(cell=cell, red_intervals=runs))
    return SignalSchedule(heads=tuple(heads), n_cells=params.n_cells)


def _equilibrium_speed(rho: np.ndarray, params: TrafficParams) -> np.ndarray:
    safe = np.where(rho > 0, rho, 1.0)
    congested = params.c * (params.rho_jam / safe - 1.0)
    return np.where(rho < params.rho_c, params.v0, congested)


def equilibrium_speed(rho, params: TrafficParams):
    """Triangular fundamental diagram speed for density ``rho``.

    Args:
        rho: Density (veh/m), scalar or array, within [0, rho_jam]
        params: Traffic parameters

    Returns:
        Speed (m/s), same shape as ``rho``
    """
    arr = np.asarray(rho, dtype=float)
    if np.any(arr < 0) or np.any(arr > params.rho_jam) or np.any(np.isnan(arr)):
        raise TrafficModelError(
            f"Density outside [0, {params.rho_jam}] veh/m: {rho}"
        )
    speed = _equilibrium_speed(arr, params)
    if np.ndim(rho) == 0:
        return float(speed)
    return speed


def _shift_up(x: np.ndarray) -> np.ndarray:
    """Upstream neighbour along the last axis with a zero-gradient ghost."""
    return np.concatenate([x[..., :1], x[..., :-1]], axis=-1)


def _shift_down(x: np.ndarray) -> np.ndarray:
    """Downstream neighbour along the last axis with a zero-gradient ghost."""
    return np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)


def advance(
    rho: np.ndarray,
    v: np.ndarray,
    red: np.ndarray,
    params: TrafficParams,
    omega: Optional[np.ndarray] = None,
    xi: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, int]:
    """Vectorised model update over arrays shaped ``(..., n_cells)``.

    Inputs are projected into range before the update so batches of sigma
    points can be pushed through directly.

    Returns:
        Tuple of (rho_next, v_next, clamp_count)
    """
    clamped = int(
        np.count_nonzero((rho < 0) | (rho > params.rho_jam))
        + np.count_nonzero((v < 0) | (v > params.v0))
    )
    rho = np.clip(rho, 0.0, params.rho_jam)
    v = np.clip(v, 0.0, params.v0)

    ratio = params.dt / params.dx
    rho_up, v_up = _shift_up(rho), _shift_up(v)
    rho_down = _shift_down(rho)

    flux = rho * v
    rho_next = rho - ratio * (flux - rho_up * v_up)

    convection = ratio * v * (v - v_up)
    relaxation = params.dt * (_equilibrium_speed(rho, params) - v) / params.tau
    pressure = ratio * params.c0 ** 2 * (rho_down - rho) / (rho + params.epsilon)
    v_next = v - convection + relaxation - pressure

    if omega is not None:
        rho_next = rho_next + omega
    if xi is not None:
        v_next = v_next + xi

    v_next = np.where(red, 0.0, v_next)

    out_of_range = np.count_nonzero(
        (rho_next < 0) | (rho_next > params.rho_jam)
    ) + np.count_nonzero((v_next < 0) | (v_next > params.v0))
    rho_next = np.clip(rho_next, 0.0, params.rho_jam)
    v_next = np.clip(v_next, 0.0, params.v0)
    return rho_next, v_next, clamped + int(out_of_range)


def step(
    state: TrafficGridState,
    signals: SignalSchedule,
    k: int,
    params: TrafficParams,
    noise: Optional[NoiseSpec] = None,
    rng: Optional[np.random.Generator] = None,
) -> TrafficGridState:
    """Advance the grid by one step.

    Args:
        state: Current grid state
        signals: Signals on this grid (absolute step indices)
        k: Step index being advanced from
        params: Traffic parameters
        noise: Process noise; None for a deterministic step
        rng: Random generator used when ``noise`` is given

    Returns:
        New TrafficGridState with the clamp count of this step
    """
    if k < 0:
        raise TrafficModelError(f"Step index must be non-negative, got {k}")

    omega = xi = None
    if noise is not None:
        rng = rng if rng is not None else np.random.default_rng()
        omega = rng.normal(0.0, noise.rho_std, state.n_cells)
        xi = rng.normal(0.0, noise.v_std, state.n_cells)

    red = signals.red_mask(k, state.n_cells)
    rho, v, clamped = advance(state.rho, state.v, red, params, omega, xi)
    if clamped:
        logger.debug("Clamped %s entries at step %s", clamped, k)
    return TrafficGridState(rho=rho, v=v, clamped=clamped)


def rollout(
    state: TrafficGridState,
    signals: SignalSchedule,
    k0: int,
    n_steps: int,
    params: TrafficParams,
    noise: Optional[NoiseSpec] = None,
    rng: Optional[np.random.Generator] = None,
) -> List[TrafficGridState]:
    """States for steps k0 .. k0+n_steps (inclusive of the initial state)."""
    states = [state]
    for k in range(k0, k0 + n_steps):
        states.append(step(states[-1], signals, k, params, noise, rng))
    return states


def boundary_flux(state: TrafficGridState, params: TrafficParams) -> Tuple[float, float]:
    """Inflow and outflow (veh/s) of the density update for ``state``.

    With zero-gradient ghosts the inflow equals the flux of the first cell.
    """
    inflow = float(state.rho[0] * state.v[0])
    outflow = float(state.rho[-1] * state.v[-1])
    return inflow, outflow


def interpolation_weights(position_m, params: TrafficParams) -> Tuple[np.ndarray, np.ndarray]:
    """Cell index and blend factor for positions inside the window."""
    pos = np.asarray(position_m, dtype=float)
    upper = (params.n_cells - 1) * params.dx
    if np.any(pos < 0) or np.any(pos >= upper) or np.any(np.isnan(pos)):
        raise TrafficModelError(
            f"Position outside measurable window [0, {upper}) m: {position_m}"
        )
    j = np.floor(pos / params.dx).astype(int)
    alpha = pos / params.dx - j
    return j, alpha


def measure_speed(
    state: TrafficGridState,
    position_m: float,
    params: TrafficParams,
    noise: Optional[NoiseSpec] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Speed seen by a vehicle at ``position_m`` (m from the window origin)."""
    j, alpha = interpolation_weights(position_m, params)
    j, alpha = int(j), float(alpha)
    speed = (1.0 - alpha) * state.v[j] + alpha * state.v[j + 1]
    if noise is not None and noise.measurement_std > 0:
        rng = rng if rng is not None else np.random.default_rng()
        speed += rng.normal(0.0, noise.measurement_std)
    return float(speed)


def equilibrium_density(speed: float, params: TrafficParams) -> float:
    """Congested-branch density whose equilibrium speed is ``speed``.

    Speeds at or above v0 map to the critical density.
    """
    if speed < 0:
        raise TrafficModelError(f"Speed must be non-negative, got {speed}")
    if speed >= params.v0:
        return params.rho_c
    return params.rho_jam / (speed / params.c + 1.0)
