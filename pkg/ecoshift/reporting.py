"""
Energy reports for ecoshift episodes.

An EnergyReport summarises one episode: distance, SOC used, energy per
kilometre computed two ways, a per-phase breakdown, stops, solver
statistics and an audit of the hard limits on the applied controls.

Energy bookkeeping: the SOC drop converted at the open-circuit voltage where
it happened is the chemical energy taken from the cells. The integral of the
terminal power P_b is smaller by the internal-resistance loss I^2 R; both
figures and the loss are reported and ``reconciliation_error`` checks that
chemical = terminal + loss.
"""

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from .battery import battery_power_limits, current_from_power
from .controller import ControllerConfig, EpisodeLog
from .powertrain import PowertrainConfig
from .scenario import count_stops

logger = logging.getLogger(__name__)

RECONCILE_TOL = 0.005
MIN_DISTANCE_M = 10.0
AUDIT_TOL = 1e-3
PHASES = ("accel", "cruise", "regen")
ACCEL_THRESHOLD = 0.05

# published results for a different motor map and road test, shown for context
REFERENCE_SAVINGS_SIM_PCT = 12.01
REFERENCE_SAVINGS_ROAD_PCT = 11.36
REFERENCE_WH_PER_KM = (203.6, 179.1)


@dataclass
class PhaseStats:
    time_s: float = 0.0
    distance_m: float = 0.0
    energy_wh: float = 0.0


@dataclass
class SolverStats:
    """Per-cycle solver summary; wall-clock fields are kept apart."""

    cycles: int = 0
    statuses: Dict[str, int] = field(default_factory=dict)
    fallbacks: Dict[str, int] = field(default_factory=dict)
    unanchored: int = 0
    mean_nodes: float = 0.0
    max_gap: float = 0.0
    median_solve_ms: float = 0.0
    max_solve_ms: float = 0.0

    def deterministic(self) -> Dict:
        data = asdict(self)
        data.pop("median_solve_ms")
        data.pop("max_solve_ms")
        return data


@dataclass
class ConstraintAudit:
    """Worst violation of each hard limit on applied controls (0 when satisfied)."""

    speed: float = 0.0
    accel: float = 0.0
    jerk: float = 0.0
    torque: float = 0.0
    battery_power: float = 0.0
    max_s_min_m: float = 0.0
    max_s_max_m: float = 0.0

    @property
    def passed(self) -> bool:
        hard = (self.speed, self.accel, self.jerk, self.torque, self.battery_power)
        return all(v <= AUDIT_TOL for v in hard) and self.max_s_min_m < 0.5


@dataclass
class EnergyReport:
    variant: str
    scenario: str
    seed: int
    completed: bool = True
    failure: str = ""
    duration_s: float = 0.0
    distance_m: float = 0.0
    soc_start: float = 0.0
    soc_end: float = 0.0
    energy_soc_wh: float = 0.0
    energy_terminal_wh: float = 0.0
    loss_wh: float = 0.0
    stops: int = 0
    phases: Dict[str, PhaseStats] = field(default_factory=dict)
    solver: SolverStats = field(default_factory=SolverStats)
    audit: ConstraintAudit = field(default_factory=ConstraintAudit)

    @property
    def soc_used(self) -> float:
        return self.soc_start - self.soc_end

    @property
    def wh_per_km(self) -> float:
        """SOC-based consumption; NaN below the minimum distance."""
        if self.distance_m < MIN_DISTANCE_M:
            return float("nan")
        return self.energy_soc_wh / (self.distance_m / 1000.0)

    @property
    def wh_per_km_terminal(self) -> float:
        if self.distance_m < MIN_DISTANCE_M:
            return float("nan")
        return self.energy_terminal_wh / (self.distance_m / 1000.0)

    @property
    def reconciliation_error(self) -> float:
        """Relative mismatch between chemical energy and terminal energy plus loss."""
        scale = max(abs(self.energy_soc_wh), 1e-9)
        return abs(self.energy_soc_wh - self.energy_terminal_wh - self.loss_wh) / scale

    def to_dict(self, include_timing: bool = False) -> Dict:
        data = asdict(self)
        if not include_timing:
            data["solver"] = self.solver.deterministic()
        data.update(
            soc_used=self.soc_used,
            wh_per_km=self.wh_per_km,
            wh_per_km_terminal=self.wh_per_km_terminal,
            reconciliation_error=self.reconciliation_error,
            audit_passed=self.audit.passed,
        )
        return data

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True, default=_json_default)

    def to_text(self) -> str:
        text = f"Energy report: {self.variant} on {self.scenario} (seed {self.seed})\n"
        text += "=" * 50 + "\n"
        if not self.completed:
            text += f"EPISODE ABORTED: {self.failure}\n(partial figures below)\n"
        text += f"""Distance: {self.distance_m:.1f} m over {self.duration_s:.1f} s
SOC: {self.soc_start:.5f} -> {self.soc_end:.5f} (used {self.soc_used:.5f})
Energy from SOC: {self.energy_soc_wh:.2f} Wh ({self.wh_per_km:.1f} Wh/km)
Energy at terminals: {self.energy_terminal_wh:.2f} Wh ({self.wh_per_km_terminal:.1f} Wh/km)
Internal resistance loss: {self.loss_wh:.2f} Wh
Reconciliation error: {100.0 * self.reconciliation_error:.3f}%
Stops: {self.stops}

"""
        text += "PHASES:\n"
        for name in PHASES:
            phase = self.phases.get(name, PhaseStats())
            text += f"  {name:<7} {phase.time_s:7.1f} s {phase.distance_m:8.1f} m {phase.energy_wh:8.2f} Wh\n"
        solver = self.solver
        text += f"""
SOLVER:
  Cycles: {solver.cycles}
  Statuses: {_counts(solver.statuses)}
  Fallbacks: {_counts(solver.fallbacks) or 'none'}
  Unanchored retries: {solver.unanchored}
  Solve time: median {solver.median_solve_ms:.0f} ms, max {solver.max_solve_ms:.0f} ms
  Mean nodes: {solver.mean_nodes:.1f}, max gap {solver.max_gap:.2e}

CONSTRAINT AUDIT: {'PASSED' if self.audit.passed else 'FAILED'}
"""
        for name, value in asdict(self.audit).items():
            text += f"  {name}: {value:.3g}\n"
        return text

    def save(self, out_dir, stem: Optional[str] = None) -> Path:
        """Write the JSON and text renderings; returns the JSON path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or f"{self.variant}_seed{self.seed}"
        json_path = out / f"{stem}_report.json"
        json_path.write_text(self.to_json() + "\n", encoding="utf-8")
        (out / f"{stem}_report.txt").write_text(self.to_text(), encoding="utf-8")
        logger.info("Report saved to %s", json_path)
        return json_path


def _counts(counts: Dict[str, int]) -> str:
    return ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    raise TypeError(f"Cannot serialise {type(value).__name__}")


def _next_soc(frame: pd.DataFrame, log: EpisodeLog) -> np.ndarray:
    soc = frame["SOC"].to_numpy()
    final = log.final_state.soc if log.final_state is not None else soc[-1]
    return np.append(soc[1:], final)


def phase_breakdown(frame: pd.DataFrame, dt: float) -> Dict[str, PhaseStats]:
    """Split time, distance and terminal energy into accel, cruise and regen.

    Steps with negative motor torque are regen; steps accelerating faster
    than ``ACCEL_THRESHOLD`` are accel; everything else, standstill and
    friction-only braking included, is cruise.
    """
    phase = np.where(
        frame["Tm_Nm"] < 0,
        "regen",
        np.where(frame["a_mps2"] > ACCEL_THRESHOLD, "accel", "cruise"),
    )
    grouped = frame.assign(
        phase=phase,
        dist=frame["v_mps"] * dt,
        wh=frame["Pb_W"] * dt / 3600.0,
    ).groupby("phase")
    breakdown = {name: PhaseStats() for name in PHASES}
    for name, group in grouped:
        breakdown[name] = PhaseStats(
            time_s=len(group) * dt,
            distance_m=float(group["dist"].sum()),
            energy_wh=float(group["wh"].sum()),
        )
    return breakdown


def solver_stats(log: EpisodeLog) -> SolverStats:
    if not log.plans:
        return SolverStats()
    solve_ms = np.array([p.solve_ms for p in log.plans])
    gaps = [p.gap for p in log.plans if not p.fallback and np.isfinite(p.gap)]
    return SolverStats(
        cycles=len(log.plans),
        statuses=dict(Counter(p.status for p in log.plans)),
        fallbacks=dict(Counter(p.fallback for p in log.plans if p.fallback)),
        unanchored=sum(1 for p in log.plans if not p.anchored),
        mean_nodes=float(np.mean([p.nodes for p in log.plans])),
        max_gap=float(max(gaps)) if gaps else 0.0,
        median_solve_ms=float(np.median(solve_ms)),
        max_solve_ms=float(np.max(solve_ms)),
    )


def _excess(values: np.ndarray, lo, hi) -> float:
    if values.size == 0:
        return 0.0
    return float(max(np.max(lo - values, initial=0.0), np.max(values - hi, initial=0.0), 0.0))


def audit_constraints(log: EpisodeLog, cfg: PowertrainConfig, config: ControllerConfig) -> ConstraintAudit:
    """Measure how far the applied controls strayed outside the hard limits."""
    frame = log.to_frame()
    if frame.empty:
        return ConstraintAudit()
    veh, motor = cfg.vehicle, cfg.motor
    v = frame["v_mps"].to_numpy()
    a = frame["a_mps2"].to_numpy()
    gear = frame["gear"].to_numpy().astype(int)
    ratios = np.asarray(cfg.gears.ratios)[gear - 1]
    t_limit = motor.t_max(ratios * v)

    # jerk between consecutive applied accelerations
    jerk = np.diff(a) / config.dt
    p_window = np.array([battery_power_limits(float(soc), cfg.battery) for soc in frame["SOC"]])
    return ConstraintAudit(
        speed=_excess(v, 0.0, veh.v_lim),
        accel=_excess(a, veh.a_min, veh.a_max),
        jerk=_excess(jerk, veh.j_min, veh.j_max),
        torque=_excess(frame["Tm_Nm"].to_numpy(), -t_limit, t_limit),
        battery_power=_excess(frame["Pb_W"].to_numpy(), p_window[:, 0], p_window[:, 1]) / max(
            np.max(np.abs(p_window)), 1.0
        ),
        max_s_min_m=float(frame["s_min_m"].max()),
        max_s_max_m=float(frame["s_max_m"].max()),
    )


def energy_report(
    log: EpisodeLog,
    cfg: PowertrainConfig,
    config: ControllerConfig,
    scenario: str = "",
    seed: int = 0,
) -> EnergyReport:
    """Summarise a finished or aborted episode.

    Args:
        log: Episode log (partial when the episode aborted)
        cfg: Powertrain variant the episode ran with
        config: Controller settings (for the control step)
        scenario: Scenario name for the report header
        seed: Traffic seed

    Returns:
        EnergyReport; ``completed`` is False for an aborted episode
    """
    frame = log.to_frame()
    report = EnergyReport(
        variant=cfg.name,
        scenario=scenario,
        seed=seed,
        completed=log.completed,
        failure=log.aborted,
        phases={name: PhaseStats() for name in PHASES},
        solver=solver_stats(log),
    )
    if frame.empty:
        return report

    dt = config.dt
    pack = cfg.battery
    soc = frame["SOC"].to_numpy()
    soc_next = _next_soc(frame, log)
    p_b = frame["Pb_W"].to_numpy()
    voc = np.interp(soc, pack.soc_grid, pack.voc_table)
    r_b = np.interp(soc, pack.soc_grid, pack.r_table)
    current = current_from_power(p_b, soc, pack)
    final_d = log.final_state.d if log.final_state is not None else frame["d_m"].iloc[-1]

    report.duration_s = len(frame) * dt
    report.distance_m = float(final_d - frame["d_m"].iloc[0])
    report.soc_start = float(soc[0])
    report.soc_end = float(soc_next[-1])
    report.energy_soc_wh = float(np.sum(pack.n_s * voc * (soc - soc_next) * pack.q_b)) / 3600.0
    report.energy_terminal_wh = float(np.sum(p_b) * dt) / 3600.0
    report.loss_wh = float(np.sum(current ** 2 * (pack.n_s / pack.n_p) * r_b) * dt) / 3600.0
    report.stops = count_stops(np.append(frame["v_mps"].to_numpy(), log.final_state.v if log.final_state else 0.0))
    report.phases = phase_breakdown(frame, dt)
    report.audit = audit_constraints(log, cfg, config)

    if report.reconciliation_error > RECONCILE_TOL:
        logger.warning(
            "Energy reconciliation off by %.3f%% for %s", 100.0 * report.reconciliation_error, cfg.name
        )
    return report


def savings_pct(baseline: EnergyReport, candidate: EnergyReport) -> Optional[float]:
    """Percentage energy saved by ``candidate`` against ``baseline``.

    Uses Wh/km when both episodes moved at least ``MIN_DISTANCE_M`` and the
    raw SOC energy otherwise. None unless both episodes completed.
    """
    if not (baseline.completed and candidate.completed):
        return None
    if baseline.distance_m >= MIN_DISTANCE_M and candidate.distance_m >= MIN_DISTANCE_M:
        base, cand = baseline.wh_per_km, candidate.wh_per_km
    else:
        base, cand = baseline.energy_soc_wh, candidate.energy_soc_wh
    if abs(base) < 1e-12:
        return None
    return 100.0 * (base - cand) / base


@dataclass
class ComparisonReport:
    """Candidate (multi-speed) against baseline (single-speed) on one seed."""

    candidate: EnergyReport
    baseline: EnergyReport

    @property
    def savings_pct(self) -> Optional[float]:
        return savings_pct(self.baseline, self.candidate)

    def to_dict(self) -> Dict:
        return {
            "candidate": self.candidate.to_dict(),
            "baseline": self.baseline.to_dict(),
            "savings_pct": self.savings_pct,
        }

    def to_text(self) -> str:
        text = self.candidate.to_text() + "\n" + self.baseline.to_text() + "\n"
        text += "COMPARISON:\n"
        savings = self.savings_pct
        if savings is None:
            failed = [r.variant for r in (self.candidate, self.baseline) if not r.completed]
            text += f"  Savings undefined: {', '.join(failed) or 'no energy used'} did not complete\n"
        else:
            text += (
                f"  {self.candidate.variant}: {self.candidate.wh_per_km:.1f} Wh/km, "
                f"{self.baseline.variant}: {self.baseline.wh_per_km:.1f} Wh/km\n"
                f"  Measured savings: {savings:.2f}%\n"
            )
        text += (
            f"  Published figures for context (different motor map and traffic): "
            f"{REFERENCE_SAVINGS_SIM_PCT}% simulated, {REFERENCE_SAVINGS_ROAD_PCT}% road test, "
            f"{REFERENCE_WH_PER_KM[0]} -> {REFERENCE_WH_PER_KM[1]} Wh/km\n"
        )
        return text

    def save(self, out_dir, stem: str = "comparison") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{stem}.json"
        path.write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8"
        )
        (out / f"{stem}.txt").write_text(self.to_text(), encoding="utf-8")
        logger.info("Comparison saved to %s", path)
        return path


def operating_points(log: EpisodeLog, cfg: PowertrainConfig) -> pd.DataFrame:
    """Motor operating points (speed, torque, efficiency) of the steps that used the motor."""
    frame = log.to_frame()
    if frame.empty:
        return pd.DataFrame(columns=["t_s", "gear", "w_m_radps", "Tm_Nm", "eta"])
    ratios = np.asarray(cfg.gears.ratios)[frame["gear"].to_numpy().astype(int) - 1]
    points = pd.DataFrame(
        {
            "t_s": frame["t_s"],
            "gear": frame["gear"].astype(int),
            "w_m_radps": ratios * frame["v_mps"].to_numpy(),
            "Tm_Nm": frame["Tm_Nm"],
        }
    )
    points = points[(points["w_m_radps"] > 0) & (points["Tm_Nm"].abs() > 1e-6)].reset_index(drop=True)
    points["eta"] = cfg.motor.efficiency(points["Tm_Nm"].to_numpy(), points["w_m_radps"].to_numpy())
    return points


def summarize(reports: List[EnergyReport]) -> pd.DataFrame:
    """One row per report, for batch tables."""
    rows = []
    for r in reports:
        rows.append(
            {
                "variant": r.variant,
                "seed": r.seed,
                "completed": r.completed,
                "distance_m": r.distance_m,
                "soc_used": r.soc_used,
                "wh_per_km": r.wh_per_km,
                "stops": r.stops,
                "audit_passed": r.audit.passed,
            }
        )
    return pd.DataFrame(rows)
