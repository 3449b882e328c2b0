"""
Energy report tests.

The episode log is driven by hand through the plant so the SOC-based and
terminal energy figures can be reconciled exactly, without a solver in the
loop.
"""

import json
import logging
import math

import numpy as np
import pandas as pd
import pytest

from ecoshift.controller import ControllerConfig, CyclePlan, EpisodeLog
from ecoshift.powertrain import Controls, VehicleState, cruise_torque, power_flow, simulate_step
from ecoshift.reporting import (
    ComparisonReport,
    EnergyReport,
    PhaseStats,
    audit_constraints,
    energy_report,
    operating_points,
    phase_breakdown,
    savings_pct,
    solver_stats,
    summarize,
)

DT = 0.2
CONFIG = ControllerConfig(dt=DT)


def drive(cfg, phases, state: VehicleState) -> EpisodeLog:
    """Apply ``(torque, steps)`` phases in first gear; torque None holds speed."""
    log = EpisodeLog(variant=cfg.name)
    t = 0.0
    for torque, steps in phases:
        for _ in range(steps):
            t_m = cruise_torque(state.v, state.d, 1, cfg) if torque is None else torque
            controls = Controls(t_m=t_m, f_b=0.0, gear=1)
            flow = power_flow(state, controls, cfg)
            next_state = simulate_step(state, controls, DT, cfg)
            log.rows.append({
                "t_s": t,
                "d_m": state.d,
                "v_mps": state.v,
                "a_mps2": next_state.a,
                "gear": 1,
                "Tm_Nm": t_m,
                "Fb_N": 0.0,
                "Pb_W": flow.p_b,
                "SOC": state.soc,
                "s_max_m": 0.0,
                "s_min_m": 0.0,
                "solve_ms": 0.0,
                "gap": float("nan"),
                "lead_d_m": state.d + 30.0,
                "lead_v_mps": state.v,
            })
            state = next_state
            t += DT
    log.final_state = state
    return log


def static_log(speeds, accels, s_min=0.0) -> EpisodeLog:
    log = EpisodeLog(variant="three-speed")
    for i, (v, a) in enumerate(zip(speeds, accels)):
        log.rows.append({
            "t_s": i * DT,
            "d_m": 10.0 * i * DT,
            "v_mps": v,
            "a_mps2": a,
            "gear": 1,
            "Tm_Nm": 0.0,
            "Fb_N": 0.0,
            "Pb_W": 500.0,
            "SOC": 0.6,
            "s_max_m": 0.0,
            "s_min_m": s_min,
        })
    return log


def plan(status="optimal", fallback="", anchored=True, nodes=0, gap=float("nan"), solve_ms=1.0) -> CyclePlan:
    zeros = np.zeros(3)
    return CyclePlan(
        d=np.zeros(4),
        v=np.zeros(4),
        a=zeros,
        t_m=zeros,
        f_b=zeros,
        gear=np.ones(3, dtype=int),
        p_b=zeros,
        s_max=zeros,
        s_min=zeros,
        status=status,
        gap=gap,
        nodes=nodes,
        solve_ms=solve_ms,
        fallback=fallback,
        anchored=anchored,
    )


@pytest.fixture(scope="module")
def driven(registry):
    cfg = registry.powertrain("three-speed")
    log = drive(cfg, [(150.0, 10), (None, 5), (-60.0, 5)], VehicleState(d=0.0, v=10.0, soc=0.6))
    return cfg, log


class TestEnergyReport:
    def test_soc_energy_reconciles_with_terminal_energy_and_loss(self, driven, caplog):
        cfg, log = driven
        with caplog.at_level(logging.WARNING, logger="ecoshift.reporting"):
            report = energy_report(log, cfg, CONFIG, scenario="hand", seed=3)
        assert report.reconciliation_error < 1e-9
        assert report.loss_wh > 0.0
        assert report.energy_soc_wh > report.energy_terminal_wh
        assert "reconciliation" not in caplog.text

    def test_distance_duration_and_soc(self, driven):
        cfg, log = driven
        report = energy_report(log, cfg, CONFIG)
        frame = log.to_frame()
        assert report.duration_s == pytest.approx(20 * DT)
        assert report.distance_m == pytest.approx(log.final_state.d)
        assert report.distance_m == pytest.approx(frame["v_mps"].sum() * DT)
        assert report.soc_start == 0.6
        assert report.soc_end == log.final_state.soc
        assert report.soc_used > 0.0
        assert report.wh_per_km == pytest.approx(report.energy_soc_wh / (report.distance_m / 1000.0))
        assert report.stops == 0

    def test_phases_partition_the_episode(self, driven):
        cfg, log = driven
        report = energy_report(log, cfg, CONFIG)
        phases = report.phases
        assert phases["accel"].time_s == pytest.approx(10 * DT)
        assert phases["cruise"].time_s == pytest.approx(5 * DT)
        assert phases["regen"].time_s == pytest.approx(5 * DT)
        assert phases["regen"].energy_wh < 0.0
        assert sum(p.energy_wh for p in phases.values()) == pytest.approx(report.energy_terminal_wh)
        assert sum(p.distance_m for p in phases.values()) == pytest.approx(report.distance_m)

    def test_audit_measures_jerk_between_phases(self, driven):
        cfg, log = driven
        report = energy_report(log, cfg, CONFIG)
        jerk = np.diff(log.to_frame()["a_mps2"].to_numpy()) / DT
        expected = max(np.max(jerk) - 3.0, np.max(-3.0 - jerk), 0.0)
        assert report.audit.jerk == pytest.approx(expected)
        assert report.audit.speed == 0.0
        assert report.audit.torque == 0.0
        assert report.audit.battery_power == 0.0

    def test_empty_log(self, three_speed):
        report = energy_report(EpisodeLog(variant="three-speed"), three_speed, CONFIG)
        assert report.completed
        assert report.distance_m == 0.0
        assert math.isnan(report.wh_per_km)

    def test_aborted_episode(self, driven):
        cfg, log = driven
        aborted = EpisodeLog(variant=log.variant, rows=log.rows[:4], final_state=None, aborted="BatteryPowerError: too much")
        report = energy_report(aborted, cfg, CONFIG)
        assert not report.completed
        assert report.duration_s == pytest.approx(4 * DT)
        assert "EPISODE ABORTED: BatteryPowerError: too much" in report.to_text()

    def test_json_excludes_timing_by_default(self, driven):
        cfg, log = driven
        report = energy_report(log, cfg, CONFIG)
        data = json.loads(report.to_json())
        assert "median_solve_ms" not in data["solver"]
        assert "median_solve_ms" in report.to_dict(include_timing=True)["solver"]
        assert data["audit_passed"] == report.audit.passed
        assert data["wh_per_km"] == pytest.approx(report.wh_per_km)

    def test_save(self, driven, tmp_path):
        cfg, log = driven
        report = energy_report(log, cfg, CONFIG, seed=2)
        path = report.save(tmp_path / "out")
        assert path.name == "three-speed_seed2_report.json"
        assert (tmp_path / "out" / "three-speed_seed2_report.txt").read_text(encoding="utf-8").startswith(
            "Energy report: three-speed"
        )


class TestPhaseBreakdown:
    def test_classification(self):
        frame = pd.DataFrame({
            "Tm_Nm": [-1.0, 1.0, 1.0, 0.0],
            "a_mps2": [0.0, 1.0, 0.0, -1.0],
            "v_mps": [1.0, 2.0, 3.0, 4.0],
            "Pb_W": [-3600.0, 7200.0, 3600.0, 0.0],
        })
        phases = phase_breakdown(frame, 1.0)
        assert phases["regen"] == PhaseStats(1.0, 1.0, -1.0)
        assert phases["accel"] == PhaseStats(1.0, 2.0, 2.0)
        assert phases["cruise"] == PhaseStats(2.0, 7.0, 1.0)


class TestSolverStats:
    def test_counts(self):
        log = EpisodeLog(variant="three-speed")
        log.plans = [
            plan(nodes=4, gap=1e-3, solve_ms=10.0),
            plan(status="time-limit", fallback="shifted", nodes=8, gap=0.5, solve_ms=30.0),
            plan(status="infeasible", fallback="regen-brake", anchored=False, nodes=0, solve_ms=20.0),
            plan(nodes=0, gap=2e-3, solve_ms=40.0),
        ]
        stats = solver_stats(log)
        assert stats.cycles == 4
        assert stats.statuses == {"optimal": 2, "time-limit": 1, "infeasible": 1}
        assert stats.fallbacks == {"shifted": 1, "regen-brake": 1}
        assert stats.unanchored == 1
        assert stats.mean_nodes == pytest.approx(3.0)
        assert stats.max_gap == pytest.approx(2e-3)
        assert stats.median_solve_ms == pytest.approx(25.0)
        assert "max_solve_ms" not in stats.deterministic()

    def test_no_plans(self):
        assert solver_stats(EpisodeLog(variant="x")).cycles == 0


class TestAudit:
    def test_within_limits_passes(self, three_speed):
        audit = audit_constraints(static_log([10.0, 10.0], [0.0, 0.0]), three_speed, CONFIG)
        assert audit.passed

    def test_speed_excess(self, three_speed):
        audit = audit_constraints(static_log([10.0, 33.0], [0.0, 0.0]), three_speed, CONFIG)
        assert audit.speed == pytest.approx(1.0)
        assert not audit.passed

    def test_accel_and_jerk_excess(self, three_speed):
        audit = audit_constraints(static_log([10.0, 10.0], [0.0, 3.5]), three_speed, CONFIG)
        assert audit.accel == pytest.approx(0.5)
        assert audit.jerk == pytest.approx(3.5 / DT - 3.0)

    def test_slack_use_fails_audit(self, three_speed):
        audit = audit_constraints(static_log([10.0], [0.0], s_min=0.7), three_speed, CONFIG)
        assert audit.max_s_min_m == pytest.approx(0.7)
        assert not audit.passed


class TestSavings:
    def report(self, variant, distance_m, energy_wh, completed=True) -> EnergyReport:
        return EnergyReport(
            variant=variant,
            scenario="s",
            seed=0,
            completed=completed,
            distance_m=distance_m,
            energy_soc_wh=energy_wh,
        )

    def test_per_km(self):
        base = self.report("single-speed", 1000.0, 200.0)
        cand = self.report("three-speed", 2000.0, 360.0)
        assert savings_pct(base, cand) == pytest.approx(10.0)

    def test_short_episodes_use_raw_energy(self):
        base = self.report("single-speed", 5.0, 2.0)
        cand = self.report("three-speed", 4.0, 1.5)
        assert savings_pct(base, cand) == pytest.approx(25.0)

    def test_undefined(self):
        base = self.report("single-speed", 1000.0, 200.0, completed=False)
        cand = self.report("three-speed", 1000.0, 180.0)
        assert savings_pct(base, cand) is None
        assert savings_pct(self.report("a", 1000.0, 0.0), cand) is None
        text = ComparisonReport(candidate=cand, baseline=base).to_text()
        assert "Savings undefined: single-speed did not complete" in text

    def test_comparison_save(self, tmp_path):
        comparison = ComparisonReport(
            candidate=self.report("three-speed", 1000.0, 180.0),
            baseline=self.report("single-speed", 1000.0, 200.0),
        )
        path = comparison.save(tmp_path)
        data = json.loads(path.read_text(encoding="utf-8"))
        assert data["savings_pct"] == pytest.approx(10.0)
        assert "Measured savings: 10.00%" in (tmp_path / "comparison.txt").read_text(encoding="utf-8")


def test_operating_points(driven):
    cfg, log = driven
    points = operating_points(log, cfg)
    assert len(points) == 20
    assert points["w_m_radps"].iloc[0] == pytest.approx(171.0)
    assert points["eta"].between(0.6, 0.95).all()


def test_summarize(driven):
    cfg, log = driven
    table = summarize([energy_report(log, cfg, CONFIG, seed=s) for s in (0, 1)])
    assert list(table["seed"]) == [0, 1]
    assert table["completed"].all()
