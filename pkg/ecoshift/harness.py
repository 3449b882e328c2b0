"""
Episode orchestration for ecoshift.

Runs closed-loop episodes on a scenario, compares a multi-speed variant with
the single-speed baseline on identical traffic, batches comparisons across
seeds and evaluates the lead-vehicle predictor against the recorded truth.
"""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from .controller import ControllerConfig, EpisodeAborted, EpisodeLog, run_episode
from .powertrain import PowertrainConfig
from .reporting import ComparisonReport, EnergyReport, energy_report
from .scenario import Scenario, ScenarioFeed
from .state_estimation import TrafficEstimator, UkfConfig
from .traffic_flow import TrafficParams

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimatorSettings:
    """How the closed loop predicts the preceding vehicle.

    ``enabled`` False falls back to constant-speed extrapolation of the lead.
    """

    params: TrafficParams = field(default_factory=TrafficParams)
    ukf: Optional[UkfConfig] = None
    comm_range_m: float = 500.0
    enabled: bool = True

    @classmethod
    def from_config(cls, config) -> "EstimatorSettings":
        return cls(params=config.traffic_params, ukf=config.ukf_config, comm_range_m=config.comm_range_m)

    def build(self, scenario: Scenario) -> Optional[TrafficEstimator]:
        if not self.enabled:
            return None
        if self.ukf is None:
            raise ValueError("Estimator settings need a UKF configuration")
        return TrafficEstimator(
            params=self.params,
            config=self.ukf,
            plans=scenario.signals,
            comm_range_m=self.comm_range_m,
        )


class EpisodeResult(NamedTuple):
    log: EpisodeLog
    report: EnergyReport


def _check_steps(scenario: Scenario, settings: EstimatorSettings) -> None:
    if settings.enabled and not np.isclose(scenario.dt, settings.params.dt):
        raise ValueError(
            f"Scenario step {scenario.dt} s differs from the traffic model step {settings.params.dt} s"
        )


def run_variant(
    scenario: Scenario,
    cfg: PowertrainConfig,
    config: ControllerConfig,
    settings: EstimatorSettings,
    seed: Optional[int] = None,
    feed: Optional[ScenarioFeed] = None,
) -> EpisodeResult:
    """Run one episode; an aborted episode yields a partial report instead of raising."""
    seed = scenario.seed if seed is None else seed
    _check_steps(scenario, settings)
    feed = feed or scenario.feed(seed)
    initial = scenario.initial_state(feed.trace, cfg.vehicle)
    estimator = settings.build(scenario)
    logger.info("Running %s on %s (seed %s) for %.0f s", cfg.name, scenario.name, seed, scenario.duration_s)
    try:
        log = run_episode(feed, cfg, config, initial, scenario.duration_s, estimator=estimator)
    except EpisodeAborted as e:
        log = e.log
    report = energy_report(log, cfg, config, scenario=scenario.name, seed=seed)
    return EpisodeResult(log=log, report=report)


def run_comparison(
    scenario: Scenario,
    pair: Tuple[PowertrainConfig, PowertrainConfig],
    config: ControllerConfig,
    settings: EstimatorSettings,
    seed: Optional[int] = None,
) -> Tuple[ComparisonReport, Dict[str, EpisodeLog]]:
    """Run the candidate and the baseline on the same traffic and seeds.

    Args:
        scenario: Scenario to drive
        pair: (candidate, baseline) powertrains, e.g. three-speed and single-speed
        config: Controller settings shared by both runs
        settings: Lead prediction settings
        seed: Traffic seed; defaults to the scenario seed

    Returns:
        ComparisonReport and the two episode logs keyed by variant name
    """
    candidate, baseline = pair
    results = {cfg.name: run_variant(scenario, cfg, config, settings, seed) for cfg in (candidate, baseline)}
    comparison = ComparisonReport(candidate=results[candidate.name].report, baseline=results[baseline.name].report)
    savings = comparison.savings_pct
    if savings is None:
        logger.warning("Savings undefined for seed %s: an episode did not complete", seed)
    else:
        logger.info("Seed %s: %s saves %.2f%% against %s", seed, candidate.name, savings, baseline.name)
    return comparison, {name: result.log for name, result in results.items()}


@dataclass
class BatchResult:
    comparisons: List[ComparisonReport] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)

    @property
    def savings(self) -> np.ndarray:
        values = [c.savings_pct for c in self.comparisons]
        return np.array([v for v in values if v is not None])

    @property
    def mean_savings(self) -> float:
        savings = self.savings
        return float(np.mean(savings)) if savings.size else float("nan")

    def confidence_interval(self, level: float = 0.95) -> Tuple[float, float]:
        """Student-t interval of the mean savings (NaN with fewer than two seeds)."""
        savings = self.savings
        if savings.size < 2:
            return float("nan"), float("nan")
        sem = stats.sem(savings)
        if sem == 0:
            return float(savings[0]), float(savings[0])
        low, high = stats.t.interval(level, savings.size - 1, loc=np.mean(savings), scale=sem)
        return float(low), float(high)

    def mean_wh_per_km(self) -> Dict[str, float]:
        rows = [r for c in self.comparisons for r in (c.candidate, c.baseline) if r.completed]
        frame = pd.DataFrame({"variant": [r.variant for r in rows], "wh": [r.wh_per_km for r in rows]})
        return frame.groupby("variant")["wh"].mean().to_dict() if rows else {}

    def to_text(self) -> str:
        low, high = self.confidence_interval()
        text = "BATCH SUMMARY:\n"
        text += f"  Seeds compared: {len(self.comparisons)}\n"
        for variant, wh in sorted(self.mean_wh_per_km().items()):
            text += f"  Mean {variant}: {wh:.1f} Wh/km\n"
        text += f"  Mean savings: {self.mean_savings:.2f}% (95% CI {low:.2f} .. {high:.2f})\n"
        if self.failures:
            text += f"  Failures: {len(self.failures)}\n"
            for failure in self.failures:
                text += f"    - {failure}\n"
        return text


def run_batch(
    scenario: Scenario,
    seeds: Sequence[int],
    pair: Tuple[PowertrainConfig, PowertrainConfig],
    config: ControllerConfig,
    settings: EstimatorSettings,
    workers: int = 1,
) -> BatchResult:
    """Compare the pair over several seeds, running (seed, variant) episodes in parallel."""
    candidate, baseline = pair
    tasks = [(seed, cfg) for seed in seeds for cfg in (candidate, baseline)]
    logger.info("Running %s episodes with %s workers", len(tasks), workers)
    reports: Dict[Tuple[int, str], EnergyReport] = {}
    result = BatchResult()

    with ThreadPoolExecutor(max_workers=workers) as executor:
        future_to_task = {
            executor.submit(run_variant, scenario, cfg, config, settings, seed): (seed, cfg.name)
            for seed, cfg in tasks
        }

        for future in as_completed(future_to_task):
            seed, name = future_to_task[future]
            try:
                report = future.result().report
            except Exception as e:
                logger.error("Episode %s seed %s failed: %s", name, seed, e)
                result.failures.append(f"{name} seed {seed}: {e}")
                continue
            reports[(seed, name)] = report
            if not report.completed:
                result.failures.append(f"{name} seed {seed}: {report.failure}")
            logger.info("%s seed %s: %.1f Wh/km", name, seed, report.wh_per_km)

    for seed in seeds:
        pair_reports = reports.get((seed, candidate.name)), reports.get((seed, baseline.name))
        if None not in pair_reports:
            result.comparisons.append(ComparisonReport(candidate=pair_reports[0], baseline=pair_reports[1]))

    low, high = result.confidence_interval()
    logger.info(
        "SUMMARY: %s seeds, mean savings %.2f%% (95%% CI %.2f .. %.2f), %s failures",
        len(result.comparisons),
        result.mean_savings,
        low,
        high,
        len(result.failures),
    )
    return result


class PredictionEvaluation(NamedTuple):
    """Lead predictions along a trace against the recorded truth."""

    rmse: float
    frame: pd.DataFrame


def evaluate_predictions(
    scenario: Scenario,
    settings: EstimatorSettings,
    seed: Optional[int] = None,
    horizon_s: float = 10.0,
    every_s: float = 1.0,
    duration_s: Optional[float] = None,
    use_measurements: bool = True,
    feed: Optional[ScenarioFeed] = None,
) -> PredictionEvaluation:
    """Run the estimator along a trace and score its lead predictions.

    With ``use_measurements`` False the filter is propagated open loop,
    which is the baseline the corrected estimator must beat.

    Returns:
        PredictionEvaluation with the position RMSE over all predictions and
        one row per predicted point
    """
    seed = scenario.seed if seed is None else seed
    _check_steps(scenario, settings)
    feed = feed or scenario.feed(seed)
    estimator = settings.build(scenario)
    if estimator is None:
        raise ValueError("Prediction evaluation needs the estimator enabled")

    dt = feed.dt
    every = int(round(every_s / dt))
    duration = scenario.duration_s if duration_s is None else duration_s
    last = min(int(round(duration / dt)), feed.steps - int(round(horizon_s / dt)))
    lead_d, lead_v = feed.lead_state(0)
    estimator.initialize(lead_d, lead_v, k=0)

    rows = []
    for k in range(last + 1):
        lead_d, lead_v = feed.lead_state(k)
        estimator.reanchor(lead_d)
        if k % every == 0:
            prediction = estimator.predict_lead(lead_d, lead_v, horizon_s)
            truth = feed.lead_window(k, horizon_s, prediction.dt)
            rows.append(
                pd.DataFrame(
                    {
                        "t0_s": k * dt,
                        "t_s": k * dt + prediction.t,
                        "d_pred_m": prediction.d_lead,
                        "v_pred_mps": prediction.v_lead,
                        "sigma_d_m": prediction.sigma_d,
                        "d_true_m": truth.d_lead,
                        "v_true_mps": truth.v_lead,
                    }
                )
            )
        estimator.advance(feed.measurements(k + 1) if use_measurements else ())

    frame = pd.concat(rows, ignore_index=True) if rows else pd.DataFrame()
    rmse = float(np.sqrt(np.mean((frame["d_pred_m"] - frame["d_true_m"]) ** 2))) if rows else float("nan")
    logger.info(
        "Prediction RMSE %.2f m over %s horizons (%s)",
        rmse,
        len(rows),
        "with CV reports" if use_measurements else "open loop",
    )
    return PredictionEvaluation(rmse=rmse, frame=frame)
