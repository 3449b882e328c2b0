"""
Main CLI application for ecoshift.

Predicts the preceding vehicle, runs closed-loop eco-driving episodes,
compares transmission variants and cross-checks the solver against the
dynamic-programming oracle.
"""

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import click

from .config import Config, create_example_config
from .dp_oracle import compare_with_mip
from .harness import EstimatorSettings, evaluate_predictions, run_batch, run_comparison, run_variant
from .powertrain import check_gear_design
from .reporting import operating_points
from .scenario import (
    Scenario,
    create_example_scenario,
    load_scenario,
    road_test_scenario,
    synthesize_road_test_trace,
)
from .variants import DEFAULT_PAIR, create_example_variants

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler(sys.stdout), logging.FileHandler("ecoshift.log")],
)
logger = logging.getLogger(__name__)

DEFAULT_SCENARIO = "scenarios/two_signal.yml"


def fail(command: str, error: BaseException) -> None:
    """Log ``error``, print it as JSON on stderr and exit nonzero."""
    logger.error("%s failed: %s", command, error)
    payload = {"error": type(error).__name__, "message": str(error), "command": command}
    click.echo(json.dumps(payload), err=True)
    sys.exit(1)


def _controller(config: Config, time_budget: Optional[float]):
    controller = config.controller
    if time_budget is not None:
        controller = replace(controller, limits=replace(controller.limits, time_budget_s=time_budget))
    return controller


def _out_dir(config: Config, out_dir: Optional[str]) -> Path:
    path = Path(out_dir or config.output.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _scenario(scenario: str, trace: Optional[str]) -> Scenario:
    return road_test_scenario(trace) if trace else load_scenario(scenario)


scenario_option = click.option("--scenario", "-s", default=DEFAULT_SCENARIO, help="Scenario YAML file")
seed_option = click.option("--seed", type=int, default=None, help="Traffic seed (default: scenario seed)")
out_dir_option = click.option("--out-dir", "-o", default=None, help="Output directory")
time_budget_option = click.option("--time-budget", type=float, default=None, help="Solver time budget per cycle (s)")
trace_option = click.option("--trace", default=None, help="Replay a recorded lead trace (CSV) instead of a scenario")


@click.group()
@click.option("--config", "-c", help="Configuration file path")
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose logging")
@click.pass_context
def cli(ctx, config, verbose):
    """ecoshift - Eco-driving co-optimization for multi-speed electric vehicles."""
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config


@cli.command()
@scenario_option
@trace_option
@seed_option
@out_dir_option
@click.option("--horizon", default=10.0, help="Prediction horizon (s)")
@click.option("--open-loop", is_flag=True, help="Ignore connected-vehicle reports")
@click.pass_context
def predict(ctx, scenario, trace, seed, out_dir, horizon, open_loop):
    """Predict the preceding vehicle along a scenario and score it against the trace."""
    try:
        config = Config(ctx.obj.get("config_path"))
        scene = _scenario(scenario, trace)
        seed = scene.seed if seed is None else seed
        evaluation = evaluate_predictions(
            scene,
            EstimatorSettings.from_config(config),
            seed=seed,
            horizon_s=horizon,
            use_measurements=not open_loop,
        )
        path = _out_dir(config, out_dir) / f"predictions_{scene.name}_seed{seed}.csv"
        evaluation.frame.to_csv(path, index=False, float_format="%.6g")
        logger.info("Predictions written to %s", path)
        click.echo(f"RMSE {evaluation.rmse:.3f} m over {horizon:.1f} s horizons")
    except Exception as e:
        fail("predict", e)


@cli.command()
@scenario_option
@trace_option
@seed_option
@out_dir_option
@time_budget_option
@click.option("--variant", default=None, help="Transmission variant (default from config)")
@click.option("--no-estimator", is_flag=True, help="Predict the lead at constant speed")
@click.pass_context
def run(ctx, scenario, trace, seed, out_dir, time_budget, variant, no_estimator):
    """Run one closed-loop episode and write its log and energy report."""
    try:
        config = Config(ctx.obj.get("config_path"))
        controller = _controller(config, time_budget)
        scene = _scenario(scenario, trace)
        seed = scene.seed if seed is None else seed
        cfg = config.powertrain(variant or controller.variant)
        settings = replace(EstimatorSettings.from_config(config), enabled=not no_estimator)

        result = run_variant(scene, cfg, controller, settings, seed)
        out = _out_dir(config, out_dir)
        stem = f"{cfg.name}_{scene.name}_seed{seed}"
        result.log.to_csv(out / f"{stem}_episode.csv")
        operating_points(result.log, cfg).to_csv(out / f"{stem}_operating_points.csv", index=False)
        result.report.save(out, stem)
        click.echo(result.report.to_text())
        if not result.report.completed:
            raise RuntimeError(f"Episode aborted: {result.report.failure}")
    except Exception as e:
        fail("run", e)


@cli.command()
@scenario_option
@seed_option
@out_dir_option
@time_budget_option
@click.option("--seeds", "n_seeds", type=int, default=1, help="Number of consecutive seeds to compare")
@click.option("--workers", "-p", type=int, default=None, help="Parallel episodes")
@click.pass_context
def compare(ctx, scenario, seed, out_dir, time_budget, n_seeds, workers):
    """Compare the three-speed variant with the single-speed baseline."""
    try:
        config = Config(ctx.obj.get("config_path"))
        controller = _controller(config, time_budget)
        scene = load_scenario(scenario)
        seed = scene.seed if seed is None else seed
        registry = config.registry()
        pair = tuple(config.powertrain(name, registry) for name in DEFAULT_PAIR)
        settings = EstimatorSettings.from_config(config)
        out = _out_dir(config, out_dir)

        if n_seeds <= 1:
            comparison, logs = run_comparison(scene, pair, controller, settings, seed)
            for name, log in logs.items():
                log.to_csv(out / f"{name}_{scene.name}_seed{seed}_episode.csv")
                operating_points(log, config.powertrain(name, registry)).to_csv(
                    out / f"{name}_{scene.name}_seed{seed}_operating_points.csv", index=False
                )
            comparison.save(out, f"comparison_{scene.name}_seed{seed}")
            click.echo(comparison.to_text())
            if comparison.savings_pct is None:
                raise RuntimeError("Comparison incomplete: an episode aborted")
            return

        seeds = list(range(seed, seed + n_seeds))
        batch = run_batch(scene, seeds, pair, controller, settings, workers or config.output.workers)
        for comparison in batch.comparisons:
            comparison.save(out, f"comparison_{scene.name}_seed{comparison.candidate.seed}")
        summary = batch.to_text()
        (out / f"batch_{scene.name}.txt").write_text(summary, encoding="utf-8")
        click.echo(summary)
        if batch.failures:
            raise RuntimeError(f"{len(batch.failures)} episodes failed")
    except Exception as e:
        fail("compare", e)


@cli.command()
@scenario_option
@seed_option
@time_budget_option
@click.option("--horizon", default=3.0, help="Instance horizon (s)")
@click.option("--variant", default=None, help="Transmission variant (default from config)")
@click.pass_context
def oracle(ctx, scenario, seed, time_budget, horizon, variant):
    """Cross-check the MIP against the dynamic-programming oracle at the scenario start."""
    try:
        config = Config(ctx.obj.get("config_path"))
        scene = load_scenario(scenario)
        feed = scene.feed(seed)
        cfg = config.powertrain(variant or config.controller.variant)
        grid = config.dp_grid
        limits = config.solver_limits
        limits = replace(limits, time_budget_s=time_budget or max(limits.time_budget_s, 30.0))
        initial = scene.initial_state(feed.trace, cfg.vehicle)
        lead = feed.lead_window(0, horizon, grid.dt)

        result = compare_with_mip(
            initial, lead, horizon, cfg, grid, config.weights, limits, config.formulation
        )
        click.echo(json.dumps(result._asdict(), indent=2))
    except Exception as e:
        fail("oracle", e)


@cli.command("check-gears")
@click.option("--variant", "variants", multiple=True, help="Variant to audit (default: all)")
@click.pass_context
def check_gears(ctx, variants):
    """Audit gear ratios for gradeability and top speed."""
    try:
        config = Config(ctx.obj.get("config_path"))
        registry = config.registry()
        failed = []
        for name in variants or registry.names():
            cfg = config.powertrain(name, registry)
            check = check_gear_design(cfg.gears, cfg)
            status = "PASS" if check.passed else "FAIL"
            click.echo(
                f"{name}: {status} (grade margin {check.grade_margin_n:.0f} N, "
                f"top speed margin {check.speed_margin_mps:.2f} m/s)"
            )
            if not check.passed:
                failed.append(name)
        if failed:
            raise ValueError(f"Gear design check failed for {', '.join(failed)}")
    except Exception as e:
        fail("check-gears", e)


def _create(path: str, writer, what: str) -> None:
    if Path(path).exists() and not click.confirm(f"{path} already exists. Overwrite?"):
        logger.info("Skipped creating %s", path)
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    writer(path)
    logger.info("Created example %s: %s", what, path)


@cli.command()
@click.option("--config-file", default="ecoshift.toml.example", help="Example config file name")
@click.option("--variants-file", default="variants.toml.example", help="Example variants file name")
@click.option("--scenario-file", default="scenario.yml.example", help="Example scenario file name")
@click.option("--trace-file", default="road_test_trace.csv", help="Synthetic road-test trace file name")
def init(config_file, variants_file, scenario_file, trace_file):
    """Create example configuration, variants, scenario and trace files."""
    try:
        _create(config_file, create_example_config, "configuration")
        _create(variants_file, create_example_variants, "variants")
        _create(scenario_file, create_example_scenario, "scenario")
        _create(trace_file, lambda path: synthesize_road_test_trace().to_csv(path), "road-test trace")

        logger.info("Next steps:")
        logger.info("1. Copy %s to ecoshift.toml and adjust the settings", config_file)
        logger.info("2. Copy %s to variants.toml to change the transmissions", variants_file)
        logger.info("3. Run 'ecoshift check-gears' to audit the gear ratios")
        logger.info("4. Run 'ecoshift compare --scenario %s' for a variant comparison", scenario_file)
    except Exception as e:
        fail("init", e)


def main():
    """Main entry point."""
    try:
        cli()
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        sys.exit(1)


if __name__ == "__main__":
    main()
