"""
Configuration management for ecoshift.

Handles loading a TOML configuration file whose sections tune the traffic
model, the filter, the vehicle, the solver and the controller. Every section
is optional; missing keys take the built-in defaults.
"""

import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import toml

from .battery import BatteryPack
from .controller import ControllerConfig
from .dp_oracle import DpGrid
from .formulation import FormulationConfig, Weights
from .mip_solver import SolverLimits
from .motor_map import MotorMap
from .powertrain import PowertrainConfig, VehicleParams
from .state_estimation import UkfConfig
from .traffic_flow import NoiseSpec, TrafficParams
from .variants import VariantRegistry

logger = logging.getLogger(__name__)

SECTIONS = (
    "traffic",
    "noise",
    "ukf",
    "vehicle",
    "motor",
    "battery",
    "weights",
    "solver",
    "controller",
    "formulation",
    "dp",
    "output",
)
_UKF_KEYS = ("alpha", "kappa", "beta", "p0_rho_std", "p0_v_std")
_MOTOR_KEYS = ("w_max", "t_peak", "p_max")


@dataclass(frozen=True)
class OutputSettings:
    out_dir: str = "results"
    workers: int = 1
    seeds: int = 10
    variants_file: Optional[str] = None

    def __post_init__(self):
        if self.workers < 1 or self.seeds < 1:
            raise ValueError("workers and seeds must be at least 1")


def _keys_of(cls) -> tuple:
    return tuple(f.name for f in fields(cls)) if hasattr(cls, "__dataclass_fields__") else cls._fields


class Config:
    """Configuration manager for ecoshift."""

    def __init__(self, config_path: Optional[str] = None):
        """
        Initialize configuration manager.

        Args:
            config_path: Path to configuration file. If None, looks for
                        ecoshift.toml in the current directory or
                        ~/.ecoshift/config.toml, and uses the built-in
                        defaults when neither exists
        """
        self.config_path = self._find_config_path(config_path)
        self.config = self._load_config()

    def _find_config_path(self, config_path: Optional[str]) -> Optional[Path]:
        if config_path:
            path = Path(config_path)
            if not path.exists():
                raise FileNotFoundError(f"Configuration file not found at {path}")
            return path

        current_config = Path("ecoshift.toml")
        if current_config.exists():
            return current_config

        home_config = Path.home() / ".ecoshift" / "config.toml"
        if home_config.exists():
            return home_config

        return None

    def _load_config(self) -> Dict[str, Any]:
        if self.config_path is None:
            logger.debug("No configuration file found; using defaults")
            return {}

        try:
            with open(self.config_path, "r", encoding="utf-8") as f:
                config = toml.load(f)
        except (OSError, toml.TomlDecodeError) as e:
            raise ValueError(f"Error parsing configuration file: {e}") from e

        unknown = set(config) - set(SECTIONS)
        if unknown:
            raise ValueError(f"Unknown configuration sections: {', '.join(sorted(unknown))}")
        return config

    def _section(self, name: str, allowed: Iterable[str]) -> Dict[str, Any]:
        section = self.config.get(name, {})
        if not isinstance(section, dict):
            raise ValueError(f"[{name}] must be a table")
        unknown = set(section) - set(allowed)
        if unknown:
            raise ValueError(f"Unknown keys in [{name}]: {', '.join(sorted(unknown))}")
        return dict(section)

    def _build(self, name: str, cls, exclude: Iterable[str] = ()):
        section = self._section(name, _keys_of(cls))
        for key in exclude:
            section.pop(key, None)
        try:
            return cls(**section)
        except (TypeError, ValueError) as e:
            raise ValueError(f"Invalid [{name}] section: {e}") from e

    @property
    def traffic_params(self) -> TrafficParams:
        section = self._section("traffic", _keys_of(TrafficParams) + ("comm_range_m",))
        section.pop("comm_range_m", None)
        try:
            return TrafficParams(**section)
        except (TypeError, ValueError) as e:
            raise ValueError(f"Invalid [traffic] section: {e}") from e

    @property
    def comm_range_m(self) -> float:
        return float(self.config.get("traffic", {}).get("comm_range_m", 500.0))

    @property
    def noise(self) -> NoiseSpec:
        return self._build("noise", NoiseSpec)

    @property
    def ukf_config(self) -> UkfConfig:
        section = self._section("ukf", _UKF_KEYS)
        return UkfConfig.from_noise(self.noise, self.traffic_params, **section)

    @property
    def vehicle(self) -> VehicleParams:
        section = self._section("vehicle", _keys_of(VehicleParams))
        if "grade_points" in section:
            section["grade_points"] = tuple(tuple(p) for p in section["grade_points"])
        try:
            return VehicleParams(**section)
        except (TypeError, ValueError) as e:
            raise ValueError(f"Invalid [vehicle] section: {e}") from e

    @property
    def motor(self) -> MotorMap:
        return MotorMap.synthetic(**self._section("motor", _MOTOR_KEYS))

    @property
    def battery(self) -> BatteryPack:
        return BatteryPack.synthetic(**self._section("battery", ("p_aux",)))

    @property
    def weights(self) -> Weights:
        return self._build("weights", Weights)

    @property
    def solver_limits(self) -> SolverLimits:
        return self._build("solver", SolverLimits)

    @property
    def formulation(self) -> FormulationConfig:
        return self._build("formulation", FormulationConfig)

    @property
    def controller(self) -> ControllerConfig:
        section = self._section("controller", ("horizon_s", "dt", "replan_s", "variant"))
        try:
            return ControllerConfig(
                limits=self.solver_limits,
                weights=self.weights,
                formulation=self.formulation,
                **section,
            )
        except (TypeError, ValueError) as e:
            raise ValueError(f"Invalid [controller] section: {e}") from e

    @property
    def dp_grid(self) -> DpGrid:
        return self._build("dp", DpGrid)

    @property
    def output(self) -> OutputSettings:
        return self._build("output", OutputSettings)

    def registry(self) -> VariantRegistry:
        path = self.output.variants_file
        if path and self.config_path is not None and not Path(path).is_absolute():
            path = str(self.config_path.parent / path)
        return VariantRegistry(path)

    def powertrain(self, variant: str, registry: Optional[VariantRegistry] = None) -> PowertrainConfig:
        """Powertrain of ``variant`` on the configured vehicle, motor and battery."""
        registry = registry or self.registry()
        return registry.powertrain(variant, vehicle=self.vehicle, motor=self.motor, battery=self.battery)

    def get(self, key: str, default: Any = None) -> Any:
        return self.config.get(key, default)


def _defaults(obj, skip: Iterable[str] = ()) -> Dict[str, Any]:
    data = {}
    for name in _keys_of(type(obj)):
        value = getattr(obj, name)
        if name in skip or value is None:
            continue
        data[name] = list(value) if isinstance(value, tuple) else value
    return data


def create_example_config(path: str = "ecoshift.toml.example") -> None:
    """Create an example configuration file holding every default."""
    controller = ControllerConfig()
    example_config = {
        "traffic": {**_defaults(TrafficParams()), "comm_range_m": 500.0},
        "noise": _defaults(NoiseSpec()),
        "ukf": {"alpha": 0.1, "kappa": 0.0, "beta": 2.0, "p0_rho_std": 0.01, "p0_v_std": 2.0},
        "vehicle": _defaults(VehicleParams(), skip=("m", "grade_points")),
        "motor": {"w_max": 850.0, "t_peak": 300.0, "p_max": 150e3},
        "battery": {"p_aux": 500.0},
        "weights": _defaults(Weights()),
        "solver": _defaults(SolverLimits()),
        "controller": {
            "horizon_s": controller.horizon_s,
            "dt": controller.dt,
            "replan_s": controller.replan_s,
            "variant": controller.variant,
        },
        "formulation": _defaults(FormulationConfig()),
        "dp": _defaults(DpGrid()),
        "output": _defaults(OutputSettings()),
    }

    with open(path, "w", encoding="utf-8") as f:
        f.write("# ecoshift configuration; every key is optional\n")
        f.write("# vehicle mass comes from the transmission variant (variants.toml)\n\n")
        toml.dump(example_config, f)
