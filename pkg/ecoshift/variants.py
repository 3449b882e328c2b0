"""
Transmission variants for ecoshift.

Maps variant names to gear ratios, vehicle mass and driveline efficiency,
read from a TOML file of ``[variants.<name>]`` tables.
"""

import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import toml

from .battery import BatteryPack
from .motor_map import MotorMap
from .powertrain import GearSet, PowertrainConfig, VehicleParams

logger = logging.getLogger(__name__)


class Variant(NamedTuple):
    """One transmission variant."""

    name: str
    ratios: Tuple[float, ...]
    mass_kg: float
    eta_gear: float

    @property
    def gears(self) -> GearSet:
        return GearSet(self.ratios, self.eta_gear)


BUILTIN_VARIANTS = {
    "three-speed": Variant("three-speed", (17.1, 23.6, 32.3), 1948.0, 0.83),
    "single-speed": Variant("single-speed", (23.6,), 1848.0, 0.93),
}
DEFAULT_PAIR = ("three-speed", "single-speed")


class VariantRegistry:
    """Loads transmission variants; falls back to the built-in pair."""

    def __init__(self, variants_path: Optional[str] = None):
        """
        Initialize the registry.

        Args:
            variants_path: Path to a variants TOML file. If None, looks for
                        variants.toml in the current directory or
                        ~/.ecoshift/variants.toml
        """
        self.variants_path = self._find_variants_path(variants_path)
        self.variants = self._load_variants()

    def _find_variants_path(self, variants_path: Optional[str]) -> Path:
        if variants_path:
            return Path(variants_path)

        current = Path("variants.toml")
        if current.exists():
            return current

        home = Path.home() / ".ecoshift" / "variants.toml"
        if home.exists():
            return home

        return current

    def _load_variants(self) -> Dict[str, Variant]:
        if not self.variants_path.exists():
            logger.debug("No variants file at %s; using built-in variants", self.variants_path)
            return dict(BUILTIN_VARIANTS)

        try:
            with open(self.variants_path, "r", encoding="utf-8") as f:
                data = toml.load(f)
        except (OSError, toml.TomlDecodeError) as e:
            raise ValueError(f"Error parsing variants file {self.variants_path}: {e}") from e

        variants = {}
        for name, entry in data.get("variants", {}).items():
            if not isinstance(entry, dict):
                logger.warning("Invalid variant entry for %s: %s", name, entry)
                continue
            try:
                variant = Variant(
                    name=name,
                    ratios=tuple(float(r) for r in entry["ratios"]),
                    mass_kg=float(entry["mass_kg"]),
                    eta_gear=float(entry["eta_gear"]),
                )
                variant.gears  # validates ratios and efficiency
                if variant.mass_kg <= 0:
                    raise ValueError("mass_kg must be positive")
            except (KeyError, TypeError, ValueError) as e:
                logger.warning("Skipping variant %s: %s", name, e)
                continue
            variants[name] = variant

        logger.info("Loaded %s variants from %s", len(variants), self.variants_path)
        return variants

    def get(self, name: str) -> Variant:
        if name not in self.variants:
            raise KeyError(f"Unknown variant '{name}'; known: {', '.join(sorted(self.variants))}")
        return self.variants[name]

    def names(self) -> Sequence[str]:
        return sorted(self.variants)

    def powertrain(
        self,
        name: str,
        vehicle: Optional[VehicleParams] = None,
        motor: Optional[MotorMap] = None,
        battery: Optional[BatteryPack] = None,
    ) -> PowertrainConfig:
        """PowertrainConfig for variant ``name`` on a shared vehicle, motor and pack."""
        variant = self.get(name)
        vehicle = replace(vehicle or VehicleParams(), m=variant.mass_kg)
        return PowertrainConfig(
            name=name,
            vehicle=vehicle,
            gears=variant.gears,
            motor=motor if motor is not None else MotorMap.synthetic(),
            battery=battery if battery is not None else BatteryPack.synthetic(),
        )


def create_example_variants(path: str = "variants.toml.example") -> None:
    """Create an example variants file with the three-speed and single-speed pair."""
    example = {
        "variants": {
            name: {"ratios": list(v.ratios), "mass_kg": v.mass_kg, "eta_gear": v.eta_gear}
            for name, v in BUILTIN_VARIANTS.items()
        }
    }

    with open(path, "w", encoding="utf-8") as f:
        f.write("# Transmission variants for ecoshift\n")
        f.write("# ratios are lumped (motor rad/s per vehicle m/s), mass in kg\n\n")
        toml.dump(example, f)
