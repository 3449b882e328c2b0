"""
Battery pack model for ecoshift.

Equivalent circuit of n_s series by n_p parallel cells with an open-circuit
voltage and an internal resistance looked up by state of charge. The
optimizer works in battery power, so the current is recovered from power by
inverting the terminal power quadratic.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.integrate import trapezoid

logger = logging.getLogger(__name__)


class BatteryPowerError(ValueError):
    """Exception for power demands the pack cannot deliver."""


# Per-cell tables over SOC for a 60 Ah NMC cell (synthetic).
_SOC_GRID = np.linspace(0.0, 1.0, 11)
_VOC_TABLE = np.array([3.00, 3.45, 3.55, 3.62, 3.68, 3.74, 3.80, 3.87, 3.95, 4.05, 4.15])
_R_TABLE = np.array(
    [0.0020, 0.0016, 0.0014, 0.0013, 0.0012, 0.0012, 0.0012, 0.0012, 0.0013, 0.0013, 0.0014]
)
# Pack current limits (A): discharge positive, charge negative.
_I_DIS_TABLE = np.array([0.0, 200.0, 450.0, 450.0, 450.0, 450.0, 450.0, 450.0, 450.0, 450.0, 450.0])
_I_CHG_TABLE = np.array(
    [-270.0, -270.0, -270.0, -270.0, -270.0, -270.0, -270.0, -270.0, -270.0, -150.0, 0.0]
)


@dataclass(frozen=True, eq=False)
class BatteryPack:
    """Pack capacity, topology, per-cell lookup tables and auxiliary load."""

    q_b: float
    n_s: int
    n_p: int
    soc_grid: np.ndarray
    voc_table: np.ndarray
    r_table: np.ndarray
    i_chg_table: np.ndarray
    i_dis_table: np.ndarray
    p_aux: float = 500.0

    def __post_init__(self):
        for name in ("soc_grid", "voc_table", "r_table", "i_chg_table", "i_dis_table"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.q_b <= 0 or self.n_s < 1 or self.n_p < 1:
            raise ValueError("q_b, n_s and n_p must be positive")
        sizes = {
            self.soc_grid.size,
            self.voc_table.size,
            self.r_table.size,
            self.i_chg_table.size,
            self.i_dis_table.size,
        }
        if len(sizes) != 1:
            raise ValueError("Battery lookup tables must share the SOC grid")
        if self.soc_grid[0] > 0 or self.soc_grid[-1] < 1:
            raise ValueError("SOC grid must cover [0, 1]")
        if np.any(self.voc_table <= 0) or np.any(self.r_table <= 0):
            raise ValueError("Voc and R_b must be positive over the SOC range")
        if np.any(self.i_chg_table > 0) or np.any(self.i_dis_table < 0):
            raise ValueError("Current limits must satisfy I_chg <= 0 <= I_dis")

    @classmethod
    def synthetic(cls, p_aux: float = 500.0) -> "BatteryPack":
        """Bundled 96s3p pack of 60 Ah cells (about 64 kWh)."""
        return cls(
            q_b=3 * 60.0 * 3600.0,
            n_s=96,
            n_p=3,
            soc_grid=_SOC_GRID,
            voc_table=_VOC_TABLE,
            r_table=_R_TABLE,
            i_chg_table=_I_CHG_TABLE,
            i_dis_table=_I_DIS_TABLE,
            p_aux=p_aux,
        )

    def voc(self, soc: float) -> float:
        return float(np.interp(soc, self.soc_grid, self.voc_table))

    def r_b(self, soc: float) -> float:
        return float(np.interp(soc, self.soc_grid, self.r_table))

    def i_dis(self, soc: float) -> float:
        return float(np.interp(soc, self.soc_grid, self.i_dis_table))

    def i_chg(self, soc: float) -> float:
        return float(np.interp(soc, self.soc_grid, self.i_chg_table))

    def nominal_energy_wh(self) -> float:
        """Pack energy at the mean open-circuit voltage."""
        mean_voc = float(trapezoid(self.voc_table, self.soc_grid))
        return self.n_s * mean_voc * self.q_b / 3600.0


def _check_soc(soc) -> None:
    if np.any(np.asarray(soc) < 0) or np.any(np.asarray(soc) > 1):
        raise ValueError(f"SOC must lie in [0, 1], got {soc}")


def battery_power(i_b, soc, pack: BatteryPack):
    """Terminal power (W) for pack current ``i_b`` (A) at ``soc``."""
    _check_soc(soc)
    voc = np.interp(soc, pack.soc_grid, pack.voc_table)
    r_b = np.interp(soc, pack.soc_grid, pack.r_table)
    i = np.asarray(i_b, dtype=float)
    power = pack.n_s * voc * i - i ** 2 * (pack.n_s / pack.n_p) * r_b
    return float(power) if np.ndim(power) == 0 else power


def max_power(soc: float, pack: BatteryPack) -> float:
    """Vertex of the terminal power quadratic."""
    _check_soc(soc)
    return pack.n_s * pack.n_p * pack.voc(soc) ** 2 / (4.0 * pack.r_b(soc))


def current_from_power(p_b, soc, pack: BatteryPack):
    """Physical (smaller magnitude) pack current delivering ``p_b`` watts.

    Raises:
        BatteryPowerError: if the demand exceeds the deliverable maximum
    """
    _check_soc(soc)
    voc = np.interp(soc, pack.soc_grid, pack.voc_table)
    r_b = np.interp(soc, pack.soc_grid, pack.r_table)
    p = np.asarray(p_b, dtype=float)
    b = pack.n_s * voc
    a = (pack.n_s / pack.n_p) * r_b
    disc = b ** 2 - 4.0 * a * p
    # tiny negative discriminants at the vertex are rounding
    disc = np.where((disc < 0) & (disc > -1e-9 * b ** 2), 0.0, disc)
    if np.any(disc < 0):
        raise BatteryPowerError(
            f"Power demand {p_b} W exceeds the deliverable maximum at SOC {soc}"
        )
    current = 2.0 * p / (b + np.sqrt(disc))
    return float(current) if np.ndim(current) == 0 else current


def battery_power_limits(soc: float, pack: BatteryPack) -> Tuple[float, float]:
    """Charge and discharge power bounds implied by the current limits."""
    i_max = pack.n_p * pack.voc(soc) / (2.0 * pack.r_b(soc))
    p_dis = battery_power(min(pack.i_dis(soc), i_max), soc, pack)
    p_chg = battery_power(pack.i_chg(soc), soc, pack)
    return p_chg, p_dis


def soc_rate(i_b: float, pack: BatteryPack) -> float:
    """dSOC/dt (1/s) for pack current ``i_b``."""
    return -i_b / pack.q_b
