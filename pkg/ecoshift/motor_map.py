"""
Traction motor map for ecoshift.

Efficiency surface over (motor speed, torque), the torque envelope, the exact
drive power used by the plant and the bilinear drive-power polynomial used by
the optimizer, refit by least squares over the map envelope.
"""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator

logger = logging.getLogger(__name__)

ENVELOPE_TOL = 1e-9


class MotorEnvelopeError(ValueError):
    """Exception for operating points outside the motor envelope."""


class DrivePowerFit(NamedTuple):
    """Coefficients of P_drv ~ p00 + p10*w + p01*T + p11*w*T."""

    p00: float
    p10: float
    p01: float
    p11: float
    r_squared: float = float("nan")
    median_pct_error: float = float("nan")


# Coefficients published for a production EV motor map; kept for reference
# checks and as an alternative optimizer model.
REFERENCE_FIT = DrivePowerFit(p00=1344.5, p10=1.64, p01=28.1, p11=1.0)


@dataclass(frozen=True, eq=False)
class MotorMap:
    """Efficiency grid and envelope of a traction motor.

    Torque limits follow a constant-torque region up to the base speed and a
    constant-power region above it; the generating envelope mirrors the
    motoring one.
    """

    w_grid: np.ndarray
    t_grid: np.ndarray
    eta: np.ndarray
    t_peak: float
    p_max: float
    w_min: float = 0.0
    fit: Optional[DrivePowerFit] = None
    _interp: RegularGridInterpolator = field(init=False, repr=False)

    def __post_init__(self):
        w_grid = np.asarray(self.w_grid, dtype=float)
        t_grid = np.asarray(self.t_grid, dtype=float)
        eta = np.asarray(self.eta, dtype=float)
        if eta.shape != (w_grid.size, t_grid.size):
            raise ValueError(
                f"Efficiency grid shape {eta.shape} does not match axes "
                f"({w_grid.size}, {t_grid.size})"
            )
        if np.any(eta <= 0) or np.any(eta > 1):
            raise ValueError("Efficiency must lie in (0, 1] on the whole grid")
        if self.t_peak <= 0 or self.p_max <= 0:
            raise ValueError("t_peak and p_max must be positive")
        object.__setattr__(self, "w_grid", w_grid)
        object.__setattr__(self, "t_grid", t_grid)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(
            self,
            "_interp",
            RegularGridInterpolator((w_grid, t_grid), eta, method="linear"),
        )
        if self.fit is None:
            object.__setattr__(self, "fit", fit_drive_power(self))
        elif not all(np.isfinite(self.fit[:4])):
            raise ValueError("Drive power coefficients must be finite")

    @property
    def w_max(self) -> float:
        return float(self.w_grid[-1])

    @property
    def w_base(self) -> float:
        return self.p_max / self.t_peak

    def t_max(self, w_m):
        """Motoring torque limit at motor speed ``w_m`` (rad/s)."""
        w = np.asarray(w_m, dtype=float)
        limit = np.minimum(self.t_peak, self.p_max / np.maximum(w, 1e-9))
        return float(limit) if np.ndim(w_m) == 0 else limit

    def t_min(self, w_m):
        """Generating torque limit (negative)."""
        return -self.t_max(w_m)

    def in_envelope(self, t_m, w_m) -> np.ndarray:
        t = np.asarray(t_m, dtype=float)
        w = np.asarray(w_m, dtype=float)
        limit = np.asarray(self.t_max(w))
        return (
            (w >= self.w_min - ENVELOPE_TOL)
            & (w <= self.w_max + ENVELOPE_TOL)
            & (np.abs(t) <= limit + ENVELOPE_TOL)
        )

    def efficiency(self, t_m, w_m):
        """Bilinear interpolation of the efficiency grid."""
        t = np.clip(np.asarray(t_m, dtype=float), self.t_grid[0], self.t_grid[-1])
        w = np.clip(np.asarray(w_m, dtype=float), self.w_grid[0], self.w_grid[-1])
        points = np.stack(np.broadcast_arrays(w, t), axis=-1)
        eta = self._interp(points).reshape(points.shape[:-1])
        return float(eta) if np.ndim(eta) == 0 else eta

    @classmethod
    def synthetic(
        cls,
        w_max: float = 850.0,
        t_peak: float = 300.0,
        p_max: float = 150e3,
        n_w: int = 35,
        n_t: int = 61,
    ) -> "MotorMap":
        """Bundled synthetic permanent-magnet motor.

        Efficiency peaks at 0.95 around 55% of top speed and 30% of peak
        torque and falls off quadratically to a floor of 0.6.
        """
        w_grid = np.linspace(0.0, w_max, n_w)
        t_grid = np.linspace(-t_peak, t_peak, n_t)
        w_hat = w_grid[:, None] / w_max
        t_hat = np.abs(t_grid[None, :]) / t_peak
        eta = 0.95 - 1.6 * (w_hat - 0.55) ** 2 - 0.5 * (t_hat - 0.3) ** 2
        eta = np.clip(eta, 0.6, 0.95)
        return cls(w_grid=w_grid, t_grid=t_grid, eta=eta, t_peak=t_peak, p_max=p_max)

    def with_fit(self, fit: DrivePowerFit) -> "MotorMap":
        return MotorMap(
            w_grid=self.w_grid,
            t_grid=self.t_grid,
            eta=self.eta,
            t_peak=self.t_peak,
            p_max=self.p_max,
            w_min=self.w_min,
            fit=fit,
        )


def drive_power_exact(t_m, w_m, motor: MotorMap):
    """Electrical drive power (W) from the efficiency map.

    Motoring draws w*T/eta, generating returns eta*w*T.

    Raises:
        MotorEnvelopeError: if any point is outside the envelope
    """
    t = np.asarray(t_m, dtype=float)
    w = np.asarray(w_m, dtype=float)
    if not np.all(motor.in_envelope(t, w)):
        raise MotorEnvelopeError(
            f"Operating point outside motor envelope: T={t_m} N*m, w={w_m} rad/s"
        )
    eta = np.asarray(motor.efficiency(t, w))
    mech = w * t
    power = np.where(t >= 0, mech / eta, eta * mech)
    return float(power) if power.ndim == 0 else power


def drive_power_fitted(t_m, w_m, coefficients):
    """Bilinear drive-power polynomial.

    Args:
        t_m: Motor torque (N*m)
        w_m: Motor speed (rad/s)
        coefficients: DrivePowerFit or a MotorMap carrying one
    """
    fit = coefficients.fit if isinstance(coefficients, MotorMap) else coefficients
    t = np.asarray(t_m, dtype=float)
    w = np.asarray(w_m, dtype=float)
    power = fit.p00 + fit.p10 * w + fit.p01 * t + fit.p11 * w * t
    return float(power) if np.ndim(power) == 0 else power


def fit_drive_power(motor: MotorMap, n_w: int = 60, n_t: int = 61) -> DrivePowerFit:
    """Least-squares fit of the bilinear polynomial over the envelope."""
    w = np.linspace(motor.w_min, motor.w_max, n_w)
    t = np.linspace(-motor.t_peak, motor.t_peak, n_t)
    W, T = np.meshgrid(w, t, indexing="ij")
    inside = np.abs(T) <= np.asarray(motor.t_max(W))
    W, T = W[inside], T[inside]

    eta = np.asarray(motor.efficiency(T, W))
    target = np.where(T >= 0, W * T / eta, eta * W * T)
    design = np.column_stack([np.ones_like(W), W, T, W * T])
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)

    residual = target - design @ coef
    ss_res = float(residual @ residual)
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    significant = np.abs(target) > 1e3
    pct = np.abs(residual[significant] / target[significant]) * 100.0
    median_pct = float(np.median(pct)) if pct.size else 0.0

    fit = DrivePowerFit(
        p00=float(coef[0]),
        p10=float(coef[1]),
        p01=float(coef[2]),
        p11=float(coef[3]),
        r_squared=r_squared,
        median_pct_error=median_pct,
    )
    logger.debug(
        "Drive power fit: p00=%.1f p10=%.3f p01=%.3f p11=%.4f R2=%.4f",
        fit.p00,
        fit.p10,
        fit.p01,
        fit.p11,
        fit.r_squared,
    )
    return fit
