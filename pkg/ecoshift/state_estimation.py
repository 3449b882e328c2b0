"""
Traffic state estimation for ecoshift.

An unscented Kalman filter over the stacked (rho, v) grid state of the
traffic model, corrected by speed reports from connected vehicles, plus the
forward propagation that turns a belief into a prediction of the preceding
vehicle's trajectory with a growing position uncertainty.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, NamedTuple, Optional, Sequence

import numpy as np
import scipy.linalg
from filterpy.kalman import MerweScaledSigmaPoints, unscented_transform

from .traffic_flow import (
    NoiseSpec,
    SignalPlan,
    SignalSchedule,
    TrafficGridState,
    TrafficModelError,
    TrafficParams,
    advance,
    equilibrium_density,
    interpolation_weights,
    measure_speed,
    signal_schedule,
    step,
)

logger = logging.getLogger(__name__)

JITTER = 1e-9
JITTER_RETRIES = 3
PSD_FLOOR = -1e-9


class CovarianceError(RuntimeError):
    """Exception raised when a covariance cannot be factorised."""


def _check_psd(name: str, matrix: np.ndarray, dim: int) -> None:
    if matrix.shape != (dim, dim):
        raise ValueError(f"{name} must be {dim}x{dim}, got {matrix.shape}")
    if not np.allclose(matrix, matrix.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(matrix).min() < PSD_FLOOR:
        raise ValueError(f"{name} must be positive semi-definite")


@dataclass(frozen=True, eq=False)
class UkfConfig:
    """Sigma-point tuning and noise covariances."""

    Q: np.ndarray
    R_std: float
    P0: np.ndarray
    alpha: float = 0.1
    kappa: float = 0.0
    beta: float = 2.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.R_std < 0:
            raise ValueError("R_std must be non-negative")
        Q = np.asarray(self.Q, dtype=float)
        P0 = np.asarray(self.P0, dtype=float)
        dim = Q.shape[0]
        _check_psd("Q", Q, dim)
        _check_psd("P0", P0, dim)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "P0", P0)

    @property
    def dim(self) -> int:
        return self.Q.shape[0]

    @classmethod
    def from_noise(
        cls,
        noise: NoiseSpec,
        params: TrafficParams,
        p0_rho_std: float = 0.01,
        p0_v_std: float = 2.0,
        alpha: float = 0.1,
        kappa: float = 0.0,
        beta: float = 2.0,
    ) -> "UkfConfig":
        """Block-diagonal covariances for a grid of ``params.n_cells`` cells."""
        n = params.n_cells
        q = np.concatenate([np.full(n, noise.rho_std ** 2), np.full(n, noise.v_std ** 2)])
        p0 = np.concatenate([np.full(n, p0_rho_std ** 2), np.full(n, p0_v_std ** 2)])
        return cls(
            Q=np.diag(q),
            R_std=noise.measurement_std,
            P0=np.diag(p0),
            alpha=alpha,
            kappa=kappa,
            beta=beta,
        )


@dataclass(frozen=True, eq=False)
class Belief:
    """Gaussian belief over the stacked grid state at step ``k``."""

    mean: np.ndarray
    cov: np.ndarray
    k: int = 0

    @property
    def state(self) -> TrafficGridState:
        return TrafficGridState.from_vector(self.mean)

    @property
    def n_cells(self) -> int:
        return self.mean.size // 2

    @classmethod
    def initial(cls, state: TrafficGridState, config: UkfConfig, k: int = 0) -> "Belief":
        return cls(mean=state.as_vector(), cov=config.P0.copy(), k=k)

    def speed_variance(self, position_m: float, params: TrafficParams) -> float:
        """Variance of the interpolated speed at a window position."""
        j, alpha = interpolation_weights(position_m, params)
        j, alpha = int(j), float(alpha)
        n = self.n_cells
        idx = [n + j, n + j + 1]
        w = np.array([1.0 - alpha, alpha])
        block = self.cov[np.ix_(idx, idx)]
        return max(float(w @ block @ w), 0.0)


class CvMeasurement(NamedTuple):
    """Speed report of one connected vehicle (position relative to the window)."""

    vehicle_id: str
    position_m: float
    speed_mps: float
    step: int


def _jittered_cholesky(matrix: np.ndarray) -> np.ndarray:
    """Upper Cholesky factor, retrying with diagonal jitter on failure."""
    attempt = matrix
    for retry in range(JITTER_RETRIES + 1):
        try:
            return scipy.linalg.cholesky(attempt, lower=False)
        except np.linalg.LinAlgError:
            if retry == JITTER_RETRIES:
                break
            logger.warning(
                "Covariance factorisation failed, adding %s*I jitter (retry %s)",
                JITTER,
                retry + 1,
            )
            attempt = attempt + JITTER * np.eye(matrix.shape[0])
    raise CovarianceError(
        f"Cholesky factorisation failed after {JITTER_RETRIES} jitter retries"
    )


def enforce_psd(cov: np.ndarray) -> np.ndarray:
    """Symmetrise and floor negative eigenvalues at zero."""
    sym = 0.5 * (cov + cov.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    if eigvals.min() >= 0:
        return sym
    eigvals = np.clip(eigvals, 0.0, None)
    fixed = (eigvecs * eigvals) @ eigvecs.T
    return 0.5 * (fixed + fixed.T)


def sigma_points(config: UkfConfig, dim: int) -> MerweScaledSigmaPoints:
    return MerweScaledSigmaPoints(
        dim,
        alpha=config.alpha,
        beta=config.beta,
        kappa=config.kappa,
        sqrt_method=_jittered_cholesky,
    )


def unscented_predict(
    belief: Belief,
    fx: Callable[[np.ndarray], np.ndarray],
    Q: np.ndarray,
    config: UkfConfig,
) -> Belief:
    """Generic sigma-point time update.

    Args:
        belief: Prior belief
        fx: Process function mapping a ``(m, dim)`` batch to ``(m, dim)``
        Q: Process noise covariance
        config: Sigma-point tuning

    Returns:
        Predicted belief at ``belief.k + 1``
    """
    if not np.any(belief.cov):
        mean = fx(belief.mean[None, :])[0]
        return Belief(mean=mean, cov=enforce_psd(Q.copy()), k=belief.k + 1)

    points = sigma_points(config, belief.mean.size)
    sigmas = points.sigma_points(belief.mean, belief.cov)
    propagated = fx(sigmas)
    mean, cov = unscented_transform(propagated, points.Wm, points.Wc, Q)
    return Belief(mean=mean, cov=enforce_psd(cov), k=belief.k + 1)


def unscented_update(
    belief: Belief,
    z: np.ndarray,
    hx: Callable[[np.ndarray], np.ndarray],
    R: np.ndarray,
    config: UkfConfig,
) -> Belief:
    """Generic sigma-point measurement update."""
    if not np.any(belief.cov):
        return belief

    points = sigma_points(config, belief.mean.size)
    sigmas = points.sigma_points(belief.mean, belief.cov)
    observed = hx(sigmas)
    z_pred, S = unscented_transform(observed, points.Wm, points.Wc, R)

    dx = sigmas - belief.mean
    dz = observed - z_pred
    Pxz = (points.Wc[:, None] * dx).T @ dz

    gain = scipy.linalg.solve(S, Pxz.T, assume_a="pos").T
    mean = belief.mean + gain @ (np.asarray(z, dtype=float) - z_pred)
    cov = belief.cov - gain @ S @ gain.T
    return Belief(mean=mean, cov=enforce_psd(cov), k=belief.k)


def traffic_process(
    signals: SignalSchedule, k: int, params: TrafficParams
) -> Callable[[np.ndarray], np.ndarray]:
    """Batch process function for the traffic model at step ``k``."""
    n = params.n_cells
    red = signals.red_mask(k, n)

    def fx(batch: np.ndarray) -> np.ndarray:
        rho, v, _ = advance(batch[:, :n], batch[:, n:], red, params)
        return np.hstack([rho, v])

    return fx


def ukf_predict(
    belief: Belief, signals: SignalSchedule, params: TrafficParams, config: UkfConfig
) -> Belief:
    """Propagate the belief through one step of the traffic model."""
    fx = traffic_process(signals, belief.k, params)
    return unscented_predict(belief, fx, config.Q, config)


def observation_matrix(
    measurements: Sequence[CvMeasurement], params: TrafficParams
) -> np.ndarray:
    """Rows blending the two cell speeds around each measurement position."""
    n = params.n_cells
    H = np.zeros((len(measurements), 2 * n))
    for row, meas in enumerate(measurements):
        j, alpha = interpolation_weights(meas.position_m, params)
        H[row, n + int(j)] = 1.0 - float(alpha)
        H[row, n + int(j) + 1] = float(alpha)
    return H


def ukf_update(
    belief: Belief,
    measurements: Iterable[CvMeasurement],
    params: TrafficParams,
    config: UkfConfig,
) -> Belief:
    """Correct the belief with connected-vehicle speed reports.

    Reports outside the measurable window are rejected and logged.
    """
    accepted: List[CvMeasurement] = []
    for meas in measurements:
        try:
            interpolation_weights(meas.position_m, params)
        except TrafficModelError:
            logger.warning(
                "Rejected measurement from %s at %.1f m: outside grid",
                meas.vehicle_id,
                meas.position_m,
            )
            continue
        accepted.append(meas)

    if not accepted:
        return belief

    H = observation_matrix(accepted, params)
    z = np.array([m.speed_mps for m in accepted])
    R = (config.R_std ** 2) * np.eye(len(accepted))
    return unscented_update(belief, z, lambda batch: batch @ H.T, R, config)


@dataclass(frozen=True, eq=False)
class LeadPrediction:
    """Predicted trajectory of the preceding vehicle.

    Positions are road coordinates (m). ``exited_grid`` is set when the
    prediction ran past the estimation window and was extended at the last
    cell speed.
    """

    t: np.ndarray
    d_lead: np.ndarray
    v_lead: np.ndarray
    sigma_d: np.ndarray
    dt: float
    exited_grid: bool = False

    def __post_init__(self):
        for name in ("t", "d_lead", "v_lead", "sigma_d"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        lengths = {self.t.size, self.d_lead.size, self.v_lead.size, self.sigma_d.size}
        if len(lengths) != 1:
            raise ValueError("Prediction arrays must share one length")
        if np.any(np.diff(self.d_lead) < -1e-9):
            raise ValueError("d_lead must be non-decreasing")
        if np.any(self.sigma_d < 0) or np.any(np.diff(self.sigma_d) < -1e-9):
            raise ValueError("sigma_d must be non-negative and non-decreasing")
        if np.any(self.v_lead < 0):
            raise ValueError("v_lead must be non-negative")

    @property
    def horizon_s(self) -> float:
        return float(self.t[-1] - self.t[0])

    @property
    def n_steps(self) -> int:
        return self.t.size - 1

    def resample(self, dt: float, n_steps: int) -> "LeadPrediction":
        """Linear interpolation onto a coarser or finer grid of ``n_steps``."""
        if n_steps * dt > self.horizon_s + 1e-9:
            raise ValueError(
                f"Cannot resample {self.horizon_s:.2f} s prediction to {n_steps * dt:.2f} s"
            )
        t = self.t[0] + dt * np.arange(n_steps + 1)
        return LeadPrediction(
            t=t,
            d_lead=np.interp(t, self.t, self.d_lead),
            v_lead=np.interp(t, self.t, self.v_lead),
            sigma_d=np.interp(t, self.t, self.sigma_d),
            dt=dt,
            exited_grid=self.exited_grid,
        )

    @classmethod
    def constant_speed(
        cls, d0: float, v: float, horizon_s: float, dt: float
    ) -> "LeadPrediction":
        """Lead cruising at ``v`` with no uncertainty."""
        n = int(round(horizon_s / dt))
        t = dt * np.arange(n + 1)
        return cls(
            t=t,
            d_lead=d0 + v * t,
            v_lead=np.full(n + 1, float(v)),
            sigma_d=np.zeros(n + 1),
            dt=dt,
        )


def predict_lead(
    belief: Belief,
    lead_position_m: float,
    lead_speed: float,
    signals: SignalSchedule,
    horizon_s: float,
    params: TrafficParams,
    config: UkfConfig,
    origin_m: float = 0.0,
) -> LeadPrediction:
    """Predict the preceding vehicle over ``horizon_s`` at the model step.

    The mean field is advanced with the deterministic model and the
    covariance with the unscented time update. The lead moves with the
    interpolated traffic speed at its running position; its position
    variance accumulates dt^2 times the speed variance at that position.

    Args:
        belief: Current traffic belief
        lead_position_m: Lead position relative to the window origin
        lead_speed: Lead speed now (m/s)
        signals: Signals on the window
        horizon_s: Prediction horizon (s)
        params: Traffic parameters
        config: Filter tuning
        origin_m: Road coordinate of the window origin

    Returns:
        LeadPrediction in road coordinates
    """
    if horizon_s <= 0:
        raise ValueError(f"horizon_s must be positive, got {horizon_s}")
    interpolation_weights(lead_position_m, params)

    dt = params.dt
    n = int(round(horizon_s / dt))
    d = np.zeros(n + 1)
    v = np.zeros(n + 1)
    var_d = np.zeros(n + 1)
    d[0], v[0] = lead_position_m, max(lead_speed, 0.0)

    mean_state = belief.state
    cov_belief = belief
    exited = False
    var_v = cov_belief.speed_variance(lead_position_m, params)

    for i in range(1, n + 1):
        k = belief.k + i - 1
        mean_state = step(mean_state, signals, k, params)
        cov_belief = ukf_predict(cov_belief, signals, params, config)

        d[i] = d[i - 1] + dt * v[i - 1]
        var_d[i] = var_d[i - 1] + dt ** 2 * var_v
        try:
            v[i] = measure_speed(mean_state, d[i], params)
            var_v = cov_belief.speed_variance(d[i], params)
        except TrafficModelError:
            if not exited:
                logger.debug("Lead left the estimation window at %.1f m", d[i])
            exited = True
            v[i] = mean_state.v[-1]
            var_v = float(cov_belief.cov[-1, -1])

    return LeadPrediction(
        t=dt * np.arange(n + 1),
        d_lead=origin_m + d,
        v_lead=np.clip(v, 0.0, None),
        sigma_d=np.sqrt(var_d),
        dt=dt,
        exited_grid=exited,
    )


@dataclass
class TrafficEstimator:
    """Moving-window estimator tracking the traffic ahead of the ego vehicle.

    The window starts ``lead_offset_cells`` cells behind the lead and is
    re-anchored forward in whole cells once the lead has moved
    ``reanchor_cells`` cells past that point. Cells entering the window copy
    the last known cell and take the prior variance.
    """

    params: TrafficParams
    config: UkfConfig
    plans: Sequence[SignalPlan] = ()
    comm_range_m: float = 500.0
    lead_offset_cells: int = 2
    reanchor_cells: int = 2
    origin_m: float = 0.0
    belief: Optional[Belief] = field(default=None)

    def initialize(self, lead_position_m: float, lead_speed: float, k: int = 0) -> Belief:
        dx = self.params.dx
        self.origin_m = np.floor(lead_position_m / dx - self.lead_offset_cells) * dx
        if lead_speed >= self.params.v0:
            rho = 0.8 * self.params.rho_c
        else:
            rho = equilibrium_density(lead_speed, self.params)
        state = TrafficGridState(
            rho=np.full(self.params.n_cells, rho),
            v=np.full(self.params.n_cells, min(lead_speed, self.params.v0)),
        )
        self.belief = Belief.initial(state, self.config, k=k)
        logger.debug("Estimator initialised at origin %.1f m", self.origin_m)
        return self.belief

    def _require_belief(self) -> Belief:
        if self.belief is None:
            raise RuntimeError("Estimator used before initialize()")
        return self.belief

    def schedule(self, k0: int, n_steps: int) -> SignalSchedule:
        return signal_schedule(
            self.plans, self.origin_m, self.params, k0, n_steps, self.comm_range_m
        )

    def reanchor(self, lead_position_m: float) -> int:
        """Shift the window forward when the lead has advanced; returns cells shifted."""
        belief = self._require_belief()
        dx = self.params.dx
        relative = lead_position_m - self.origin_m
        shift = int(np.floor(relative / dx)) - self.lead_offset_cells
        if shift < self.reanchor_cells:
            return 0

        n = self.params.n_cells
        source = np.minimum(np.arange(n) + shift, n - 1)
        index = np.concatenate([source, n + source])
        mean = belief.mean[index]
        cov = belief.cov[np.ix_(index, index)]
        fresh = np.concatenate([np.arange(n) + shift >= n] * 2)
        cov[fresh, :] = 0.0
        cov[:, fresh] = 0.0
        cov[fresh, fresh] = np.diag(self.config.P0)[fresh]

        self.origin_m += shift * dx
        self.belief = Belief(mean=mean, cov=enforce_psd(cov), k=belief.k)
        logger.debug("Window re-anchored by %s cells to %.1f m", shift, self.origin_m)
        return shift

    def advance(self, measurements: Iterable[CvMeasurement] = ()) -> Belief:
        """One model step followed by a correction with road-coordinate reports."""
        belief = self._require_belief()
        signals = self.schedule(belief.k, 1)
        belief = ukf_predict(belief, signals, self.params, self.config)
        reach = min(self.comm_range_m, (self.params.n_cells - 1) * self.params.dx)
        relative = []
        for meas in measurements:
            offset = meas.position_m - self.origin_m
            if not 0.0 <= offset < reach:
                continue
            relative.append(meas._replace(position_m=offset))
        self.belief = ukf_update(belief, relative, self.params, self.config)
        return self.belief

    def predict_lead(
        self, lead_position_m: float, lead_speed: float, horizon_s: float
    ) -> LeadPrediction:
        belief = self._require_belief()
        n_steps = int(round(horizon_s / self.params.dt))
        signals = self.schedule(belief.k, n_steps)
        return predict_lead(
            belief,
            lead_position_m - self.origin_m,
            lead_speed,
            signals,
            horizon_s,
            self.params,
            self.config,
            origin_m=self.origin_m,
        )
