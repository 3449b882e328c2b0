"""
Traffic estimator tests.

The sigma-point updates are checked against the closed-form Kalman filter
on small linear systems, then the traffic-specific pieces: measurement
rows, rejection of out-of-window reports, lead prediction and moving the
estimation window.
"""

import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ecoshift.state_estimation import (
    Belief,
    CvMeasurement,
    LeadPrediction,
    TrafficEstimator,
    UkfConfig,
    observation_matrix,
    predict_lead,
    ukf_predict,
    ukf_update,
    unscented_predict,
    unscented_update,
)
from ecoshift.traffic_flow import (
    NO_SIGNALS,
    NoiseSpec,
    SignalHead,
    SignalSchedule,
    TrafficGridState,
)


@pytest.fixture
def small_config() -> UkfConfig:
    q = np.diag([0.1, 0.2, 0.05, 0.3])
    p0 = np.array(
        [
            [1.0, 0.2, 0.0, 0.1],
            [0.2, 2.0, 0.3, 0.0],
            [0.0, 0.3, 1.5, 0.2],
            [0.1, 0.0, 0.2, 0.8],
        ]
    )
    return UkfConfig(Q=q, R_std=0.4, P0=p0, alpha=1.0)


@pytest.fixture
def traffic_config(params) -> UkfConfig:
    return UkfConfig.from_noise(NoiseSpec(), params)


def reading(position: float, speed: float, vehicle: str = "cv-1") -> CvMeasurement:
    return CvMeasurement(vehicle, position, speed, 0)


class TestLinearEquivalence:
    def test_identity_predict_adds_process_noise(self, small_config):
        belief = Belief(mean=np.array([1.0, 2.0, 3.0, 4.0]), cov=small_config.P0)
        out = unscented_predict(belief, lambda batch: batch, small_config.Q, small_config)
        assert_allclose(out.mean, belief.mean, atol=1e-10)
        assert_allclose(out.cov, small_config.P0 + small_config.Q, atol=1e-8)
        assert out.k == 1

    def test_linear_predict_matches_kalman(self, small_config, rng):
        F = np.eye(4) + 0.1 * rng.standard_normal((4, 4))
        belief = Belief(mean=rng.standard_normal(4), cov=small_config.P0)
        out = unscented_predict(belief, lambda batch: batch @ F.T, small_config.Q, small_config)
        assert_allclose(out.mean, F @ belief.mean, atol=1e-10)
        assert_allclose(out.cov, F @ small_config.P0 @ F.T + small_config.Q, atol=1e-8)

    def test_linear_update_matches_kalman(self, small_config):
        H = np.array([[0.0, 1.0, 0.0, 0.0], [0.5, 0.0, 0.0, 0.5]])
        R = 0.16 * np.eye(2)
        P = small_config.P0
        belief = Belief(mean=np.zeros(4), cov=P)
        z = np.array([1.0, -0.5])

        out = unscented_update(belief, z, lambda batch: batch @ H.T, R, small_config)

        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        assert_allclose(out.mean, K @ z, atol=1e-8)
        assert_allclose(out.cov, P - K @ S @ K.T, atol=1e-8)
        assert out.k == belief.k

    def test_zero_covariance_predict_is_deterministic(self, small_config):
        belief = Belief(mean=np.ones(4), cov=np.zeros((4, 4)), k=3)
        out = unscented_predict(belief, lambda batch: 2.0 * batch, small_config.Q, small_config)
        assert_allclose(out.mean, 2.0 * np.ones(4))
        assert_allclose(out.cov, small_config.Q)
        assert out.k == 4


class TestUkfConfig:
    def test_rejects_asymmetric_covariance(self):
        bad = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(ValueError, match="symmetric"):
            UkfConfig(Q=bad, R_std=0.1, P0=np.eye(2))

    def test_rejects_indefinite_covariance(self):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(ValueError, match="semi-definite"):
            UkfConfig(Q=np.eye(2), R_std=0.1, P0=bad)

    def test_rejects_alpha_out_of_range(self):
        with pytest.raises(ValueError):
            UkfConfig(Q=np.eye(2), R_std=0.1, P0=np.eye(2), alpha=0.0)

    def test_from_noise_dimensions(self, traffic_config, params):
        assert traffic_config.dim == 2 * params.n_cells
        assert traffic_config.Q[0, 0] == pytest.approx(0.001 ** 2)
        assert traffic_config.Q[-1, -1] == pytest.approx(0.3 ** 2)


class TestTrafficUpdate:
    def test_observation_rows(self, params):
        n = params.n_cells
        H = observation_matrix([reading(37.5, 0.0), reading(110.0, 0.0)], params)
        expected = np.zeros((2, 2 * n))
        expected[0, n + 1] = expected[0, n + 2] = 0.5
        expected[1, n + 4] = 0.6
        expected[1, n + 5] = 0.4
        assert_allclose(H, expected, atol=1e-12)

    def test_predict_keeps_covariance_psd(self, params, traffic_config):
        state = TrafficGridState.uniform(0.03, params)
        belief = Belief.initial(state, traffic_config)
        for _ in range(3):
            belief = ukf_predict(belief, NO_SIGNALS, params, traffic_config)
        assert np.linalg.eigvalsh(belief.cov).min() >= -1e-9
        assert_allclose(belief.cov, belief.cov.T, atol=0)
        assert belief.k == 3

    def test_no_measurements_returns_same_belief(self, params, traffic_config):
        belief = Belief.initial(TrafficGridState.uniform(0.03, params), traffic_config)
        assert ukf_update(belief, [], params, traffic_config) is belief

    def test_out_of_window_report_is_rejected(self, params, traffic_config, caplog):
        belief = Belief.initial(TrafficGridState.uniform(0.03, params), traffic_config)
        with caplog.at_level(logging.WARNING, logger="ecoshift.state_estimation"):
            out = ukf_update(belief, [reading(600.0, 5.0, "cv-9")], params, traffic_config)
        assert out is belief
        assert "Rejected measurement from cv-9" in caplog.text

    def test_exact_report_pins_cell_speed(self, params):
        config = UkfConfig.from_noise(NoiseSpec(measurement_std=0.0), params)
        belief = Belief.initial(TrafficGridState.uniform(0.03, params), config)
        n = params.n_cells

        out = ukf_update(belief, [reading(50.0, 9.0)], params, config)

        assert out.mean[n + 2] == pytest.approx(9.0, abs=1e-6)
        assert out.cov[n + 2, n + 2] == pytest.approx(0.0, abs=1e-6)
        # uncorrelated cells are left alone
        assert out.mean[n + 7] == pytest.approx(belief.mean[n + 7])

    def test_report_reduces_local_speed_variance(self, params, traffic_config):
        belief = Belief.initial(TrafficGridState.uniform(0.03, params), traffic_config)
        out = ukf_update(belief, [reading(110.0, 12.0)], params, traffic_config)
        assert out.speed_variance(110.0, params) < belief.speed_variance(110.0, params)

    def test_speed_variance_blends_cells(self, params, traffic_config):
        belief = Belief.initial(TrafficGridState.uniform(0.03, params), traffic_config)
        assert belief.speed_variance(37.5, params) == pytest.approx(0.25 * 4.0 + 0.25 * 4.0)


class TestPredictLead:
    def test_free_flow_lead_keeps_speed(self, params, traffic_config):
        belief = Belief.initial(TrafficGridState.uniform(0.02, params), traffic_config)
        prediction = predict_lead(belief, 50.0, 16.0, NO_SIGNALS, 10.0, params, traffic_config)

        assert prediction.n_steps == 100
        assert_allclose(prediction.d_lead, 50.0 + 16.0 * prediction.t, atol=1e-6)
        assert not prediction.exited_grid
        assert np.all(np.diff(prediction.sigma_d) >= 0)
        assert prediction.sigma_d[-1] > 0

    def test_origin_shifts_positions(self, params, traffic_config):
        belief = Belief.initial(TrafficGridState.uniform(0.02, params), traffic_config)
        local = predict_lead(belief, 50.0, 16.0, NO_SIGNALS, 2.0, params, traffic_config)
        shifted = predict_lead(belief, 50.0, 16.0, NO_SIGNALS, 2.0, params, traffic_config, origin_m=1000.0)
        assert_allclose(shifted.d_lead, local.d_lead + 1000.0)

    @pytest.mark.slow
    def test_lead_stops_before_red_light(self, params, traffic_config):
        signals = SignalSchedule(heads=(SignalHead(10, ((0, 1000),)),), n_cells=params.n_cells)
        belief = Belief.initial(TrafficGridState.uniform(0.02, params), traffic_config)

        prediction = predict_lead(belief, 200.0, 16.0, signals, 30.0, params, traffic_config)

        assert prediction.d_lead.max() < 250.0
        assert prediction.v_lead[-1] < 2.0

    def test_no_uncertainty_gives_zero_spread(self, params):
        n = 2 * params.n_cells
        config = UkfConfig(Q=np.zeros((n, n)), R_std=0.5, P0=np.zeros((n, n)))
        belief = Belief.initial(TrafficGridState.uniform(0.02, params), config)
        prediction = predict_lead(belief, 50.0, 16.0, NO_SIGNALS, 3.0, params, config)
        assert_allclose(prediction.sigma_d, 0.0, atol=0)

    def test_leaving_window_is_flagged(self, params, traffic_config):
        belief = Belief.initial(TrafficGridState.uniform(0.02, params), traffic_config)
        prediction = predict_lead(belief, 400.0, 16.0, NO_SIGNALS, 10.0, params, traffic_config)
        assert prediction.exited_grid
        assert prediction.d_lead[-1] > 475.0

    def test_non_positive_horizon_rejected(self, params, traffic_config):
        belief = Belief.initial(TrafficGridState.uniform(0.02, params), traffic_config)
        with pytest.raises(ValueError):
            predict_lead(belief, 50.0, 16.0, NO_SIGNALS, 0.0, params, traffic_config)


class TestLeadPrediction:
    def test_constant_speed(self):
        prediction = LeadPrediction.constant_speed(30.0, 10.0, horizon_s=5.0, dt=0.1)
        assert prediction.n_steps == 50
        assert prediction.horizon_s == pytest.approx(5.0)
        assert prediction.d_lead[-1] == pytest.approx(80.0)

    def test_resample_onto_coarser_grid(self, cruising_lead):
        coarse = cruising_lead().resample(0.2, 50)
        assert coarse.n_steps == 50
        assert coarse.dt == 0.2
        assert_allclose(coarse.d_lead, 30.0 + 10.0 * coarse.t, atol=1e-9)

    def test_resample_past_horizon_rejected(self, cruising_lead):
        with pytest.raises(ValueError):
            cruising_lead(horizon_s=2.0).resample(0.2, 20)

    def test_receding_lead_rejected(self):
        with pytest.raises(ValueError, match="non-decreasing"):
            LeadPrediction(t=[0, 1], d_lead=[10, 5], v_lead=[1, 1], sigma_d=[0, 0], dt=1.0)

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ValueError, match="length"):
            LeadPrediction(t=[0, 1], d_lead=[10], v_lead=[1, 1], sigma_d=[0, 0], dt=1.0)

    def test_negative_speed_rejected(self):
        with pytest.raises(ValueError):
            LeadPrediction(t=[0, 1], d_lead=[10, 11], v_lead=[1, -1], sigma_d=[0, 0], dt=1.0)


class TestTrafficEstimator:
    def test_use_before_initialize(self, params, traffic_config):
        estimator = TrafficEstimator(params, traffic_config)
        with pytest.raises(RuntimeError):
            estimator.advance()

    def test_initialize_places_window_behind_lead(self, params, traffic_config):
        estimator = TrafficEstimator(params, traffic_config)
        belief = estimator.initialize(100.0, 10.0)
        assert estimator.origin_m == pytest.approx(50.0)
        assert_allclose(belief.state.v, 10.0)

    def test_reanchor_shifts_whole_cells(self, params, traffic_config):
        n = params.n_cells
        estimator = TrafficEstimator(params, traffic_config)
        estimator.initialize(100.0, 10.0)
        before = estimator.advance()

        assert estimator.reanchor(200.0) == 4
        assert estimator.origin_m == pytest.approx(150.0)
        after = estimator.belief

        assert_allclose(after.mean[: n - 4], before.mean[4:n])
        assert_allclose(after.mean[n - 4 : n], before.mean[n - 1])
        fresh = n - 2
        assert after.cov[fresh, fresh] == pytest.approx(traffic_config.P0[fresh, fresh])
        assert_allclose(np.delete(after.cov[fresh], fresh), 0.0, atol=1e-12)
        assert after.k == before.k

        assert estimator.reanchor(210.0) == 0
        assert estimator.origin_m == pytest.approx(150.0)

    def test_advance_uses_road_coordinates(self, params, traffic_config):
        estimator = TrafficEstimator(params, traffic_config)
        estimator.initialize(100.0, 10.0)
        baseline = TrafficEstimator(params, traffic_config)
        baseline.initialize(100.0, 10.0)

        corrected = estimator.advance([reading(160.0, 4.0)])
        plain = baseline.advance([reading(5000.0, 4.0)])

        assert corrected.speed_variance(110.0, params) < plain.speed_variance(110.0, params)
        assert corrected.k == plain.k == 1

    def test_predict_lead_in_road_coordinates(self, params, traffic_config):
        estimator = TrafficEstimator(params, traffic_config)
        estimator.initialize(1000.0, 10.0)
        prediction = estimator.predict_lead(1000.0, 10.0, 2.0)
        assert prediction.d_lead[0] == pytest.approx(1000.0)
        assert prediction.n_steps == 20
