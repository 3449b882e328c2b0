"""
Traffic model tests.

Covers the fundamental diagram, stationarity of uniform equilibria, mass
bookkeeping against the boundary fluxes, red-light forcing, signal
projection onto a grid window and the speed measurement model.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ecoshift.traffic_flow import (
    NO_SIGNALS,
    NoiseSpec,
    SignalHead,
    SignalPlan,
    SignalSchedule,
    TrafficGridState,
    TrafficModelError,
    TrafficParams,
    advance,
    boundary_flux,
    equilibrium_density,
    equilibrium_speed,
    interpolation_weights,
    measure_speed,
    rollout,
    signal_schedule,
    step,
)


def bumped_state(params: TrafficParams) -> TrafficGridState:
    x = np.arange(params.n_cells)
    return TrafficGridState(
        rho=0.02 + 0.008 * np.sin(x / 3.0),
        v=11.0 + 2.0 * np.cos(x / 4.0),
    )


class TestTrafficParams:
    def test_critical_density(self, params):
        assert params.rho_c == pytest.approx(0.14 / (16.0 / 5.0 + 1.0))

    def test_cfl_violation_rejected(self):
        with pytest.raises(ValueError, match="dx"):
            TrafficParams(v0=30.0, dx=2.0)

    def test_negative_relaxation_time_rejected(self):
        with pytest.raises(ValueError):
            TrafficParams(tau=-1.0)

    def test_window_length(self, params):
        assert params.length_m == pytest.approx(500.0)


class TestFundamentalDiagram:
    def test_free_flow_branch(self, params):
        assert equilibrium_speed(0.0, params) == params.v0
        assert equilibrium_speed(0.5 * params.rho_c, params) == params.v0

    def test_congested_branch(self, params):
        assert equilibrium_speed(0.05, params) == pytest.approx(9.0)
        assert equilibrium_speed(params.rho_jam, params) == pytest.approx(0.0)

    def test_continuous_at_critical_density(self, params):
        assert equilibrium_speed(params.rho_c, params) == pytest.approx(params.v0)

    def test_array_input_keeps_shape(self, params):
        speeds = equilibrium_speed(np.array([0.01, 0.05, 0.1]), params)
        assert speeds.shape == (3,)
        assert np.all(np.diff(speeds) <= 0)

    def test_out_of_range_density(self, params):
        with pytest.raises(TrafficModelError):
            equilibrium_speed(params.rho_jam + 0.01, params)
        with pytest.raises(TrafficModelError):
            equilibrium_speed(-0.001, params)

    def test_equilibrium_density_inverts_congested_branch(self, params):
        rho = equilibrium_density(9.0, params)
        assert rho == pytest.approx(0.05)
        assert equilibrium_speed(rho, params) == pytest.approx(9.0)

    def test_equilibrium_density_at_free_speed(self, params):
        assert equilibrium_density(params.v0 + 1.0, params) == params.rho_c


class TestStep:
    @pytest.mark.parametrize("rho", [0.01, 0.03, 0.05, 0.1])
    def test_uniform_equilibrium_is_stationary(self, params, rho):
        state = TrafficGridState.uniform(rho, params)
        states = rollout(state, NO_SIGNALS, 0, 1000, params)
        assert_allclose(states[-1].rho, state.rho, rtol=0, atol=1e-12)
        assert_allclose(states[-1].v, state.v, rtol=0, atol=1e-12)

    def test_mass_balances_boundary_fluxes(self, params):
        state = bumped_state(params)
        nxt = step(state, NO_SIGNALS, 0, params)
        inflow, outflow = boundary_flux(state, params)

        assert nxt.clamped == 0
        change = params.dx * np.sum(nxt.rho - state.rho)
        assert change == pytest.approx(params.dt * (inflow - outflow), abs=1e-12)

    def test_vehicle_count_uses_cell_length(self, params):
        state = TrafficGridState.uniform(0.02, params)
        assert state.vehicle_count(params) == pytest.approx(0.02 * 500.0)

    def test_red_cell_speed_forced_to_zero(self, params):
        signals = SignalSchedule(heads=(SignalHead(5, ((0, 10),)),), n_cells=params.n_cells)
        state = TrafficGridState.uniform(0.02, params)

        red = step(state, signals, 3, params)
        assert red.v[5] == 0.0
        assert red.v[4] > 0.0

        after = step(state, signals, 10, params)
        assert after.v[5] > 0.0

    def test_signal_head_outside_grid_rejected(self, params):
        with pytest.raises(ValueError):
            SignalSchedule(heads=(SignalHead(25, ((0, 10),)),), n_cells=params.n_cells)

    def test_negative_step_index_rejected(self, params):
        with pytest.raises(TrafficModelError):
            step(TrafficGridState.uniform(0.02, params), NO_SIGNALS, -1, params)

    def test_noisy_rollout_is_reproducible(self, params):
        state = bumped_state(params)
        noise = NoiseSpec()
        first = rollout(state, NO_SIGNALS, 0, 50, params, noise, np.random.default_rng(3))
        second = rollout(state, NO_SIGNALS, 0, 50, params, noise, np.random.default_rng(3))
        assert_allclose(first[-1].as_vector(), second[-1].as_vector(), rtol=0, atol=0)

    def test_outputs_stay_in_range(self, params):
        state = TrafficGridState(
            rho=np.full(params.n_cells, params.rho_jam),
            v=np.full(params.n_cells, params.v0),
        )
        nxt = step(state, NO_SIGNALS, 0, params, NoiseSpec(rho_std=0.05, v_std=5.0), np.random.default_rng(1))
        assert np.all((nxt.rho >= 0) & (nxt.rho <= params.rho_jam))
        assert np.all((nxt.v >= 0) & (nxt.v <= params.v0))
        assert nxt.clamped > 0

    def test_batched_advance_matches_single_rows(self, params):
        rng = np.random.default_rng(11)
        rho = rng.uniform(0.01, 0.06, (4, params.n_cells))
        v = rng.uniform(4.0, 15.0, (4, params.n_cells))
        red = np.zeros(params.n_cells, dtype=bool)

        batch_rho, batch_v, _ = advance(rho, v, red, params)
        for i in range(4):
            row_rho, row_v, _ = advance(rho[i], v[i], red, params)
            assert_allclose(batch_rho[i], row_rho, rtol=0, atol=1e-15)
            assert_allclose(batch_v[i], row_v, rtol=0, atol=1e-15)

    def test_vector_round_trip(self, params):
        state = bumped_state(params)
        again = TrafficGridState.from_vector(state.as_vector())
        assert_allclose(again.rho, state.rho)
        assert_allclose(again.v, state.v)


class TestSignals:
    def test_plan_phases(self):
        plan = SignalPlan(position_m=0.0, cycle_s=60.0, green_s=30.0)
        assert not plan.is_red(10.0)
        assert plan.is_red(40.0)
        assert plan.next_green(40.0) == pytest.approx(60.0)
        assert plan.next_green(10.0) == pytest.approx(10.0)

    def test_offset_shifts_green_start(self):
        plan = SignalPlan(position_m=0.0, cycle_s=60.0, green_s=30.0, offset_s=40.0)
        assert plan.is_red(20.0)
        assert not plan.is_red(5.0)
        assert not plan.is_red(45.0)
        assert plan.next_green(20.0) == pytest.approx(40.0)

    def test_green_longer_than_cycle_rejected(self):
        with pytest.raises(ValueError):
            SignalPlan(position_m=0.0, cycle_s=60.0, green_s=70.0)

    def test_projection_onto_window(self, params):
        plans = [SignalPlan(300.0, 60.0, 30.0, 0.0)]
        schedule = signal_schedule(plans, origin_m=0.0, params=params, k0=0, n_steps=600)

        assert len(schedule.heads) == 1
        head = schedule.heads[0]
        assert head.cell == 12
        assert head.red_intervals == ((300, 600),)
        assert not head.is_red(299)
        assert head.is_red(300)

    def test_projection_skips_signals_outside_window_or_range(self, params):
        plans = [
            SignalPlan(-10.0, 60.0, 30.0),
            SignalPlan(490.0, 60.0, 30.0),
            SignalPlan(800.0, 60.0, 30.0),
        ]
        schedule = signal_schedule(plans, origin_m=0.0, params=params, k0=0, n_steps=600, comm_range_m=450.0)
        assert schedule.heads == ()

    def test_projection_follows_window_origin(self, params):
        plans = [SignalPlan(1400.0, 60.0, 30.0, 5.0)]
        schedule = signal_schedule(plans, origin_m=1200.0, params=params, k0=400, n_steps=100)
        assert [head.cell for head in schedule.heads] == [8]
        assert all(start >= 400 for start, _ in schedule.heads[0].red_intervals)


class TestMeasurement:
    def test_interpolates_between_cells(self, params):
        state = TrafficGridState(
            rho=np.full(params.n_cells, 0.02),
            v=np.arange(params.n_cells, dtype=float),
        )
        assert measure_speed(state, 37.5, params) == pytest.approx(1.5)
        assert measure_speed(state, 50.0, params) == pytest.approx(2.0)

    def test_weights(self, params):
        j, alpha = interpolation_weights(110.0, params)
        assert int(j) == 4
        assert float(alpha) == pytest.approx(0.4)

    @pytest.mark.parametrize("position", [-1.0, 475.0, 600.0])
    def test_outside_window_rejected(self, params, position):
        state = TrafficGridState.uniform(0.02, params)
        with pytest.raises(TrafficModelError):
            measure_speed(state, position, params)

    def test_noise_is_seeded(self, params):
        state = TrafficGridState.uniform(0.02, params)
        noise = NoiseSpec(measurement_std=0.5)
        first = measure_speed(state, 100.0, params, noise, np.random.default_rng(5))
        second = measure_speed(state, 100.0, params, noise, np.random.default_rng(5))
        assert first == second
        assert first != pytest.approx(params.v0)
