"""Shared fixtures for the ecoshift test suite."""

from typing import List, Tuple

import numpy as np
import pytest

from ecoshift.mip_solver import SolverLimits
from ecoshift.powertrain import PowertrainConfig, VehicleState
from ecoshift.state_estimation import CvMeasurement, LeadPrediction
from ecoshift.traffic_flow import TrafficParams
from ecoshift.variants import VariantRegistry


@pytest.fixture(scope="session")
def registry(tmp_path_factory) -> VariantRegistry:
    # a path that does not exist gives the built-in variants
    return VariantRegistry(str(tmp_path_factory.mktemp("variants") / "missing.toml"))


@pytest.fixture(scope="session")
def three_speed(registry) -> PowertrainConfig:
    return registry.powertrain("three-speed")


@pytest.fixture(scope="session")
def single_speed(registry) -> PowertrainConfig:
    return registry.powertrain("single-speed")


@pytest.fixture
def params() -> TrafficParams:
    return TrafficParams()


@pytest.fixture
def roomy_limits() -> SolverLimits:
    """Limits that let small test problems finish without the wall clock interfering."""
    return SolverLimits(time_budget_s=60.0)


class ConstantLeadFeed:
    """Lead cruising at constant speed with no connected vehicles."""

    def __init__(self, d0: float = 30.0, v: float = 10.0, dt: float = 0.1):
        self.d0 = d0
        self.v = v
        self.dt = dt
        self.plans = ()

    def lead_state(self, k: int) -> Tuple[float, float]:
        return self.d0 + self.v * k * self.dt, self.v

    def measurements(self, k: int) -> List[CvMeasurement]:
        return []


@pytest.fixture
def constant_feed() -> ConstantLeadFeed:
    return ConstantLeadFeed()


@pytest.fixture
def cruise_state() -> VehicleState:
    return VehicleState(d=0.0, v=10.0, soc=0.6)


@pytest.fixture
def cruising_lead():
    """Factory for a lead at constant speed with no uncertainty."""

    def make(d0: float = 30.0, v: float = 10.0, horizon_s: float = 10.0, dt: float = 0.1) -> LeadPrediction:
        return LeadPrediction.constant_speed(d0, v, horizon_s, dt)

    return make


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)
