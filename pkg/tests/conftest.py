import math

import pytest

from qkfmag.core import PhysicalParams


@pytest.fixture
def fig2_params() -> PhysicalParams:
    """Production-scale parameter set (angular gamma convention)."""
    return PhysicalParams(
        j_total=4e6,
        gamma=2.0 * math.pi * 1e6,
        b_true=1e-6,
        meas_strength=1e5,
        efficiency=1.0,
        prior_b_variance=1e-8,
        t_total=2e-3,
    )


@pytest.fixture
def toy_params() -> PhysicalParams:
    """Small, fast parameter set for statistical unit tests."""
    return PhysicalParams(
        j_total=100.0,
        gamma=1.5,
        b_true=0.01,
        meas_strength=50.0,
        efficiency=0.8,
        prior_b_variance=0.05,
        t_total=0.5,
    )
