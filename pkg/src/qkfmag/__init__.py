"""Continuous-measurement atomic magnetometry toolkit.

Simulates conditional spin trajectories under continuous QND
observation, runs the matching Kalman filter and a line-fit baseline
over the measurement records, and checks the resulting field
sensitivity against closed-form covariance predictions, including the
1/J scaling regime.
"""

__version__ = "0.1.0"

from .core import (
    INFINITE,
    PhysicalParams,
    TimeGrid,
    gamma_from_cycles,
    gamma_to_cycles,
    larmor_frequency,
    make_grid,
    snr,
    t2_bound,
    validate_params,
)
from .dynamics import (
    ConditionalState,
    TrajectoryRecord,
    conditional_variance,
    lowpass_filter,
    photocurrent_increment,
    reconstruct_noise,
    simulate_trajectory,
    step_mean,
)
from .estimators import (
    KalmanState,
    RiccatiSolution,
    SystemMatrices,
    ThresholdCurve,
    detection_threshold_asymptotic,
    kalman_gain,
    kalman_init,
    kalman_schedule,
    kalman_step,
    regression_estimate,
    riccati_analytic,
    riccati_integrate,
    run_kalman,
    shotnoise_limit,
    system_matrices,
)
from .montecarlo import (
    EnsembleSpec,
    EnsembleStats,
    run_ensemble,
    scaling_study,
    substream,
)
from .rng import SeedSpec
from .sme_oracle import (
    DensityMatrix,
    SpinOperators,
    build_spin_operators,
    coherent_spin_state_x,
    compare_to_gaussian,
    oracle_moments,
    sme_step,
)
