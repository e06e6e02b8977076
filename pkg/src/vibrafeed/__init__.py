"""Continuous position measurement and Markovian feedback on a damped vibrational mode."""

__version__ = "0.1.0"

from .analytic import (
    Stability,
    SteadyMoments,
    effective_occupation,
    moment_ode_oracle,
    optimal_phi,
    stability_check,
    steady_moments,
)
from .fock import DensityMatrix, FockBasis, Operator, ProductBasis
from .liouville import (
    JointModel,
    build_feedback_me,
    build_general_fb_me,
    build_joint_model,
    build_measurement_me,
    evolve,
    steady_state,
    thermal_lindblad,
)
from .params import DerivedCoeffs, FeedbackParams, ParameterError, derived_coeffs
from .sme import TrajectoryConfig, TrajectoryRecord, run_ensemble, run_trajectory
