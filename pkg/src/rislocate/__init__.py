"""Simulation, estimation and Cramer-Rao bound suite for localizing a
reconfigurable intelligent surface from multi-carrier observations at
multiple synchronized receivers."""

from .geometry import AnglePair, RisState, Scenario, SpatialFreqs
from .signals import ObservationSet, random_phase_profile, simulate_observations
from .fisher import ChannelFim, CrbReport, state_bounds
from .estimator import EstimatorConfig, PipelineResult, StateEstimate, estimate_state

__version__ = "0.1.0"

__all__ = [
    "AnglePair",
    "ChannelFim",
    "CrbReport",
    "EstimatorConfig",
    "ObservationSet",
    "PipelineResult",
    "RisState",
    "Scenario",
    "SpatialFreqs",
    "StateEstimate",
    "__version__",
    "estimate_state",
    "random_phase_profile",
    "simulate_observations",
    "state_bounds",
]
