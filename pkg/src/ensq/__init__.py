"""Ensemble qubits stabilized by two-excitation loss: models, dynamics and experiments."""

__version__ = "0.1.0"

from .dynamics import IntegratorConfig, MasterEquation, TimeProfile, Trajectory, evolve, fidelity, partial_trace, steady_state
from .hilbert import DensityMatrix, HilbertSpace, Operator, StateVector, coherent_state, make_space
from .model import DerivedParams, ModelParams, ModelTier, Truncations, build_tier, derive

__all__ = [
    "DensityMatrix",
    "DerivedParams",
    "HilbertSpace",
    "IntegratorConfig",
    "MasterEquation",
    "ModelParams",
    "ModelTier",
    "Operator",
    "StateVector",
    "TimeProfile",
    "Trajectory",
    "Truncations",
    "build_tier",
    "coherent_state",
    "derive",
    "evolve",
    "fidelity",
    "make_space",
    "partial_trace",
    "steady_state",
]
