"""Feedback-stabilized three-atom singlet: models, solvers and analysis."""

from __future__ import annotations

from .analysis import (
    SweepGrid,
    compare_cavity_vs_effective,
    compare_full_vs_effective,
    convergence_time,
    decoherence_contour,
    fidelity,
    mixed_fidelity,
    sweep_fidelity_2d,
)
from .dynamics import (
    DegenerateKernelError,
    EvolutionResult,
    StiffnessError,
    TrajectoryEnsemble,
    evolve,
    run_trajectories,
    steady_state,
    steady_state_by_evolution,
)
from .model import (
    FeedbackKind,
    FeedbackStrategy,
    Generator,
    SystemParams,
    basis_state,
    build_cavity_me,
    build_effective_me,
    build_feedback_me,
    build_full_me,
    collective_ops,
    projector,
    singlet_state,
)
from .opalg import DimensionError, NoSteadyStateError

__all__ = [
    "DegenerateKernelError", "DimensionError", "EvolutionResult", "FeedbackKind", "FeedbackStrategy",
    "Generator", "NoSteadyStateError", "StiffnessError", "SweepGrid", "SystemParams", "TrajectoryEnsemble",
    "basis_state", "build_cavity_me", "build_effective_me", "build_feedback_me", "build_full_me",
    "collective_ops", "compare_cavity_vs_effective", "compare_full_vs_effective", "convergence_time",
    "decoherence_contour", "evolve", "fidelity", "mixed_fidelity", "projector", "run_trajectories",
    "singlet_state", "steady_state", "steady_state_by_evolution", "sweep_fidelity_2d",
]
__version__ = "0.1.0"
