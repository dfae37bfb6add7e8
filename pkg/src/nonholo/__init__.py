"""Simulation toolkit for nonholonomically constrained mechanical systems.

The library describes a mechanical system on Q = R^n by a mass matrix, a
potential and linear velocity constraints mu(q) v = 0, then offers three
views of its dynamics:

* the continuous constrained flow, with the multipliers eliminated so the
  equations become an ordinary vector field tangent to the constraint
  distribution (`system`, `reduction`, `flow`);
* constraint-respecting discrete schemes of first and second order, plus
  the two-point scheme they both descend from (`discrete`);
* machinery that interpolates discrete steps inside the distribution and
  rewrites a one-step map as the exact time-eps evolution of a periodically
  perturbed field (`embed`).

Expressions (potentials, constraint rows, deformations) are plain strings
parsed by `exprdiff`, which also supplies exact gradients and Hessians.
The `nonholo` console script drives batch runs from JSON configs.
"""
from __future__ import annotations

from . import cli, discrete, embed, exprdiff, flow, reduction, system
from .discrete import (
    DiscreteNonholonomicSystem,
    DiscreteTrajectory,
    FiniteDifferenceMap,
    NewtonError,
    NodePolicy,
    dla_step,
    newton_solve,
    original_node_step,
    run_integrator,
    vni10_step,
    vni20_step,
)
from .embed import (
    EmbeddingProblem,
    OneStepMap,
    build_G,
    interpolate_in_D,
    reduced_problem,
    reduced_step_map,
    verify_embedding,
)
from .exprdiff import evaluate, gradient, hessian, parse
from .flow import BlowUpError, Trajectory, integrate, reference_flow
from .reduction import (
    DeformedConstraint,
    ReducedState,
    deformed_field,
    h_field,
    lambda_continuous,
    psi_embed,
    reduce_state,
    reduced_field,
)
from .system import (
    MechanicalSystem,
    StatePoint,
    SystemError,
    c_matrix,
    constraint_residual,
    derive_connection,
    energy,
    nonholonomic_particle,
    project_velocity,
)

__version__ = "0.1.0"

__all__ = [
    "cli",
    "discrete",
    "embed",
    "exprdiff",
    "flow",
    "reduction",
    "system",
    "MechanicalSystem",
    "StatePoint",
    "SystemError",
    "c_matrix",
    "constraint_residual",
    "derive_connection",
    "energy",
    "nonholonomic_particle",
    "project_velocity",
    "lambda_continuous",
    "h_field",
    "ReducedState",
    "psi_embed",
    "reduce_state",
    "reduced_field",
    "DeformedConstraint",
    "deformed_field",
    "BlowUpError",
    "Trajectory",
    "integrate",
    "reference_flow",
    "FiniteDifferenceMap",
    "NodePolicy",
    "NewtonError",
    "newton_solve",
    "DiscreteNonholonomicSystem",
    "DiscreteTrajectory",
    "vni10_step",
    "vni20_step",
    "original_node_step",
    "dla_step",
    "run_integrator",
    "OneStepMap",
    "EmbeddingProblem",
    "interpolate_in_D",
    "reduced_problem",
    "reduced_step_map",
    "build_G",
    "verify_embedding",
    "parse",
    "evaluate",
    "gradient",
    "hessian",
    "__version__",
]
