"""Quasistatic evolutions of constrained critical points via a fixed-eta proximal loop."""

from .core import (
    AffineConstraint,
    DiscreteEvolution,
    Dissipation,
    EnergyModel,
    LoadPath,
    check_energy_inequality,
    discrete_evolution,
    inner_critical_loop,
    inner_objective,
    psi_variation,
    recover_multiplier,
)
from .exceptions import ConfigError, ConvergenceError, MeshError, ModelError, StationarityError
from .fracture import (
    FractureMesh,
    FractureParams,
    analytic_1d_oracle,
    assemble_stiffness,
    boundary_load,
    build_mesh,
    build_problem,
    fracture_energy,
    g_eval,
)
from .solver import (
    CompositeObjective,
    estimate_lipschitz,
    grad_check,
    soft_threshold,
    solve_composite,
    strong_convexity_probe,
)

__version__ = "0.1.0"
