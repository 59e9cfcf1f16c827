"""Regularized monotone mean-field games on the torus: discretization, solvers and diagnostics."""

__version__ = "0.1.0"

from .diagnostics import (  # noqa: E402
    DiagnosticsReport,
    diagnose,
    energy_report,
    minty_residual,
    monotonicity_probe,
    pde_residuals,
)
from .fields import (  # noqa: E402
    DiffPlan,
    GramOperator,
    SpaceTimeField,
    SpaceTimeGrid,
    TimeGrid,
    TorusGrid,
)
from .fixedpoint import (  # noqa: E402
    FixedPointOpts,
    WeakSolution,
    default_schedule,
    epsilon_continuation,
    fixed_point_solve,
    normalize,
    reconstruct_u,
    recover_mu,
)
from .problem import (  # noqa: E402
    CouplingSpec,
    HamiltonianSpec,
    MFGProblem,
    RegularizationConfig,
    assumption_probe,
    terminal_shift,
)
from .subsolvers import LinearOptions, VIOptions, solve_bilinear, solve_variational  # noqa: E402

__all__ = [
    "DiffPlan",
    "GramOperator",
    "SpaceTimeField",
    "SpaceTimeGrid",
    "TimeGrid",
    "TorusGrid",
    "CouplingSpec",
    "HamiltonianSpec",
    "MFGProblem",
    "RegularizationConfig",
    "assumption_probe",
    "terminal_shift",
    "LinearOptions",
    "VIOptions",
    "solve_bilinear",
    "solve_variational",
    "FixedPointOpts",
    "WeakSolution",
    "default_schedule",
    "epsilon_continuation",
    "fixed_point_solve",
    "normalize",
    "reconstruct_u",
    "recover_mu",
    "DiagnosticsReport",
    "diagnose",
    "energy_report",
    "minty_residual",
    "monotonicity_probe",
    "pde_residuals",
    "__version__",
]
