"""Tau-vanishing shadow prices for free-right-end infinite-horizon control.

The package integrates a candidate optimal path together with its
fundamental matrix and sensitivity covector, classifies the limit of that
covector along a time sequence, builds the resulting multiplier and checks
it against the maximum principle. A shooting solver covers problems whose
candidate law is not known in closed form.
"""

from __future__ import annotations

from .bvp import ClosedSystem, ShootResult, build_avav_system, richardson, shoot, verify_solution
from .dsl import Expr, parse
from .errors import TauPmpError
from .ode import (
    IntegratorConfig,
    TrajectoryBundle,
    adjoint_via_backward,
    adjoint_via_cauchy,
    integrate_bundle,
)
from .pmp import check_pmp, maximize_hamiltonian, monotone_report
from .problem import Box, ClosedForm, ControlProblem, Finite, PiecewiseConstant, TauSequence
from .registry import get_builtin, registry_get
from .shadow import (
    BallSpec,
    build_multiplier,
    check_domination,
    classify_limit,
    finite_tau_approximant,
    run_shadow,
    sample_I,
)

__version__ = "0.1.0"

__all__ = [
    "BallSpec",
    "Box",
    "ClosedForm",
    "ClosedSystem",
    "ControlProblem",
    "Expr",
    "Finite",
    "IntegratorConfig",
    "PiecewiseConstant",
    "ShootResult",
    "TauPmpError",
    "TauSequence",
    "TrajectoryBundle",
    "adjoint_via_backward",
    "adjoint_via_cauchy",
    "build_avav_system",
    "build_multiplier",
    "check_domination",
    "check_pmp",
    "classify_limit",
    "finite_tau_approximant",
    "get_builtin",
    "integrate_bundle",
    "maximize_hamiltonian",
    "monotone_report",
    "parse",
    "registry_get",
    "richardson",
    "run_shadow",
    "sample_I",
    "shoot",
    "verify_solution",
]
