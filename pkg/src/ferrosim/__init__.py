"""Finite element simulation of two-phase ferrofluid flows.

The discretization couples a Cahn-Hilliard phase field, a discontinuous
magnetization transport equation, a scalar magnetostatic potential and
incompressible Navier-Stokes, advanced with an energy-stable backward-Euler
scheme solved by Picard iteration.
"""

from .constitutive import (Dipole, DipoleConfig, ModelParams, applied_field, boussinesq_force,
                           double_well, heaviside_sigmoid, susceptibility, viscosity)
from .diagnostics import (EnergyBreakdown, StepLedger, interface_profile, kelly_indicator,
                          rosensweig_predictions, step_ledger, total_energy)
from .errors import ConfigError, NumericalFailure, PicardNonconvergence, SingularityError
from .mesh import Mesh, build_rectangle_mesh, refine, uniform_refine
from .spaces import SpaceSet, build_spaces, check_gradient_inclusion, infsup_constant

__all__ = [
    "ConfigError", "Dipole", "DipoleConfig", "EnergyBreakdown", "Mesh", "ModelParams",
    "NumericalFailure", "PicardNonconvergence", "SingularityError", "SpaceSet", "StepLedger",
    "applied_field", "boussinesq_force", "build_rectangle_mesh", "build_spaces",
    "check_gradient_inclusion", "double_well", "heaviside_sigmoid", "infsup_constant",
    "interface_profile", "kelly_indicator", "refine", "rosensweig_predictions", "step_ledger",
    "susceptibility", "total_energy", "uniform_refine", "viscosity",
]
