"""Distributed optimal control of a shallow lake on an interval: steady states,
their spectra, canonical paths and indifference points."""
from .model import DomainError, ModelParams
from .fem1d import Mesh1D, FemOperators, build_mesh, assemble
from .cansys import SystemOperators, make_system, residual_G, jacobian_G, forward_ivp
from .css import (CssRecord, Branch, ConvergenceError, fcss_roots, newton_css, continue_branch,
                  branch_switch, build_catalog, compute_branches)
from .spectral import SpectrumError, spectrum, has_spp, build_psi
from .path import (PathOptions, PathSolution, PathFamily, PathContinuationError, SkibaError,
                   bvp_solve, iscont, objective_value, skiba_find, classify_optimal)

__version__ = "0.1.0"
