"""Spectral solver for the generalized Monge-Ampere equation
``(omega + D_J^+ phi)^2 = e^f omega^2`` on almost Kahler flat 4-tori."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .forms import (  # noqa: F401
    AcStructure,
    CompatibleTriple,
    build_triple,
    darboux_eigenvalues,
    perturbed_triple,
    positivity_check,
    standard_triple,
)
from .grid import GridSpec, OneForm, ScalarField, TwoForm  # noqa: F401
from .lejmi import dj_plus, harmonic_anti_dim, solve_sigma, w_field  # noqa: F401
from .solver import (  # noqa: F401
    SolverConfig,
    continuation_solve,
    linearize_apply,
    ma_residual,
    newton_solve,
    tame_to_almost_kahler,
)
