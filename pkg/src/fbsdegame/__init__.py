"""Monte Carlo tools for stochastic differential games with delay and noisy memory."""
from .errors import (
    AdmissibilityViolation,
    CatalogMiss,
    ConfigError,
    DomainError,
    FbsdeGameError,
    HorizonBoundary,
    NonConvergence,
    NumericalBlowup,
    NumericalError,
)
from .timegrid import JumpSpec, NoiseBatch, TimeGrid, make_grid, sample_noise
from .forward import ControlProcess, ModelSpec, PathBundle, simulate_forward
from .bsde import DriverSpec, RegressionBasis, solve_bsde_lsmc
from .game import Game, certify_nash

__version__ = "0.1.0"
