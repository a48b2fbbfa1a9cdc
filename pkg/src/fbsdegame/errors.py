"""Exception hierarchy shared by the solvers and the CLI."""


class FbsdeGameError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(FbsdeGameError, ValueError):
    pass


class InvalidHorizon(ConfigError):
    pass


class NonCommensurateDelay(ConfigError):
    pass


class DeltaExceedsHorizon(ConfigError):
    pass


class AdmissibilityViolation(ConfigError):
    pass


class CatalogMiss(FbsdeGameError, KeyError):
    pass


class NumericalError(FbsdeGameError, ArithmeticError):
    """Failures the CLI maps to exit code 3."""


class NumericalBlowup(NumericalError):
    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class SingularRegression(NumericalError):
    pass


class InsufficientPaths(NumericalError):
    pass


class DomainError(NumericalError):
    pass


class HorizonBoundary(NumericalError):
    pass


class NonConvergence(NumericalError):
    pass
