"""Exception hierarchy: configuration errors vs numerical failures."""


class LsocvError(Exception):
    """Base class for all package errors."""


class ConfigError(LsocvError):
    """Invalid specification, parameters or input format."""


class DomainError(ConfigError):
    """A covariate or evaluation point falls outside a basis domain."""


class NumericalError(LsocvError):
    """A computation failed for numerical reasons."""


class NearSingularError(NumericalError):
    """A working-correlation block is singular or nearly so."""


class SingularFitError(NumericalError):
    """The penalized normal matrix could not be factorized."""


class LeverageSaturationError(NumericalError):
    """An (I - A_ii) block is numerically singular: a subject fully
    determines its own fit and the leave-subject-out score is undefined."""


class EstimationError(NumericalError):
    """Correlation-parameter estimation is underdetermined."""


class OptimizerStallError(NumericalError):
    """Step halving failed to find a decrease; carries the trace so far."""

    def __init__(self, message, trace=None, eta=None):
        super().__init__(message)
        self.trace = trace
        self.eta = eta
