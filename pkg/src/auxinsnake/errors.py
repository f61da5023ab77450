"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class AuxinError(Exception):
    """Base class for all package errors."""


class ValidationError(AuxinError):
    """Bad user input: configs, files, geometry arguments."""


class InvalidGeometryError(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class NumericalError(AuxinError):
    """A numerical procedure failed."""


class EvaluationError(NumericalError):
    pass


class SingularLinearizationError(NumericalError):
    pass


class SingularJacobianError(NumericalError):
    pass


class NoConvergenceError(NumericalError):
    """Newton iteration did not converge; carries the best iterate."""

    def __init__(self, message, best=None, residual_norm=None, iterations=None):
        super().__init__(message)
        self.best = best
        self.residual_norm = residual_norm
        self.iterations = iterations


class StepSizeUnderflowError(NumericalError):
    def __init__(self, message, t=None, y=None):
        super().__init__(message)
        self.t = t
        self.y = y
