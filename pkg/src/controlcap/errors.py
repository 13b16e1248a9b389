"""Exception hierarchy shared across the package."""


class ControlCapError(Exception):
    """Base class for all errors raised by controlcap."""


class GuardError(ControlCapError):
    """An interval evaluation hit a point where the map is undefined or non-smooth.

    Successful interval evaluation of the step map is what certifies smoothness,
    so any subclass of this error means the proof attempt must stop.
    """


class DivisionByZeroInterval(GuardError, ZeroDivisionError):
    """Denominator interval contains zero (or a float denominator is exactly zero)."""


class NonSmoothCrossing(GuardError):
    """An interval straddles a breakpoint of a piecewise-smooth function (clip, relu)."""


class DomainError(GuardError, ValueError):
    """Argument leaves the domain of an elementary function (e.g. arccos outside [-1, 1])."""


class IntervalOverflow(ControlCapError, OverflowError):
    """An interval endpoint became infinite or NaN."""


class UnknownController(ControlCapError, KeyError):
    pass


class ParseError(ControlCapError, ValueError):
    pass


class DimMismatch(ControlCapError, ValueError):
    pass


class ConfigError(ControlCapError, ValueError):
    pass


class SingularJacobian(ControlCapError):
    pass


class NoConvergence(ControlCapError):
    """Newton iteration failed to reach the residual target.

    ``x`` holds the best iterate and ``residual`` its sup-norm residual.
    """

    def __init__(self, message, x=None, residual=float("nan")):
        super().__init__(message)
        self.x = x
        self.residual = residual


class ContractionFailed(ControlCapError):
    """The contraction bounds did not close; ``bounds`` records the last attempt."""

    def __init__(self, message, bounds=None):
        super().__init__(message)
        self.bounds = bounds or {}


class SmoothnessUnverifiable(ControlCapError):
    """Every attempted ball radius hit a guard error during interval evaluation."""


class CertificateInvalid(ControlCapError):
    pass


class HorizonTruncated(ControlCapError):
    """A rigorous rollout stopped before the requested horizon.

    The partial enclosure in ``partial`` is still a valid bound over ``steps`` steps.
    """

    def __init__(self, message, partial=None, steps=0, requested=0):
        super().__init__(message)
        self.partial = partial
        self.steps = steps
        self.requested = requested


class Indeterminate(ControlCapError):
    """An enclosure straddles the persistence boundary, so no claim can be made."""
