"""Exception and warning types shared across the toolkit."""


class KpoError(Exception):
    """Base class for toolkit errors."""


class DimensionMismatchError(KpoError, ValueError):
    """Operands live in Fock spaces of different dimension."""


class ValidationError(KpoError, ValueError):
    """A physical object failed its construction-time invariants."""


class ConvergenceError(KpoError, RuntimeError):
    """An iterative computation failed to reach its tolerance."""


class DegenerateSteadyStateError(KpoError, RuntimeError):
    """The Liouvillian null space is not one-dimensional."""


class CalibrationError(KpoError, RuntimeError):
    """Pulse calibration cannot identify the conversion factor or gains."""


class ConfigError(KpoError, ValueError):
    """An experiment configuration failed validation."""


class TruncationWarning(UserWarning):
    """Significant population near the Fock-space truncation edge."""


class ApproximationWarning(UserWarning):
    """An approximate formula was used outside its comfort zone."""
