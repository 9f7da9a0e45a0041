"""
errors.py – Exception hierarchy for DotControl

Every failure the pipeline reports on purpose derives from DotControlError so
the command line can map it to an exit code.
"""


class DotControlError(Exception):
    """Base class of all DotControl errors."""


class ConfigError(DotControlError, ValueError):
    """Invalid run configuration: unknown keys, malformed values."""


class UnknownGateError(ConfigError):
    pass


class NumericalError(DotControlError, RuntimeError):
    """A numerical procedure failed or broke one of its invariants."""


class SolverConvergenceError(NumericalError):
    def __init__(self, message, field=None, residuals=None):
        super().__init__(message)
        self.field = field
        self.residuals = residuals


class InvariantViolation(NumericalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ObjectiveDecrease(NumericalError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class BankError(DotControlError):
    """Basis bank lookup or persistence failed."""


class BankRangeError(BankError, ValueError):
    pass


class BankFormatError(BankError):
    pass


class BankChecksumError(BankError):
    pass
