"""Exception hierarchy shared by all modules.

Each class carries the process exit code the command line maps it to.
"""


class RwdreError(Exception):
    exit_code = 1


class ParameterError(RwdreError, ValueError):
    """An argument is outside its admissible range."""

    exit_code = 3


class PreconditionError(RwdreError):
    """Inputs are individually valid but jointly violate an operation's precondition."""

    exit_code = 3


class WindowRangeError(RwdreError, IndexError):
    """A query falls outside the realized space-time window."""

    exit_code = 3


class ResourceError(RwdreError):
    """A memory or cost guard refused the computation."""

    exit_code = 4


class SimulationError(RwdreError):
    exit_code = 3


class VerificationError(RwdreError):
    exit_code = 5
