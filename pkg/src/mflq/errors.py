"""Exception hierarchy shared by the solvers and the command line.

Each class carries the process exit code the CLI maps it to.
"""


class MFLQError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class NumericalError(MFLQError):
    """Divergence, non-finite values or an exhausted iteration budget."""

    exit_code = 1


class ProblemFileError(MFLQError):
    """Malformed problem document or bad command-line usage."""

    exit_code = 2


class PreconditionError(MFLQError):
    """A parameter window or structural precondition is violated."""

    exit_code = 3
