"""Exception hierarchy shared by the solvers and the command-line runner.

Each class maps to one process exit code in :mod:`homog.cli`.
"""


class HomogError(Exception):
    """Base class for all library errors."""

    exit_code = 4


class ConfigError(HomogError, ValueError):
    """Malformed configuration or model description."""

    exit_code = 2


class ResolutionError(HomogError):
    """Requested computation is under-resolved or exceeds the memory budget."""

    exit_code = 3


class ConvergenceError(HomogError):
    """An iterative solver failed to reach its tolerance.

    Attributes
    ----------
    history : list of float
        Relative residuals recorded at each iteration.
    """

    exit_code = 4

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
