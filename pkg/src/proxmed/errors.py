"""Exception hierarchy shared by the library and the command line front end."""


class ProxmedError(Exception):
    """Base class for all errors raised by proxmed."""

    exit_code = 1


class ConfigError(ProxmedError):
    """Invalid run configuration or column-role mapping."""

    exit_code = 2


class DataError(ProxmedError):
    """Problem with the contents of an input dataset."""

    exit_code = 3


class SchemaError(DataError):
    """A role-mapped column is missing from the input header."""


class DomainError(DataError):
    """A column holds values outside its permitted domain."""


class EmptyDataError(DataError):
    """No rows remain after complete-case deletion."""


class SolverError(ProxmedError):
    """A bridge or nuisance solver failed.

    ``residual`` carries the final moment residual when one is available.
    """

    exit_code = 4

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class PreconditionError(SolverError):
    """The data do not satisfy a fitting routine's precondition."""


class RankDeficiencyError(SolverError):
    """The moment matrix of an exactly identified linear system is singular."""

    def __init__(self, message, dimension=None):
        super().__init__(message)
        self.dimension = dimension


class ConditioningError(SolverError):
    """A kernel system stayed ill-conditioned after ridge repair."""


class BootstrapStabilityError(SolverError):
    """Too many bootstrap replicates failed."""

    def __init__(self, message, n_failed, n_total):
        super().__init__(message)
        self.n_failed = n_failed
        self.n_total = n_total


class IOFailure(ProxmedError):
    """Reading or writing a file failed."""

    exit_code = 5
