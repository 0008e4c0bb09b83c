"""Exception hierarchy. Each class maps to a distinct CLI exit code."""


class HPLError(Exception):
    exit_code = 1


class ConfigError(HPLError, ValueError):
    """Invalid parameters, bank geometry or configuration file."""

    exit_code = 2


class DegenerateDataError(ConfigError):
    """Data cannot identify the requested model parameters."""


class StatisticsError(HPLError):
    """Too few events to form the requested estimate."""

    exit_code = 4


class ConvergenceError(HPLError):
    exit_code = 5


IO_EXIT_CODE = 3
