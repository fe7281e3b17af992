"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage/config problems exit 1, data and
protocol problems exit 2, numeric failures exit 3.
"""


class DaclError(Exception):
    exit_code = 1


class UsageError(DaclError):
    exit_code = 1


class ConfigError(DaclError):
    exit_code = 1


class ContractError(DaclError):
    """A caller violated an operation's precondition."""

    exit_code = 1


class DimensionError(ContractError, ValueError):
    pass


class DataError(DaclError):
    exit_code = 2


class ProtocolError(DataError):
    """Labels requested where the evaluation protocol forbids them."""


class CheckpointError(DataError):
    pass


class NumericError(DaclError, ArithmeticError):
    exit_code = 3


class DomainError(NumericError, ValueError):
    """Math domain violation, e.g. log of a non-positive value."""
