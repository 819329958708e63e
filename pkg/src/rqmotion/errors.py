"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class RqMotionError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class ValidationError(RqMotionError, ValueError):
    exit_code = 2


class ConfigError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class TokenIndexError(ValidationError, IndexError):
    pass


class NumericError(RqMotionError, ArithmeticError):
    exit_code = 3


class ContractError(RqMotionError, RuntimeError):
    """Caller violated an internal precondition (cache desync, missing inputs)."""

    exit_code = 3


class StateError(ContractError):
    pass


class ExhaustionError(ValidationError):
    pass
