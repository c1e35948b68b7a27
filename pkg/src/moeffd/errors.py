"""Exception hierarchy shared by the library and the CLI."""


class MoEFFDError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DimensionError(MoEFFDError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 2


class ConfigError(MoEFFDError, ValueError):
    """A configuration is invalid or inconsistent with the data."""

    exit_code = 2


class NumericError(MoEFFDError, ArithmeticError):
    """A non-finite value appeared where a finite one was required."""

    exit_code = 3


class DegenerateGateError(NumericError):
    """Importance vector has zero mean, so its coefficient of variation is undefined."""


class CheckpointError(MoEFFDError):
    """A checkpoint or dataset file is malformed, corrupted or incompatible."""

    exit_code = 4
