"""Shared exception types. The CLI maps these onto exit codes."""


class ContractError(ValueError):
    """A caller violated a documented precondition or file-format contract."""


class DimensionError(ContractError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """NaN input, divergence, or a failed numeric verification."""


class ParseError(ContractError):
    """Malformed persisted artifact (dataset line, container header, ...)."""
