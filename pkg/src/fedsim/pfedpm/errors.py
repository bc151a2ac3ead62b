"""Exceptions raised by the pFedPM simulator."""
from typing import Optional


class PFedPMError(Exception):
    """Base class of every error raised by this package."""

    pass


class DimensionError(PFedPMError, ValueError):
    """Operand shapes do not fit together."""

    pass


class NumericError(PFedPMError, ArithmeticError):
    """An operation produced a NaN or an infinite value."""

    pass


class ContractError(PFedPMError, ValueError):
    """A precondition of an operation is violated."""

    pass


class EmptyInputError(ContractError):
    """A reduction was asked for over zero elements."""

    pass


class LabelError(ContractError):
    """A class label lies outside of [0, C)."""

    pass


class ProtocolError(PFedPMError):
    """Prototype sets exchanged between clients and server are inconsistent."""

    pass


class DataFormatError(PFedPMError):
    """A dataset file does not follow the expected binary layout."""

    def __init__(self, message: str, offset: Optional[int] = None):
        """Creates the error.

        Parameters
        ----------
        message : str
            Description of the problem.
        offset : int, optional
            Byte offset in the file where the problem was detected.

        """
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(PFedPMError):
    """An experiment configuration is invalid."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        """Creates the error, naming the offending key and line when known."""
        where = []
        if key is not None:
            where.append(f'key "{key}"')
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
        self.key = key
        self.line = line
