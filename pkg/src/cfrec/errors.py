"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: parse/IO problems exit 2, unknown ids
exit 3, numeric failures exit 4.
"""


class CfrecError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(CfrecError, ValueError):
    """A ratings or artifact file could not be parsed."""


class EmptyDatasetError(CfrecError, ValueError):
    """An operation produced or received a dataset with no points."""


class UnknownIdError(CfrecError, KeyError):
    """A user or item id is outside the dataset vocabulary."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown id"


class UnsupportedOperationError(CfrecError, TypeError):
    """The operation is not defined for this model kind."""


class ContractError(CfrecError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(CfrecError, ArithmeticError):
    """Training diverged or a linear solve failed."""


class DivergenceError(NumericError):
    def __init__(self, epoch, value):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}")
        self.epoch = epoch
        self.value = value


class CapExceededError(CfrecError, ValueError):
    """The exhaustive oracle refuses instances above its enumeration cap."""
