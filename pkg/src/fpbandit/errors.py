"""Exception hierarchy shared by every module in the package."""


class BanditError(Exception):
    """Base class for all package errors."""


class ShapeError(BanditError, ValueError):
    """Array dimensions do not line up."""


class NumericError(BanditError, ArithmeticError):
    """A computation produced NaN/Inf or failed to converge."""


class ContractError(BanditError, ValueError):
    """A precondition on the inputs was violated."""


class ParseError(BanditError, ValueError):
    """An input file could not be parsed.

    The message always carries the file path and, where known, the line number.
    """

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")
