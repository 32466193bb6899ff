"""Exception hierarchy shared across the package."""


class RescalError(Exception):
    """Base class for every error raised by this package."""


class ContractError(RescalError, ValueError):
    """A precondition or postcondition of an operation was violated."""


class ShapeError(ContractError):
    """Operand shapes do not conform to the operation's shape rule."""


class NumericDomainError(RescalError, ArithmeticError):
    """An operation produced or received a non-finite value."""


class DegenerateInputError(ContractError):
    """Input is well-formed but degenerate (e.g. a constant series)."""


class ParseError(RescalError, ValueError):
    """A structured input file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class MissingArtifactError(RescalError, FileNotFoundError):
    """An upstream pipeline artifact is absent."""

    def __init__(self, path, producer):
        self.path = path
        self.producer = producer
        super().__init__(f"missing artifact {path}; produce it with `rescal {producer}`")
