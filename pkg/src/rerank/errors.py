"""Exception types shared across the toolkit."""


class ParseError(ValueError):
    """A data file could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = str(path) if path is not None else None
        self.line = line
        where = ""
        if self.path is not None:
            where = self.path
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class IntegrityError(ValueError):
    """Data parsed but violates a structural invariant (duplicates, rank gaps...)."""


class NumericError(ArithmeticError):
    """A non-finite value showed up in a computation."""


class StateError(RuntimeError):
    """An operation was called without the state it depends on."""
