"""Error types shared across the package."""


class SymdiffError(Exception):
    """Base class for all package errors."""


class ShapeError(SymdiffError):
    """Operands have incompatible shapes."""


class ContractError(SymdiffError):
    """An input violates a documented precondition."""


class FormatError(SymdiffError):
    """A serialized file is malformed. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateError(SymdiffError):
    """A numerical procedure failed after exhausting its retry budget."""


class NumericsError(SymdiffError):
    """An iterated computation produced a non-finite state."""
