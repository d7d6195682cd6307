"""Exception hierarchy shared by every module."""


class HyqalError(Exception):
    """Base class for all errors raised by hyqal."""


class ConfigError(HyqalError, ValueError):
    """Invalid or inconsistent configuration."""


class ShapeError(HyqalError, ValueError):
    """Array shape incompatible with the operation."""

    def __init__(self, kind, expected, actual, detail=""):
        self.kind = kind
        self.expected = expected
        self.actual = actual
        msg = f"{kind}: expected shape {expected}, got {tuple(actual)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DataError(HyqalError):
    """Malformed input data (image files, manifests, checkpoints)."""

    def __init__(self, message, filename=None, offset=None):
        self.filename = filename
        self.offset = offset
        parts = [message]
        if filename is not None:
            parts.append(f"file={filename}")
        if offset is not None:
            parts.append(f"byte offset={offset}")
        super().__init__("; ".join(parts))


class NumericError(HyqalError, ArithmeticError):
    """NaN, Inf or divergence detected during training."""
