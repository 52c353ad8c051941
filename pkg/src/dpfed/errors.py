"""Exception types raised across the package."""


class DpfedError(Exception):
    """Base class for all package errors."""


class ShapeError(DpfedError, ValueError):
    """Parameter, batch, or update shapes are inconsistent."""


class EmptyBatchError(DpfedError, ValueError):
    pass


class PrivacyError(DpfedError, ValueError):
    """Invalid privacy parameters or non-finite updates."""


class BudgetExhaustedError(DpfedError):
    """The privacy budget cannot cover the requested round."""


class DataFormatError(DpfedError, ValueError):
    """Malformed CSV or RawGray8 input."""


class SchemaError(DataFormatError):
    """A required column or field is missing."""


class ConfigError(DpfedError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class TrainingAborted(DpfedError):
    """A run failed mid-way. ``trace`` holds the records completed before the failure."""

    def __init__(self, message: str, trace: list, round_index: int):
        super().__init__(message)
        self.trace = trace
        self.round_index = round_index
