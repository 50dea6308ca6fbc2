class ConfigError(ValueError):
    """Inconsistent shapes, sizes or option combinations."""


class DataError(ValueError):
    """Empty or malformed datasets."""


class FormatError(ValueError):
    """Corrupt or truncated SPTC container."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
