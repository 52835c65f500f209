"""Exception hierarchy shared by every module.

Each class carries a short machine-readable ``code`` so callers (the CLI in
particular) can map failures to exit statuses without string matching.
"""


class MvclError(ValueError):
    code = "error"


class DimensionMismatchError(MvclError):
    code = "dim_mismatch"


class ZeroNormError(MvclError):
    code = "zero_norm"


class EmptyInputError(MvclError):
    code = "empty"


class ConfigError(MvclError):
    code = "config"


class PairError(MvclError):
    code = "pairs"


class DataFormatError(MvclError):
    code = "data_format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(DataFormatError):
    code = "bad_magic"


class BadVersionError(DataFormatError):
    code = "bad_version"


class TruncatedError(DataFormatError):
    code = "truncated"


class NonFiniteError(MvclError):
    code = "non_finite"


class WorkerError(RuntimeError):
    """A data-parallel worker raised; ``worker`` is its index."""

    def __init__(self, worker, cause):
        super().__init__(f"worker {worker} failed: {cause!r}")
        self.worker = worker
        self.cause = cause
