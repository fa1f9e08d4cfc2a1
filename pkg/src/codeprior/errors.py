"""Exception types shared across the package."""


class CodePriorError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CodePriorError, ValueError):
    pass


class DomainError(CodePriorError, ValueError):
    pass


class FormatError(CodePriorError, ValueError):
    """Malformed or truncated serialized data (bitstreams, codebook files)."""


class CodecError(CodePriorError, ValueError):
    """A bitstream was handed to a compressor that did not produce it."""


class CodeIndexError(CodePriorError, IndexError):
    pass


class NumericError(CodePriorError, FloatingPointError):
    pass


class StateError(CodePriorError, RuntimeError):
    pass


class ConfigError(CodePriorError, ValueError):
    def __init__(self, message, keys=()):
        self.keys = tuple(keys)
        if self.keys:
            message = f"{message}: {', '.join(self.keys)}"
        super().__init__(message)


class DependencyError(CodePriorError, RuntimeError):
    """A prerequisite checkpoint is missing."""

    def __init__(self, stage, message=None):
        self.stage = stage
        super().__init__(message or f"missing prerequisite checkpoint for stage {stage}")


class DataError(CodePriorError, RuntimeError):
    def __init__(self, message, index=None):
        self.index = index
        super().__init__(message)


class StageError(CodePriorError, RuntimeError):
    """Wraps a failure inside a multi-stage pipeline with the stage label."""

    def __init__(self, stage, cause):
        self.stage = stage
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
