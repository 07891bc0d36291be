"""Exception types shared across the package."""


class TensorFileError(Exception):
    """Base class for tensor-file format violations."""


class BadMagicError(TensorFileError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(TensorFileError):
    """File declares a format version this reader does not support."""


class UnsupportedDtypeError(TensorFileError):
    """File declares a dtype code this reader does not support."""


class TruncatedPayloadError(TensorFileError):
    """File ends before the declared payload (or has trailing bytes)."""


class ConfigError(ValueError):
    """Run configuration is malformed, has unknown keys, or bad values."""


class MissingDependencyError(RuntimeError):
    """A pipeline stage was invoked before a stage it depends on.

    Carries the name of the stage whose output is missing so callers can
    report what to run first.
    """

    def __init__(self, required_stage: str, detail: str = ""):
        self.required_stage = required_stage
        msg = f"missing dependency: run stage '{required_stage}' first"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
