"""Exception hierarchy shared by every sblm module."""


class SblmError(Exception):
    """Base class for all package errors."""


class ValidationError(SblmError, ValueError):
    """Bad input or configuration (CLI exit code 1)."""


class NumericError(SblmError, ArithmeticError):
    """A non-finite value appeared, or training diverged (CLI exit code 2)."""


class FormatError(SblmError, OSError):
    """A file on disk is malformed (CLI exit code 3)."""


class UnsupportedFormatError(FormatError):
    pass


class TooShortError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class AlignmentError(ValidationError):
    def __init__(self, message, utt_id=None, line=None):
        where = []
        if utt_id is not None:
            where.append(f"utt {utt_id}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.utt_id = utt_id
        self.line = line


class InventoryError(ValidationError):
    pass


class NoNucleusError(ValidationError):
    pass


class DegenerateLabelError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class CheckpointError(FormatError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ShapeManifestError(CheckpointError):
    pass


class DivergenceError(NumericError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
