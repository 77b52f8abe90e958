"""Exception types shared across the package."""


class CLForgeError(Exception):
    """Base class for all library errors."""


class StructureMismatch(CLForgeError):
    """Parameter names, shapes, or matrix dimensions do not line up."""


class MissingHead(CLForgeError):
    """No head parameters found for the requested task."""


class DuplicateHead(CLForgeError):
    """A head for this task already exists in the store."""


class InfeasibleAlignment(CLForgeError):
    """The target cannot be aligned to the frame sequence (too few frames)."""


class QuotaUnderflow(CLForgeError):
    """Memory capacity is too small to give every seen task a slot."""


class ConfigError(CLForgeError):
    """Invalid configuration; the message names the offending field."""


class TrainingDiverged(CLForgeError):
    """Non-finite loss during training; carries a diagnostics dict."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
