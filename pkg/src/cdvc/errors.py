"""Exception types shared across the package."""


class CdvcError(Exception):
    """Base class for package errors."""


class FormatError(CdvcError):
    """A file does not conform to its declared format (bad header, wrong codec...)."""


class ValidationError(CdvcError):
    """Data fails an integrity or compatibility check (dims, framing, finiteness)."""


class ConfigError(CdvcError):
    """Invalid configuration. Carries the offending field name when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DegenerateInputError(CdvcError):
    """Input is silent/empty in a way that makes the operation meaningless."""


class ShapeError(CdvcError):
    """Array shapes are incompatible."""


class ModeError(CdvcError):
    """A condition track's utterance/frame mode does not match the operation."""


class NumericError(CdvcError):
    """Non-finite values were produced where finite values are required."""
