class ValidationError(ValueError):
    """Bad input value or shape; the CLI maps this to exit code 1."""


class AlignmentError(ValidationError):
    """Channels share no common time span."""


class ModelIntegrityError(ValidationError):
    """Model structure cannot be explained (e.g. zero cover at a split)."""


class CapacityError(ValidationError):
    """Problem too large for the requested exact method."""


class ParseError(ValidationError):
    """Malformed serialized payload; message carries the location."""
