class FormatError(ValueError):
    """A file does not follow its binary or text layout."""


class ValidationError(ValueError):
    """A file parsed but its contents violate a data invariant."""
