"""Exception types shared by the library and the command line."""


class FormatError(ValueError):
    """A file does not follow its documented binary or text layout."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ExtentOverflowError(FormatError):
    pass


class ConstraintError(ValueError):
    """Inputs parse fine but violate a precondition (e.g. a class missing from a split)."""
