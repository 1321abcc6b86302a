"""Exception types shared across the package."""


class TGraphError(Exception):
    pass


class SchemaError(TGraphError, ValueError):
    """A file does not parse under the expected JSON schema.

    ``path`` is the dotted/indexed location of the offending field.
    """

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ValidationError(TGraphError, ValueError):
    """A structural invariant is violated."""


class NumericError(TGraphError, FloatingPointError):
    """Non-finite values appeared in a forward pass or loss."""
