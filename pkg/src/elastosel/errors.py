"""Exception types shared across the package.

The CLI maps each class to one exit code, so raise the most specific one.
"""


class ElastoError(Exception):
    """Base class for package errors."""


class FormatError(ElastoError):
    """A file or payload does not match its declared format."""


class PreconditionError(ElastoError):
    """Input data is well-formed but unusable for the requested operation."""
