"""Exception types shared across the package."""


class PseudoLidarError(Exception):
    """Base class for all package errors."""


class FormatError(PseudoLidarError, ValueError):
    """A binary or text container does not match its declared layout."""


class ParseError(PseudoLidarError, ValueError):
    """A text record is missing a key or has the wrong number of fields."""


class DomainError(PseudoLidarError, ValueError):
    """An argument lies outside the domain of a geometric function."""


class ShapeError(PseudoLidarError, ValueError):
    pass


class StateError(PseudoLidarError, RuntimeError):
    """A backward pass was requested without the matching forward state."""
