"""Exception types shared across the package."""


class FrostError(Exception):
    """Base class for all package errors."""


class ShapeError(FrostError, ValueError):
    """Array dimensions do not chain."""


class NumericError(FrostError, ArithmeticError):
    """A non-finite value appeared (divergence, bad input, bad gradient)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(FrostError, ValueError):
    """Invalid configuration or parameter combination."""


class EmptySketchError(FrostError, LookupError):
    """Quantile requested from a sketch with no items."""
