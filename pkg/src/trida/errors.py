"""Exception types shared across the package."""


class TridaError(Exception):
    """Base class for toolkit errors."""


class ValidationError(TridaError):
    """Invalid argument, config, or input data."""


class LookupFailure(TridaError):
    """An identifier did not resolve (class name, taxonomy node, ...)."""
