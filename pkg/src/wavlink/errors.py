"""Exception hierarchy shared by all wavlink modules.

Each class carries the CLI exit code it maps to.
"""


class WavLinkError(Exception):
    exit_code = 1


class ConfigError(WavLinkError, ValueError):
    exit_code = 1


class DimensionError(WavLinkError, ValueError):
    """Shape or extent mismatch."""

    exit_code = 1


class InputError(WavLinkError, ValueError):
    exit_code = 1


class ValidationError(WavLinkError, ValueError):
    exit_code = 1


class TokenIndexError(WavLinkError, IndexError):
    exit_code = 1


class NumericError(WavLinkError, ArithmeticError):
    exit_code = 2


class DegenerateEmbeddingError(NumericError):
    """A projection collapsed to (near) zero norm and cannot be normalized."""


class FormatError(WavLinkError, IOError):
    exit_code = 3
