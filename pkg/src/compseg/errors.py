"""Exception types shared across the package."""


class CompsegError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CompsegError, ValueError):
    pass


class ContractError(CompsegError, ValueError):
    """A caller violated an operation's precondition."""


class DegenerateInputError(CompsegError, ValueError):
    """Input admits no well-defined result (e.g. pooling over zero tokens)."""


class NonFiniteError(CompsegError, ArithmeticError):
    pass


class VocabularyError(CompsegError, KeyError):
    pass


class ConfigurationError(CompsegError, ValueError):
    pass


class ProtocolError(CompsegError, ValueError):
    """An evaluation was requested on a dataset that lacks a required split."""


class UndefinedMetricError(CompsegError, ArithmeticError):
    pass


class FormatError(CompsegError, ValueError):
    """A file on disk does not match the expected binary or JSON layout."""
