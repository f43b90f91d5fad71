"""Exception hierarchy shared by every talab module.

The CLI maps these onto process exit codes: configuration errors exit 2,
numeric errors exit 3, file format / IO errors exit 4.
"""


class TalabError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(TalabError):
    """Invalid parameters, shapes, or method/arch names."""


class NumericError(TalabError):
    """A computation produced NaN/Inf.

    ``node_index`` identifies the offending graph node (construction order)
    when the failure happened inside a gradient evaluation; ``epoch``
    identifies the failing epoch when training diverged.
    """

    def __init__(self, message, *, node_index=None, epoch=None):
        super().__init__(message)
        self.node_index = node_index
        self.epoch = epoch


class FormatError(TalabError):
    """A weight or dataset file failed to parse.

    ``offset`` is the byte offset at which parsing failed.
    """

    def __init__(self, message, *, offset=None):
        super().__init__(message)
        self.offset = offset


class UndefinedRateError(ConfigurationError):
    """Success rate requested over an empty eligible set."""
