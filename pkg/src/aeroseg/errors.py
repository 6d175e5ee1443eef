"""Exception hierarchy shared by all aeroseg modules.

Each class maps to one category of failure so the CLI can translate
exceptions into distinct exit codes (see ``aeroseg.cli``).
"""


class AerosegError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(AerosegError):
    """Invalid configuration: bad hyperparameters, sizes, or option values."""


class DimensionError(AerosegError):
    """Array shapes do not satisfy an operation's contract."""


class ContractError(AerosegError):
    """A call violated an API precondition that is not a shape or label issue."""


class LabelError(AerosegError):
    """A class or domain label is out of range for the current legend/model."""


class EvaluationError(AerosegError):
    """A metric cannot be computed (e.g. empty confusion matrix)."""


class FormatError(AerosegError):
    """A file does not carry the expected magic string or format version."""


class CorruptionError(AerosegError):
    """A file is structurally valid but truncated or internally inconsistent."""


class NumericError(AerosegError):
    """A non-finite value appeared where the pipeline requires finite numbers."""
