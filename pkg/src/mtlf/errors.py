"""Exception types shared across the package.

Every failure mode raised on purpose derives from MtlfError so callers
(and the CLI) can distinguish our diagnostics from genuine bugs.
"""


class MtlfError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MtlfError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(MtlfError):
    """An argument value is outside its legal range."""


class ContractError(MtlfError):
    """A call violates an operation's contract (wrong kind, non-scalar loss, ...)."""


class LabelError(MtlfError):
    """A class label is outside the declared label space."""


class NumericError(MtlfError):
    """Non-finite values (NaN/Inf) were produced or supplied."""


class OptimizerError(MtlfError):
    """Optimizer state and parameters are out of sync (e.g. missing gradient)."""


class RegistryError(MtlfError):
    """Duplicate or unknown task name in a task registry."""


class DataError(MtlfError):
    """A dataset is empty or too small for the requested operation."""


class ConfigError(MtlfError):
    """An invalid model or experiment configuration."""


class IngestionError(MtlfError):
    """Corpus ingestion failed (e.g. empty corpus)."""


class ParseError(MtlfError):
    """A data file line could not be parsed; the message names the line."""


class RangeError(MtlfError):
    """A regression label lies outside its declared range."""


class EncodingError(MtlfError):
    """Token ids are inconsistent with the vocabulary or encoder config."""


class CheckpointError(MtlfError):
    """A checkpoint is missing, malformed, or corrupt."""
