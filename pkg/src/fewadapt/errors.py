"""Exception hierarchy shared across the engine."""


class EngineError(Exception):
    """Base class for all engine-raised errors."""


class ConfigError(EngineError):
    """Invalid configuration value, shape spec, or hyperparameter."""


class DataError(EngineError):
    """Input data violates a documented contract (labels, stochastic rows, pairings)."""


class DimensionError(EngineError):
    """Matrix shape mismatch; message names the offending node or argument."""


class NumericError(EngineError):
    """Non-finite value where a finite one is required."""


class ContractError(EngineError):
    """Operation precondition violated (e.g. non-scalar loss node, empty batch)."""


class ProtocolError(EngineError):
    """Episodic evaluation protocol cannot be satisfied or summaries are unpaired."""


class SelectionError(EngineError):
    """Every learning-rate candidate produced a non-finite validation loss."""


class StalenessError(EngineError):
    """Soft-labeled set does not match the teacher it claims to come from."""


class ParseError(EngineError):
    """Malformed external file; message carries path and line number."""


class ReportError(EngineError):
    """Report emission failed (empty or inconsistent results directory)."""


class FormatError(EngineError):
    """Serialized artifact has an unsupported format version."""
