"""Exception hierarchy. CLI maps these onto distinct exit codes."""


class QatieError(Exception):
    """Base class for all package errors."""


class ShapeError(QatieError):
    """Tensor shape or dimension mismatch; message names the offending dimension."""


class TapeError(QatieError):
    """Illegal tape usage (recording on a frozen tape, backward from a non-tape value)."""


class ConfigError(QatieError):
    """Invalid configuration field; message names the field."""


class DataError(QatieError):
    """Bad input data: missing/malformed files, empty datasets, undersized images."""


class CheckpointError(QatieError):
    """Malformed checkpoint container: bad magic, version, dtype tag, or truncation."""


class PlanError(QatieError):
    """Quantization plan references unknown insertion points or layers."""


class NumericError(QatieError):
    """Numeric failure: non-finite loss, gradient check above tolerance."""
