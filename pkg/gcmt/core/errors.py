from typing import Any, Dict, List, Optional, Sequence

from gcmt.utils.logging import get_logger

# Get the logger
logger = get_logger()


class GCMTError(Exception):
    """Base error of the package."""

    def __init__(self, msg: str, **kwargs: Any) -> None:
        """GCMT error constructor."""
        self.msg = msg
        self.params: Dict[str, Any] = kwargs

        super().__init__(msg)
        logger.error(f"{self.__class__.__name__}: {self.msg}")


class DimensionError(GCMTError, ValueError):
    """Operands have incompatible shapes."""


class ParameterError(GCMTError, ValueError):
    """Scalar parameter outside of its admissible range."""


class NumericError(GCMTError, ArithmeticError):
    """Non-finite value where a finite one is required."""


class LabelIndexError(GCMTError, IndexError):
    """Class label outside of [0, C)."""


class GraphSizeError(GCMTError, ValueError):
    """Batch too small to build a graph."""


class ValidationError(GCMTError, ValueError):
    """Value violates a documented precondition."""


class ConsistencyError(GCMTError, RuntimeError):
    """Internal state drifted out of its invariants."""


class ClusterSizeError(GCMTError, ValueError):
    """Fewer points than requested clusters."""


class SamplingStateError(GCMTError, RuntimeError):
    """Sampler has nothing to draw from."""


class EvaluationError(GCMTError, RuntimeError):
    """Retrieval evaluation cannot produce a result."""


class TrainingDivergedError(GCMTError, ArithmeticError):
    """Loss became non-finite during training."""

    def __init__(self, msg: str, batch_indices: Sequence[int], report: Any, **kwargs: Any) -> None:
        """Keep the offending batch for post-mortem inspection."""
        self.batch_indices = list(batch_indices)
        self.report = report
        super().__init__(msg, **kwargs)
        logger.error(f"diverged batch: indices={self.batch_indices} report={self.report}")


class CheckpointError(GCMTError):
    """Checkpoint cannot be loaded."""


class CheckpointFormatError(CheckpointError):
    """Checkpoint container is not a GCMT checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint ends before its trailing checksum."""


class CheckpointDimensionError(CheckpointError):
    """Declared and actual parameter sizes disagree."""


class CheckpointChecksumError(CheckpointError):
    """Decoded parameter bytes do not match the stored checksum."""


class DatasetParseError(GCMTError, ValueError):
    """Dataset file cannot be parsed."""

    def __init__(self, msg: str, line: Optional[int] = None, **kwargs: Any) -> None:
        """Prefix the message with the offending line number."""
        self.line = line
        if line is not None:
            msg = f"line {line}: {msg}"
        super().__init__(msg, **kwargs)


class MalformedHeaderError(DatasetParseError):
    """Dataset header is missing or malformed."""


class RowWidthError(DatasetParseError):
    """Row has a different number of fields than the header."""


class UnknownSplitError(DatasetParseError):
    """Row carries a split tag other than train, query or gallery."""


class ConfigValidationError(GCMTError, ValueError):
    """Experiment configuration is invalid."""

    def __init__(self, msg: str, keys: List[str], **kwargs: Any) -> None:
        """Keep every offending dotted key."""
        self.keys = list(keys)
        super().__init__(msg, **kwargs)
