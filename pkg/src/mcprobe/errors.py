"""Exception types raised across the package."""


class McProbeError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(McProbeError, ValueError):
    pass


class AllDirectionsDegenerate(McProbeError, ValueError):
    pass


class IndexOutOfRange(McProbeError, IndexError):
    pass


class EmptyClass(McProbeError, ValueError):
    pass


class EmptyDataset(McProbeError, ValueError):
    pass


class NonFiniteEmbedding(McProbeError, ValueError):
    pass


class IterationsExceedDim(McProbeError, ValueError):
    pass


class EmptySentence(McProbeError, ValueError):
    pass


class SequenceTooLong(McProbeError, ValueError):
    pass


class VocabMismatch(McProbeError, ValueError):
    pass


class MaskMissing(McProbeError, ValueError):
    pass


class FormatError(McProbeError, ValueError):
    """Malformed interchange or dictionary file.

    ``line`` is 1-based when known; ``path`` is the offending file.
    """

    def __init__(self, message, *, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class InventoryCollision(McProbeError, ValueError):
    pass


class SpecMismatch(McProbeError, ValueError):
    pass


class InsufficientData(McProbeError, ValueError):
    pass


class NoCoveredWord(McProbeError, ValueError):
    pass


class UnknownPiece(McProbeError, KeyError):
    pass


class EmptyRecords(McProbeError, ValueError):
    pass


class ThresholdNeverMet(McProbeError):
    """No iteration count kept MLM accuracy above the threshold.

    The fallback selection (m=0 plus the full trace) is attached as ``selection``.
    """

    def __init__(self, message, selection=None):
        super().__init__(message)
        self.selection = selection


class ReportError(McProbeError, OSError):
    pass


class StageError(McProbeError):
    """Wraps a failure with the pipeline stage that raised it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
