"""Exception types raised by noisemap.

Every error derives from a builtin exception so that callers catching
``ValueError`` or ``FileNotFoundError`` keep working. The ``code`` attribute
is the stable identifier written into the CLI's JSON error document.
"""

from typing import Optional


class NoisemapError(Exception):
    """Mixin for all noisemap errors."""

    code = "error"


class RasterFormatError(NoisemapError, ValueError):
    code = "format"


class RasterCorruptionError(NoisemapError, ValueError):
    code = "corruption"


class UnsupportedRasterError(NoisemapError, ValueError):
    code = "unsupported"


class RasterValidationError(NoisemapError, ValueError):
    code = "validation"


class ArgumentError(NoisemapError, ValueError):
    code = "argument"


class ShapeError(NoisemapError, ValueError):
    code = "shape"


class AlignmentError(NoisemapError, ValueError):
    code = "alignment"


class DegenerateCorpusError(NoisemapError, ValueError):
    code = "degenerate_corpus"


class IncompleteMosaicError(NoisemapError, ValueError):
    code = "incomplete_mosaic"


class EmptyEvaluationError(NoisemapError, ValueError):
    code = "empty_evaluation"


class EmptyBatchError(NoisemapError, ValueError):
    code = "empty_batch"


class DomainError(NoisemapError, ValueError):
    code = "domain"


class ConfigError(NoisemapError, ValueError):
    code = "config"


class StageInputError(NoisemapError, FileNotFoundError):
    """A stage input is missing on disk."""

    code = "stage_input"

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class StageOutputError(NoisemapError, OSError):
    """A stage finished without leaving a readable artifact."""

    code = "stage_output"

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path
