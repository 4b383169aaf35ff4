"""Exception hierarchy shared by all stages.

Every error carries a short machine-readable ``code`` used by the CLI when
printing ``error[<CODE>]: message`` and an ``exit_code`` (1 validation, 2 I/O).
"""


class SegmetaError(Exception):
    code = "ERROR"
    exit_code = 1


class ValidationError(SegmetaError, ValueError):
    code = "INVALID"


class IoFailure(SegmetaError, OSError):
    code = "IO"
    exit_code = 2


# array files
class BadMagic(ValidationError):
    code = "BADMAGIC"


class UnsupportedDtype(ValidationError):
    code = "DTYPE"


class UnsupportedVersion(ValidationError):
    code = "VERSION"


class HeaderMalformed(ValidationError):
    code = "HEADER"


class SizeMismatch(ValidationError):
    code = "SIZE"


class InvalidProbabilities(ValidationError):
    code = "PROBS"


# corpus
class MissingFrame(IoFailure):
    code = "MISSINGFRAME"


class DuplicateFrameId(ValidationError):
    code = "DUPFRAME"


class ManifestError(ValidationError):
    code = "MANIFEST"


# decision rules / priors
class ShapeMismatch(ValidationError):
    code = "SHAPE"


class NonpositivePrior(ValidationError):
    code = "PRIOR"


class ZeroPrior(NonpositivePrior):
    code = "ZEROPRIOR"


class EmptyInput(ValidationError):
    code = "EMPTY"


# datasets and models
class SchemaMismatch(ValidationError):
    code = "SCHEMA"


class InsufficientData(ValidationError):
    code = "NODATA"


class DegenerateTargets(ValidationError):
    code = "DEGENERATE"


class NonfiniteFeature(ValidationError):
    code = "NONFINITE"


class SingleClass(ValidationError):
    code = "SINGLECLASS"


class MissingMetrics(ValidationError):
    code = "MISSINGMETRICS"


class ResolutionMismatch(ShapeMismatch):
    code = "RESOLUTION"


class TooFewRows(ValidationError):
    code = "TOOFEW"


# evaluation
class EmptySample(ValidationError):
    code = "EMPTYSAMPLE"


class KindMismatch(ValidationError):
    code = "KIND"


class ShapeOutOfBounds(ValidationError):
    code = "OUTOFBOUNDS"


# cli
class UsageError(ValidationError):
    code = "BADCMD"


class ConfigError(ValidationError):
    code = "CONFIG"


class StageFailure(SegmetaError):
    code = "STAGE"

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
