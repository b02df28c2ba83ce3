"""Exception hierarchy shared by every stage of the pipeline."""


class DDMError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DDMError, ValueError):
    """Invalid configuration, spec, or argument combination."""


class NumericError(DDMError, ArithmeticError):
    """A computation produced non-finite values.

    ``layer`` names the first layer (or parameter segment) where the
    non-finite value was observed, when known.
    """

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class TrainingDiverged(NumericError):
    """SGD produced a non-finite loss; carries the last finite checkpoint."""

    def __init__(self, message, layer=None, last_checkpoint=None, epoch=None):
        super().__init__(message, layer)
        self.last_checkpoint = last_checkpoint
        self.epoch = epoch


class DegenerateSegmentError(NumericError):
    """A gradient segment has (near) zero norm under the cosine distance."""

    def __init__(self, message, segments=()):
        super().__init__(message, layer=segments[0] if segments else None)
        self.segments = tuple(segments)


class ShapeError(DDMError, ValueError):
    def __init__(self, expected, got, what="input"):
        super().__init__(f"{what} shape mismatch: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class IdxFormatError(DDMError, ValueError):
    """Base for IDX parse failures."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class ClusterSizeError(DDMError, ValueError):
    """A class or cluster is too small for the requested operation."""

    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = tuple(offenders)


class RankDeficientError(DDMError, ArithmeticError):
    pass


class MissingArtifactError(DDMError, FileNotFoundError):
    pass


class ArtifactConflictError(DDMError):
    """An existing artifact was produced by a different configuration."""
