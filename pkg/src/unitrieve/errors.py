"""Exception and warning types raised across the toolkit."""

from __future__ import annotations


class UnitrieveError(Exception):
    """Base class for all toolkit errors."""


class ZeroVector(UnitrieveError, ValueError):
    pass


class NonFiniteVector(UnitrieveError, ValueError):
    pass


class DimensionMismatch(UnitrieveError, ValueError):
    pass


class EmptyInput(UnitrieveError, ValueError):
    pass


class KTooLarge(UnitrieveError, ValueError):
    pass


class IndexOutOfRange(UnitrieveError, IndexError):
    pass


class LengthMismatch(UnitrieveError, ValueError):
    pass


class InvalidDataset(UnitrieveError, ValueError):
    pass


class MissingEmbedding(UnitrieveError, KeyError):
    pass


class LabelOutOfRange(UnitrieveError, ValueError):
    pass


class ShapeMismatch(UnitrieveError, ValueError):
    pass


class SingleIdentityDataset(UnitrieveError, ValueError):
    pass


class NonFiniteLoss(UnitrieveError, FloatingPointError):
    """Training produced a NaN/Inf loss; ``diagnostics`` holds the dump."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InsufficientSamples(UnitrieveError, ValueError):
    pass


class DegenerateRank(UnitrieveError, ValueError):
    pass


class KappaTooLarge(UnitrieveError, ValueError):
    pass


class EmptyGallery(UnitrieveError, ValueError):
    pass


class NoRelevantItems(UnitrieveError, ValueError):
    pass


class SpecInvalid(UnitrieveError, ValueError):
    pass


class StageFailure(UnitrieveError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class DegenerateAngle(UserWarning):
    """Target angle too close to 0 or pi for a stable margin derivative."""


class SingleIdentityBatch(UserWarning):
    """Contrastive batch holds a single identity; the loss carries no signal."""
