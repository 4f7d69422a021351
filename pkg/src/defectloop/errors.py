"""Exception hierarchy shared across the pipeline.

Every error the library raises deliberately derives from
:class:`DefectLoopError`, so callers can catch one base type at
process boundaries (CLI, HTTP service) and map it to an exit code or
a 4xx response.
"""


class DefectLoopError(Exception):
    """Base class for all errors raised by this package."""


# --- annotation core ---------------------------------------------------


class SumMismatchError(DefectLoopError):
    """Run lengths do not sum to width*height."""


class DegeneratePolygonError(DefectLoopError):
    """Polygon has fewer than 3 vertices."""


# --- ingest / preprocess -----------------------------------------------


class UnsortedInputError(DefectLoopError):
    """Frame sequence is not sorted by capture time."""


class UnreadableImageError(DefectLoopError):
    def __init__(self, image_id: str, detail: str = ""):
        self.image_id = image_id
        super().__init__(f"unreadable image {image_id!r}" + (f": {detail}" if detail else ""))


class CropOutOfBoundsError(DefectLoopError):
    """Crop region extends past the image frame."""


class TooFewImagesError(DefectLoopError):
    """A split needs at least 2 images."""


class DegenerateRatioError(DefectLoopError):
    """Split ratio would leave the train or test side empty."""


# --- labeling / consensus ----------------------------------------------


class EmptyPoolError(DefectLoopError):
    """No images left to batch."""


class MixedImagesError(DefectLoopError):
    """Annotation sets reference different images."""


class IllegalTransitionError(DefectLoopError):
    """Review decision not legal from the current review state."""


# --- active selection ---------------------------------------------------


class ProbabilityOutOfRangeError(DefectLoopError):
    """A probability fell outside [0, 1]."""


class MissingScoreError(DefectLoopError):
    def __init__(self, image_id: str):
        self.image_id = image_id
        super().__init__(f"no uncertainty score for image {image_id!r}")


# --- augmentation -------------------------------------------------------


class RateTooSmallError(DefectLoopError):
    """Augmentation rate must be >= 1."""


# --- metrics --------------------------------------------------------------


class DimensionMismatchError(DefectLoopError):
    """Masks being compared have different shapes."""


class AllUndefinedError(DefectLoopError):
    """Every per-image IoU was undefined (both masks empty)."""


class NoGroundTruthError(DefectLoopError):
    """Average precision needs at least one ground-truth box."""


class MissingPredictionError(DefectLoopError):
    def __init__(self, image_id: str):
        self.image_id = image_id
        super().__init__(f"no prediction for test image {image_id!r}")


# --- model backend --------------------------------------------------------


class BackendUnavailableError(DefectLoopError):
    """The prediction backend cannot serve requests."""


class UntrainedModelError(BackendUnavailableError):
    """Model handle has no trained parameters behind it."""


class ResolutionMismatchError(DefectLoopError):
    """Image resolution differs from the model's trained resolution."""


class EmptyTrainingSetError(DefectLoopError):
    """Training requires at least one sample."""


class ClassUnrepresentedError(DefectLoopError):
    def __init__(self, class_name: str):
        self.class_name = class_name
        super().__init__(f"no annotated training example for class {class_name!r}")


class HyperparamOutOfRangeError(DefectLoopError):
    """Hyperparameter outside its contract range."""


class BackendTimeoutError(BackendUnavailableError):
    """External backend did not answer within the timeout budget."""


class MalformedResponseError(DefectLoopError):
    """External backend answered with an invalid payload."""


class RemoteError(DefectLoopError):
    """External backend reported an application-level error."""


# --- orchestrator ----------------------------------------------------------


class MaxBatchesExceededError(DefectLoopError):
    """Safety cap on pipeline batches reached before the phase finished."""


# --- service ----------------------------------------------------------------


class UnknownLabelerError(DefectLoopError):
    def __init__(self, labeler_id: str):
        self.labeler_id = labeler_id
        super().__init__(f"labeler {labeler_id!r} is not registered")


class UnknownTaskError(DefectLoopError):
    def __init__(self, task_id: str):
        self.task_id = task_id
        super().__init__(f"unknown task {task_id!r}")


class LeaseExpiredError(DefectLoopError):
    """Task lease timed out before the annotation was submitted."""


class ValidationFailedError(DefectLoopError):
    def __init__(self, detail: str):
        self.detail = detail
        super().__init__(f"annotation payload invalid: {detail}")


class AlreadyRunningError(DefectLoopError):
    """A pipeline run is already active."""


class NoActiveRunError(DefectLoopError):
    """No pipeline run to report on."""
