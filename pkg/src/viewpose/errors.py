"""Exception types shared across the package."""


class ViewposeError(Exception):
    """Base class for all package-specific errors."""


class SingularGeometry(ViewposeError):
    """Ray bundle is degenerate (e.g. all rays parallel); no unique solution."""


class DegenerateDirection(ViewposeError):
    """A ray direction has (near-)zero norm and cannot be normalized."""


class DegenerateDataset(ViewposeError):
    """Camera centers have (near-)zero variance; no scale can be derived."""


class ShapeMismatch(ViewposeError):
    """Input array shape does not match the configured resolution."""


class DimensionMismatch(ViewposeError):
    """Feature dimensionality does not match the codebook dimensionality."""


class EmptyCounter(ViewposeError):
    """Usage requested from a counter that has seen no indices."""


class InsufficientSamples(ViewposeError):
    """Data-driven codebook init requested with fewer samples than entries."""


class InvalidIndex(ViewposeError):
    """A token index lies outside the codebook range."""


class GridMismatch(ViewposeError):
    """Token grids that must share a shape do not."""


class ModalityViolation(ViewposeError):
    """A token id falls outside the vocabulary range of its segment."""


class MalformedLayout(ViewposeError):
    """A token sequence does not follow any valid sample layout."""


class SequenceTooLong(ViewposeError):
    """Sequence exceeds the model's maximum length."""


class NonFiniteLoss(ViewposeError):
    """Training loss became NaN/Inf; carries the offending step index."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class ManifestConflict(ViewposeError):
    """Output directory already holds a dataset with different parameters."""
