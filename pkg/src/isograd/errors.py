"""Exception and warning types shared across the package."""

from __future__ import annotations


class IsogradError(Exception):
    """Base class for all package errors."""


class OutOfBoundsError(IsogradError):
    """A query point lies outside the grid bounding box."""


class PrunedVoxelError(IsogradError):
    """The containing voxel is pruned; the caller should treat the sample as empty space."""


class DegenerateFieldError(IsogradError):
    """A field normalization is impossible (e.g. constant density grid)."""


class FormatError(IsogradError):
    """A file does not conform to its declared binary/text format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyCloudError(IsogradError):
    """A point-cloud metric was asked to operate on an empty cloud."""


class NonFiniteLossError(IsogradError):
    """Training produced a non-finite loss; carries the iteration and term breakdown."""

    def __init__(self, iteration: int, terms: dict):
        parts = ", ".join(f"{k}={v!r}" for k, v in terms.items())
        super().__init__(f"non-finite loss at iteration {iteration}: {parts}")
        self.iteration = iteration
        self.terms = terms


class ConvergenceWarning(UserWarning):
    """A fit finished without reaching its target error; the pipeline proceeds."""
