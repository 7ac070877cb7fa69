"""Structured exception types shared across the package.

Errors triggered by user-supplied inputs (files, flags, mismatched rasters,
incompatible checkpoints) derive from ``UserInputError`` so the CLI can map
them to exit code 2; everything else surfacing out of the library is treated
as an internal error (exit code 1).
"""


class PpskitError(Exception):
    """Base class for all structured errors raised by this package."""


class UserInputError(PpskitError):
    """Bad user-supplied input: malformed file, missing path, bad flag value."""


class FormatError(UserInputError):
    """A file does not conform to its declared on-disk format."""


class DimensionMismatchError(UserInputError):
    """Rasters (or a raster and intrinsics) disagree on pixel dimensions."""


class EmptyValidMaskError(UserInputError):
    """An operation requires at least one valid pixel and got none."""


class CheckpointError(UserInputError):
    """Checkpoint missing, malformed, or incompatible with the model."""


class ShapeError(PpskitError):
    """Tensor shapes violate an op's contract.

    Carries the op name and the offending shapes so failures name the
    contract instead of surfacing as a bare broadcast error.
    """

    def __init__(self, op: str, detail: str, *shapes):
        self.op = op
        self.shapes = shapes
        suffix = f" (shapes: {', '.join(str(tuple(s)) for s in shapes)})" if shapes else ""
        super().__init__(f"{op}: {detail}{suffix}")


class NumericalError(PpskitError):
    """Non-finite values where finite ones are required, or a solver failure."""
