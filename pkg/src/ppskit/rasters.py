"""Raster containers shared across the pipeline.

All rasters are row-major numpy arrays indexed ``[v, u]`` (``v`` = image row,
``u`` = pixel column) with an explicit per-pixel validity mask. Values are
held in float64 internally; file formats narrow to float32 on write.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, UserInputError


def _checked_mask(valid, shape) -> np.ndarray:
    if valid is None:
        return np.ones(shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != shape:
        raise DimensionMismatchError(
            f"validity mask shape {valid.shape} does not match raster shape {shape}"
        )
    return valid


@dataclass
class ScalarField:
    """A per-pixel scalar raster with validity mask and free-form metadata."""

    values: np.ndarray
    valid: np.ndarray
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, values, valid=None, meta=None) -> "ScalarField":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise UserInputError(f"scalar field must be 2-D, got shape {values.shape}")
        mask = _checked_mask(valid, values.shape) & np.isfinite(values)
        values = np.where(mask, values, 0.0)
        return cls(values=values, valid=mask, meta=dict(meta or {}))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())


# A shading map is just a scalar field whose values carry the clamped-shading
# convention (non-negative where valid).
PPSMap = ScalarField
IntensityField = ScalarField


@dataclass
class VectorField3:
    """A per-pixel 3-vector raster (shape ``(H, W, 3)``) with validity mask."""

    vectors: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_vectors(cls, vectors, valid=None) -> "VectorField3":
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 3 or vectors.shape[2] != 3:
            raise UserInputError(f"vector field must be (H, W, 3), got {vectors.shape}")
        mask = _checked_mask(valid, vectors.shape[:2])
        mask = mask & np.isfinite(vectors).all(axis=2)
        vectors = np.where(mask[..., None], vectors, 0.0)
        return cls(vectors=vectors, valid=mask)

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


@dataclass
class DepthMap:
    """Per-pixel depth in meters. Valid pixels are finite and strictly positive."""

    values: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_values(cls, values, valid=None) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise UserInputError(f"depth map must be 2-D, got shape {values.shape}")
        mask = _checked_mask(valid, values.shape)
        with np.errstate(invalid="ignore"):
            mask = mask & np.isfinite(values) & (values > 0.0)
        values = np.where(mask, values, 0.0)
        return cls(values=values, valid=mask)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class PointMap:
    """Per-pixel 3D points in camera coordinates (meters)."""

    points: np.ndarray
    valid: np.ndarray

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]


@dataclass
class NormalMap:
    """Per-pixel unit surface normals, camera-facing orientation."""

    normals: np.ndarray
    valid: np.ndarray

    @property
    def height(self) -> int:
        return self.normals.shape[0]

    @property
    def width(self) -> int:
        return self.normals.shape[1]


def as_rgb_image(image) -> np.ndarray:
    """Validate and convert an RGB image to a float64 ``(H, W, 3)`` array."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise UserInputError(f"expected a 3-channel RGB image, got shape {image.shape}")
    return image
