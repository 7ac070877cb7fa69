"""Shading-consistency diagnostics between a shading map and image intensity.

A structurally faithful image of a Lambertian surface with uniform albedo has
intensity proportional to its shading map. This module fits the best scalar
gain between the two fields and reports the residual error map plus summary
statistics, which makes "did the generated image keep the scene's shading
structure" a measurable quantity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, EmptyValidMaskError, UserInputError
from .rasters import IntensityField, PPSMap, ScalarField, as_rgb_image

# Rec.709 luma weights.
_LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass
class ShadingErrorReport:
    """Residuals of the best scalar-gain fit of shading to intensity."""

    error_map: ScalarField
    mean_abs_error: float
    rmse: float
    fitted_gain: float
    valid_fraction: float

    def to_dict(self) -> dict:
        return {
            "mean_abs_error": self.mean_abs_error,
            "rmse": self.rmse,
            "fitted_gain": self.fitted_gain,
            "valid_fraction": self.valid_fraction,
        }


def to_intensity(image, valid=None) -> IntensityField:
    """Rec.709 luminance of an RGB image in [0, 1]."""
    image = as_rgb_image(image)
    lum = image @ _LUMA
    return IntensityField.from_values(np.clip(lum, 0.0, 1.0), valid=valid)


def shading_error(pps: PPSMap, intensity: IntensityField) -> ShadingErrorReport:
    """Fit intensity = gain * shading by least squares and report residuals.

    The gain is ``<shading, intensity> / <shading, shading>`` over jointly
    valid pixels; the error map is ``|gain * shading - intensity|``. Raises
    if no pixel is jointly valid or the shading map is identically zero on
    the joint mask (the fit would be degenerate).
    """
    if pps.values.shape != intensity.values.shape:
        raise DimensionMismatchError(
            f"shading map {pps.values.shape} vs intensity {intensity.values.shape}"
        )
    joint = pps.valid & intensity.valid
    if not joint.any():
        raise EmptyValidMaskError("no jointly valid pixels between shading and intensity")
    s = pps.values[joint]
    i = intensity.values[joint]
    denom = float(np.dot(s, s))
    if denom == 0.0:
        raise UserInputError("shading map is zero on the joint mask; gain fit undefined")
    gain = float(np.dot(s, i) / denom)
    residual = np.abs(gain * pps.values - intensity.values)
    residual = np.where(joint, residual, 0.0)
    r = residual[joint]
    return ShadingErrorReport(
        error_map=ScalarField(values=residual, valid=joint, meta={"fitted_gain": gain}),
        mean_abs_error=float(r.mean()),
        rmse=float(np.sqrt(np.mean(r * r))),
        fitted_gain=gain,
        valid_fraction=float(joint.mean()),
    )


def pearson_correlation(a: ScalarField, b: ScalarField) -> float:
    """Pearson correlation between two fields over their joint valid mask."""
    if a.values.shape != b.values.shape:
        raise DimensionMismatchError(f"field shapes differ: {a.values.shape} vs {b.values.shape}")
    joint = a.valid & b.valid
    if joint.sum() < 2:
        raise EmptyValidMaskError("need at least two jointly valid pixels for correlation")
    x = a.values[joint]
    y = b.values[joint]
    x = x - x.mean()
    y = y - y.mean()
    sx = float(np.sqrt(np.dot(x, x)))
    sy = float(np.sqrt(np.dot(y, y)))
    if sx == 0.0 or sy == 0.0:
        raise UserInputError("correlation undefined for a constant field")
    return float(np.dot(x, y) / (sx * sy))
