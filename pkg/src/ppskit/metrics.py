"""Evaluation metrics: depth-estimation errors and Frechet feature distance.

Depth metrics follow the standard monocular-depth protocol (RMSE, mean
absolute relative error, threshold accuracy at ratio 1.1), computed over the
jointly valid mask with optional median scale alignment. Distributional image
quality is measured as the Frechet distance between Gaussian fits of feature
embeddings; the built-in extractor is a deterministic patch-statistics
embedding so the math stays exact and pluggable, and externally computed
feature files can be substituted.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    DimensionMismatchError,
    EmptyValidMaskError,
    NumericalError,
    UserInputError,
)
from .rasters import DepthMap, as_rgb_image
from .shading import to_intensity

#: Diagonal regularization added to sample covariances; tames rank-deficient
#: summaries of small sets.
COV_REGULARIZATION = 1e-6

#: Threshold for the delta accuracy metric: fraction of pixels whose
#: prediction/truth ratio (either direction) stays below this.
DELTA_THRESHOLD = 1.1

PATCH_STATS_V1 = "patch-stats-v1"
_PATCH_SIDE = 32


class Alignment(str, Enum):
    NONE = "none"
    MEDIAN_SCALE = "median_scale"


@dataclass
class DepthMetricReport:
    rmse: float
    abs_rel: float
    delta_1_1: float
    n_pixels: int
    alignment: str

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "abs_rel": self.abs_rel,
            "delta_1_1": self.delta_1_1,
            "n_pixels": self.n_pixels,
            "alignment": self.alignment,
        }


@dataclass
class FeatureSet:
    """Feature embeddings, one row per image."""

    rows: np.ndarray
    extractor_id: str

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray


def depth_metrics(pred: DepthMap, gt: DepthMap, alignment: Alignment | str = Alignment.NONE) -> DepthMetricReport:
    """Depth error metrics over the jointly valid mask.

    With ``median_scale`` alignment the prediction is multiplied by
    ``median(gt) / median(pred)`` before the metrics, which removes any
    global scale difference.
    """
    alignment = Alignment(alignment)
    if pred.values.shape != gt.values.shape:
        raise DimensionMismatchError(
            f"prediction {pred.values.shape} vs ground truth {gt.values.shape}"
        )
    joint = pred.valid & gt.valid
    if not joint.any():
        raise EmptyValidMaskError("no jointly valid pixels between prediction and ground truth")
    p = pred.values[joint].astype(np.float64)
    g = gt.values[joint].astype(np.float64)
    if not (g > 0).all():
        raise UserInputError("ground-truth depth must be positive on valid pixels")
    if alignment is Alignment.MEDIAN_SCALE:
        med_p = np.median(p)
        if med_p <= 0:
            raise UserInputError("median alignment undefined: median predicted depth is zero")
        p = p * (np.median(g) / med_p)
    diff = p - g
    rmse = float(np.sqrt(np.mean(diff * diff)))
    abs_rel = float(np.mean(np.abs(diff) / g))
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, g / p)
    delta = float(np.mean(ratio < DELTA_THRESHOLD))
    return DepthMetricReport(
        rmse=rmse,
        abs_rel=abs_rel,
        delta_1_1=delta,
        n_pixels=int(joint.sum()),
        alignment=alignment.value,
    )


def gaussian_summary(features: FeatureSet) -> GaussianSummary:
    """Sample mean and regularized unbiased covariance of a feature set."""
    rows = np.asarray(features.rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise UserInputError(f"need at least 2 feature rows, got shape {rows.shape}")
    if not np.isfinite(rows).all():
        raise UserInputError("feature rows contain non-finite values")
    mean = rows.mean(axis=0)
    centered = rows - mean
    cov = centered.T @ centered / (rows.shape[0] - 1)
    cov = cov + COV_REGULARIZATION * np.eye(rows.shape[1])
    return GaussianSummary(mean=mean, cov=cov)


def _symmetric_sqrt(matrix: np.ndarray) -> np.ndarray:
    sym = 0.5 * (matrix + matrix.T)
    try:
        eigvals, eigvecs = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    eigvals = np.clip(eigvals, 0.0, None)  # roundoff negatives
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """Frechet distance between two Gaussian summaries.

    ``|mu_a - mu_b|^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^{1/2})`` with the
    matrix square root computed through the symmetric product
    ``cov_a^{1/2} cov_b cov_a^{1/2}``, whose eigendecomposition is stable for
    the symmetric positive semidefinite inputs produced here. The result is
    clamped to be non-negative.
    """
    mu_a = np.asarray(a.mean, dtype=np.float64)
    mu_b = np.asarray(b.mean, dtype=np.float64)
    if mu_a.shape != mu_b.shape or a.cov.shape != b.cov.shape:
        raise DimensionMismatchError(
            f"summary dimensions differ: {mu_a.shape}/{a.cov.shape} vs {mu_b.shape}/{b.cov.shape}"
        )
    diff = mu_a - mu_b
    sqrt_a = _symmetric_sqrt(np.asarray(a.cov, dtype=np.float64))
    inner = sqrt_a @ np.asarray(b.cov, dtype=np.float64) @ sqrt_a
    sym = 0.5 * (inner + inner.T)
    try:
        eigvals = np.linalg.eigvalsh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    eigvals = np.clip(eigvals, 0.0, None)
    trace_sqrt = float(np.sum(np.sqrt(eigvals)))
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt)
    return max(value, 0.0)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Deterministic bilinear resize of a (H, W) or (H, W, C) float array."""
    image = np.asarray(image, dtype=np.float64)
    in_h, in_w = image.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return image.copy()
    # Sample at pixel centers of the output grid mapped into input coordinates.
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    ys = np.clip(ys, 0, in_h - 1)
    xs = np.clip(xs, 0, in_w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if image.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def _patch_stats_v1(image: np.ndarray) -> np.ndarray:
    image = as_rgb_image(image)
    gray = to_intensity(image).values
    patch = resize_bilinear(gray, _PATCH_SIDE, _PATCH_SIDE).reshape(-1)
    channel_mean = image.mean(axis=(0, 1))
    channel_var = image.var(axis=(0, 1))
    return np.concatenate([patch, channel_mean, channel_var]).astype(np.float32)


_EXTRACTORS = {PATCH_STATS_V1: _patch_stats_v1}


def extract_features(images, extractor_id: str = PATCH_STATS_V1) -> FeatureSet:
    """Embed a sequence of RGB images ([0, 1] floats) into feature rows.

    ``patch-stats-v1``: Rec.709 grayscale resized to 32x32 and flattened
    (1024 dims) plus per-channel mean and variance of the original RGB
    (6 dims, population variance), 1030 dims total. Deterministic.
    """
    if extractor_id not in _EXTRACTORS:
        raise UserInputError(
            f"unknown feature extractor {extractor_id!r}; available: {sorted(_EXTRACTORS)}"
        )
    images = list(images)
    if not images:
        raise UserInputError("cannot extract features from an empty image set")
    fn = _EXTRACTORS[extractor_id]
    rows = np.stack([fn(img) for img in images]).astype(np.float32)
    return FeatureSet(rows=rows, extractor_id=extractor_id)


def fid_between(features_a: FeatureSet, features_b: FeatureSet) -> float:
    """Frechet distance between the Gaussian summaries of two feature sets."""
    if features_a.dim != features_b.dim:
        raise DimensionMismatchError(
            f"feature dimensions differ: {features_a.dim} vs {features_b.dim}"
        )
    return frechet_distance(gaussian_summary(features_a), gaussian_summary(features_b))
