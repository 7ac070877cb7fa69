"""Near-field shading geometry: depth to points, normals, light, shading.

Given a depth map and pinhole intrinsics, this module backprojects pixels to
camera-space points, estimates surface normals by finite differences of the
point map, evaluates the co-located point-light field (direction plus
inverse-square attenuation), and combines them into a per-pixel shading map

    shading(x) = attenuation(x) * max(0, cos(angle(normal, light))),

where the normal is oriented toward the camera. All functions are pure: they
never mutate their inputs and are safe to call concurrently.

Pixel convention: pixel ``(u, v)`` backprojects along the ray
``((u - cx) / fx, (v - cy) / fy, 1)`` scaled by depth, so ``z`` equals the
depth value exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimensionMismatchError, EmptyValidMaskError, UserInputError
from .rasters import DepthMap, NormalMap, PointMap, PPSMap, ScalarField, VectorField3

#: Points closer than this to the light source (meters) are treated as
#: degenerate: the inverse-square term would blow up.
EPS_LIGHT_DISTANCE = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera model. Focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise UserInputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise UserInputError(
                f"principal point ({self.cx}, {self.cy}) outside the "
                f"{self.width}x{self.height} raster"
            )
        if self.width <= 0 or self.height <= 0:
            raise UserInputError(f"raster size must be positive, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)


@dataclass(frozen=True)
class LightModel:
    """A point light co-located with (or offset from) the camera, at ``position``."""

    position: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        if pos.shape != (3,) or not np.isfinite(pos).all():
            raise UserInputError(f"light position must be a finite 3-vector, got {self.position}")
        object.__setattr__(self, "position", tuple(float(c) for c in pos))

    @property
    def position_array(self) -> np.ndarray:
        return np.asarray(self.position, dtype=np.float64)


class NormalizationMode(str, Enum):
    """How a shading map is scaled before being used as a conditioning input."""

    NONE = "none"
    MAX = "max"
    PERCENTILE = "percentile"


def _check_dims(raster_shape, k: CameraIntrinsics) -> None:
    if tuple(raster_shape) != k.shape:
        raise DimensionMismatchError(
            f"raster shape {tuple(raster_shape)} does not match intrinsics "
            f"raster {k.shape}"
        )


def backproject(depth: DepthMap, k: CameraIntrinsics) -> PointMap:
    """Lift a depth map to camera-space 3D points.

    For pixel ``(u, v)`` with depth ``D``, the point is
    ``D * ((u - cx) / fx, (v - cy) / fy, 1)``. Invalid depth pixels stay
    invalid in the output.
    """
    _check_dims(depth.values.shape, k)
    us = np.arange(k.width, dtype=np.float64)
    vs = np.arange(k.height, dtype=np.float64)
    ray_x = (us[None, :] - k.cx) / k.fx
    ray_y = (vs[:, None] - k.cy) / k.fy
    d = depth.values
    points = np.empty((k.height, k.width, 3), dtype=np.float64)
    points[..., 0] = d * ray_x
    points[..., 1] = d * ray_y
    points[..., 2] = d
    points[~depth.valid] = 0.0
    return PointMap(points=points, valid=depth.valid.copy())


def project(points: PointMap, k: CameraIntrinsics):
    """Project camera-space points back to pixel coordinates (u, v) and depth z.

    Inverse of :func:`backproject` for points in front of the camera; used by
    round-trip checks.
    """
    z = points.points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * points.points[..., 0] / z + k.cx
        v = k.fy * points.points[..., 1] / z + k.cy
    ok = points.valid & (z > 0)
    return u, v, z, ok


def _axis_differences(values: np.ndarray, valid: np.ndarray, axis: int):
    """Central differences in the interior, one-sided at the two borders.

    Returns the difference field and the mask of pixels whose stencil touched
    only valid inputs.
    """
    diff = np.zeros_like(values)
    ok = np.zeros(values.shape[:2], dtype=bool)
    if values.shape[axis] < 2:
        return diff, ok
    if axis == 0:
        diff[1:-1] = (values[2:] - values[:-2]) * 0.5
        ok[1:-1] = valid[2:] & valid[:-2]
        diff[0] = values[1] - values[0]
        ok[0] = valid[1] & valid[0]
        diff[-1] = values[-1] - values[-2]
        ok[-1] = valid[-1] & valid[-2]
    else:
        diff[:, 1:-1] = (values[:, 2:] - values[:, :-2]) * 0.5
        ok[:, 1:-1] = valid[:, 2:] & valid[:, :-2]
        diff[:, 0] = values[:, 1] - values[:, 0]
        ok[:, 0] = valid[:, 1] & valid[:, 0]
        diff[:, -1] = values[:, -1] - values[:, -2]
        ok[:, -1] = valid[:, -1] & valid[:, -2]
    return diff, ok


def estimate_normals(points: PointMap, light: LightModel = LightModel()) -> NormalMap:
    """Estimate unit surface normals from a point map.

    The normal is the normalized cross product of the point map's partial
    differences along u and v (central differences in the interior, one-sided
    at borders), flipped where needed so it faces the light/camera position:
    ``normal . (p_c - x) >= 0``. A pixel is invalid if it, or any pixel its
    difference stencil reads, is invalid, or if the cross product degenerates.
    """
    if not points.valid.any():
        raise EmptyValidMaskError("cannot estimate normals: no valid points")
    d_dv, ok_v = _axis_differences(points.points, points.valid, axis=0)
    d_du, ok_u = _axis_differences(points.points, points.valid, axis=1)
    normals = np.cross(d_du, d_dv)
    norm = np.linalg.norm(normals, axis=2)
    ok = points.valid & ok_u & ok_v & (norm > 0) & np.isfinite(norm)
    safe = np.where(norm > 0, norm, 1.0)
    normals = normals / safe[..., None]
    to_light = light.position_array[None, None, :] - points.points
    flip = np.einsum("hwc,hwc->hw", normals, to_light) < 0
    normals = np.where(flip[..., None], -normals, normals)
    normals[~ok] = 0.0
    return NormalMap(normals=normals, valid=ok)


def light_field(points: PointMap, light: LightModel = LightModel()):
    """Per-pixel light direction and inverse-square attenuation.

    Direction points from the light toward the surface,
    ``(x - p_c) / |x - p_c|``; attenuation is ``1 / |x - p_c|^2``. Pixels
    closer than ``EPS_LIGHT_DISTANCE`` to the light are marked invalid.
    """
    diff = points.points - light.position_array[None, None, :]
    dist = np.linalg.norm(diff, axis=2)
    ok = points.valid & (dist >= EPS_LIGHT_DISTANCE)
    safe = np.where(ok, dist, 1.0)
    directions = diff / safe[..., None]
    directions[~ok] = 0.0
    attenuation = np.where(ok, 1.0 / (safe * safe), 0.0)
    return (
        VectorField3(vectors=directions, valid=ok),
        ScalarField(values=attenuation, valid=ok.copy()),
    )


def compute_pps(depth: DepthMap, k: CameraIntrinsics, light: LightModel = LightModel()) -> PPSMap:
    """Per-pixel shading: attenuation times clamped cosine of the light angle.

    ``shading = attenuation * max(0, (-direction) . normal)`` with the normal
    oriented toward the camera, so lit, camera-facing surfaces get positive
    values and back-facing or grazing geometry clamps to zero. Invalid where
    any ingredient (depth, normal stencil, light distance) is invalid.
    """
    _check_dims(depth.values.shape, k)
    points = backproject(depth, k)
    normals = estimate_normals(points, light)
    directions, attenuation = light_field(points, light)
    cosine = -np.einsum("hwc,hwc->hw", directions.vectors, normals.normals)
    shading = attenuation.values * np.maximum(cosine, 0.0)
    ok = normals.valid & attenuation.valid
    shading = np.where(ok, shading, 0.0)
    return PPSMap(values=shading, valid=ok, meta={"normalization": "raw"})


def normalize_pps(pps: PPSMap, mode: NormalizationMode | str = NormalizationMode.PERCENTILE) -> PPSMap:
    """Scale a shading map so it can serve as a bounded conditioning input.

    Modes: ``none`` (identity), ``max`` (divide by the max valid value),
    ``percentile`` (divide by the 99th percentile of valid values, then clamp
    to [0, 1]). The applied mode and scale are recorded in ``meta``.
    """
    mode = NormalizationMode(mode)
    if not pps.valid.any():
        raise EmptyValidMaskError("cannot normalize: no valid shading pixels")
    vals = pps.values[pps.valid]
    if mode is NormalizationMode.NONE:
        scale = 1.0
        out = pps.values.copy()
    elif mode is NormalizationMode.MAX:
        scale = float(vals.max())
        if scale <= 0:
            raise UserInputError("max-scale normalization undefined: max valid shading is zero")
        out = pps.values / scale
    else:
        scale = float(np.percentile(vals, 99.0))
        if scale <= 0:
            raise UserInputError("percentile normalization undefined: p99 of shading is zero")
        out = np.clip(pps.values / scale, 0.0, 1.0)
    out = np.where(pps.valid, out, 0.0)
    meta = dict(pps.meta)
    meta.update({"normalization": mode.value, "scale": scale})
    return PPSMap(values=out, valid=pps.valid.copy(), meta=meta)
