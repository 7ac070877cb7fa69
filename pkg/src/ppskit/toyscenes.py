"""Procedural paired (depth, image) scenes for desk-scale experiments.

Four depth-map families (tube interiors viewed down the barrel, undulating
terrain walls, spheres over a backing plane, flat planes) are rendered under
the co-located point light with one of two frozen looks: ``sim-style``
(spatially uniform albedo, no specular highlights) and ``real-style``
(smoothly textured reddish albedo plus sparse specular blobs). Everything is
a pure function of the scene seed, so datasets regenerate bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .errors import DimensionMismatchError, UserInputError
from .geometry import CameraIntrinsics, LightModel, NormalizationMode, compute_pps, normalize_pps
from .nn_core import derive_seed
from .rasters import DepthMap

SCENE_KINDS = ("tube", "terrain", "sphere", "plane")

#: Depth cap for rays nearly parallel to a tube axis (meters).
TUBE_DEPTH_CAP = 10.0

_STYLE_SEED_NS = 7
_SPEC_SEED_NS = 13


def default_intrinsics(size: int = 64) -> CameraIntrinsics:
    """Wide-angle square camera used for generated scenes."""
    return CameraIntrinsics(
        fx=0.75 * size, fy=0.75 * size,
        cx=(size - 1) / 2.0, cy=(size - 1) / 2.0,
        width=size, height=size,
    )


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one procedural scene.

    ``radius`` is the tube/sphere radius, or the plane distance for the
    ``plane`` kind. ``curvature`` controls axis tilt (tube) or wall slope
    (terrain). ``noise_amp`` is the relative amplitude of the smooth
    multiplicative depth perturbation.
    """

    kind: str
    radius: float = 1.0
    curvature: float = 0.3
    noise_amp: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise UserInputError(f"unknown scene kind {self.kind!r}; choose from {SCENE_KINDS}")
        if not 0.05 <= self.radius <= 5.0:
            raise UserInputError(f"radius must lie in [0.05, 5], got {self.radius}")
        if not 0.0 <= self.curvature <= 1.0:
            raise UserInputError(f"curvature must lie in [0, 1], got {self.curvature}")
        if not 0.0 <= self.noise_amp <= 0.5:
            raise UserInputError(f"noise_amp must lie in [0, 0.5], got {self.noise_amp}")


@dataclass(frozen=True)
class DomainStyle:
    """Rendering look of a domain."""

    name: str
    albedo_texture: str  # "uniform" or "smooth-noise"
    specular_density: float  # expected highlight blobs per image
    tint: tuple
    noise_level: float  # relative albedo texture amplitude


SIM_STYLE = DomainStyle(
    name="sim-style", albedo_texture="uniform", specular_density=0.0,
    tint=(1.0, 1.0, 1.0), noise_level=0.0,
)
REAL_STYLE = DomainStyle(
    name="real-style", albedo_texture="smooth-noise", specular_density=3.0,
    tint=(1.0, 0.82, 0.74), noise_level=0.28,
)
STYLES = {style.name: style for style in (SIM_STYLE, REAL_STYLE)}


def _smooth_field(height: int, width: int, rng: np.random.Generator,
                  n_waves: int = 6, max_freq: float = 3.5) -> np.ndarray:
    """Band-limited random field in [-1, 1]: a sum of seeded plane waves."""
    uu = np.linspace(0.0, 1.0, width)[None, :]
    vv = np.linspace(0.0, 1.0, height)[:, None]
    amps = rng.uniform(0.4, 1.0, n_waves)
    freq_u = rng.uniform(-max_freq, max_freq, n_waves)
    freq_v = rng.uniform(-max_freq, max_freq, n_waves)
    phases = rng.uniform(0.0, 2.0 * math.pi, n_waves)
    field = np.zeros((height, width))
    for a, fu, fv, ph in zip(amps, freq_u, freq_v, phases):
        field += a * np.cos(2.0 * math.pi * (fu * uu + fv * vv) + ph)
    return field / np.sum(amps)


def _rays(k: CameraIntrinsics):
    us = np.arange(k.width, dtype=np.float64)
    vs = np.arange(k.height, dtype=np.float64)
    rx = (us[None, :] - k.cx) / k.fx
    ry = (vs[:, None] - k.cy) / k.fy
    rx, ry = np.broadcast_arrays(rx, np.broadcast_to(ry, (k.height, k.width)))
    return np.stack([rx, ry, np.ones_like(rx)], axis=2)


def sphere_depth(k: CameraIntrinsics, radius: float, center) -> np.ndarray:
    """Depth of the near sphere intersection along each pixel ray; NaN off-disc."""
    rays = _rays(k)
    center = np.asarray(center, dtype=np.float64)
    rr = np.einsum("hwc,hwc->hw", rays, rays)
    rc = rays @ center
    disc = rc * rc - rr * (center @ center - radius * radius)
    with np.errstate(invalid="ignore"):
        t = (rc - np.sqrt(disc)) / rr
    t[disc < 0] = np.nan
    return t


def _tube_depth(k: CameraIntrinsics, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    rays = _rays(k)
    offset = spec.curvature * rng.uniform(-0.3, 0.3, 2) * spec.radius
    tilt = spec.curvature * rng.uniform(-0.4, 0.4, 2)
    axis = np.array([tilt[0], tilt[1], 1.0])
    axis /= np.linalg.norm(axis)
    anchor = np.array([offset[0], offset[1], 0.0])
    # Camera sits inside the tube; each ray exits through the wall at the
    # positive root of |perp(t * ray - anchor)|^2 = R^2.
    p = rays - np.einsum("hwc,c->hw", rays, axis)[..., None] * axis
    q = anchor - (anchor @ axis) * axis
    pp = np.einsum("hwc,hwc->hw", p, p)
    pq = p @ q
    c = float(q @ q - spec.radius * spec.radius)
    disc = np.maximum(pq * pq - pp * c, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (pq + np.sqrt(disc)) / pp
    t = np.where((pp > 1e-12) & np.isfinite(t), t, TUBE_DEPTH_CAP)
    return np.clip(t, 0.05, TUBE_DEPTH_CAP)


def _terrain_depth(k: CameraIntrinsics, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(1.2, 2.2)
    slope_v = spec.curvature * rng.uniform(0.3, 0.9) * rng.choice([-1.0, 1.0])
    slope_u = spec.curvature * rng.uniform(0.0, 0.4) * rng.choice([-1.0, 1.0])
    vv = (np.arange(k.height)[:, None] - k.cy) / k.height
    uu = (np.arange(k.width)[None, :] - k.cx) / k.width
    depth = base * (1.0 + slope_v * vv + slope_u * uu)
    return np.clip(depth, 0.2, None)


def gen_depth(spec: SceneSpec, k: CameraIntrinsics | None = None) -> DepthMap:
    """Deterministic depth map for a scene spec (strictly positive, finite)."""
    k = k or default_intrinsics()
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "plane":
        depth = np.full((k.height, k.width), float(spec.radius))
    elif spec.kind == "sphere":
        center = np.array([0.0, 0.0, 2.5 * spec.radius])
        depth = sphere_depth(k, spec.radius, center)
        background = center[2] + 2.0 * spec.radius
        depth = np.where(np.isfinite(depth), depth, background)
    elif spec.kind == "tube":
        depth = _tube_depth(k, spec, rng)
    else:
        depth = _terrain_depth(k, spec, rng)
    if spec.noise_amp > 0.0:
        depth = depth * (1.0 + spec.noise_amp * _smooth_field(k.height, k.width, rng))
    return DepthMap.from_values(np.clip(depth, 0.02, None))


def albedo_field(style: DomainStyle, height: int, width: int, seed: int) -> np.ndarray:
    """The (H, W, 3) albedo this style produces for a given seed."""
    rng = np.random.default_rng(seed)
    if style.albedo_texture == "uniform":
        base = np.array([0.80, 0.46, 0.40]) * rng.uniform(0.88, 1.0)
        albedo = np.broadcast_to(base, (height, width, 3)).copy()
    elif style.albedo_texture == "smooth-noise":
        base = np.array([0.74, 0.34, 0.28])
        field = _smooth_field(height, width, rng)
        gains = np.array([1.0, 0.7, 0.55])
        albedo = base[None, None, :] * (1.0 + style.noise_level * field[..., None] * gains)
    else:
        raise UserInputError(f"unknown albedo texture generator {style.albedo_texture!r}")
    albedo = albedo * np.asarray(style.tint)[None, None, :]
    return np.clip(albedo, 0.0, 1.0)


def specular_field(style: DomainStyle, height: int, width: int, seed: int) -> np.ndarray:
    """Sparse highlight blobs as an (H, W, 3) additive term."""
    rng = np.random.default_rng(seed)
    spec = np.zeros((height, width))
    n_blobs = int(rng.poisson(style.specular_density)) if style.specular_density > 0 else 0
    vv, uu = np.mgrid[0:height, 0:width]
    for _ in range(n_blobs):
        cu = rng.uniform(0, width - 1)
        cv = rng.uniform(0, height - 1)
        sigma = rng.uniform(0.8, 2.2)
        amp = rng.uniform(0.25, 0.6)
        spec += amp * np.exp(-((uu - cu) ** 2 + (vv - cv) ** 2) / (2.0 * sigma * sigma))
    return spec[..., None] * np.array([1.0, 0.95, 0.9])[None, None, :]


def render(depth: DepthMap, k: CameraIntrinsics, light: LightModel, style: DomainStyle,
           seed: int) -> np.ndarray:
    """Shade a depth map: ``albedo * tone(shading) + specular``, in [0, 1].

    ``tone`` is the percentile-normalized shading map, so a uniform-albedo
    render is exactly proportional to the shading it will later be audited
    against.
    """
    if depth.values.shape != (k.height, k.width):
        raise DimensionMismatchError(
            f"depth {depth.values.shape} does not match intrinsics {k.shape}"
        )
    pps = compute_pps(depth, k, light)
    tone = normalize_pps(pps, NormalizationMode.PERCENTILE).values
    albedo = albedo_field(style, k.height, k.width, derive_seed(seed, _STYLE_SEED_NS))
    image = albedo * tone[..., None]
    if style.specular_density > 0:
        image = image + specular_field(style, k.height, k.width, derive_seed(seed, _SPEC_SEED_NS))
    return np.clip(image, 0.0, 1.0)


_KIND_WEIGHTS = (("tube", 0.45), ("terrain", 0.30), ("sphere", 0.15), ("plane", 0.10))


def random_scene_spec(seed: int) -> SceneSpec:
    """Scene spec with kind and parameters drawn from documented desk ranges."""
    rng = np.random.default_rng(seed)
    kinds, weights = zip(*_KIND_WEIGHTS)
    kind = str(rng.choice(kinds, p=weights))
    if kind == "tube":
        return SceneSpec(kind, radius=rng.uniform(0.6, 1.2), curvature=rng.uniform(0.1, 0.5),
                         noise_amp=rng.uniform(0.03, 0.12), seed=seed)
    if kind == "terrain":
        return SceneSpec(kind, radius=1.0, curvature=rng.uniform(0.2, 0.8),
                         noise_amp=rng.uniform(0.05, 0.2), seed=seed)
    if kind == "sphere":
        return SceneSpec(kind, radius=rng.uniform(0.4, 0.9), curvature=0.0,
                         noise_amp=rng.uniform(0.0, 0.05), seed=seed)
    return SceneSpec(kind, radius=rng.uniform(1.2, 2.5), curvature=0.0,
                     noise_amp=rng.uniform(0.0, 0.08), seed=seed)


def generate_dataset(out_dir, style: DomainStyle | str, count: int, seed: int,
                     size: int = 64, split: str = "train",
                     light: LightModel = LightModel()) -> dict:
    """Write a dataset directory: images/NNNN.png, depth/NNNN.pfm,
    intrinsics.txt, manifest.json. Per-scene seeds derive from (seed, index),
    so any subset regenerates identically. Returns the manifest."""
    if isinstance(style, str):
        if style not in STYLES:
            raise UserInputError(f"unknown style {style!r}; choose from {sorted(STYLES)}")
        style = STYLES[style]
    if count < 1:
        raise UserInputError(f"count must be positive, got {count}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)
    k = default_intrinsics(size)
    fileio.write_intrinsics(out_dir / "intrinsics.txt", k)
    scenes = []
    for index in range(count):
        scene_seed = derive_seed(seed, index)
        spec = random_scene_spec(scene_seed)
        depth = gen_depth(spec, k)
        image = render(depth, k, light, style, scene_seed)
        stem = f"{index:04d}"
        fileio.write_pfm(out_dir / "depth" / f"{stem}.pfm", depth.values)
        fileio.write_image(out_dir / "images" / f"{stem}.png", image)
        scenes.append({
            "index": index, "seed": scene_seed, "kind": spec.kind,
            "radius": spec.radius, "curvature": spec.curvature, "noise_amp": spec.noise_amp,
        })
    manifest = {
        "style": style.name, "split": split, "master_seed": seed,
        "count": count, "size": size, "light_position": list(light.position),
        "scenes": scenes,
    }
    fileio.atomic_write_json(out_dir / "manifest.json", manifest)
    return manifest
