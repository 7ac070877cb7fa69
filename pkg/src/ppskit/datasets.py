"""Loading dataset directories and pairing files by stem."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .errors import UserInputError
from .geometry import CameraIntrinsics, LightModel, NormalizationMode, compute_pps, normalize_pps
from .rasters import DepthMap, ScalarField


def list_files(directory, suffix: str) -> dict:
    directory = Path(directory)
    if not directory.is_dir():
        raise UserInputError(f"not a directory: {directory}")
    return {p.stem: p for p in sorted(directory.glob(f"*{suffix}"))}


def pair_by_stem(dir_a, dir_b, suffix_a: str, suffix_b: str) -> list:
    """Match files across two directories by stem, sorted lexicographically.

    Raises with the full list of unmatched stems when the directories
    disagree.
    """
    a = list_files(dir_a, suffix_a)
    b = list_files(dir_b, suffix_b)
    only_a = sorted(set(a) - set(b))
    only_b = sorted(set(b) - set(a))
    if only_a or only_b:
        raise UserInputError(
            f"unmatched stems between {dir_a} and {dir_b}: "
            f"only in first: {only_a or 'none'}; only in second: {only_b or 'none'}"
        )
    if not a:
        raise UserInputError(f"no files matched in {dir_a} / {dir_b}")
    return [(stem, a[stem], b[stem]) for stem in sorted(a)]


def load_images_01(directory) -> list:
    """All PNGs in a directory as (H, W, 3) float arrays in [0, 1], stem order."""
    files = list_files(directory, ".png")
    if not files:
        raise UserInputError(f"no .png images found in {directory}")
    return [fileio.read_image(path) for _, path in sorted(files.items())]


def load_image_stack(directory) -> np.ndarray:
    """All PNGs as a float32 (N, 3, H, W) stack mapped linearly to [-1, 1]."""
    images = load_images_01(directory)
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise UserInputError(f"images in {directory} have mixed shapes: {sorted(shapes)}")
    stack = np.stack(images).astype(np.float32).transpose(0, 3, 1, 2)
    return stack * 2.0 - 1.0


@dataclass
class SceneDataset:
    """A generated (or user-supplied) dataset directory, fully loaded."""

    root: Path
    stems: list
    images: np.ndarray  # (N, 3, H, W) in [-1, 1]
    depths: list        # list of DepthMap
    intrinsics: CameraIntrinsics
    light: LightModel

    @property
    def count(self) -> int:
        return len(self.stems)


def load_scene_dataset(directory) -> SceneDataset:
    directory = Path(directory)
    pairs = pair_by_stem(directory / "images", directory / "depth", ".png", ".pfm")
    k = fileio.read_intrinsics(directory / "intrinsics.txt")
    light = LightModel()
    manifest_path = directory / "manifest.json"
    if manifest_path.exists():
        manifest = fileio.read_json(manifest_path)
        if "light_position" in manifest:
            light = LightModel(tuple(manifest["light_position"]))
    images = load_image_stack(directory / "images")
    depths = [fileio.read_depth(depth_path) for _, _, depth_path in pairs]
    if images.shape[2:] != (k.height, k.width):
        raise UserInputError(
            f"{directory}: image size {images.shape[2:]} does not match intrinsics {k.shape}"
        )
    return SceneDataset(
        root=directory, stems=[stem for stem, _, _ in pairs], images=images,
        depths=depths, intrinsics=k, light=light,
    )


def conditioning_maps(dataset: SceneDataset, condition: str = "pps") -> np.ndarray:
    """Per-scene conditioning rasters in [0, 1], shape (N, 1, H, W).

    ``pps``: percentile-normalized shading computed from depth.
    ``depth``: percentile-normalized raw depth (the ablation baseline).
    """
    maps = []
    for depth in dataset.depths:
        if condition == "pps":
            field = compute_pps(depth, dataset.intrinsics, dataset.light)
        elif condition == "depth":
            field = ScalarField(values=depth.values.copy(), valid=depth.valid.copy())
        else:
            raise UserInputError(f"unknown conditioning {condition!r}; use 'pps' or 'depth'")
        normalized = normalize_pps(field, NormalizationMode.PERCENTILE)
        maps.append(normalized.values)
    return np.stack(maps).astype(np.float32)[:, None, :, :]
