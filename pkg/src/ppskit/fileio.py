"""On-disk formats: PFM rasters, PNG images, intrinsics/config text, features.

Float rasters travel as PFM (little-endian, negative scale header, rows
bottom-to-top per the format's convention). Images are 8-bit PNG. Feature
matrices use a small binary container (magic ``PPSF``).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, UserInputError

_PPSF_MAGIC = b"PPSF"


# ---------------------------------------------------------------------------
# PFM


def write_pfm(path, array) -> None:
    """Write a (H, W) or (H, W, 3) float array as little-endian PFM."""
    array = np.asarray(array, dtype=np.float32)
    if array.ndim == 2:
        header = b"Pf"
    elif array.ndim == 3 and array.shape[2] == 3:
        header = b"PF"
    else:
        raise UserInputError(f"PFM supports (H, W) or (H, W, 3) arrays, got {array.shape}")
    height, width = array.shape[:2]
    data = np.flipud(array)  # PFM stores rows bottom-to-top
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{width} {height}\n".encode("ascii"))
        fh.write(b"-1.0\n")  # negative scale marks little-endian payload
        fh.write(data.astype("<f4").tobytes())


def _read_pfm_token(fh) -> bytes:
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise FormatError("truncated PFM header")
        if ch in b" \t\r\n":
            if token:
                return token
            continue
        token += ch


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a float32 array with rows top-to-bottom."""
    with open(path, "rb") as fh:
        magic = _read_pfm_token(fh)
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise FormatError(f"{path}: not a PFM file (magic {magic!r})")
        try:
            width = int(_read_pfm_token(fh))
            height = int(_read_pfm_token(fh))
            scale = float(_read_pfm_token(fh))
        except ValueError as exc:
            raise FormatError(f"{path}: malformed PFM header") from exc
        if width <= 0 or height <= 0:
            raise FormatError(f"{path}: bad PFM dimensions {width}x{height}")
        endian = "<" if scale < 0 else ">"
        count = width * height * channels
        payload = fh.read(count * 4)
        if len(payload) != count * 4:
            raise FormatError(f"{path}: truncated PFM payload")
        data = np.frombuffer(payload, dtype=f"{endian}f4").astype(np.float32)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return np.flipud(data.reshape(shape)).copy()


# ---------------------------------------------------------------------------
# PNG images


def read_image(path) -> np.ndarray:
    """Read an 8-bit PNG as float64 RGB in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float64) / 255.0
    return arr


def write_image(path, array) -> None:
    """Write a float RGB array in [0, 1] as 8-bit PNG."""
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 3 or array.shape[2] != 3:
        raise UserInputError(f"expected (H, W, 3) image, got {array.shape}")
    u8 = np.clip(np.round(array * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def read_depth_png16(path, depth_scale: float):
    """Read a 16-bit grayscale PNG as depth in meters (``depth_scale`` m/unit).

    Zero-valued pixels are treated as missing and come back invalid.
    """
    from .rasters import DepthMap

    if depth_scale is None or depth_scale <= 0:
        raise UserInputError("16-bit PNG depth requires a positive depth_scale (meters per unit)")
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise FormatError(f"{path}: depth PNG must be single-channel, got shape {arr.shape}")
    if arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise FormatError(f"{path}: unsupported depth PNG dtype {arr.dtype}")
    return DepthMap.from_values(arr.astype(np.float64) * float(depth_scale))


def read_depth(path, depth_scale=None):
    """Read depth from PFM (meters) or 16-bit PNG (requires depth_scale)."""
    from .rasters import DepthMap

    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        arr = read_pfm(path)
        if arr.ndim != 2:
            raise UserInputError(f"{path}: depth PFM must be single-channel")
        return DepthMap.from_values(arr.astype(np.float64))
    if suffix == ".png":
        return read_depth_png16(path, depth_scale)
    raise UserInputError(f"{path}: unsupported depth format (use .pfm or 16-bit .png)")


# ---------------------------------------------------------------------------
# Intrinsics and key=value config text


def _parse_keyvalue_text(path) -> dict:
    entries = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    return entries


def read_intrinsics(path):
    """Read pinhole intrinsics from fx/fy/cx/cy/width/height key=value lines."""
    from .geometry import CameraIntrinsics

    entries = _parse_keyvalue_text(path)
    required = ("fx", "fy", "cx", "cy", "width", "height")
    missing = [key for key in required if key not in entries]
    if missing:
        raise FormatError(f"{path}: missing intrinsics keys: {', '.join(missing)}")
    try:
        return CameraIntrinsics(
            fx=float(entries["fx"]),
            fy=float(entries["fy"]),
            cx=float(entries["cx"]),
            cy=float(entries["cy"]),
            width=int(entries["width"]),
            height=int(entries["height"]),
        )
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric intrinsics value ({exc})") from exc


def write_intrinsics(path, k) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"fx={k.fx!r}\nfy={k.fy!r}\ncx={k.cx!r}\ncy={k.cy!r}\n")
        fh.write(f"width={k.width}\nheight={k.height}\n")


def read_config(path) -> dict:
    """Read a key=value run config file into a flat string dict."""
    return _parse_keyvalue_text(path)


# ---------------------------------------------------------------------------
# Feature files (magic PPSF, u32 n, u32 d, little-endian f32 rows)


def write_features(path, rows) -> None:
    rows = np.ascontiguousarray(rows, dtype=np.float32)
    if rows.ndim != 2:
        raise UserInputError(f"feature matrix must be 2-D, got shape {rows.shape}")
    n, d = rows.shape
    with open(path, "wb") as fh:
        fh.write(_PPSF_MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(rows.astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _PPSF_MAGIC:
            raise FormatError(f"{path}: not a feature file (magic {magic!r})")
        header = fh.read(8)
        if len(header) != 8:
            raise FormatError(f"{path}: truncated feature header")
        n, d = struct.unpack("<II", header)
        payload = fh.read(n * d * 4)
        if len(payload) != n * d * 4:
            raise FormatError(f"{path}: truncated feature payload")
    return np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)


# ---------------------------------------------------------------------------
# JSON helpers


def atomic_write_json(path, obj) -> None:
    """Write JSON via a temp file + rename so readers never see partial output."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
