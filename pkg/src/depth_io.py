"""
Depth, mask, point-cloud and report files.

Formats:
    PFM     "Pf" grayscale, negative scale = little-endian, rows stored bottom-up
    PNG16   uint16 counts = round(depth * scale), 0 = invalid
    RAWF32  row-major little-endian float32 with a JSON sidecar at <path>.json
            {"width", "height", "unit": "m"[, "channels"]}

Writers store 0 at invalid pixels; readers derive validity as finite & > 0.
"""

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import imageio.v3 as iio
import numpy as np
from plyfile import PlyData, PlyElement

from core import BinaryMask, DepthMap
from errors import ArgumentError, FormatError
from geometry import PointCloud

LOGGER = logging.getLogger(__name__)

PathLike = Union[str, Path]

FORMATS = ("pfm", "png16", "rawf32")
DEFAULT_PNG_SCALE = 256.0
MAX_DIMENSION = 1 << 20
_SUFFIXES = {".pfm": "pfm", ".png": "png16", ".raw": "rawf32", ".f32": "rawf32", ".bin": "rawf32"}


@dataclass(frozen=True)
class DepthFileFormat:
    """Which on-disk encoding to use; `scale` is counts per meter for PNG16."""
    kind: str
    scale: float = DEFAULT_PNG_SCALE

    def __post_init__(self):
        if self.kind not in FORMATS:
            raise ArgumentError(f"Unknown depth format '{self.kind}'. Choose from {FORMATS}.")
        if self.kind == "png16" and not self.scale > 0:
            raise ArgumentError(f"PNG16 scale must be positive, got {self.scale}.")


def infer_format(path: PathLike, png_scale: float = DEFAULT_PNG_SCALE) -> DepthFileFormat:
    suffix = Path(path).suffix.lower()
    if suffix not in _SUFFIXES:
        raise ArgumentError(
            f"Cannot infer depth format from '{path}'; use one of {sorted(_SUFFIXES)}."
        )
    return DepthFileFormat(kind=_SUFFIXES[suffix], scale=png_scale)


def _ensure_parent(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


# ==============================================================================
# PFM
# ==============================================================================

def _read_header_line(data: bytes, offset: int, path: Path, what: str):
    end = data.find(b"\n", offset)
    if end < 0:
        raise FormatError(f"Truncated PFM header while reading {what}", path, offset)
    return data[offset:end].decode("ascii", errors="replace").strip(), end + 1


def read_pfm(path: PathLike) -> DepthMap:
    path = Path(path)
    data = path.read_bytes()

    magic, offset = _read_header_line(data, 0, path, "magic")
    if magic == "PF":
        raise FormatError("Color PFM ('PF') cannot hold a depth map", path, 0)
    if magic != "Pf":
        raise FormatError(f"Bad PFM magic {magic!r}", path, 0)

    dims_offset = offset
    dims, offset = _read_header_line(data, offset, path, "dimensions")
    match = re.fullmatch(r"(\d+)\s+(\d+)", dims)
    if not match:
        raise FormatError(f"Malformed PFM dimensions {dims!r}", path, dims_offset)
    width, height = int(match.group(1)), int(match.group(2))
    if not (0 < width <= MAX_DIMENSION and 0 < height <= MAX_DIMENSION):
        raise FormatError(f"PFM dimensions {width} x {height} out of range", path, dims_offset)

    scale_offset = offset
    scale_text, offset = _read_header_line(data, offset, path, "scale")
    try:
        scale = float(scale_text)
    except ValueError:
        raise FormatError(f"Malformed PFM scale {scale_text!r}", path, scale_offset)
    if scale == 0 or not np.isfinite(scale):
        raise FormatError(f"PFM scale must be finite and non-zero, got {scale_text!r}", path, scale_offset)

    expected = width * height * 4
    available = len(data) - offset
    if available < expected:
        raise FormatError(
            f"Truncated PFM payload: need {expected} bytes, found {available}", path, len(data)
        )

    dtype = "<f4" if scale < 0 else ">f4"
    values = np.frombuffer(data, dtype=dtype, count=width * height, offset=offset)
    values = np.flipud(values.reshape(height, width)).astype(np.float32)
    return DepthMap.from_array(values)


def write_pfm(depth: DepthMap, path: PathLike) -> None:
    path = Path(path)
    _ensure_parent(path)
    values = np.where(depth.valid, depth.values, 0.0).astype("<f4")
    header = f"Pf\n{depth.width} {depth.height}\n-1.0\n".encode("ascii")
    path.write_bytes(header + np.flipud(values).tobytes())


# ==============================================================================
# PNG16
# ==============================================================================

def read_png16(path: PathLike, scale: float = DEFAULT_PNG_SCALE) -> DepthMap:
    path = Path(path)
    try:
        counts = iio.imread(path)
    except Exception as e:
        raise FormatError(f"Unreadable PNG: {e}", path)
    if counts.dtype != np.uint16 or counts.ndim != 2:
        raise FormatError(
            f"Expected a single-channel 16-bit PNG, got dtype {counts.dtype} shape {counts.shape}", path
        )
    counts = counts.astype(np.int64)
    valid = counts > 0
    return DepthMap(values=np.where(valid, counts / scale, 0.0).astype(np.float32), valid=valid)


def write_png16(depth: DepthMap, path: PathLike, scale: float = DEFAULT_PNG_SCALE) -> None:
    path = Path(path)
    _ensure_parent(path)
    counts = np.clip(np.round(depth.filled(0.0) * scale), 0, 65535).astype(np.uint16)
    saturated = int((depth.valid & (counts == 65535)).sum())
    if saturated:
        LOGGER.warning("%d pixels saturated at 65535 counts in %s", saturated, path)
    iio.imwrite(path, counts)


# ==============================================================================
# RAWF32
# ==============================================================================

def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_raw_array(path: PathLike) -> np.ndarray:
    """(H, W) or (H, W, C) float32 array described by the JSON sidecar."""
    path = Path(path)
    meta_path = sidecar_path(path)
    try:
        meta = json.loads(meta_path.read_text())
        width, height = int(meta["width"]), int(meta["height"])
        channels = int(meta.get("channels", 1))
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise FormatError(f"Bad RAWF32 sidecar: {e}", meta_path)
    if meta.get("unit", "m") != "m":
        raise FormatError(f"Unsupported unit {meta.get('unit')!r}", meta_path)
    if not (0 < width <= MAX_DIMENSION and 0 < height <= MAX_DIMENSION and channels >= 1):
        raise FormatError(f"Sidecar dimensions {width} x {height} x {channels} out of range", meta_path)

    data = path.read_bytes()
    expected = width * height * channels * 4
    if len(data) != expected:
        raise FormatError(
            f"Payload is {len(data)} bytes, sidecar implies {expected}", path, min(len(data), expected)
        )
    values = np.frombuffer(data, dtype="<f4").astype(np.float32)
    shape = (height, width) if channels == 1 else (height, width, channels)
    return values.reshape(shape)


def write_raw_array(values: np.ndarray, path: PathLike) -> None:
    path = Path(path)
    _ensure_parent(path)
    values = np.asarray(values)
    if values.ndim not in (2, 3):
        raise ArgumentError(f"RAWF32 arrays are (H, W) or (H, W, C), got shape {values.shape}.")
    meta = {"width": int(values.shape[1]), "height": int(values.shape[0]), "unit": "m"}
    if values.ndim == 3:
        meta["channels"] = int(values.shape[2])
    path.write_bytes(values.astype("<f4").tobytes())
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True))


def read_rawf32(path: PathLike) -> DepthMap:
    values = read_raw_array(path)
    if values.ndim != 2:
        raise FormatError(f"Depth RAWF32 must have 1 channel, got {values.shape[2]}", sidecar_path(path))
    return DepthMap.from_array(values)


def write_rawf32(depth: DepthMap, path: PathLike) -> None:
    write_raw_array(np.where(depth.valid, depth.values, 0.0), path)


# ==============================================================================
# DISPATCH
# ==============================================================================

def read_depth(path: PathLike, fmt: Optional[DepthFileFormat] = None) -> DepthMap:
    """Read a depth map; the format is inferred from the suffix when omitted."""
    fmt = fmt or infer_format(path)
    if not Path(path).exists():
        raise ArgumentError(f"Depth file not found: {path}")
    if fmt.kind == "pfm":
        return read_pfm(path)
    if fmt.kind == "png16":
        return read_png16(path, fmt.scale)
    return read_rawf32(path)


def write_depth(depth: DepthMap, path: PathLike, fmt: Optional[DepthFileFormat] = None) -> None:
    fmt = fmt or infer_format(path)
    if fmt.kind == "pfm":
        write_pfm(depth, path)
    elif fmt.kind == "png16":
        write_png16(depth, path, fmt.scale)
    else:
        write_rawf32(depth, path)
    LOGGER.debug("Wrote %s depth %dx%d to %s", fmt.kind, depth.width, depth.height, path)


# ==============================================================================
# POINT CLOUDS, MASKS, REPORTS
# ==============================================================================

def write_pointcloud(pc: PointCloud, path: PathLike) -> int:
    """
    ASCII PLY with one vertex per valid point.

    Returns:
        Number of vertices written
    """
    points = pc.points[pc.valid]
    if len(points) == 0:
        raise ArgumentError("Point cloud has no valid points to write.")
    vertex = np.zeros(len(points), dtype=[("x", "f4"), ("y", "f4"), ("z", "f4")])
    vertex["x"], vertex["y"], vertex["z"] = points[:, 0], points[:, 1], points[:, 2]

    path = Path(path)
    _ensure_parent(path)
    PlyData([PlyElement.describe(vertex, "vertex")], text=True).write(str(path))
    return len(points)


def read_pointcloud(path: PathLike) -> np.ndarray:
    """(N, 3) vertex positions of a PLY file."""
    try:
        vertex = PlyData.read(str(path))["vertex"]
    except Exception as e:
        raise FormatError(f"Unreadable PLY: {e}", path)
    return np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=-1).astype(np.float64)


def write_mask(mask: BinaryMask, path: PathLike) -> None:
    """8-bit PNG, value = round(255 * m)."""
    path = Path(path)
    _ensure_parent(path)
    iio.imwrite(path, np.round(mask.values * 255.0).astype(np.uint8))


def read_mask(path: PathLike) -> BinaryMask:
    try:
        data = iio.imread(path)
    except Exception as e:
        raise FormatError(f"Unreadable mask PNG: {e}", path)
    if data.dtype != np.uint8 or data.ndim != 2:
        raise FormatError(f"Expected an 8-bit single-channel mask, got {data.dtype} {data.shape}", path)
    return BinaryMask(data.astype(np.float64) / 255.0)


def write_report(report: dict, path: PathLike) -> None:
    path = Path(path)
    _ensure_parent(path)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
