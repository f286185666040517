"""
Equirectangular (ERP) spherical geometry.

Convention (shared by every module):
    longitude  theta = 2*pi*(u + 0.5)/W - pi
    latitude   phi   = pi/2 - pi*(v + 0.5)/H
    direction  (cos(phi) sin(theta), sin(phi), cos(phi) cos(theta))
y is up, z is forward, x is right. Pixel (row i, column j) has its center at
(u, v) = (j, i).
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np

from core import DepthMap
from errors import ArgumentError


@dataclass(frozen=True)
class ErpGrid:
    """Full-sphere ERP lattice: width along longitude, height along latitude."""
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) < 2 or int(self.height) < 1:
            raise ArgumentError(
                f"ERP grid needs width >= 2 and height >= 1, got {self.width} x {self.height}."
            )
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def of(cls, depth) -> "ErpGrid":
        return cls(width=depth.shape[1], height=depth.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def longitudes(self) -> np.ndarray:
        return 2.0 * np.pi * (np.arange(self.width) + 0.5) / self.width - np.pi

    def latitudes(self) -> np.ndarray:
        return np.pi / 2.0 - np.pi * (np.arange(self.height) + 0.5) / self.height

    def rays(self) -> np.ndarray:
        """(H, W, 3) unit view rays at pixel centers (read-only, cached)."""
        return _ray_table(self.width, self.height)


@dataclass(frozen=True)
class Direction:
    """Unit 3-vector."""
    x: float
    y: float
    z: float

    def __post_init__(self):
        norm = np.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
        if abs(norm - 1.0) > 1e-6:
            raise ArgumentError(f"Direction must be unit length, got norm {norm:.9f}.")

    @classmethod
    def from_vector(cls, vector) -> "Direction":
        v = np.asarray(vector, dtype=np.float64)
        norm = np.linalg.norm(v)
        if norm == 0:
            raise ArgumentError("Cannot normalise a zero vector.")
        v = v / norm
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class DistortionMap:
    """Per-pixel ERP area weights, cos(latitude) normalised to mean 1."""
    weights: np.ndarray

    @property
    def row_weights(self) -> np.ndarray:
        return self.weights[:, 0]


@dataclass(frozen=True, eq=False)
class PointCloud:
    """(H, W, 3) points in meters; invalid pixels hold zeros."""
    points: np.ndarray
    valid: np.ndarray

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


@dataclass(frozen=True, eq=False)
class NormalMap:
    """(H, W, 3) unit normals facing the camera; invalid pixels hold zeros."""
    normals: np.ndarray
    valid: np.ndarray


# ==============================================================================
# PIXEL <-> RAY
# ==============================================================================

def pixel_to_dir_array(width: int, height: int, u, v) -> np.ndarray:
    """Vectorised pixel -> ray, no range checks. Returns (..., 3)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    theta = 2.0 * np.pi * (u + 0.5) / width - np.pi
    phi = np.pi / 2.0 - np.pi * (v + 0.5) / height
    cos_phi = np.cos(phi)
    return np.stack([cos_phi * np.sin(theta), np.sin(phi), cos_phi * np.cos(theta)], axis=-1)


def dir_to_pixel_array(width: int, height: int, dirs) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised ray -> (u, v); u wrapped into [0, W)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    theta = np.arctan2(dirs[..., 0], dirs[..., 2])
    phi = np.arcsin(np.clip(dirs[..., 1], -1.0, 1.0))
    u = np.mod((theta + np.pi) * width / (2.0 * np.pi) - 0.5, width)
    v = (np.pi / 2.0 - phi) * height / np.pi - 0.5
    return u, v


@lru_cache(maxsize=32)
def _ray_table(width: int, height: int) -> np.ndarray:
    jj, ii = np.meshgrid(np.arange(width), np.arange(height))
    rays = pixel_to_dir_array(width, height, jj, ii)
    rays.setflags(write=False)
    return rays


def pixel_to_dir(grid: ErpGrid, u: float, v: float) -> Direction:
    """Fractional pixel coordinate -> unit view ray."""
    if not (0.0 <= u < grid.width) or not (0.0 <= v < grid.height):
        raise ArgumentError(
            f"Pixel ({u}, {v}) outside the {grid.width} x {grid.height} ERP grid."
        )
    x, y, z = pixel_to_dir_array(grid.width, grid.height, u, v)
    return Direction(float(x), float(y), float(z))


def dir_to_pixel(grid: ErpGrid, d: Direction) -> Tuple[float, float]:
    """
    Unit ray -> fractional (u, v).

    Longitude wraps modulo W. At the poles the longitude is arbitrary; atan2
    resolves it to whatever the x/z residue gives.
    """
    u, v = dir_to_pixel_array(grid.width, grid.height, d.as_array())
    return float(u), float(v)


# ==============================================================================
# DISTORTION / BACK-PROJECTION
# ==============================================================================

def distortion_map(grid: ErpGrid) -> DistortionMap:
    raw = np.cos(grid.latitudes())
    raw = raw / raw.mean()
    weights = np.repeat(raw[:, None], grid.width, axis=1)
    weights.setflags(write=False)
    return DistortionMap(weights=weights)


def backproject(depth: DepthMap) -> PointCloud:
    """Point (i, j) = depth(i, j) * ray(i, j); validity copied."""
    rays = ErpGrid.of(depth).rays()
    points = depth.filled(0.0)[..., None] * rays
    return PointCloud(points=points, valid=depth.valid.copy())


# ==============================================================================
# NORMALS
# ==============================================================================

@lru_cache(maxsize=32)
def vertical_stencil(height: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rows and coefficients of the d/dv stencil, each of shape (H, 3).

    Interior rows use central differences; the first and last rows use the
    second-order one-sided stencil so the pole rows stay accurate.
    """
    if height < 3:
        raise ArgumentError(f"Normals need height >= 3, got {height}.")
    rows = np.empty((height, 3), dtype=np.intp)
    coefs = np.empty((height, 3), dtype=np.float64)
    for i in range(height):
        if i == 0:
            rows[i] = (0, 1, 2)
            coefs[i] = (-1.5, 2.0, -0.5)
        elif i == height - 1:
            rows[i] = (i - 2, i - 1, i)
            coefs[i] = (0.5, -2.0, 1.5)
        else:
            rows[i] = (i - 1, i, i + 1)
            coefs[i] = (-0.5, 0.0, 0.5)
    rows.setflags(write=False)
    coefs.setflags(write=False)
    return rows, coefs


@dataclass(frozen=True, eq=False)
class NormalField:
    """Normals plus the intermediates needed to transport gradients back to depth."""
    normals: np.ndarray
    valid: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    cross: np.ndarray
    cross_norm: np.ndarray
    orientation: np.ndarray


def normal_field(depth: DepthMap) -> NormalField:
    """Central-difference normals with intermediates (see normals_from_depth)."""
    height, width = depth.shape
    if width < 3 or height < 3:
        raise ArgumentError(f"Normals need at least a 3 x 3 map, got {width} x {height}.")

    rays = ErpGrid.of(depth).rays()
    points = backproject(depth).points
    valid = depth.valid

    tangent_u = 0.5 * (np.roll(points, -1, axis=1) - np.roll(points, 1, axis=1))
    rows, coefs = vertical_stencil(height)
    tangent_v = np.einsum("hk,hkwc->hwc", coefs, points[rows])

    cross = np.cross(tangent_u, tangent_v)
    cross_norm = np.linalg.norm(cross, axis=-1)

    ok = valid & np.roll(valid, -1, axis=1) & np.roll(valid, 1, axis=1)
    ok &= valid[rows].all(axis=1)
    ok &= cross_norm > 1e-12

    orientation = np.where(np.einsum("hwc,hwc->hw", cross, rays) > 0, -1.0, 1.0)
    safe_norm = np.where(ok, cross_norm, 1.0)
    normals = np.where(ok[..., None], orientation[..., None] * cross / safe_norm[..., None], 0.0)

    return NormalField(
        normals=normals,
        valid=ok,
        tangent_u=tangent_u,
        tangent_v=tangent_v,
        cross=cross,
        cross_norm=safe_norm,
        orientation=orientation,
    )


def normals_from_depth(depth: DepthMap) -> NormalMap:
    """
    Surface normals from back-projected points.

    Tangents are central differences along u (wrapping across the seam) and
    along v (one-sided at the first/last row). Normals are flipped to face the
    camera (n . ray < 0). Pixels with an invalid neighbour or a degenerate
    cross product are invalid.
    """
    field = normal_field(depth)
    return NormalMap(normals=field.normals, valid=field.valid)


def normal_field_vjp(field: NormalField, depth: DepthMap, grad_normals: np.ndarray) -> np.ndarray:
    """
    Pull a gradient w.r.t. the normals back to the depth map.

    `grad_normals` is (H, W, 3) and must be zero wherever the normal is invalid.
    Returns (H, W) dL/d(depth).
    """
    height, _ = depth.shape
    rays = ErpGrid.of(depth).rays()
    cross = field.cross
    norm = field.cross_norm[..., None]
    unit = cross / norm

    # n = s * c / |c|  ->  dL/dc = s * (g - (g . c^) c^) / |c|
    g = grad_normals * field.orientation[..., None]
    g_cross = (g - np.einsum("hwc,hwc->hw", g, unit)[..., None] * unit) / norm
    g_cross = np.where(field.valid[..., None], g_cross, 0.0)

    # c = a x b  ->  dL/da = b x g,  dL/db = g x a
    g_tu = np.cross(field.tangent_v, g_cross)
    g_tv = np.cross(g_cross, field.tangent_u)

    g_points = 0.5 * (np.roll(g_tu, 1, axis=1) - np.roll(g_tu, -1, axis=1))
    rows, coefs = vertical_stencil(height)
    np.add.at(g_points, rows, coefs[:, :, None, None] * g_tv[:, None, :, :])

    grad = np.einsum("hwc,hwc->hw", g_points, rays)
    return np.where(depth.valid, grad, 0.0)
