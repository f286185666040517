"""
ERP -> perspective resampling over an icosahedral camera rig.

This module provides:
1. PerspectiveCamera / IcosahedronRig - 12 pinhole views on icosahedron vertices
2. Sampling plans - the bilinear ERP taps of every patch pixel (cached)
3. erp_to_perspective / erp_to_perspective_adjoint - the linear operator and its transpose
4. coverage_check - fraction of ERP pixel directions seen by at least one camera
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence, Tuple, Union

import numpy as np

from core import DepthMap
from errors import ArgumentError, CoverageError
from geometry import Direction, ErpGrid, dir_to_pixel_array

LOGGER = logging.getLogger(__name__)

GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0

# Smallest square-frustum fov whose inscribed cone (half-angle fov/2) exceeds the
# icosahedron covering radius of 37.377 degrees.
MIN_COVERAGE_FOV_DEG = 75.0

DEFAULT_FOV_DEG = 90.0
DEFAULT_PATCH_SIZE = 128


@dataclass(frozen=True)
class PerspectiveCamera:
    """Square pinhole camera looking along `forward` with image-up `up`."""
    forward: Direction
    up: Direction
    fov_deg: float = DEFAULT_FOV_DEG
    size: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        dot = float(np.dot(self.forward.as_array(), self.up.as_array()))
        if abs(dot) > 1e-6:
            raise ArgumentError(f"Camera forward and up must be orthogonal (dot = {dot:.2e}).")
        if not 0.0 < float(self.fov_deg) < 180.0:
            raise ArgumentError(f"Camera fov must be in (0, 180) degrees, got {self.fov_deg}.")
        if int(self.size) < 2:
            raise ArgumentError(f"Patch size must be >= 2, got {self.size}.")
        object.__setattr__(self, "fov_deg", float(self.fov_deg))
        object.__setattr__(self, "size", int(self.size))

    @property
    def right(self) -> np.ndarray:
        return np.cross(self.up.as_array(), self.forward.as_array())

    @property
    def rotation(self) -> np.ndarray:
        """Rows are the camera axes (right, up, forward) in world coordinates."""
        return np.stack([self.right, self.up.as_array(), self.forward.as_array()])

    def pixel_rays(self) -> np.ndarray:
        """(size, size, 3) unit world rays through patch pixel centers, row 0 at the top."""
        half = np.tan(np.radians(self.fov_deg) / 2.0)
        coords = (2.0 * (np.arange(self.size) + 0.5) / self.size - 1.0) * half
        xs, ys = np.meshgrid(coords, -coords)
        local = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
        local /= np.linalg.norm(local, axis=-1, keepdims=True)
        return local @ self.rotation

    def contains(self, dirs: np.ndarray) -> np.ndarray:
        """True for world directions inside the square frustum."""
        local = np.asarray(dirs, dtype=np.float64) @ self.rotation.T
        half = np.tan(np.radians(self.fov_deg) / 2.0)
        z = local[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            inside = (
                (z > 0)
                & (np.abs(local[..., 0]) <= half * z)
                & (np.abs(local[..., 1]) <= half * z)
            )
        return inside

    def describe(self) -> dict:
        return {
            "forward": [self.forward.x, self.forward.y, self.forward.z],
            "up": [self.up.x, self.up.y, self.up.z],
            "fov_deg": self.fov_deg,
            "size": self.size,
        }


@dataclass(frozen=True)
class IcosahedronRig:
    """Exactly 12 cameras whose optical axes are the icosahedron vertices."""
    cameras: Tuple[PerspectiveCamera, ...]

    def __post_init__(self):
        cameras = tuple(self.cameras)
        if len(cameras) != 12:
            raise ArgumentError(f"An icosahedron rig has 12 cameras, got {len(cameras)}.")
        object.__setattr__(self, "cameras", cameras)

    def __len__(self) -> int:
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    @property
    def axes(self) -> np.ndarray:
        return np.stack([cam.forward.as_array() for cam in self.cameras])

    def min_axis_angle_deg(self) -> float:
        axes = self.axes
        cosines = np.clip(axes @ axes.T, -1.0, 1.0)
        np.fill_diagonal(cosines, -1.0)
        return float(np.degrees(np.arccos(cosines.max())))

    def describe(self) -> dict:
        return {
            "n_cameras": len(self.cameras),
            "min_axis_angle_deg": self.min_axis_angle_deg(),
            "cameras": [dict(index=i, **cam.describe()) for i, cam in enumerate(self.cameras)],
        }


def icosahedron_vertices() -> np.ndarray:
    """12 unit vertices: cyclic permutations of (0, +-1, +-phi)."""
    vertices = []
    for a in (1.0, -1.0):
        for b in (GOLDEN_RATIO, -GOLDEN_RATIO):
            vertices.append((0.0, a, b))
            vertices.append((a, b, 0.0))
            vertices.append((b, 0.0, a))
    vertices = np.array(vertices, dtype=np.float64)
    return vertices / np.linalg.norm(vertices, axis=1, keepdims=True)


def _up_vector(forward: np.ndarray) -> np.ndarray:
    world_up = np.array([0.0, 1.0, 0.0])
    if abs(float(forward @ world_up)) > 1.0 - 1e-6:
        world_up = np.array([0.0, 0.0, 1.0])
    up = world_up - (world_up @ forward) * forward
    return up / np.linalg.norm(up)


def icosahedron_rig(
    fov_deg: float = DEFAULT_FOV_DEG,
    size: int = DEFAULT_PATCH_SIZE,
    allow_gaps: bool = False,
) -> IcosahedronRig:
    """
    Build the 12-camera rig.

    Args:
        fov_deg: Horizontal and vertical field of view of every camera
        size: Patch side in pixels
        allow_gaps: Accept a fov below the coverage minimum (debugging only)

    Raises:
        CoverageError: fov < 75 degrees without allow_gaps
    """
    if fov_deg < MIN_COVERAGE_FOV_DEG and not allow_gaps:
        raise CoverageError(
            f"fov {fov_deg} deg leaves gaps between icosahedron views "
            f"(need >= {MIN_COVERAGE_FOV_DEG}); pass allow_gaps to override."
        )
    cameras = []
    for vertex in icosahedron_vertices():
        cameras.append(
            PerspectiveCamera(
                forward=Direction.from_vector(vertex),
                up=Direction.from_vector(_up_vector(vertex)),
                fov_deg=fov_deg,
                size=size,
            )
        )
    return IcosahedronRig(cameras=tuple(cameras))


# ==============================================================================
# SAMPLING PLANS
# ==============================================================================

@dataclass(frozen=True, eq=False)
class SamplingPlan:
    """Flat ERP indices (P*P, 4) and bilinear weights (P*P, 4) for one camera."""
    indices: np.ndarray
    weights: np.ndarray
    size: int
    grid: ErpGrid


@lru_cache(maxsize=256)
def sampling_plan(cam: PerspectiveCamera, grid: ErpGrid) -> SamplingPlan:
    """
    Bilinear taps for every patch pixel.

    Columns wrap around the longitude seam; rows are clamped at the poles.
    """
    rays = cam.pixel_rays().reshape(-1, 3)
    u, v = dir_to_pixel_array(grid.width, grid.height, rays)

    j0 = np.floor(u)
    i0 = np.floor(v)
    fu = u - j0
    fv = v - i0
    j0 = j0.astype(np.intp)
    i0 = i0.astype(np.intp)

    cols = (np.stack([j0, j0 + 1, j0, j0 + 1], axis=1)) % grid.width
    rows = np.clip(np.stack([i0, i0, i0 + 1, i0 + 1], axis=1), 0, grid.height - 1)
    weights = np.stack(
        [(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1
    )
    indices = rows * grid.width + cols
    indices.setflags(write=False)
    weights.setflags(write=False)
    return SamplingPlan(indices=indices, weights=weights, size=cam.size, grid=grid)


def resample(values: np.ndarray, plan: SamplingPlan) -> np.ndarray:
    """Apply the bilinear operator to an (H, W) array -> (P, P)."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    return (flat[plan.indices] * plan.weights).sum(axis=1).reshape(plan.size, plan.size)


def resample_valid(valid: np.ndarray, plan: SamplingPlan) -> np.ndarray:
    """Patch validity: all four source pixels valid."""
    return valid.reshape(-1)[plan.indices].all(axis=1).reshape(plan.size, plan.size)


def resample_adjoint(patch_grad: np.ndarray, plan: SamplingPlan) -> np.ndarray:
    """Transpose of `resample`: scatter (P, P) values to their (H, W) taps."""
    contributions = np.asarray(patch_grad, dtype=np.float64).reshape(-1, 1) * plan.weights
    flat = np.bincount(
        plan.indices.reshape(-1),
        weights=contributions.reshape(-1),
        minlength=plan.grid.width * plan.grid.height,
    )
    return flat.reshape(plan.grid.height, plan.grid.width)


# ==============================================================================
# PUBLIC OPERATIONS
# ==============================================================================

@dataclass(frozen=True, eq=False)
class PerspectivePatch:
    values: np.ndarray
    valid: np.ndarray
    camera: PerspectiveCamera

    def as_depth_map(self) -> DepthMap:
        return DepthMap(values=np.where(self.valid, self.values, 0.0), valid=self.valid)


def erp_to_perspective(depth: DepthMap, cam: PerspectiveCamera) -> PerspectivePatch:
    """Resample an ERP depth map into the camera's square patch."""
    plan = sampling_plan(cam, ErpGrid.of(depth))
    values = resample(depth.filled(0.0), plan)
    valid = resample_valid(depth.valid, plan)
    return PerspectivePatch(values=np.where(valid, values, 0.0), valid=valid, camera=cam)


def erp_to_perspective_adjoint(patch_grad: np.ndarray, cam: PerspectiveCamera, grid: ErpGrid) -> np.ndarray:
    """Exact adjoint of the bilinear resampling used by erp_to_perspective."""
    patch_grad = np.asarray(patch_grad, dtype=np.float64)
    if patch_grad.shape != (cam.size, cam.size):
        raise ArgumentError(
            f"Patch gradient shape {patch_grad.shape} does not match camera size {cam.size}."
        )
    return resample_adjoint(patch_grad, sampling_plan(cam, grid))


def coverage_check(
    rig: Union[IcosahedronRig, Sequence[PerspectiveCamera]],
    grid: ErpGrid,
) -> float:
    """
    Fraction of ERP pixel-center directions inside at least one frustum.

    A plain camera sequence is accepted so single views can be inspected.
    """
    cameras: Iterable[PerspectiveCamera] = rig.cameras if isinstance(rig, IcosahedronRig) else rig
    rays = grid.rays()
    seen = np.zeros(grid.shape, dtype=bool)
    for cam in cameras:
        seen |= cam.contains(rays)
    fraction = float(seen.mean())
    LOGGER.debug("Coverage on %dx%d grid: %.6f", grid.width, grid.height, fraction)
    return fraction
