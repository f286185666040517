"""
Synthetic ERP depth scenes with known geometry.

Used by the tests, the gradient checker and the CLI `--synthetic` inputs.
"""

from typing import Callable, Optional

import numpy as np

from core import DepthMap
from errors import ArgumentError
from geometry import ErpGrid

DEPTH_LOW = 0.5
DEPTH_HIGH = 50.0


def constant_sphere(width: int, height: int, radius: float = 1.0) -> DepthMap:
    """Camera at the center of a sphere: every pixel sees `radius`."""
    if radius <= 0:
        raise ArgumentError(f"Sphere radius must be positive, got {radius}.")
    ErpGrid(width=width, height=height)
    return DepthMap.from_array(np.full((height, width), float(radius)))


def ground_plane(width: int, height: int, camera_height: float = 1.6) -> DepthMap:
    """Infinite floor at y = -camera_height; rays at or above the horizon are invalid."""
    if camera_height <= 0:
        raise ArgumentError(f"Camera height must be positive, got {camera_height}.")
    rays = ErpGrid(width=width, height=height).rays()
    down = -rays[..., 1]
    valid = down > 1e-9
    depth = np.where(valid, camera_height / np.where(valid, down, 1.0), 0.0)
    return DepthMap(values=depth, valid=valid)


def smooth_field(
    width: int,
    height: int,
    fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
) -> DepthMap:
    """
    Depth as a function of (longitude, latitude).

    The default 2 + sin(theta) cos(phi) stays within [1, 3] and is periodic in
    longitude, so the seam carries no artificial edge.
    """
    grid = ErpGrid(width=width, height=height)
    theta, phi = np.meshgrid(grid.longitudes(), grid.latitudes())
    fn = fn or (lambda t, p: 2.0 + np.sin(t) * np.cos(p))
    return DepthMap.from_array(np.asarray(fn(theta, phi), dtype=np.float64))


def random_depth(
    width: int,
    height: int,
    seed: int = 0,
    low: float = DEPTH_LOW,
    high: float = DEPTH_HIGH,
    invalid_fraction: float = 0.0,
    dtype=np.float32,
) -> DepthMap:
    """Log-uniform depths in [low, high] with an optional random invalid fraction."""
    if not 0 < low < high:
        raise ArgumentError(f"Need 0 < low < high, got {low}, {high}.")
    if not 0.0 <= invalid_fraction < 1.0:
        raise ArgumentError(f"invalid_fraction must be in [0, 1), got {invalid_fraction}.")
    rng = np.random.default_rng(seed)
    values = np.exp(rng.uniform(np.log(low), np.log(high), size=(height, width))).astype(dtype)
    valid = rng.random((height, width)) >= invalid_fraction
    return DepthMap(values=values, valid=valid)


def perturbed(
    depth: DepthMap,
    seed: int = 0,
    sigma: float = 0.5,
    low: float = DEPTH_LOW,
    high: float = DEPTH_HIGH,
) -> DepthMap:
    """Multiplicative log-normal noise, clipped to [low, high]; validity kept."""
    rng = np.random.default_rng(seed)
    noise = np.exp(sigma * rng.standard_normal(depth.shape))
    values = np.clip(depth.filled(1.0) * noise, low, high).astype(depth.values.dtype)
    return depth.with_values(values)


def step_edge(width: int, height: int, near: float = 1.0, far: float = 4.0, column: Optional[int] = None) -> DepthMap:
    """Two constant half-spheres split by a vertical step at `column` (default W // 2)."""
    column = width // 2 if column is None else column
    if not 0 < column < width:
        raise ArgumentError(f"Step column must be inside (0, {width}), got {column}.")
    values = np.full((height, width), float(near))
    values[:, column:] = float(far)
    return DepthMap.from_array(values)
