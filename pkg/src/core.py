"""
Core data types for panodepth.

This module provides:
1. DepthMap - metric depth grid with an explicit validity mask
2. BinaryMask - soft or hard mask in [0, 1]
3. RangeThreshold - distance threshold for range masks (10/20/50/100 m presets)
4. Range masks - ground-truth mask generation and application
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from errors import ArgumentError, DomainError


RANGE_PRESETS: Tuple[float, ...] = (10.0, 20.0, 50.0, 100.0)


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class DepthMap:
    """
    H x W metric depth (meters) with a validity mask.

    Values at invalid pixels are never read by losses or metrics, so they may
    hold anything (0, NaN, stale data). Values are float32 unless a float64
    array is passed in, which is kept for finite-difference work.

    Example:
        >>> d = DepthMap.from_array(np.full((2, 4), 3.0))
        >>> d.width, d.height
        (4, 2)
    """
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        dtype = np.float64 if values.dtype == np.float64 else np.float32
        values = values.astype(dtype, copy=False)
        valid = np.asarray(self.valid, dtype=bool)

        if values.ndim != 2:
            raise ArgumentError(f"Depth values must be 2-D, got shape {values.shape}.")
        if values.shape != valid.shape:
            raise ArgumentError(
                f"Depth values {values.shape} and validity mask {valid.shape} differ in shape."
            )
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise ArgumentError("Depth map must be at least 1 x 1.")

        with np.errstate(invalid="ignore"):
            bad = valid & ~(np.isfinite(values) & (values > 0))
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise DomainError(
                f"Valid pixel ({row}, {col}) has non-positive or non-finite depth "
                f"{values[row, col]!r}."
            )

        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "valid", _frozen(valid))

    @classmethod
    def from_array(cls, values, valid=None) -> "DepthMap":
        """Build a map; when `valid` is omitted it is derived as finite & > 0."""
        values = np.asarray(values)
        if valid is None:
            with np.errstate(invalid="ignore"):
                valid = np.isfinite(values) & (values > 0)
        return cls(values=values, valid=valid)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Values with invalid pixels replaced by `fill` (float64 copy)."""
        return np.where(self.valid, self.values, fill).astype(np.float64)

    def with_values(self, values: np.ndarray) -> "DepthMap":
        """Same validity, new values."""
        return DepthMap(values=values, valid=self.valid)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """
    H x W mask with entries in [0, 1].

    Soft masks come from a network head; hard masks (exact 0/1) are ground truth.
    """
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ArgumentError(f"Mask must be 2-D, got shape {values.shape}.")
        if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
            raise ArgumentError("Mask entries must lie within [0, 1].")
        object.__setattr__(self, "values", _frozen(values))

    @classmethod
    def from_bool(cls, flags) -> "BinaryMask":
        return cls(np.asarray(flags, dtype=bool).astype(np.float64))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def is_hard(self) -> bool:
        return bool(np.all((self.values == 0.0) | (self.values == 1.0)))

    def as_bool(self, threshold: float = 0.5) -> np.ndarray:
        return self.values > threshold


@dataclass(frozen=True)
class RangeThreshold:
    """Positive distance threshold in meters."""
    meters: float

    def __post_init__(self):
        meters = float(self.meters)
        if not np.isfinite(meters) or meters <= 0:
            raise ArgumentError(f"Range threshold must be positive, got {self.meters!r}.")
        object.__setattr__(self, "meters", meters)

    @property
    def is_preset(self) -> bool:
        return self.meters in RANGE_PRESETS

    @classmethod
    def presets(cls) -> Tuple["RangeThreshold", ...]:
        return tuple(cls(m) for m in RANGE_PRESETS)


def _as_threshold(t) -> RangeThreshold:
    return t if isinstance(t, RangeThreshold) else RangeThreshold(t)


def gt_range_mask(depth: DepthMap, t) -> BinaryMask:
    """Hard mask: 1 where the pixel is valid and depth <= t, else 0."""
    threshold = _as_threshold(t)
    inside = depth.valid & (depth.filled(np.inf) <= threshold.meters)
    return BinaryMask.from_bool(inside)


def apply_range_mask(depth: DepthMap, mask: BinaryMask) -> DepthMap:
    """
    Element-wise product of depth and mask.

    Output validity is the input validity AND mask > 0.5.
    """
    if depth.shape != mask.shape:
        raise ArgumentError(
            f"Depth map {depth.shape} and mask {mask.shape} differ in shape."
        )
    with np.errstate(invalid="ignore"):
        values = depth.values * mask.values.astype(depth.values.dtype)
    return DepthMap(values=values, valid=depth.valid & (mask.values > 0.5))


def check_same_shape(a, b, what: str = "maps") -> None:
    """Raise ArgumentError unless two grids have identical dimensions."""
    if a.shape != b.shape:
        raise ArgumentError(f"Mismatched {what}: {a.shape} vs {b.shape}.")


def joint_valid(pred: DepthMap, gt: DepthMap, extra: Optional[np.ndarray] = None) -> np.ndarray:
    check_same_shape(pred, gt, "depth maps")
    mask = pred.valid & gt.valid
    if extra is not None:
        mask &= extra
    return mask
