"""
Training losses with analytic gradients w.r.t. the predicted depth map.

Terms (all means, never sums, so weights transfer across resolutions):
    silog   - scale-invariant log error, E[d^2] - lambda * E[d]^2
    df      - dense-fidelity Gram loss over the 12 icosahedron views
    grad    - SILog restricted to ground-truth Sobel edges
    normal  - L1 distance between unit surface normals
    pts     - L1 distance between back-projected points
    mask    - range-mask loss, MSE (or weighted BCE) + 0.5 * Dice

Per-pixel ERP terms accept an optional DistortionMap that weights their means.
The DF term lives in perspective space and is never distortion-weighted.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, NamedTuple, Optional, Tuple

import numpy as np
from scipy import ndimage

from core import BinaryMask, DepthMap, check_same_shape, joint_valid
from errors import ArgumentError, EmptyOverlapError
from geometry import DistortionMap, ErpGrid, distortion_map, normal_field, normal_field_vjp
from reproject import (
    DEFAULT_FOV_DEG,
    DEFAULT_PATCH_SIZE,
    IcosahedronRig,
    icosahedron_rig,
    resample,
    resample_adjoint,
    resample_valid,
    sampling_plan,
)

LOGGER = logging.getLogger(__name__)

TERM_NAMES: Tuple[str, ...] = ("silog", "df", "grad", "normal", "pts", "mask")

SILOG_LAMBDA = 0.85
DF_EPS = 1e-6
DICE_EPS = 1e-6
BCE_EPS = 1e-7
DEFAULT_SOBEL_PERCENTILE = 90.0
MASK_VARIANTS = ("mse_dice", "bce_dice")


@dataclass
class LossWeights:
    """Per-term weights of the total loss; a zero weight skips the term."""
    silog: float = 1.0
    df: float = 0.4
    grad: float = 5.0
    normal: float = 2.0
    pts: float = 2.0
    mask: float = 2.0

    def __post_init__(self):
        for name in TERM_NAMES:
            value = float(getattr(self, name))
            if not np.isfinite(value) or value < 0:
                raise ArgumentError(f"Loss weight '{name}' must be finite and >= 0, got {value!r}.")
            setattr(self, name, value)

    def as_tuple(self) -> Tuple[float, ...]:
        return tuple(getattr(self, name) for name in TERM_NAMES)

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class LossConfig:
    """Everything that parameterises total_loss."""
    weights: LossWeights = field(default_factory=LossWeights)
    silog_lambda: float = SILOG_LAMBDA
    sobel_percentile: float = DEFAULT_SOBEL_PERCENTILE
    df_fov_deg: float = DEFAULT_FOV_DEG
    df_patch_size: int = DEFAULT_PATCH_SIZE
    use_distortion: bool = True
    mask_variant: str = "mse_dice"
    mask_pos_weight: float = 1.0
    preset: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.mask_variant not in MASK_VARIANTS:
            raise ArgumentError(
                f"Unknown mask variant '{self.mask_variant}'. Choose from {MASK_VARIANTS}."
            )
        if not 0.0 < self.sobel_percentile < 100.0:
            raise ArgumentError(f"Sobel percentile must be in (0, 100), got {self.sobel_percentile}.")
        if self.mask_pos_weight <= 0:
            raise ArgumentError("mask_pos_weight must be positive.")

    def to_dict(self) -> dict:
        return asdict(self)


class TermResult(NamedTuple):
    value: float
    gradient: np.ndarray
    count: int


@dataclass(frozen=True, eq=False)
class EdgeMask:
    mask: np.ndarray
    percentile: float
    threshold: float

    @property
    def is_empty(self) -> bool:
        return not bool(self.mask.any())


@dataclass
class LossReport:
    terms: Dict[str, float]
    counts: Dict[str, int]
    weights: LossWeights
    total: float
    use_distortion: bool
    gradient: Optional[np.ndarray] = None
    mask_gradient: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {
            "terms": dict(self.terms),
            "counts": dict(self.counts),
            "weights": self.weights.to_dict(),
            "total": self.total,
            "use_distortion": self.use_distortion,
        }


def _pixel_weights(weights: Optional[DistortionMap], shape) -> np.ndarray:
    if weights is None:
        return np.ones(shape, dtype=np.float64)
    if weights.weights.shape != tuple(shape):
        raise ArgumentError(
            f"Distortion map {weights.weights.shape} does not match map {tuple(shape)}."
        )
    return np.asarray(weights.weights, dtype=np.float64)


# ==============================================================================
# SILOG / GRADIENT-EDGE LOSS
# ==============================================================================

def _silog_on(
    pred: DepthMap,
    gt: DepthMap,
    mask: np.ndarray,
    weights: Optional[DistortionMap],
    lam: float,
) -> TermResult:
    count = int(mask.sum())
    if count == 0:
        raise EmptyOverlapError("SILog has no jointly valid pixels.")

    w = _pixel_weights(weights, pred.shape)[mask]
    p = pred.values[mask].astype(np.float64)
    g = gt.values[mask].astype(np.float64)
    d = np.log(p) - np.log(g)

    total_w = w.sum()
    mean_d = (w * d).sum() / total_w
    mean_d2 = (w * d * d).sum() / total_w
    value = mean_d2 - lam * mean_d ** 2

    grad = np.zeros(pred.shape, dtype=np.float64)
    grad[mask] = 2.0 * w * (d - lam * mean_d) / (total_w * p)
    return TermResult(float(value), grad, count)


def silog(
    pred: DepthMap,
    gt: DepthMap,
    weights: Optional[DistortionMap] = None,
    lam: float = SILOG_LAMBDA,
) -> TermResult:
    """Scale-invariant log loss over jointly valid pixels (no sqrt, no x10)."""
    return _silog_on(pred, gt, joint_valid(pred, gt), weights, lam)


def sobel_edge_mask(gt: DepthMap, percentile: float = DEFAULT_SOBEL_PERCENTILE) -> EdgeMask:
    """
    Pixels whose ln(gt) Sobel magnitude is nonzero and at or above the given
    percentile. A band of equal magnitudes wider than the top fraction is kept whole.

    Columns wrap across the seam; rows replicate at the poles. Only pixels whose
    whole 3x3 neighbourhood is valid are candidates.
    """
    if not 0.0 < percentile < 100.0:
        raise ArgumentError(f"Percentile must be in (0, 100), got {percentile}.")
    height, width = gt.shape
    if height < 3 or width < 3:
        raise ArgumentError(f"Sobel needs at least a 3 x 3 map, got {width} x {height}.")

    def pad(array, mode_rows):
        array = np.pad(array, ((0, 0), (1, 1)), mode="wrap")
        return np.pad(array, ((1, 1), (0, 0)), mode=mode_rows)

    log_depth = pad(np.log(gt.filled(1.0)), "edge")
    gx = ndimage.sobel(log_depth, axis=1)[1:-1, 1:-1]
    gy = ndimage.sobel(log_depth, axis=0)[1:-1, 1:-1]
    magnitude = np.hypot(gx, gy)

    valid = pad(gt.valid, "edge")
    candidates = np.ones(gt.shape, dtype=bool)
    for di in (0, 1, 2):
        for dj in (0, 1, 2):
            candidates &= valid[di:di + height, dj:dj + width]

    if not candidates.any():
        return EdgeMask(mask=np.zeros(gt.shape, dtype=bool), percentile=percentile, threshold=float("nan"))

    threshold = float(np.percentile(magnitude[candidates], percentile))
    mask = candidates & (magnitude >= threshold) & (magnitude > 0.0)
    return EdgeMask(mask=mask, percentile=percentile, threshold=threshold)


def grad_loss(
    pred: DepthMap,
    gt: DepthMap,
    edge: EdgeMask,
    weights: Optional[DistortionMap] = None,
    lam: float = SILOG_LAMBDA,
) -> TermResult:
    """SILog restricted to edge pixels; an empty edge mask yields 0."""
    check_same_shape(pred, gt, "depth maps")
    if edge.mask.shape != pred.shape:
        raise ArgumentError(f"Edge mask {edge.mask.shape} does not match map {pred.shape}.")
    if edge.is_empty:
        return TermResult(0.0, np.zeros(pred.shape, dtype=np.float64), 0)
    return _silog_on(pred, gt, joint_valid(pred, gt, edge.mask), weights, lam)


# ==============================================================================
# DENSE-FIDELITY GRAM LOSS
# ==============================================================================

def _standardize(x: np.ndarray, mask: np.ndarray, eps: float):
    """(x - mean) / (std + eps) over `mask`, zero elsewhere, plus its backward."""
    n = int(mask.sum())
    z = x[mask] - x[mask].mean()
    sigma = float(np.sqrt((z * z).mean()))
    scale = sigma + eps
    y = np.zeros_like(x)
    y[mask] = z / scale

    def backward(grad_y: np.ndarray) -> np.ndarray:
        g = grad_y[mask]
        out = (g - g.mean()) / scale
        if sigma > 0:
            out = out - (g * z).sum() * z / (n * sigma * scale * scale)
        grad_x = np.zeros_like(x)
        grad_x[mask] = out
        return grad_x

    return y, backward


def df_gram(
    pred: DepthMap,
    gt: DepthMap,
    rig: IcosahedronRig,
    eps: float = DF_EPS,
) -> TermResult:
    """
    Gram-matrix fidelity between per-view standardised patches.

    term_k = ||G_pred - G_gt||_F^2 / P^2 with G = X X^T; value is the mean over
    views holding at least 2 jointly valid patch pixels.
    """
    check_same_shape(pred, gt, "depth maps")
    grid = ErpGrid.of(pred)
    pred_values = pred.filled(0.0)
    gt_values = gt.filled(0.0)

    total = 0.0
    views = 0
    grad = np.zeros(pred.shape, dtype=np.float64)
    for cam in rig:
        plan = sampling_plan(cam, grid)
        mask = resample_valid(pred.valid, plan) & resample_valid(gt.valid, plan)
        if mask.sum() < 2:
            LOGGER.debug("DF view skipped: %d valid patch pixels", int(mask.sum()))
            continue

        y_pred, backward = _standardize(resample(pred_values, plan), mask, eps)
        y_gt, _ = _standardize(resample(gt_values, plan), mask, eps)

        size2 = float(cam.size) ** 2
        diff = y_pred @ y_pred.T - y_gt @ y_gt.T
        total += float((diff * diff).sum()) / size2
        grad += resample_adjoint(backward(4.0 * diff @ y_pred / size2), plan)
        views += 1

    if views == 0:
        raise EmptyOverlapError("DF loss: no view has two jointly valid patch pixels.")

    grad = np.where(pred.valid, grad / views, 0.0)
    return TermResult(total / views, grad, views)


# ==============================================================================
# GEOMETRY LOSSES
# ==============================================================================

def normal_loss(
    pred: DepthMap,
    gt: DepthMap,
    weights: Optional[DistortionMap] = None,
) -> TermResult:
    """Mean L1 distance between unit normals at jointly valid normal pixels."""
    check_same_shape(pred, gt, "depth maps")
    field_pred = normal_field(pred)
    field_gt = normal_field(gt)
    mask = field_pred.valid & field_gt.valid
    count = int(mask.sum())
    if count == 0:
        raise EmptyOverlapError("Normal loss has no jointly valid normals.")

    w = _pixel_weights(weights, pred.shape)
    total_w = w[mask].sum()
    diff = field_pred.normals - field_gt.normals
    per_pixel = np.abs(diff).sum(axis=-1)
    value = float((w * per_pixel)[mask].sum() / total_w)

    grad_normals = np.where(mask[..., None], np.sign(diff) * (w / total_w)[..., None], 0.0)
    grad = normal_field_vjp(field_pred, pred, grad_normals)
    return TermResult(value, grad, count)


def pts_loss(
    pred: DepthMap,
    gt: DepthMap,
    weights: Optional[DistortionMap] = None,
) -> TermResult:
    """Mean L1 distance between back-projected points: |dp - dg| * ||ray||_1."""
    mask = joint_valid(pred, gt)
    count = int(mask.sum())
    if count == 0:
        raise EmptyOverlapError("Point loss has no jointly valid pixels.")

    ray_l1 = np.abs(ErpGrid.of(pred).rays()).sum(axis=-1)
    w = _pixel_weights(weights, pred.shape)
    total_w = w[mask].sum()
    delta = pred.filled(0.0) - gt.filled(0.0)
    value = float((w * np.abs(delta) * ray_l1)[mask].sum() / total_w)

    grad = np.zeros(pred.shape, dtype=np.float64)
    grad[mask] = (w * np.sign(delta) * ray_l1)[mask] / total_w
    return TermResult(value, grad, count)


# ==============================================================================
# RANGE-MASK LOSS
# ==============================================================================

def mask_loss(
    pred_mask: BinaryMask,
    gt_mask: BinaryMask,
    weights: Optional[DistortionMap] = None,
    variant: str = "mse_dice",
    pos_weight: float = 1.0,
) -> TermResult:
    """
    MSE (or weighted BCE) + 0.5 * soft Dice; gradient is w.r.t. the soft mask.

    Dice = 1 - (2 sum(M G) + eps) / (sum(M) + sum(G) + eps).
    """
    check_same_shape(pred_mask, gt_mask, "masks")
    m = pred_mask.values
    g = gt_mask.values
    w = _pixel_weights(weights, m.shape)
    total_w = w.sum()

    if variant == "mse_dice":
        base = float((w * (m - g) ** 2).sum() / total_w)
        grad = 2.0 * w * (m - g) / total_w
    elif variant == "bce_dice":
        mc = np.clip(m, BCE_EPS, 1.0 - BCE_EPS)
        base = float(-(w * (pos_weight * g * np.log(mc) + (1 - g) * np.log(1 - mc))).sum() / total_w)
        grad = -w * (pos_weight * g / mc - (1 - g) / (1 - mc)) / total_w
        grad = np.where((m > BCE_EPS) & (m < 1.0 - BCE_EPS), grad, 0.0)
    else:
        raise ArgumentError(f"Unknown mask variant '{variant}'. Choose from {MASK_VARIANTS}.")

    overlap = (w * m * g).sum()
    denom = (w * m).sum() + (w * g).sum() + DICE_EPS
    dice = 1.0 - (2.0 * overlap + DICE_EPS) / denom
    grad_dice = -(2.0 * w * g * denom - (2.0 * overlap + DICE_EPS) * w) / denom ** 2

    return TermResult(base + 0.5 * float(dice), grad + 0.5 * grad_dice, int(m.size))


# ==============================================================================
# TOTAL
# ==============================================================================

def total_loss(
    pred: DepthMap,
    gt: DepthMap,
    pred_mask: Optional[BinaryMask] = None,
    gt_mask: Optional[BinaryMask] = None,
    weights: Optional[LossWeights] = None,
    rig: Optional[IcosahedronRig] = None,
    use_distortion: Optional[bool] = None,
    config: Optional[LossConfig] = None,
) -> LossReport:
    """
    Weighted sum of all six terms.

    Explicit arguments override the matching `config` fields. Terms whose
    weight is 0 are skipped (value 0, count 0). Mask terms are skipped when
    either mask is missing.
    """
    config = config or LossConfig()
    weights = weights or config.weights
    if use_distortion is None:
        use_distortion = config.use_distortion
    check_same_shape(pred, gt, "depth maps")

    dmap = distortion_map(ErpGrid.of(pred)) if use_distortion else None
    lam_si = config.silog_lambda

    steps: Dict[str, Callable[[], TermResult]] = {
        "silog": lambda: silog(pred, gt, dmap, lam_si),
        "df": lambda: df_gram(
            pred, gt, rig or icosahedron_rig(config.df_fov_deg, config.df_patch_size)
        ),
        "grad": lambda: grad_loss(
            pred, gt, sobel_edge_mask(gt, config.sobel_percentile), dmap, lam_si
        ),
        "normal": lambda: normal_loss(pred, gt, dmap),
        "pts": lambda: pts_loss(pred, gt, dmap),
        "mask": lambda: mask_loss(
            pred_mask, gt_mask, dmap, config.mask_variant, config.mask_pos_weight
        ),
    }

    terms: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    gradient = np.zeros(pred.shape, dtype=np.float64)
    mask_gradient = None
    total = 0.0

    for name in TERM_NAMES:
        lam = getattr(weights, name)
        skipped = lam == 0 or (name == "mask" and (pred_mask is None or gt_mask is None))
        if skipped:
            terms[name] = 0.0
            counts[name] = 0
            continue

        result = steps[name]()
        terms[name] = result.value
        counts[name] = result.count
        total += lam * result.value
        if name == "mask":
            mask_gradient = lam * result.gradient
        else:
            gradient += lam * result.gradient
        LOGGER.debug("%s = %.6g over %d (lambda %.3g)", name, result.value, result.count, lam)

    return LossReport(
        terms=terms,
        counts=counts,
        weights=weights,
        total=float(total),
        use_distortion=bool(use_distortion),
        gradient=gradient,
        mask_gradient=mask_gradient,
    )
