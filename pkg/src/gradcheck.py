"""
Finite-difference verification of the analytic loss gradients.

This module provides:
1. LossTerm class - one loss bound to the array it differentiates
2. create_loss_registry - every term, as a list (iteration) and dict (lookup)
3. make_instance - seeded random 16 x 32 style test instances
4. finite_difference_check - central differences vs. the analytic gradient
"""

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from core import BinaryMask, DepthMap, RangeThreshold, gt_range_mask
from errors import ArgumentError
from geometry import DistortionMap, ErpGrid, distortion_map
from losses import (
    EdgeMask,
    LossConfig,
    TermResult,
    df_gram,
    grad_loss,
    mask_loss,
    normal_loss,
    pts_loss,
    silog,
    sobel_edge_mask,
)
from reproject import IcosahedronRig, icosahedron_rig
from synthetic import DEPTH_HIGH, DEPTH_LOW, perturbed, random_depth

LOGGER = logging.getLogger(__name__)

DEFAULT_REL_STEP = 1e-4
DEFAULT_TOLERANCE = 1e-3
GRADIENT_FLOOR = 1e-8
KINK_TOLERANCE = 1e-3
GRADCHECK_PATCH_SIZE = 16


@dataclass(frozen=True, eq=False)
class GradcheckInstance:
    """Everything a loss needs besides the array being perturbed."""
    pred: DepthMap
    gt: DepthMap
    pred_mask: BinaryMask
    gt_mask: BinaryMask
    distortion: DistortionMap
    edge: EdgeMask
    rig: IcosahedronRig
    seed: int


class LossTerm:
    """
    A loss bound to the array it is differentiated against.

    `func(x, instance)` evaluates the loss with `x` substituted for the
    predicted depth (target "depth") or the soft mask (target "mask").
    `smooth` is False for terms with L1 kinks; only those get kink screening.
    """

    def __init__(
        self,
        name: str,
        func: Callable[[np.ndarray, GradcheckInstance], TermResult],
        description: str,
        target: str = "depth",
        smooth: bool = True,
    ):
        if target not in ("depth", "mask"):
            raise ArgumentError(f"Unknown gradcheck target '{target}'.")
        self.name = name
        self.func = func
        self.description = description
        self.target = target
        self.smooth = smooth

    def __call__(self, x: np.ndarray, instance: GradcheckInstance) -> TermResult:
        return self.func(x, instance)

    def base_array(self, instance: GradcheckInstance) -> np.ndarray:
        if self.target == "mask":
            return np.array(instance.pred_mask.values, dtype=np.float64)
        return instance.pred.filled(1.0)

    def active(self, instance: GradcheckInstance) -> np.ndarray:
        """Entries that may be perturbed."""
        if self.target == "mask":
            return np.ones(instance.pred_mask.shape, dtype=bool)
        return instance.pred.valid

    def to_help_string(self) -> str:
        return f"{self.name} [{self.target}]: {self.description}"


def create_loss_registry(config: Optional[LossConfig] = None) -> Tuple[List[LossTerm], Dict[str, LossTerm]]:
    """
    Creates the loss registry used by the gradient checker and the CLI.

    Returns both a list (for iteration) and dict (for lookup by name).
    """
    config = config or LossConfig()
    lam = config.silog_lambda

    terms = [
        LossTerm(
            name="silog",
            func=lambda x, inst: silog(inst.pred.with_values(x), inst.gt, inst.distortion, lam),
            description="Scale-invariant log loss over jointly valid pixels.",
        ),
        LossTerm(
            name="df",
            func=lambda x, inst: df_gram(inst.pred.with_values(x), inst.gt, inst.rig),
            description="Gram-matrix fidelity over the 12 icosahedron views.",
        ),
        LossTerm(
            name="grad",
            func=lambda x, inst: grad_loss(inst.pred.with_values(x), inst.gt, inst.edge, inst.distortion, lam),
            description="SILog restricted to ground-truth Sobel edges.",
        ),
        LossTerm(
            name="normal",
            func=lambda x, inst: normal_loss(inst.pred.with_values(x), inst.gt, inst.distortion),
            description="L1 distance between unit surface normals.",
            smooth=False,
        ),
        LossTerm(
            name="pts",
            func=lambda x, inst: pts_loss(inst.pred.with_values(x), inst.gt, inst.distortion),
            description="L1 distance between back-projected points.",
            smooth=False,
        ),
        LossTerm(
            name="mask",
            func=lambda x, inst: mask_loss(
                BinaryMask(x), inst.gt_mask, inst.distortion, config.mask_variant, config.mask_pos_weight
            ),
            description="Range-mask loss (MSE or weighted BCE, plus 0.5 Dice).",
            target="mask",
        ),
    ]

    terms_dict = {term.name: term for term in terms}

    return terms, terms_dict


def make_instance(
    height: int = 16,
    width: int = 32,
    seed: int = 0,
    patch_size: int = GRADCHECK_PATCH_SIZE,
    invalid_fraction: float = 0.05,
    mask_threshold: float = 20.0,
    config: Optional[LossConfig] = None,
) -> GradcheckInstance:
    """
    Random instance: gt log-uniform in [0.5, 50] with a few invalid pixels,
    pred = gt times log-normal noise (clipped to the same range), a soft
    prediction mask in (0.05, 0.95) and the gt range mask at `mask_threshold`.
    """
    config = config or LossConfig()
    gt = random_depth(width, height, seed=seed, invalid_fraction=invalid_fraction, dtype=np.float64)
    pred_base = DepthMap.from_array(gt.filled(1.0).astype(np.float64))
    pred = perturbed(pred_base, seed=seed + 1, sigma=0.5, low=DEPTH_LOW, high=DEPTH_HIGH)

    rng = np.random.default_rng(seed + 2)
    pred_mask = BinaryMask(rng.uniform(0.05, 0.95, size=(height, width)))

    return GradcheckInstance(
        pred=pred,
        gt=gt,
        pred_mask=pred_mask,
        gt_mask=gt_range_mask(gt, RangeThreshold(mask_threshold)),
        distortion=distortion_map(ErpGrid(width=width, height=height)),
        edge=sobel_edge_mask(gt, config.sobel_percentile),
        rig=icosahedron_rig(config.df_fov_deg, patch_size),
        seed=seed,
    )


@dataclass
class GradcheckReport:
    loss: str
    height: int
    width: int
    seed: int
    tolerance: float
    max_rel_error: float
    n_checked: int
    n_kinks: int
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def finite_difference_check(
    term: LossTerm,
    instance: GradcheckInstance,
    rel_step: float = DEFAULT_REL_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    gradient_floor: float = GRADIENT_FLOOR,
    kink_tolerance: float = KINK_TOLERANCE,
) -> GradcheckReport:
    """
    Compare the analytic gradient against central differences.

    Every active entry x is perturbed by h = rel_step * |x|. Entries where
    max(|analytic|, |numeric|) <= gradient_floor are not compared. For
    non-smooth terms, entries whose one-sided differences disagree by more
    than kink_tolerance (relative) straddle a kink and are skipped as well.

    Returns:
        GradcheckReport; passed is True when the max relative error is within tolerance
    """
    if tolerance < 0:
        raise ArgumentError(f"Tolerance must be >= 0, got {tolerance}.")
    x0 = term.base_array(instance)
    base = term(x0, instance)
    analytic = np.asarray(base.gradient, dtype=np.float64)
    numeric = np.zeros_like(x0)
    kinks = np.zeros(x0.shape, dtype=bool)
    active = term.active(instance)

    for idx in zip(*np.nonzero(active)):
        h = rel_step * abs(x0[idx])
        x = x0.copy()
        x[idx] = x0[idx] + h
        f_plus = term(x, instance).value
        x[idx] = x0[idx] - h
        f_minus = term(x, instance).value
        numeric[idx] = (f_plus - f_minus) / (2.0 * h)

        if not term.smooth:
            forward = (f_plus - base.value) / h
            backward = (base.value - f_minus) / h
            scale = max(abs(forward), abs(backward))
            if scale > gradient_floor and abs(forward - backward) > kink_tolerance * scale:
                kinks[idx] = True

    magnitude = np.maximum(np.abs(analytic), np.abs(numeric))
    checked = active & (magnitude > gradient_floor) & ~kinks
    if checked.any():
        rel = np.abs(analytic - numeric)[checked] / magnitude[checked]
        max_rel = float(rel.max())
    else:
        max_rel = 0.0

    report = GradcheckReport(
        loss=term.name,
        height=x0.shape[0],
        width=x0.shape[1],
        seed=instance.seed,
        tolerance=tolerance,
        max_rel_error=max_rel,
        n_checked=int(checked.sum()),
        n_kinks=int(kinks.sum()),
        passed=bool(checked.any()) and max_rel <= tolerance,
    )
    LOGGER.info(
        "gradcheck %s seed=%d: max rel err %.3e over %d entries (%d kinks skipped)",
        term.name, instance.seed, max_rel, report.n_checked, report.n_kinks,
    )
    return report


def run_gradcheck(
    loss: str,
    height: int = 16,
    width: int = 32,
    seed: int = 0,
    tolerance: float = DEFAULT_TOLERANCE,
    config: Optional[LossConfig] = None,
) -> GradcheckReport:
    """Build an instance and check one named loss."""
    _, registry = create_loss_registry(config)
    if loss not in registry:
        raise ArgumentError(f"Unknown loss '{loss}'. Choose from {sorted(registry)}.")
    instance = make_instance(height=height, width=width, seed=seed, config=config)
    return finite_difference_check(registry[loss], instance, tolerance=tolerance)
