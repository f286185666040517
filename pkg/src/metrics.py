"""
Metric-depth evaluation: AbsRel, RMSE, delta accuracies and friends.

Every per-image report carries the weighted sufficient statistics it was
computed from, so reports can be pooled over pixels as well as averaged over
images.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from core import RANGE_PRESETS, DepthMap, check_same_shape
from errors import ArgumentError, EmptyEvaluationError
from geometry import ErpGrid, distortion_map

LOGGER = logging.getLogger(__name__)

DELTA_BASE = 1.25
METRIC_NAMES = ("abs_rel", "rmse", "delta1", "delta2", "delta3", "sq_rel", "rmse_log", "log10")


class Aggregation(str, Enum):
    MEAN_OF_IMAGES = "mean-of-images"
    PIXEL_POOLED = "pixel-pooled"


@dataclass(frozen=True)
class EvalConfig:
    """Metric protocol: no scale/shift alignment, optional truncation."""
    min_depth: float = 0.01
    max_depth: Optional[float] = None
    latitude_weighted: bool = False
    alignment: str = "none"

    def __post_init__(self):
        if not self.min_depth > 0:
            raise ArgumentError(f"min_depth must be positive, got {self.min_depth}.")
        if self.max_depth is not None and not self.max_depth > self.min_depth:
            raise ArgumentError(
                f"max_depth ({self.max_depth}) must exceed min_depth ({self.min_depth})."
            )
        if self.alignment != "none":
            raise ArgumentError("Only metric evaluation (alignment 'none') is supported.")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SufficientStats:
    """Weighted sums; every metric is a ratio of one of these to `weight`."""
    weight: float = 0.0
    n_valid: int = 0
    abs_rel: float = 0.0
    sq_err: float = 0.0
    sq_rel: float = 0.0
    log_sq: float = 0.0
    log10: float = 0.0
    delta1: float = 0.0
    delta2: float = 0.0
    delta3: float = 0.0

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        return SufficientStats(**{
            name: getattr(self, name) + getattr(other, name) for name in self.__dataclass_fields__
        })

    def metrics(self) -> Dict[str, float]:
        w = self.weight
        return {
            "abs_rel": self.abs_rel / w,
            "rmse": float(np.sqrt(self.sq_err / w)),
            "delta1": self.delta1 / w,
            "delta2": self.delta2 / w,
            "delta3": self.delta3 / w,
            "sq_rel": self.sq_rel / w,
            "rmse_log": float(np.sqrt(self.log_sq / w)),
            "log10": self.log10 / w,
        }


@dataclass
class MetricsReport:
    abs_rel: float
    rmse: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int
    sq_rel: float = 0.0
    rmse_log: float = 0.0
    log10: float = 0.0
    aggregation: str = "per-image"
    n_images: int = 1
    config: dict = field(default_factory=dict)
    stats: Optional[SufficientStats] = None

    @classmethod
    def from_stats(cls, stats: SufficientStats, config: dict, aggregation: str = "per-image", n_images: int = 1):
        return cls(
            n_valid=stats.n_valid,
            aggregation=aggregation,
            n_images=n_images,
            config=config,
            stats=stats,
            **stats.metrics(),
        )

    def to_dict(self) -> dict:
        out = {name: getattr(self, name) for name in METRIC_NAMES}
        out.update(
            n_valid=self.n_valid,
            aggregation=self.aggregation,
            n_images=self.n_images,
            config=dict(self.config),
        )
        return out


# ==============================================================================
# PER-IMAGE EVALUATION
# ==============================================================================

def evaluation_mask(pred: DepthMap, gt: DepthMap, cfg: EvalConfig) -> np.ndarray:
    """
    Pixels that survive the filters, applied in order: gt validity,
    min_depth, max_depth, prediction validity.

    Raises:
        EmptyEvaluationError: naming the first filter that leaves nothing
    """
    check_same_shape(pred, gt, "depth maps")
    gt_values = gt.filled(np.nan)

    filters: List[Tuple[str, np.ndarray]] = [("gt validity", gt.valid)]
    with np.errstate(invalid="ignore"):
        filters.append(("min_depth", gt_values >= cfg.min_depth))
        if cfg.max_depth is not None:
            filters.append(("max_depth", gt_values <= cfg.max_depth))
    filters.append(("prediction validity", pred.valid))

    mask = np.ones(gt.shape, dtype=bool)
    for name, keep in filters:
        mask &= keep
        if not mask.any():
            raise EmptyEvaluationError(name)
    return mask


def sufficient_stats(pred: DepthMap, gt: DepthMap, cfg: EvalConfig) -> SufficientStats:
    mask = evaluation_mask(pred, gt, cfg)
    p = pred.values[mask].astype(np.float64)
    g = gt.values[mask].astype(np.float64)
    if cfg.latitude_weighted:
        w = distortion_map(ErpGrid.of(gt)).weights[mask]
    else:
        w = np.ones_like(g)

    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return SufficientStats(
        weight=float(w.sum()),
        n_valid=int(mask.sum()),
        abs_rel=float((w * np.abs(diff) / g).sum()),
        sq_err=float((w * diff ** 2).sum()),
        sq_rel=float((w * diff ** 2 / g).sum()),
        log_sq=float((w * (np.log(p) - np.log(g)) ** 2).sum()),
        log10=float((w * np.abs(np.log10(p) - np.log10(g))).sum()),
        delta1=float(w[ratio < DELTA_BASE].sum()),
        delta2=float(w[ratio < DELTA_BASE ** 2].sum()),
        delta3=float(w[ratio < DELTA_BASE ** 3].sum()),
    )


def evaluate(pred: DepthMap, gt: DepthMap, cfg: Optional[EvalConfig] = None) -> MetricsReport:
    """
    Metric depth evaluation of one image.

    Args:
        pred: Predicted depth
        gt: Ground-truth depth
        cfg: Filters and weighting (defaults to EvalConfig())

    Returns:
        Per-image MetricsReport with its sufficient statistics attached
    """
    cfg = cfg or EvalConfig()
    return MetricsReport.from_stats(sufficient_stats(pred, gt, cfg), cfg.to_dict())


def aggregate(
    reports: Sequence[MetricsReport],
    mode: Aggregation = Aggregation.MEAN_OF_IMAGES,
) -> MetricsReport:
    """Fold per-image reports into one (uniform image mean or pixel-pooled)."""
    if not reports:
        raise ArgumentError("Cannot aggregate an empty list of reports.")
    mode = Aggregation(mode)
    config = dict(reports[0].config)
    n_images = sum(r.n_images for r in reports)

    if mode is Aggregation.PIXEL_POOLED:
        if any(r.stats is None for r in reports):
            raise ArgumentError("Pixel-pooled aggregation needs reports carrying sufficient statistics.")
        pooled = reports[0].stats
        for r in reports[1:]:
            pooled = pooled + r.stats
        return MetricsReport.from_stats(pooled, config, mode.value, n_images)

    means = {name: float(np.mean([getattr(r, name) for r in reports])) for name in METRIC_NAMES}
    return MetricsReport(
        n_valid=sum(r.n_valid for r in reports),
        aggregation=mode.value,
        n_images=n_images,
        config=config,
        **means,
    )


def _evaluate_or_skip(pred: DepthMap, gt: DepthMap, cfg: EvalConfig, skip_empty: bool) -> Optional[MetricsReport]:
    try:
        return evaluate(pred, gt, cfg)
    except EmptyEvaluationError as e:
        if not skip_empty:
            raise
        LOGGER.info("Image skipped: %s", e)
        return None


def evaluate_range_sweep(
    pred: DepthMap,
    gt: DepthMap,
    thresholds: Iterable[float] = RANGE_PRESETS,
    cfg: Optional[EvalConfig] = None,
    skip_empty: bool = False,
) -> Dict[float, Optional[MetricsReport]]:
    """
    One report per truncation threshold (ground truth cut at each distance).

    With skip_empty, a threshold that leaves no pixels maps to None.
    """
    cfg = cfg or EvalConfig()
    return {
        float(t): _evaluate_or_skip(pred, gt, replace(cfg, max_depth=float(t)), skip_empty)
        for t in thresholds
    }


def evaluate_batch(
    pairs: Sequence[Tuple[DepthMap, DepthMap]],
    cfg: Optional[EvalConfig] = None,
    workers: int = 1,
    verbose: bool = False,
    skip_empty: bool = False,
) -> List[Optional[MetricsReport]]:
    """
    Evaluate (pred, gt) pairs, order preserved, with bounded thread parallelism.

    With skip_empty, an image emptied by a filter yields None instead of raising.
    """
    cfg = cfg or EvalConfig()
    workers = max(1, int(workers))

    def one(pair):
        return _evaluate_or_skip(pair[0], pair[1], cfg, skip_empty)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = pool.map(one, pairs)
        return list(tqdm(results, total=len(pairs), desc="eval", disable=not verbose))


def evaluate_range_sweep_batch(
    pairs: Sequence[Tuple[DepthMap, DepthMap]],
    thresholds: Iterable[float] = RANGE_PRESETS,
    cfg: Optional[EvalConfig] = None,
    mode: Aggregation = Aggregation.MEAN_OF_IMAGES,
    workers: int = 1,
    verbose: bool = False,
) -> Dict[float, Optional[MetricsReport]]:
    """
    Range sweep over a dataset: every pair goes through evaluate_range_sweep,
    then each threshold is aggregated over the images it did not empty.

    A threshold that empties every image maps to None.
    """
    cfg = cfg or EvalConfig()
    thresholds = [float(t) for t in thresholds]
    workers = max(1, int(workers))

    def one(pair):
        return evaluate_range_sweep(pair[0], pair[1], thresholds, cfg, skip_empty=True)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        sweeps = list(tqdm(pool.map(one, pairs), total=len(pairs), desc="range sweep", disable=not verbose))

    result = {}
    for t in thresholds:
        reports = [sweep[t] for sweep in sweeps if sweep[t] is not None]
        result[t] = aggregate(reports, mode) if reports else None
    return result
