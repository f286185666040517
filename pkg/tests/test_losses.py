"""
Loss-term values against hand calculations and straight-line oracles.
"""

import numpy as np
import pytest

from conftest import depth_of
from core import BinaryMask, DepthMap, RangeThreshold, gt_range_mask
from errors import ArgumentError, EmptyOverlapError
from geometry import ErpGrid, distortion_map
from losses import (
    DF_EPS,
    SILOG_LAMBDA,
    TERM_NAMES,
    LossConfig,
    LossWeights,
    df_gram,
    grad_loss,
    mask_loss,
    normal_loss,
    pts_loss,
    silog,
    sobel_edge_mask,
    total_loss,
)
from reproject import icosahedron_rig
from synthetic import constant_sphere, perturbed, random_depth, step_edge


def _brute_silog(pred: np.ndarray, gt: np.ndarray, pixels, lam: float = SILOG_LAMBDA) -> float:
    d = [np.log(pred[i, j]) - np.log(gt[i, j]) for i, j in pixels]
    mean = sum(d) / len(d)
    mean_sq = sum(x * x for x in d) / len(d)
    return mean_sq - lam * mean * mean


def _brute_bilinear(values: np.ndarray, u: float, v: float) -> float:
    height, width = values.shape
    j0, i0 = int(np.floor(u)), int(np.floor(v))
    fu, fv = u - j0, v - i0
    out = 0.0
    for di, dj, w in ((0, 0, (1 - fu) * (1 - fv)), (0, 1, fu * (1 - fv)), (1, 0, (1 - fu) * fv), (1, 1, fu * fv)):
        row = min(max(i0 + di, 0), height - 1)
        col = (j0 + dj) % width
        out += w * values[row, col]
    return out


def _brute_df(pred: DepthMap, gt: DepthMap, rig) -> float:
    height, width = pred.shape
    terms = []
    for cam in rig:
        rays = cam.pixel_rays()
        size = cam.size
        patches = []
        for depth in (pred, gt):
            values = depth.filled(0.0)
            patch = np.zeros((size, size))
            for r in range(size):
                for c in range(size):
                    x, y, z = rays[r, c]
                    theta = np.arctan2(x, z)
                    phi = np.arcsin(y)
                    u = ((theta + np.pi) / (2 * np.pi) * width - 0.5) % width
                    v = (np.pi / 2 - phi) / np.pi * height - 0.5
                    patch[r, c] = _brute_bilinear(values, u, v)
            patches.append(patch)
        mean_p, mean_g = patches[0].mean(), patches[1].mean()
        std_p = np.sqrt(((patches[0] - mean_p) ** 2).mean())
        std_g = np.sqrt(((patches[1] - mean_g) ** 2).mean())
        xp = (patches[0] - mean_p) / (std_p + DF_EPS)
        xg = (patches[1] - mean_g) / (std_g + DF_EPS)
        diff = xp @ xp.T - xg @ xg.T
        terms.append((diff ** 2).sum() / size ** 2)
    return float(np.mean(terms))


class TestSilog:
    def test_identity(self):
        d = random_depth(16, 8, seed=1)
        assert silog(d, d).value == pytest.approx(0.0, abs=1e-12)

    def test_uniform_scale_by_e(self):
        gt = random_depth(16, 8, seed=2, dtype=np.float64)
        pred = gt.with_values(gt.values * np.e)
        assert silog(pred, gt).value == pytest.approx(1.0 - SILOG_LAMBDA)

    def test_hand_value(self):
        result = silog(depth_of([[np.e, 1.0 / np.e]]), depth_of([[1.0, 1.0]]))
        assert result.value == pytest.approx(1.0)
        assert result.count == 2

    def test_argmin_at_unit_scale(self):
        gt = random_depth(16, 8, seed=3, dtype=np.float64)
        pred = perturbed(gt, seed=4, sigma=0.2)
        scales = np.linspace(0.5, 2.0, 31)
        values = [silog(gt.with_values(gt.values * c), gt).value for c in scales]
        assert scales[int(np.argmin(values))] == pytest.approx(1.0)
        assert silog(pred, gt).value > 0

    def test_empty_overlap(self):
        pred = DepthMap(values=np.ones((1, 2)), valid=np.array([[True, False]]))
        gt = DepthMap(values=np.ones((1, 2)), valid=np.array([[False, True]]))
        with pytest.raises(EmptyOverlapError):
            silog(pred, gt)


class TestDfGram:
    def test_constants_give_zero(self):
        rig = icosahedron_rig(size=8)
        result = df_gram(constant_sphere(32, 16, 2.0), constant_sphere(32, 16, 7.0), rig)
        assert result.value == pytest.approx(0.0, abs=1e-12)
        assert result.count == 12

    def test_affine_invariance(self):
        rig = icosahedron_rig(size=8)
        gt = random_depth(32, 16, seed=5, low=1.0, high=10.0, dtype=np.float64)
        pred = random_depth(32, 16, seed=6, low=1.0, high=10.0, dtype=np.float64)
        base = df_gram(pred, gt, rig).value
        moved = df_gram(pred.with_values(3.0 * pred.values + 5.0), gt.with_values(0.5 * gt.values + 1.0), rig).value
        assert base > 0
        assert moved == pytest.approx(base, rel=1e-6)

    def test_matches_brute_force(self):
        rig = icosahedron_rig(size=16)
        gt = random_depth(64, 32, seed=7, dtype=np.float64)
        pred = perturbed(gt, seed=8)
        assert df_gram(pred, gt, rig).value == pytest.approx(_brute_df(pred, gt, rig), rel=1e-6)

    def test_view_without_pixels_is_dropped(self):
        rig = icosahedron_rig(size=8)
        values = np.full((16, 32), 2.0)
        valid = np.zeros((16, 32), dtype=bool)
        valid[:, :4] = True
        result = df_gram(DepthMap(values=values, valid=valid), DepthMap(values=values, valid=valid), rig)
        assert result.count < 12

    def test_no_valid_view_raises(self):
        empty = DepthMap(values=np.ones((16, 32)), valid=np.zeros((16, 32), dtype=bool))
        with pytest.raises(EmptyOverlapError):
            df_gram(empty, empty, icosahedron_rig(size=8))


class TestSobelEdgeMask:
    def test_constant_is_empty(self):
        assert sobel_edge_mask(constant_sphere(32, 16, 2.0)).is_empty

    def test_step_edge_band(self):
        edge = sobel_edge_mask(step_edge(64, 16))
        cols = set(np.nonzero(edge.mask.any(axis=0))[0].tolist())
        # the step at column 32 and its wrap-around twin at the seam
        assert cols == {0, 31, 32, 63}

    def test_wide_band_survives_default_percentile(self):
        # four of sixteen columns share the top magnitude
        edge = sobel_edge_mask(step_edge(16, 8))
        cols = set(np.nonzero(edge.mask.any(axis=0))[0].tolist())
        assert cols == {0, 7, 8, 15}
        assert edge.mask[:, [0, 7, 8, 15]].all()

    def test_random_covers_top_decile(self):
        depth = random_depth(128, 64, seed=9)
        edge = sobel_edge_mask(depth, 90.0)
        assert edge.mask.mean() == pytest.approx(0.10, abs=0.01)

    def test_all_invalid_gives_empty_mask(self):
        d = DepthMap(values=np.ones((8, 16)), valid=np.zeros((8, 16), dtype=bool))
        assert sobel_edge_mask(d).is_empty

    def test_bad_arguments(self):
        with pytest.raises(ArgumentError):
            sobel_edge_mask(constant_sphere(16, 8), 100.0)
        with pytest.raises(ArgumentError):
            sobel_edge_mask(depth_of(np.ones((2, 8))))


class TestGradLoss:
    def test_empty_mask_is_zero(self):
        gt = constant_sphere(32, 16, 2.0)
        pred = perturbed(gt, seed=1)
        result = grad_loss(pred, gt, sobel_edge_mask(gt))
        assert result.value == 0.0
        assert result.count == 0
        assert not result.gradient.any()

    def test_matches_brute_force_on_edge_pixels(self):
        gt = step_edge(16, 8, near=1.0, far=4.0)
        pred = perturbed(gt, seed=11, sigma=0.3)
        edge = sobel_edge_mask(gt)
        pixels = list(zip(*np.nonzero(edge.mask)))
        assert pixels
        value = grad_loss(pred, gt, edge).value
        assert value == pytest.approx(_brute_silog(pred.values, gt.values, pixels), abs=1e-6)


class TestNormalLoss:
    def test_identity(self):
        d = random_depth(32, 16, seed=2, dtype=np.float64)
        assert normal_loss(d, d).value == 0.0

    def test_uniform_scale(self):
        gt = random_depth(32, 16, seed=3, dtype=np.float64)
        assert normal_loss(gt.with_values(4.0 * gt.values), gt).value < 1e-9

    def test_perturbation_is_positive(self):
        gt = random_depth(32, 16, seed=4, dtype=np.float64)
        assert normal_loss(perturbed(gt, seed=5), gt).value > 0


class TestPtsLoss:
    def test_single_forward_pixel(self):
        valid = np.zeros((3, 3), dtype=bool)
        valid[1, 1] = True
        gt = DepthMap(values=np.ones((3, 3)), valid=valid)
        pred = DepthMap(values=np.full((3, 3), 2.0), valid=valid)
        result = pts_loss(pred, gt)
        assert result.value == pytest.approx(1.0)
        assert result.count == 1

    def test_per_pixel_identity(self, rng):
        gt = random_depth(16, 8, seed=6, dtype=np.float64)
        pred = perturbed(gt, seed=7)
        rays = ErpGrid.of(gt).rays()
        for _ in range(10):
            i, j = int(rng.integers(8)), int(rng.integers(16))
            valid = np.zeros((8, 16), dtype=bool)
            valid[i, j] = True
            one = pts_loss(DepthMap(values=pred.values, valid=valid), DepthMap(values=gt.values, valid=valid))
            brute = np.abs(pred.values[i, j] * rays[i, j] - gt.values[i, j] * rays[i, j]).sum()
            assert one.value == pytest.approx(brute, rel=1e-12)


class TestMaskLoss:
    def test_two_pixel_hand_value(self):
        result = mask_loss(BinaryMask(np.array([[1.0, 0.0]])), BinaryMask(np.array([[1.0, 1.0]])))
        assert result.value == pytest.approx(0.5 + 0.5 / 3.0, abs=1e-4)

    def test_dice_one_third(self):
        result = mask_loss(BinaryMask(np.array([[1.0, 1.0, 0.0, 0.0]])), BinaryMask(np.array([[1.0, 0.0, 0.0, 0.0]])))
        mse = 0.25
        assert (result.value - mse) / 0.5 == pytest.approx(1.0 / 3.0, abs=1e-4)

    def test_perfect_mask(self):
        m = BinaryMask(np.array([[1.0, 0.0, 1.0]]))
        assert mask_loss(m, m).value == pytest.approx(0.0, abs=1e-6)

    def test_bce_variant(self):
        pred = BinaryMask(np.array([[0.5, 0.5]]))
        gt = BinaryMask(np.array([[1.0, 0.0]]))
        result = mask_loss(pred, gt, variant="bce_dice")
        dice = 1.0 - (2 * 0.5 + 1e-6) / (1.0 + 1.0 + 1e-6)
        assert result.value == pytest.approx(np.log(2.0) + 0.5 * dice)

    def test_unknown_variant(self):
        m = BinaryMask(np.zeros((1, 2)))
        with pytest.raises(ArgumentError):
            mask_loss(m, m, variant="focal")


def _embed_in_invalid(depth: DepthMap) -> DepthMap:
    """3x finer ERP grid whose only valid pixels share the rays of the original ones."""
    height, width = depth.shape
    values = np.ones((3 * height, 3 * width))
    valid = np.zeros((3 * height, 3 * width), dtype=bool)
    values[1::3, 1::3] = depth.filled(1.0)
    valid[1::3, 1::3] = depth.valid
    return DepthMap(values=values, valid=valid)


def _nudge(depth: DepthMap, i: int, j: int, factor: float = 1.1) -> DepthMap:
    values = depth.values.astype(np.float64)
    values[i, j] *= factor
    return depth.with_values(values)


class TestInvalidPixelPadding:
    @pytest.mark.parametrize("term", [silog, pts_loss])
    @pytest.mark.parametrize("use_distortion", [False, True])
    def test_mean_ignores_appended_invalid_pixels(self, term, use_distortion):
        gt = random_depth(16, 8, seed=21, invalid_fraction=0.2, dtype=np.float64)
        pred = perturbed(gt, seed=22)
        big_pred, big_gt = _embed_in_invalid(pred), _embed_in_invalid(gt)
        small_w = distortion_map(ErpGrid.of(gt)) if use_distortion else None
        big_w = distortion_map(ErpGrid.of(big_gt)) if use_distortion else None

        small = term(pred, gt, small_w)
        big = term(big_pred, big_gt, big_w)
        assert big.value == pytest.approx(small.value, rel=1e-9)
        assert big.count == small.count
        np.testing.assert_allclose(big.gradient[1::3, 1::3], small.gradient, rtol=1e-9, atol=1e-15)
        assert not big.gradient[~big_pred.valid].any()


class TestPerturbationIsPositive:
    @staticmethod
    def _gt():
        return random_depth(32, 16, seed=31, dtype=np.float64)

    @pytest.mark.parametrize("use_distortion", [False, True])
    def test_silog(self, use_distortion):
        gt = self._gt()
        w = distortion_map(ErpGrid.of(gt)) if use_distortion else None
        assert silog(gt, gt, w).value == pytest.approx(0.0, abs=1e-12)
        assert silog(_nudge(gt, 5, 7), gt, w).value > 0.0

    def test_df(self):
        gt = self._gt()
        rig = icosahedron_rig(size=16)
        assert df_gram(gt, gt, rig).value == pytest.approx(0.0, abs=1e-12)
        # the equator pixel facing +z lies inside the patch of an upper vertex
        assert df_gram(_nudge(gt, 8, 16), gt, rig).value > 0.0

    @pytest.mark.parametrize("use_distortion", [False, True])
    def test_grad(self, use_distortion):
        gt = step_edge(32, 16)
        edge = sobel_edge_mask(gt)
        assert edge.mask[4, 16]
        w = distortion_map(ErpGrid.of(gt)) if use_distortion else None
        assert grad_loss(gt, gt, edge, w).value == pytest.approx(0.0, abs=1e-12)
        assert grad_loss(_nudge(gt, 4, 16), gt, edge, w).value > 0.0

    @pytest.mark.parametrize("use_distortion", [False, True])
    def test_normal(self, use_distortion):
        gt = self._gt()
        w = distortion_map(ErpGrid.of(gt)) if use_distortion else None
        assert normal_loss(_nudge(gt, 6, 10), gt, w).value > 0.0

    @pytest.mark.parametrize("use_distortion", [False, True])
    def test_pts(self, use_distortion):
        gt = self._gt()
        w = distortion_map(ErpGrid.of(gt)) if use_distortion else None
        assert pts_loss(gt, gt, w).value == 0.0
        assert pts_loss(_nudge(gt, 0, 0), gt, w).value > 0.0

    @pytest.mark.parametrize("variant", ["mse_dice", "bce_dice"])
    def test_mask(self, variant):
        gt_mask = gt_range_mask(self._gt(), RangeThreshold(20.0))
        soft = gt_mask.values.copy()
        soft[3, 3] = 0.5
        perfect = mask_loss(gt_mask, gt_mask, variant=variant).value
        assert mask_loss(BinaryMask(soft), gt_mask, variant=variant).value > perfect


class TestTotalLoss:
    @staticmethod
    def _instance(seed: int = 0):
        gt = random_depth(32, 16, seed=seed, dtype=np.float64)
        pred = perturbed(gt, seed=seed + 1)
        pred_mask = BinaryMask(np.random.default_rng(seed).uniform(0.1, 0.9, size=gt.shape))
        gt_mask = gt_range_mask(gt, RangeThreshold(20.0))
        return pred, gt, pred_mask, gt_mask

    def test_default_weights(self):
        assert LossWeights().as_tuple() == (1.0, 0.4, 5.0, 2.0, 2.0, 2.0)
        assert LossConfig().use_distortion

    def test_identity_is_zero(self):
        _, gt, _, gt_mask = self._instance()
        report = total_loss(gt, gt, gt_mask, gt_mask, rig=icosahedron_rig(size=8))
        assert report.total == pytest.approx(0.0, abs=1e-9)
        assert all(abs(v) < 1e-9 for v in report.terms.values())

    def test_hand_sum_without_distortion(self):
        pred, gt, pred_mask, gt_mask = self._instance(3)
        rig = icosahedron_rig(size=8)
        report = total_loss(pred, gt, pred_mask, gt_mask, rig=rig, use_distortion=False)

        parts = {
            "silog": silog(pred, gt).value,
            "df": df_gram(pred, gt, rig).value,
            "grad": grad_loss(pred, gt, sobel_edge_mask(gt)).value,
            "normal": normal_loss(pred, gt).value,
            "pts": pts_loss(pred, gt).value,
            "mask": mask_loss(pred_mask, gt_mask).value,
        }
        expected = sum(lam * parts[name] for name, lam in zip(TERM_NAMES, LossWeights().as_tuple()))
        assert report.total == pytest.approx(expected, rel=1e-7)
        assert not report.use_distortion

    def test_zero_weight_term_is_skipped(self):
        pred, gt, _, _ = self._instance(4)
        weights = LossWeights(df=0.0, normal=0.0)
        report = total_loss(pred, gt, weights=weights, rig=icosahedron_rig(size=8))
        assert report.counts["df"] == 0 and report.terms["df"] == 0.0
        assert report.counts["normal"] == 0
        assert report.counts["mask"] == 0
        assert report.mask_gradient is None
        assert report.counts["silog"] > 0

    def test_distortion_changes_value(self):
        pred, gt, _, _ = self._instance(5)
        weights = LossWeights(df=0.0, grad=0.0, normal=0.0, pts=0.0, mask=0.0)
        plain = total_loss(pred, gt, weights=weights, use_distortion=False).total
        weighted = total_loss(pred, gt, weights=weights, use_distortion=True).total
        assert plain != pytest.approx(weighted)

    def test_df_term_ignores_distortion(self):
        pred, gt, _, _ = self._instance(7)
        rig = icosahedron_rig(size=8)
        plain = total_loss(pred, gt, rig=rig, use_distortion=False)
        weighted = total_loss(pred, gt, rig=rig, use_distortion=True)
        assert weighted.terms["df"] == plain.terms["df"]
        assert weighted.terms["silog"] != pytest.approx(plain.terms["silog"])

    def test_report_serialises(self):
        pred, gt, pred_mask, gt_mask = self._instance(6)
        report = total_loss(pred, gt, pred_mask, gt_mask, rig=icosahedron_rig(size=8)).to_dict()
        assert set(report["terms"]) == set(TERM_NAMES)
        assert report["weights"]["grad"] == 5.0

    def test_weights_reject_negative(self):
        with pytest.raises(ArgumentError):
            LossWeights(silog=-1.0)
