"""
Tests for depth, mask and point-cloud files.
"""

import json

import numpy as np
import pytest

from core import BinaryMask, DepthMap
from depth_io import (
    DepthFileFormat,
    infer_format,
    read_depth,
    read_mask,
    read_pfm,
    read_pointcloud,
    read_raw_array,
    read_rawf32,
    sidecar_path,
    write_depth,
    write_mask,
    write_pfm,
    write_pointcloud,
    write_raw_array,
    write_report,
)
from errors import ArgumentError, FormatError
from geometry import backproject
from synthetic import constant_sphere, random_depth


def _assert_same_depth(a: DepthMap, b: DepthMap):
    np.testing.assert_array_equal(a.valid, b.valid)
    np.testing.assert_array_equal(a.values[a.valid], b.values[b.valid])


class TestFormats:
    def test_infer_from_suffix(self):
        assert infer_format("x.pfm").kind == "pfm"
        assert infer_format("x.PNG", png_scale=1000).scale == 1000
        assert infer_format("x.raw").kind == "rawf32"
        with pytest.raises(ArgumentError):
            infer_format("x.exr")

    def test_bad_format(self):
        with pytest.raises(ArgumentError):
            DepthFileFormat("tiff")
        with pytest.raises(ArgumentError):
            DepthFileFormat("png16", scale=0)


class TestLosslessFormats:
    @pytest.mark.parametrize("suffix", [".pfm", ".raw"])
    def test_bit_identical(self, tmp_path, suffix):
        for seed in range(50):
            depth = random_depth(8 + seed % 5, 4 + seed % 3, seed=seed, invalid_fraction=0.1)
            path = tmp_path / f"d{seed}{suffix}"
            write_depth(depth, path)
            _assert_same_depth(read_depth(path), depth)

    def test_pfm_rows_bottom_up(self, tmp_path):
        depth = DepthMap.from_array(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
        path = tmp_path / "d.pfm"
        write_pfm(depth, path)
        data = path.read_bytes()
        header = b"Pf\n2 2\n-1.0\n"
        assert data.startswith(header)
        first_row = np.frombuffer(data[len(header):len(header) + 8], dtype="<f4")
        np.testing.assert_array_equal(first_row, [3.0, 4.0])

    def test_big_endian_pfm(self, tmp_path):
        path = tmp_path / "be.pfm"
        payload = np.array([[5.0, 6.0]], dtype=">f4").tobytes()
        path.write_bytes(b"Pf\n2 1\n1.0\n" + payload)
        np.testing.assert_array_equal(read_pfm(path).values, [[5.0, 6.0]])

    def test_rawf32_sidecar(self, tmp_path):
        path = tmp_path / "d.raw"
        write_depth(random_depth(6, 3, seed=1), path)
        meta = json.loads(sidecar_path(path).read_text())
        assert meta == {"height": 3, "unit": "m", "width": 6}

    def test_multichannel_raw(self, tmp_path):
        values = np.arange(24, dtype=np.float32).reshape(2, 4, 3)
        path = tmp_path / "n.raw"
        write_raw_array(values, path)
        assert json.loads(sidecar_path(path).read_text())["channels"] == 3
        np.testing.assert_array_equal(read_raw_array(path), values)
        with pytest.raises(FormatError):
            read_rawf32(path)


class TestPng16:
    def test_quantisation_error(self, tmp_path):
        depth = random_depth(32, 16, seed=3, invalid_fraction=0.1)
        path = tmp_path / "d.png"
        write_depth(depth, path, DepthFileFormat("png16", scale=256.0))
        back = read_depth(path, DepthFileFormat("png16", scale=256.0))
        np.testing.assert_array_equal(back.valid, depth.valid)
        err = np.abs(back.values - depth.values)[depth.valid]
        assert err.max() <= 1.0 / (2 * 256.0) + 1e-6

    def test_zero_count_is_invalid(self, tmp_path):
        depth = DepthMap.from_array(np.array([[0.001, 1.0]]))
        path = tmp_path / "d.png"
        write_depth(depth, path)
        back = read_depth(path)
        np.testing.assert_array_equal(back.valid, [[False, True]])


class TestMalformed:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pfm"
        path.write_bytes(b"P6\n2 2\n-1.0\n" + bytes(16))
        with pytest.raises(FormatError) as info:
            read_pfm(path)
        assert info.value.offset == 0

    def test_color_pfm_rejected(self, tmp_path):
        path = tmp_path / "color.pfm"
        path.write_bytes(b"PF\n1 1\n-1.0\n" + bytes(12))
        with pytest.raises(FormatError):
            read_pfm(path)

    def test_bad_dimensions(self, tmp_path):
        path = tmp_path / "bad.pfm"
        path.write_bytes(b"Pf\ntwo 2\n-1.0\n" + bytes(16))
        with pytest.raises(FormatError) as info:
            read_pfm(path)
        assert info.value.offset == 3

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.pfm"
        data = b"Pf\n4 4\n-1.0\n" + bytes(20)
        path.write_bytes(data)
        with pytest.raises(FormatError) as info:
            read_pfm(path)
        assert info.value.offset == len(data)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "header.pfm"
        path.write_bytes(b"Pf\n4 4")
        with pytest.raises(FormatError):
            read_pfm(path)

    def test_raw_size_mismatch(self, tmp_path):
        path = tmp_path / "d.raw"
        write_depth(random_depth(4, 2, seed=0), path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError) as info:
            read_depth(path)
        assert info.value.offset == 28

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArgumentError):
            read_depth(tmp_path / "nope.pfm")


class TestPointCloud:
    def test_header_counts_valid_points(self, tmp_path):
        valid = np.zeros((2, 4), dtype=bool)
        valid[0, :3] = True
        depth = DepthMap(values=np.full((2, 4), 2.0), valid=valid)
        path = tmp_path / "cloud.ply"
        assert write_pointcloud(backproject(depth), path) == 3
        assert b"element vertex 3" in path.read_bytes()
        assert len(read_pointcloud(path)) == 3

    def test_sphere_radius(self, tmp_path):
        path = tmp_path / "sphere.ply"
        write_pointcloud(backproject(constant_sphere(16, 8, radius=2.0)), path)
        points = read_pointcloud(path)
        assert len(points) == 128
        np.testing.assert_allclose(np.linalg.norm(points, axis=1), 2.0, rtol=1e-6)

    def test_empty_cloud_rejected(self, tmp_path):
        depth = DepthMap(values=np.ones((2, 4)), valid=np.zeros((2, 4), dtype=bool))
        with pytest.raises(ArgumentError):
            write_pointcloud(backproject(depth), tmp_path / "empty.ply")


class TestMasksAndReports:
    def test_hard_mask_round_trip(self, tmp_path):
        mask = BinaryMask(np.array([[0.0, 1.0], [1.0, 0.0]]))
        path = tmp_path / "m.png"
        write_mask(mask, path)
        np.testing.assert_array_equal(read_mask(path).values, mask.values)

    def test_soft_mask_quantised(self, tmp_path):
        mask = BinaryMask(np.array([[0.3, 0.7]]))
        path = tmp_path / "m.png"
        write_mask(mask, path)
        np.testing.assert_allclose(read_mask(path).values, mask.values, atol=0.5 / 255.0)

    def test_report_sorted(self, tmp_path):
        path = tmp_path / "out" / "r.json"
        write_report({"b": 1, "a": 2}, path)
        text = path.read_text()
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": 2, "b": 1}
