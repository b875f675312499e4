import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from ililt.raster import (
    BinaryImage,
    GrayImage,
    avg_pool,
    binarize,
    extract_edges,
    load_png,
    save_png,
    to_bytes,
    upsample_bicubic,
)

unit_images = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.floats(0, 1))


def _write_raw(path, arr, mode="L"):
    Image.fromarray(arr, mode=mode).save(path)


class TestContainers:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            GrayImage(np.full((2, 2), 1.5))

    def test_rejects_bad_pixel_size(self):
        with pytest.raises(ValueError):
            GrayImage(np.zeros((2, 2)), pixel_size=0)

    def test_binary_requires_01(self):
        with pytest.raises(ValueError):
            BinaryImage(np.full((2, 2), 0.5))

    def test_data_is_read_only(self):
        img = GrayImage(np.zeros((3, 3)))
        with pytest.raises(ValueError):
            img.data[0, 0] = 1


class TestPng:
    def test_black(self, tmp_path):
        _write_raw(tmp_path / "a.png", np.zeros((16, 16), np.uint8))
        img = load_png(tmp_path / "a.png")
        assert img.shape == (16, 16) and np.all(img.data == 0)
        assert img.pixel_size == 1.0

    def test_white(self, tmp_path):
        _write_raw(tmp_path / "a.png", np.full((16, 16), 255, np.uint8))
        assert np.all(load_png(tmp_path / "a.png").data == 1)

    def test_single_byte_matches_reference_decoder(self, tmp_path):
        raw = np.zeros((16, 16), np.uint8)
        raw[3, 4] = 128
        _write_raw(tmp_path / "a.png", raw)
        img = load_png(tmp_path / "a.png")
        with Image.open(tmp_path / "a.png") as ref:
            ref_bytes = np.array(ref)
        assert np.array_equal(ref_bytes, raw)
        assert img.data[3, 4] == 128 / 255
        assert np.count_nonzero(img.data) == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_png(tmp_path / "nope.png")

    @pytest.mark.parametrize("mode", ["RGB", "I;16"])
    def test_rejects_other_modes(self, tmp_path, mode):
        if mode == "RGB":
            _write_raw(tmp_path / "a.png", np.zeros((4, 4, 3), np.uint8), mode)
        else:
            Image.fromarray(np.zeros((4, 4), np.uint16)).save(tmp_path / "a.png")
        with pytest.raises(ValueError):
            load_png(tmp_path / "a.png")

    def test_zeros_and_ones_round_trip(self, tmp_path):
        for v in (0.0, 1.0):
            save_png(GrayImage(np.full((8, 8), v)), tmp_path / "x.png")
            assert np.all(load_png(tmp_path / "x.png").data == v)

    def test_random_round_trip_within_quantization(self, tmp_path):
        arr = np.random.default_rng(0).random((32, 32))
        save_png(GrayImage(arr), tmp_path / "r.png")
        back = load_png(tmp_path / "r.png").data
        assert np.max(np.abs(back - arr)) <= 1 / 510 + 1e-12

    @settings(max_examples=25, deadline=None)
    @given(unit_images)
    def test_bytes_are_lossless(self, tmp_path_factory, arr):
        path = tmp_path_factory.mktemp("png") / "h.png"
        save_png(arr, path)
        assert np.array_equal(to_bytes(load_png(path)), to_bytes(arr))

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            save_png(np.zeros((2, 2)), tmp_path / "missing_dir" / "x.png")


class TestBinarize:
    def test_zero_and_one(self):
        assert np.all(binarize(np.zeros((4, 4)), 0.5).data == 0)
        assert np.all(binarize(np.ones((4, 4)), 0.5).data == 1)

    def test_strict_inequality(self):
        assert binarize(np.array([[0.5]]), 0.5).data[0, 0] == 0

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            binarize(np.zeros((2, 2)), 1.0)

    @settings(max_examples=30, deadline=None)
    @given(unit_images, st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_monotone_in_threshold(self, arr, a, b):
        lo, hi = sorted((a, b))
        assert np.all(binarize(arr, hi).data <= binarize(arr, lo).data)


class TestPooling:
    def test_constant(self):
        img = avg_pool(GrayImage(np.full((8, 8), 0.3), 2.0), 4)
        assert np.allclose(img.data, 0.3) and img.pixel_size == 8.0

    def test_checkerboard(self):
        assert avg_pool(np.array([[0.0, 1.0], [1.0, 0.0]]), 2).data[0, 0] == 0.5

    def test_matches_block_loop(self):
        arr = np.random.default_rng(1).random((8, 8))
        expected = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                expected[i, j] = sum(arr[4 * i + a, 4 * j + b] for a in range(4) for b in range(4)) / 16
        assert np.allclose(avg_pool(arr, 4).data, expected, atol=1e-15)

    def test_non_divisible(self):
        with pytest.raises(ValueError):
            avg_pool(np.zeros((6, 6)), 4)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (8, 12), elements=st.floats(0, 1)))
    def test_preserves_mean(self, arr):
        assert np.isclose(avg_pool(arr, 4).data.mean(), arr.mean(), atol=1e-12)


class TestUpsample:
    def test_constant(self):
        up = upsample_bicubic(np.full((6, 5), 0.7), 3)
        assert up.shape == (18, 15) and np.allclose(up.data, 0.7)

    def test_identity(self):
        arr = np.random.default_rng(2).random((5, 5))
        assert np.array_equal(upsample_bicubic(arr, 1).data, arr)

    def test_linear_ramp_interior(self):
        n, f = 16, 4
        ramp = np.tile(np.linspace(0.1, 0.9, n), (n, 1))
        up = upsample_bicubic(ramp, f).data
        # analytic: sample positions (j + 0.5)/f - 0.5 in source pixel coords
        src = (np.arange(n * f) + 0.5) / f - 0.5
        expected = 0.1 + (0.9 - 0.1) * src / (n - 1)
        interior = slice(2 * f, (n - 2) * f)
        assert np.max(np.abs(up[:, interior] - expected[None, interior])) < 1e-6

    def test_clamped(self):
        arr = np.zeros((8, 8))
        arr[4:, :] = 1
        up = upsample_bicubic(arr, 4).data
        assert up.min() >= 0 and up.max() <= 1


def _boundary_scan(arr, ps):
    """Count 4-neighbour 0/1 transitions with zero padding."""
    p = np.pad(arr, 1)
    count = 0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            if i + 1 < p.shape[0] and p[i, j] != p[i + 1, j]:
                count += 1
            if j + 1 < p.shape[1] and p[i, j] != p[i, j + 1]:
                count += 1
    return count * ps


class TestEdges:
    def test_empty(self):
        assert extract_edges(np.zeros((8, 8))) == []

    def test_square(self):
        arr = np.zeros((20, 20))
        arr[5:15, 5:15] = 1
        segs = extract_edges(BinaryImage(arr, 1.0))
        assert len(segs) == 4
        assert all(s.length == 10 for s in segs)
        centre = 10.0
        for s in segs:
            # moving from the edge line toward the centre must follow inside_direction
            assert np.sign(centre - s.fixed_coord) == s.inside_direction

    def test_two_rectangles_match_boundary_scan(self):
        arr = np.zeros((32, 32))
        arr[3:10, 4:20] = 1
        arr[15:28, 22:27] = 1
        segs = extract_edges(BinaryImage(arr, 2.0))
        assert len(segs) == 8
        assert sum(s.length for s in segs) == _boundary_scan(arr, 2.0)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.int8, st.tuples(st.integers(1, 10), st.integers(1, 10)), elements=st.integers(0, 1)))
    def test_total_length_equals_transition_count(self, arr):
        segs = extract_edges(arr.astype(float))
        assert np.isclose(sum(s.length for s in segs), _boundary_scan(arr, 1.0))

    def test_inside_points_to_ones(self):
        arr = np.zeros((12, 12))
        arr[2:9, 3:7] = 1
        arr[4:6, 7:10] = 1  # L-shape
        for s in extract_edges(arr):
            mid = int((s.span_start + s.span_end) / 2)
            b = int(s.fixed_coord)
            inside = b if s.inside_direction > 0 else b - 1
            if s.axis == "horizontal":
                assert arr[inside, mid] == 1
            else:
                assert arr[mid, inside] == 1
