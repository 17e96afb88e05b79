"""Rotation, resampling, and tensor-file behavior of the grid substrate."""

import math

import numpy as np
import pytest

from symdec.grid import (
    CsymFormatError,
    GridError,
    RotationAngle,
    Tensor,
    ops,
    read_tensor,
    rotate90,
    rotate_bilinear,
    bilinear_upsample,
    write_tensor,
)


def rotate90_oracle(grid: np.ndarray, k: int) -> np.ndarray:
    """Independent oracle: loop every coordinate through the 2x2 rotation matrix."""
    c, h, w = grid.shape
    assert h == w
    theta = k * math.pi / 2.0
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    ctr = (h - 1) / 2.0
    out = np.zeros_like(grid)
    for x in range(h):
        for y in range(w):
            xs = cos_t * (x - ctr) + sin_t * (y - ctr) + ctr
            ys = -sin_t * (x - ctr) + cos_t * (y - ctr) + ctr
            out[:, x, y] = grid[:, round(xs), round(ys)]
    return out


class TestRotate90:
    def test_identity_element(self):
        rng = np.random.default_rng(0)
        g = Tensor(rng.standard_normal((3, 4, 4)).astype(np.float32))
        assert np.array_equal(rotate90(g, 0).data, g.data)

    def test_quarter_turn_matches_rotation_matrix_oracle(self):
        g = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
        got = rotate90(Tensor(g), 1).data
        assert np.array_equal(got, rotate90_oracle(g, 1))
        assert np.array_equal(got, np.array([[[2.0, 4.0], [1.0, 3.0]]], dtype=np.float32))

    @pytest.mark.parametrize("k", [0, 1, 2, 3])
    @pytest.mark.parametrize("size", [1, 2, 3, 6, 7])
    def test_all_turns_match_oracle(self, k, size):
        rng = np.random.default_rng(7 * size + k)
        g = rng.standard_normal((2, size, size)).astype(np.float32)
        assert np.array_equal(rotate90(Tensor(g), k).data, rotate90_oracle(g, k))

    def test_inverse_composition_is_identity(self):
        rng = np.random.default_rng(3)
        for k in range(4):
            g = Tensor(rng.standard_normal((2, 5, 5)).astype(np.float32))
            back = rotate90(rotate90(g, k), 4 - k)
            assert np.array_equal(back.data, g.data)

    def test_value_multiset_preserved(self):
        rng = np.random.default_rng(4)
        g = rng.standard_normal((1, 6, 6)).astype(np.float32)
        rot = rotate90(Tensor(g), 1).data
        assert np.array_equal(np.sort(rot.ravel()), np.sort(g.ravel()))

    def test_non_square_rejected(self):
        with pytest.raises(GridError):
            rotate90(Tensor(np.zeros((1, 2, 3), dtype=np.float32)), 1)

    def test_k_interpreted_mod_4(self):
        rng = np.random.default_rng(5)
        g = Tensor(rng.standard_normal((1, 3, 3)).astype(np.float32))
        assert np.array_equal(rotate90(g, 5).data, rotate90(g, 1).data)
        assert np.array_equal(rotate90(g, -1).data, rotate90(g, 3).data)


class TestRotateBilinear:
    def test_zero_angle_identity(self):
        rng = np.random.default_rng(0)
        g = Tensor(rng.standard_normal((2, 5, 5)).astype(np.float32))
        assert np.array_equal(rotate_bilinear(g, 0.0).data, g.data)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_quarter_angles_match_rotate90(self, k):
        rng = np.random.default_rng(k)
        g = Tensor(rng.standard_normal((2, 6, 6)).astype(np.float32))
        got = rotate_bilinear(g, RotationAngle(90.0 * k)).data
        assert np.max(np.abs(got - rotate90(g, k).data)) < 1e-6

    @pytest.mark.parametrize("angle", [13.0, 45.0, 101.5, 260.25])
    def test_center_impulse_preserved(self, angle):
        g = np.zeros((1, 7, 7), dtype=np.float32)
        g[0, 3, 3] = 1.0
        out = rotate_bilinear(Tensor(g), angle).data
        assert out[0, 3, 3] == pytest.approx(1.0, abs=1e-7)

    def test_out_of_bounds_reads_pad(self):
        g = Tensor(np.ones((1, 4, 4), dtype=np.float32))
        out = rotate_bilinear(g, 45.0, pad=5.0).data
        # grid corners leave the source square under a 45 degree turn
        assert out[0, 0, 0] > 1.0

    def test_rotation_angle_normalization(self):
        assert RotationAngle(450.0).degrees == 90.0
        assert RotationAngle(450.0).exact
        assert not RotationAngle(44.0).exact


class TestBilinearUpsample:
    def test_constant_grid_exact(self):
        g = Tensor(np.full((2, 3, 3), 0.37, dtype=np.float32))
        out = bilinear_upsample(g, 3).data
        assert out.shape == (2, 9, 9)
        assert np.array_equal(out, np.full((2, 9, 9), np.float32(0.37)))

    def test_hand_evaluated_two_by_two(self):
        # corners-aligned factor 2: source positions are i * (H-1) / (fH-1)
        g = Tensor(np.array([[[0.0, 1.0], [0.0, 1.0]]], dtype=np.float32))
        out = bilinear_upsample(g, 2).data
        expected_row = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
        assert out.shape == (1, 4, 4)
        for r in range(4):
            np.testing.assert_allclose(out[0, r], expected_row, atol=1e-7)

    def test_commutes_with_rotate90(self):
        rng = np.random.default_rng(11)
        g = Tensor(rng.standard_normal((2, 5, 5)).astype(np.float32))
        a = bilinear_upsample(rotate90(g, 1), 2).data
        b = rotate90(bilinear_upsample(g, 2), 1).data
        assert np.max(np.abs(a - b)) < 1e-6

    def test_corner_samples_coincide(self):
        rng = np.random.default_rng(12)
        g = rng.standard_normal((1, 4, 4)).astype(np.float32)
        out = bilinear_upsample(Tensor(g), 4).data
        assert out[0, 0, 0] == g[0, 0, 0]
        assert out[0, -1, -1] == g[0, -1, -1]
        assert out[0, 0, -1] == g[0, 0, -1]

    def test_factor_one_identity(self):
        g = Tensor(np.arange(9, dtype=np.float32).reshape(1, 3, 3))
        assert np.array_equal(bilinear_upsample(g, 1).data, g.data)

    def test_bad_factor_rejected(self):
        with pytest.raises(GridError):
            bilinear_upsample(Tensor(np.zeros((1, 2, 2), dtype=np.float32)), 0)


class TestTensorBasics:
    def test_data_is_frozen(self):
        t = Tensor(np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            t.data[0, 0] = 1.0

    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32
        assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64

    def test_integer_payload_rejected_without_cast(self):
        t = Tensor([1, 2, 3])
        assert t.dtype == np.float32

    def test_shape_data_consistency(self):
        t = Tensor(np.zeros((2, 3, 4), dtype=np.float32))
        assert t.size == 24
        assert t.shape == (2, 3, 4)


class TestCsymFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((3, 4, 5)).astype(np.float32)
        path = tmp_path / "t.csym"
        write_tensor(path, arr)
        back = read_tensor(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "t.csym"
        write_tensor(path, np.zeros((4, 4), dtype=np.float32))
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(CsymFormatError, match="payload"):
            read_tensor(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "t.csym"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CsymFormatError, match="magic"):
            read_tensor(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "t.csym"
        write_tensor(path, np.zeros(3, dtype=np.float32))
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(CsymFormatError, match="version"):
            read_tensor(path)

    def test_deterministic_bytes(self, tmp_path):
        arr = np.linspace(0, 1, 12, dtype=np.float32).reshape(3, 4)
        a, b = tmp_path / "a.csym", tmp_path / "b.csym"
        write_tensor(a, arr)
        write_tensor(b, arr)
        assert a.read_bytes() == b.read_bytes()


class TestResize:
    def test_resize_identity_when_same_size(self):
        rng = np.random.default_rng(1)
        g = Tensor(rng.standard_normal((2, 5, 5)).astype(np.float32))
        out = ops.bilinear_resize(g, 5, 5).data
        assert np.array_equal(out, g.data)

    def test_resize_commutes_with_rotate90_on_square(self):
        rng = np.random.default_rng(2)
        g = Tensor(rng.standard_normal((1, 6, 6)).astype(np.float32))
        a = ops.bilinear_resize(rotate90(g, 1), 9, 9).data
        b = rotate90(ops.bilinear_resize(g, 9, 9), 1).data
        assert np.max(np.abs(a - b)) < 1e-6
