"""Patch tokenization and the toy transformer encoder."""

import numpy as np
import pytest

from symdec.encoder import (
    EncoderParams,
    PatchTokens,
    encode,
    load_tokens,
    mean_pool_tokens,
    patchify,
    save_tokens,
    unpatchify,
)
from symdec.grid import CsymFormatError, GridError, Tensor, no_grad, write_tensor, write_sidecar


def random_image(rng, size):
    return Tensor(rng.uniform(0.0, 1.0, size=(3, size, size)).astype(np.float32))


class TestPatchify:
    def test_32px_image_gives_2x2_grid_of_768(self):
        rng = np.random.default_rng(0)
        img = random_image(rng, 32)
        raw = patchify(img, 16)
        assert raw.shape == (2, 2, 768)

    def test_417_geometry_gives_26_patches(self):
        rng = np.random.default_rng(1)
        img = Tensor(rng.uniform(0, 1, size=(3, 417, 417)).astype(np.float32))
        raw = patchify(img, 16)
        assert raw.shape == (26, 26, 768)

    def test_constant_image_gives_identical_patches(self):
        img = Tensor(np.full((3, 32, 32), 0.5, dtype=np.float32))
        raw = patchify(img, 8).data
        flat = raw.reshape(-1, raw.shape[-1])
        assert np.all(flat == flat[0])

    def test_patch_block_layout(self):
        img = np.zeros((3, 16, 16), dtype=np.float32)
        img[:, 8:, :8] = 1.0  # patch (1, 0) entirely ones
        raw = patchify(Tensor(img), 8).data
        assert np.all(raw[1, 0] == 1.0)
        assert np.all(raw[0, 0] == 0.0)

    def test_non_square_rejected(self):
        with pytest.raises(GridError):
            patchify(Tensor(np.zeros((3, 16, 24), dtype=np.float32)), 8)

    def test_image_smaller_than_patch_rejected(self):
        with pytest.raises(GridError):
            patchify(Tensor(np.zeros((3, 4, 4), dtype=np.float32)), 8)

    def test_unpatchify_reconstructs_cropped_image(self):
        rng = np.random.default_rng(2)
        img = random_image(rng, 33)  # one trailing row/col dropped
        raw = patchify(img, 8)
        back = unpatchify(raw, 8)
        assert np.array_equal(back.data, img.data[:, :32, :32])


class TestEncode:
    @pytest.fixture()
    def setup(self):
        rng = np.random.default_rng(3)
        params = EncoderParams.create(rng, patch_size=8, grid_size=4, dim=16, depth=2, n_heads=4)
        image = random_image(np.random.default_rng(4), 32)
        return params, image

    def test_output_shape(self, setup):
        params, image = setup
        tokens = encode(image, params)
        assert tokens.tokens.shape == (4, 4, 16)
        assert tokens.patch_size == 8
        assert tokens.image_size == (32, 32)

    def test_deterministic(self, setup):
        params, image = setup
        a = encode(image, params).tokens.data
        b = encode(image, params).tokens.data
        assert np.array_equal(a, b)

    def test_out_of_range_image_rejected(self, setup):
        params, _ = setup
        bad = Tensor(np.full((3, 32, 32), 1.5, dtype=np.float32))
        with pytest.raises(GridError):
            encode(bad, params)

    def test_permutation_equivariant_with_zero_positional(self, setup):
        params, image = setup
        zeroed = params.replace_tensors(
            {
                **params.named_tensors("encoder"),
                "encoder.pos": Tensor(np.zeros((16, 16), dtype=np.float32), requires_grad=True),
            }
        )
        rng = np.random.default_rng(5)
        perm = rng.permutation(16)
        raw = patchify(image, 8)
        base = encode(image, zeroed).tokens.data.reshape(16, 16)
        with no_grad():
            shuffled_raw = raw.data.reshape(16, -1)[perm].reshape(4, 4, -1)
        permuted_image = unpatchify(Tensor(shuffled_raw), 8)
        moved = encode(permuted_image, zeroed).tokens.data.reshape(16, 16)
        assert np.max(np.abs(moved - base[perm])) < 1e-5

    def test_token_norms_bounded(self, setup):
        params, image = setup
        tokens = encode(image, params).tokens.data
        norms = np.linalg.norm(tokens.reshape(-1, tokens.shape[-1]), axis=1)
        assert norms.max() <= 1e3


class TestMeanPoolTokens:
    def test_rotating_image_permutes_tokens_exactly(self):
        from symdec.decoder import token_rotate
        from symdec.grid import rotate90

        rng = np.random.default_rng(6)
        image = random_image(rng, 32)
        base = mean_pool_tokens(image, 8, 12)
        with no_grad():
            rotated = mean_pool_tokens(rotate90(image, 1), 8, 12)
        expected = token_rotate(base, 1)
        assert np.max(np.abs(rotated.tokens.data - expected.tokens.data)) < 1e-6


class TestLoadTokens:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        tokens = PatchTokens(
            tokens=Tensor(rng.standard_normal((4, 4, 8)).astype(np.float32)),
            patch_size=8,
            image_size=(32, 32),
        )
        path = tmp_path / "tokens.csym"
        save_tokens(path, tokens)
        back = load_tokens(path)
        assert np.array_equal(back.tokens.data, tokens.tokens.data)
        assert back.patch_size == 8
        assert back.image_size == (32, 32)

    def test_wrong_rank_rejected(self, tmp_path):
        path = tmp_path / "tokens.csym"
        write_tensor(path, np.zeros((4, 8), dtype=np.float32))
        write_sidecar(path, {"patch_size": 8, "image_height": 32, "image_width": 32})
        with pytest.raises(CsymFormatError, match="rank"):
            load_tokens(path)

    def test_missing_sidecar_rejected(self, tmp_path):
        path = tmp_path / "tokens.csym"
        write_tensor(path, np.zeros((4, 4, 8), dtype=np.float32))
        with pytest.raises(CsymFormatError, match="sidecar"):
            load_tokens(path)

    def test_truncated_tensor_rejected(self, tmp_path):
        path = tmp_path / "tokens.csym"
        write_tensor(path, np.zeros((4, 4, 8), dtype=np.float32))
        write_sidecar(path, {"patch_size": 8, "image_height": 32, "image_width": 32})
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CsymFormatError):
            load_tokens(path)

    def test_geometry_mismatch_rejected(self, tmp_path):
        path = tmp_path / "tokens.csym"
        write_tensor(path, np.zeros((4, 4, 8), dtype=np.float32))
        write_sidecar(path, {"patch_size": 16, "image_height": 32, "image_width": 32})
        with pytest.raises(GridError, match="inconsistent"):
            load_tokens(path)
