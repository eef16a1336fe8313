"""Pyramid positional encoding against brute-force window/conv/fusion
oracles, plus the sinusoidal and zero baselines."""

import numpy as np
import pytest

from pyrastyle import autodiff as ad
from pyrastyle.autodiff import Tensor, grad_check, param_grad_check
from pyrastyle.errors import ConfigError, ContractError
from pyrastyle.images import Image
from pyrastyle.patches import PatchGrid, split_patches
from pyrastyle.positional import (
    NONE,
    PPE,
    SINUSOIDAL,
    PpeParams,
    ScaleSpec,
    encode_positions,
    encode_windows,
    extract_windows,
    fuse,
    sinusoidal_table,
    window_indices,
)

from oracles import naive_conv2d, naive_window


def ramp_image(h, w):
    """Coordinate ramp: pixel (i,j) encodes its own location."""
    img = np.zeros((h, w, 3))
    img[:, :, 0] = np.arange(h)[:, None] / max(h - 1, 1)
    img[:, :, 1] = np.arange(w)[None, :] / max(w - 1, 1)
    return img


class TestScaleSpec:
    def test_rejects_unsorted_scales(self):
        with pytest.raises(ConfigError, match="strictly increasing"):
            ScaleSpec((8, 8, 16))

    def test_rejects_even_kernels(self):
        with pytest.raises(ConfigError, match="odd"):
            ScaleSpec((8, 16), kernel_sizes=(2, 3))

    def test_smallest_scale_must_match_patch(self):
        spec = ScaleSpec((16, 32))
        with pytest.raises(ConfigError, match="patch size"):
            spec.validate_against(8, 32, 32)

    def test_oversized_scale_rejected(self):
        spec = ScaleSpec((8, 128))
        with pytest.raises(ConfigError, match="3x image extent"):
            spec.validate_against(8, 32, 32)


class TestWindows:
    def test_smallest_scale_equals_patch(self, rng):
        img = Image(rng.random((32, 32, 3)))
        patches, grid = split_patches(img, 8)
        windows = extract_windows(Tensor(img.pixels), grid, 8)
        for i, patch in enumerate(patches):
            assert np.array_equal(windows.data[i], patch)

    def test_corner_constant_image(self):
        grid = PatchGrid(16, 16, 8)
        pixels = Tensor(np.full((16, 16, 3), 0.7))
        windows = extract_windows(pixels, grid, 16)
        np.testing.assert_array_equal(windows.data, 0.7)

    def test_corner_ramp_matches_reflect_oracle(self):
        img = ramp_image(16, 16)
        grid = PatchGrid(16, 16, 8)
        windows = extract_windows(Tensor(img), grid, 16).data
        for token, (cx, cy) in enumerate(grid.centers):
            expected = naive_window(img, cx, cy, 16)
            np.testing.assert_array_equal(windows[token], expected)

    @pytest.mark.parametrize("seed", range(5))
    def test_all_tokens_all_scales_match_oracle(self, seed):
        r = np.random.default_rng(seed)
        img = r.random((32, 32, 3))
        grid = PatchGrid(32, 32, 8)
        for scale in (8, 16, 32):
            windows = extract_windows(Tensor(img), grid, scale).data
            for token, (cx, cy) in enumerate(grid.centers):
                np.testing.assert_array_equal(
                    windows[token], naive_window(img, cx, cy, scale)
                )

    def test_oversized_scale_raises(self):
        grid = PatchGrid(8, 8, 8)
        with pytest.raises(ConfigError, match="reflection"):
            extract_windows(Tensor(np.zeros((8, 8, 3))), grid, 32)


class TestEncodeWindows:
    def test_zero_kernel_zero_bias(self, rng):
        grid = PatchGrid(16, 16, 8)
        windows = extract_windows(Tensor(rng.random((16, 16, 3))), grid, 8)
        out = encode_windows(windows, Tensor(np.zeros((3, 3, 3, 8))), Tensor(np.zeros(8)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_channel_sum_on_constant_image(self):
        grid = PatchGrid(16, 16, 8)
        value = 0.3
        windows = extract_windows(Tensor(np.full((16, 16, 3), value)), grid, 8)
        kernel = np.zeros((1, 1, 3, 4))
        kernel[0, 0, :, :] = 1.0  # sums channels
        bias = np.full(4, 0.05)
        out = encode_windows(windows, Tensor(kernel), Tensor(bias))
        np.testing.assert_allclose(out.data, max(3 * value + 0.05, 0.0), rtol=1e-12)

    def test_pooling_matches_nested_loop_conv(self, rng):
        window = rng.normal(size=(8, 8, 3))
        kernel = rng.normal(size=(3, 3, 3, 5))
        bias = rng.normal(size=5)
        out = encode_windows(
            Tensor(window[None]), Tensor(kernel), Tensor(bias)
        ).data[0]
        conv = naive_conv2d(window, kernel, "zero") + bias
        expected = np.maximum(conv, 0.0).mean(axis=(0, 1))
        np.testing.assert_allclose(out, expected, rtol=1e-10)


class TestFuse:
    def _params(self, rng, dim=6):
        spec = ScaleSpec((4, 8), kernel_sizes=(1, 3), channels=3)
        return PpeParams(spec, dim, rng)

    def test_zero_fusion_weights(self, rng):
        params = self._params(rng)
        for _, _, fuse_w in params.encoders.values():
            fuse_w.data[:] = 0.0
        features = {key: Tensor(rng.normal(size=(5, 3))) for key in params.encoders}
        np.testing.assert_array_equal(fuse(features, params).data, 0.0)

    def test_selector_identity(self, rng):
        params = self._params(rng, dim=6)
        keys = list(params.encoders)
        for key in keys[1:]:
            params.encoders[key][2].data[:] = 0.0
        first = params.encoders[keys[0]][2]
        first.data[:] = 0.0
        first.data[:3, :3] = np.eye(3)  # identity extended with zero columns
        features = {key: Tensor(rng.normal(size=(5, 3))) for key in params.encoders}
        out = fuse(features, params).data
        np.testing.assert_allclose(out[:, :3], features[keys[0]].data, rtol=1e-12)
        np.testing.assert_array_equal(out[:, 3:], 0.0)

    def test_matches_direct_summation(self, rng):
        params = self._params(rng)
        features = {key: Tensor(rng.normal(size=(5, 3))) for key in params.encoders}
        out = fuse(features, params).data
        expected = np.zeros_like(out)
        for key, (_, _, fuse_w) in params.encoders.items():
            expected += features[key].data @ fuse_w.data
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_linear_in_each_feature(self, rng):
        params = self._params(rng)
        features = {key: Tensor(rng.normal(size=(5, 3))) for key in params.encoders}
        scaled = {key: Tensor(2.5 * t.data) for key, t in features.items()}
        np.testing.assert_allclose(
            fuse(scaled, params).data, 2.5 * fuse(features, params).data, atol=1e-12
        )

    def test_missing_pair_rejected(self, rng):
        params = self._params(rng)
        features = {key: Tensor(rng.normal(size=(5, 3))) for key in params.encoders}
        features.pop(next(iter(features)))
        with pytest.raises(ContractError, match="missing encoder features"):
            fuse(features, params)


class TestEncodePositions:
    def test_none_mode_zeros(self):
        grid = PatchGrid(16, 16, 8)
        out = encode_positions(Tensor(np.zeros((16, 16, 3))), grid, NONE, params=12)
        assert out.data.shape == (4, 12)
        np.testing.assert_array_equal(out.data, 0.0)
        assert not out.requires_grad

    def test_sinusoidal_token_zero(self):
        grid = PatchGrid(16, 16, 8)
        out = encode_positions(Tensor(np.zeros((16, 16, 3))), grid, SINUSOIDAL, params=8)
        np.testing.assert_array_equal(out.data[0, 0::2], 0.0)
        np.testing.assert_array_equal(out.data[0, 1::2], 1.0)

    def test_sinusoidal_frequency_schedule(self):
        table = sinusoidal_table(10, 6)
        pos, i = 7, 2
        assert table[pos, 2 * i] == pytest.approx(np.sin(pos / 10000 ** (2 * i / 6)))
        assert table[pos, 2 * i + 1] == pytest.approx(np.cos(pos / 10000 ** (2 * i / 6)))

    def test_constant_image_uniform_tokens(self, rng):
        grid = PatchGrid(32, 32, 8)
        spec = ScaleSpec.default_for(8, channels=4)
        params = PpeParams(spec, 16, rng)
        pe = encode_positions(Tensor(np.full((32, 32, 3), 0.6)), grid, PPE, params).data
        spread = np.abs(pe - pe[0]).max()
        assert spread < 1e-10

    def test_unknown_mode_rejected(self):
        grid = PatchGrid(16, 16, 8)
        with pytest.raises(ConfigError, match="encoding mode"):
            encode_positions(Tensor(np.zeros((16, 16, 3))), grid, "fourier", params=8)

    def test_gradcheck_every_param_tensor(self, rng):
        grid = PatchGrid(16, 16, 8)
        spec = ScaleSpec((8, 16), kernel_sizes=(1, 3), channels=2)
        params = PpeParams(spec, 4, rng)
        pixels = Tensor(rng.random((16, 16, 3)))
        weigh = Tensor(rng.normal(size=(4, 4)))

        def make_loss():
            pe = encode_positions(pixels, grid, PPE, params)
            return ad.sum_all(ad.mul(pe, weigh))

        for target in params.tensors():
            err = param_grad_check(make_loss, target)
            assert err < 1e-5, f"{target.name} failed with {err}"

    def test_gradcheck_wrt_pixels(self):
        # seed picked so no relu pre-activation sits inside the +/-h probe
        r = np.random.default_rng(1)
        grid = PatchGrid(16, 16, 8)
        spec = ScaleSpec((8, 16), kernel_sizes=(3,), channels=2)
        params = PpeParams(spec, 4, r)
        weigh = Tensor(r.normal(size=(4, 4)))
        err = grad_check(
            lambda t: ad.sum_all(ad.mul(encode_positions(t, grid, PPE, params), weigh)),
            Tensor(r.random((16, 16, 3))),
        )
        assert err < 1e-5
