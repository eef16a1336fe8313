"""Fixed feature extractor: determinism, stride arithmetic, statistics
oracles, and the weight-file round trip."""

import numpy as np
import pytest

from pyrastyle import autodiff as ad
from pyrastyle.autodiff import Tape, Tensor, grad_check
from pyrastyle.features import (
    STATS_EPS,
    FeatureExtractor,
    load_weights,
    save_weights,
    stats,
)

from oracles import two_pass_stats


class TestExtractor:
    def test_zero_image_zero_features(self):
        phi = FeatureExtractor(seed=0)
        maps = phi(Tensor(np.zeros((16, 16, 3))))
        for fmap in maps:
            np.testing.assert_array_equal(fmap.data, 0.0)

    def test_spatial_dims_halve_each_layer(self):
        phi = FeatureExtractor(seed=0)
        maps = phi(Tensor(np.zeros((32, 32, 3))))
        assert [m.data.shape[:2] for m in maps] == [(16, 16), (8, 8), (4, 4), (2, 2)]
        assert [m.data.shape[2] for m in maps] == [8, 16, 32, 64]

    def test_same_seed_bit_identical(self, rng):
        img = rng.random((16, 16, 3))
        a = FeatureExtractor(seed=9)(Tensor(img))
        b = FeatureExtractor(seed=9)(Tensor(img))
        for x, y in zip(a, b):
            assert np.array_equal(x.data, y.data)

    def test_weights_never_receive_gradients(self, rng):
        phi = FeatureExtractor(seed=0)
        img = Tensor(rng.random((16, 16, 3)), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(phi(img)[-1])
        tape.backward(loss)
        assert img.grad is not None
        for kernel, bias in phi.layers:
            assert kernel.grad is None and bias.grad is None

    def test_gradcheck_wrt_image(self):
        r = np.random.default_rng(2)
        phi = FeatureExtractor(seed=2, channel_plan=(4, 8))
        weigh = Tensor(r.normal(size=(2, 2, 8)))
        err = grad_check(
            lambda t: ad.sum_all(ad.mul(phi(t)[-1], weigh)),
            Tensor(r.random((8, 8, 3))),
        )
        assert err < 1e-5


class TestStats:
    def test_constant_map(self):
        mu, sigma = stats(Tensor(np.full((4, 4, 3), 0.7)))
        np.testing.assert_allclose(mu.data, 0.7, rtol=1e-12)
        np.testing.assert_allclose(sigma.data, np.sqrt(STATS_EPS), rtol=1e-12)

    def test_two_point_variance(self):
        fmap = np.array([[[0.0]], [[2.0]]])  # one channel, values {0, 2}
        mu, sigma = stats(Tensor(fmap))
        assert mu.data[0] == pytest.approx(1.0)
        assert sigma.data[0] == pytest.approx(np.sqrt(1.0 + STATS_EPS))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_two_pass_oracle(self, seed):
        r = np.random.default_rng(seed)
        fmap = r.normal(size=(5, 7, 4))
        mu, sigma = stats(Tensor(fmap))
        mu_ref, sigma_ref = two_pass_stats(fmap)
        np.testing.assert_allclose(mu.data, mu_ref, rtol=1e-12)
        np.testing.assert_allclose(sigma.data, sigma_ref, rtol=1e-12)

    def test_differentiable_at_zero_variance(self):
        err = grad_check(
            lambda t: ad.sum_all(ad.add(*stats(t))),
            Tensor(np.full((3, 3, 2), 0.5)),
        )
        assert err < 1e-5

    def test_gradcheck_random(self, rng):
        weigh = Tensor(rng.normal(size=4))

        def f(t):
            mu, sigma = stats(t)
            return ad.sum_all(ad.mul(ad.add(mu, sigma), weigh))

        assert grad_check(f, Tensor(rng.normal(size=(4, 5, 4)))) < 1e-5


class TestWeightFile:
    def test_roundtrip_bit_exact_features(self, tmp_path, rng):
        phi = FeatureExtractor(seed=3)
        path = tmp_path / "phi.pswt"
        save_weights(phi, path)
        loaded = load_weights(path)
        img = rng.random((16, 16, 3))
        for a, b in zip(phi(Tensor(img)), loaded(Tensor(img))):
            assert np.array_equal(a.data, b.data)

    def test_loaded_weights_bitwise_equal(self, tmp_path):
        phi = FeatureExtractor(seed=4, channel_plan=(4, 8))
        path = tmp_path / "phi.pswt"
        save_weights(phi, path)
        loaded = load_weights(path)
        for (k1, b1), (k2, b2) in zip(phi.layers, loaded.layers):
            assert np.array_equal(k1.data, k2.data)
            assert np.array_equal(b1.data, b2.data)

    def test_rejects_garbage(self, tmp_path):
        from pyrastyle.errors import DataError

        path = tmp_path / "junk.pswt"
        path.write_bytes(b"not a weight file")
        with pytest.raises(DataError, match="not a feature-weight file"):
            load_weights(path)
