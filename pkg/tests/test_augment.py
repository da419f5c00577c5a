import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from fundus_cl.augment import (
    AugmentationPolicy,
    IdentityCodec,
    StyleBank,
    adain,
    apply_regular,
    channel_stats,
    hflip,
    make_view_pair,
    nst_augment,
    style_preview,
)
from fundus_cl.imaging import resize


def feature_map(seed, c=None, hw=None):
    r = np.random.default_rng(seed)
    c = c or int(r.integers(1, 6))
    h, w = hw or (int(r.integers(2, 9)), int(r.integers(2, 9)))
    return r.normal(r.normal(0, 3, (c, 1, 1)), r.uniform(0.1, 4, (c, 1, 1)), (c, h, w))


class TestChannelStats:
    def test_worked_example(self):
        mu, sigma = channel_stats(np.array([[1.0, 2.0, 3.0, 4.0]]))
        assert mu[0] == 2.5 and sigma[0] == pytest.approx(oracles.SIGMA_1234, abs=1e-15)

    def test_constant_and_single(self):
        mu, sigma = channel_stats(np.array([[7.0, 7.0, 7.0], [2.0, 2.0, 2.0]]))
        np.testing.assert_array_equal(mu, [7, 2])
        np.testing.assert_array_equal(sigma, [0, 0])
        mu, sigma = channel_stats(np.array([[3.5]]))
        assert (mu[0], sigma[0]) == (3.5, 0.0)


class TestAdain:
    def test_worked_example_exact(self):
        out = adain(np.array([[1.0, 2.0, 3.0, 4.0]]), np.array([[0.0, 2.0, 4.0, 6.0]]), epsilon=0.0)
        np.testing.assert_array_equal(out, [[0.0, 2.0, 4.0, 6.0]])

    def test_self_identity(self):
        x = feature_map(0)
        np.testing.assert_allclose(adain(x, x, 0.0), x, atol=1e-6, rtol=0)

    def test_constant_content(self):
        content = np.full((1, 3, 3), 0.7)
        style = np.arange(9.0).reshape(1, 3, 3)
        np.testing.assert_allclose(adain(content, style, 1e-5), 4.0, atol=1e-12)
        np.testing.assert_allclose(adain(content, style, 0.0), 4.0, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            adain(np.zeros((2, 3, 3)), np.zeros((3, 3, 3)))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6), st.integers(0, 10**6))
    def test_stats_transfer(self, a, b):
        x = feature_map(a, c=3)
        y = feature_map(b, c=3)
        mu, sigma = channel_stats(adain(x, y, 0.0))
        mu_s, sigma_s = channel_stats(y)
        np.testing.assert_allclose(mu, mu_s, atol=1e-6, rtol=0)
        np.testing.assert_allclose(sigma, sigma_s, atol=1e-6, rtol=0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6), st.integers(0, 10**6))
    def test_idempotent(self, a, b):
        x, y = feature_map(a, c=2), feature_map(b, c=2)
        once = adain(x, y, 0.0)
        np.testing.assert_allclose(adain(once, y, 0.0), once, atol=1e-6, rtol=0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.01, 100), st.floats(-50, 50))
    def test_content_affine_invariance(self, a, scale, shift):
        x, y = feature_map(a, c=3), feature_map(a + 1, c=3)
        np.testing.assert_allclose(adain(scale * x + shift, y, 0.0), adain(x, y, 0.0), atol=1e-6, rtol=0)


class TestNst:
    def test_alpha_zero_identity(self, rng):
        img = rng.random((8, 8, 3))
        np.testing.assert_array_equal(nst_augment(img, rng.random((5, 5, 3)), 0.0, IdentityCodec()), img)

    def test_alpha_one_matches_style_stats(self, rng):
        img, style = rng.random((16, 16, 3)), rng.random((12, 12, 3))
        out = nst_augment(img, style, 1.0, IdentityCodec(), epsilon=0.0, clamp=False)
        for got, want in zip(channel_stats(np.moveaxis(out, -1, 0)), channel_stats(np.moveaxis(style, -1, 0))):
            np.testing.assert_allclose(got, want, atol=1e-6, rtol=0)

    def test_twice_is_once(self, rng):
        img = rng.random((16, 16, 3))
        style = 0.3 + 0.3 * rng.random((16, 16, 3))
        once = nst_augment(img, style, 1.0, epsilon=0.0)
        assert 0 < once.min() and once.max() < 1
        np.testing.assert_allclose(nst_augment(once, style, 1.0, epsilon=0.0), once, atol=1e-6, rtol=0)

    def test_bad_alpha(self, rng):
        with pytest.raises(ValueError):
            nst_augment(rng.random((4, 4, 3)), rng.random((4, 4, 3)), 1.5)


class TestRegular:
    def test_hflip_two_by_two(self):
        a, b, c, d = (np.full(3, v) for v in (0.1, 0.2, 0.3, 0.4))
        img = np.array([[a, b], [c, d]])
        np.testing.assert_array_equal(hflip(img), np.array([[b, a], [d, c]]))

    def test_disabled_policy_is_resize(self, rng):
        img = rng.random((20, 20, 3))
        out = apply_regular(img, AugmentationPolicy.disabled(output_size=16), rng)
        np.testing.assert_allclose(out, resize(img, 16, 16), atol=1e-12)

    def test_deterministic(self, rng):
        img = rng.random((24, 24, 3))
        p = AugmentationPolicy(output_size=16)
        a = apply_regular(img, p, np.random.default_rng(5))
        b = apply_regular(img, p, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_range_and_shape(self, seed):
        r = np.random.default_rng(seed)
        out = apply_regular(r.random((20, 30, 3)), AugmentationPolicy(output_size=12, p_blur=1.0), r)
        assert out.shape == (12, 12, 3) and out.min() >= 0 and out.max() <= 1

    @pytest.mark.parametrize("kw", [dict(p_hflip=1.5), dict(crop_scale=(0.0, 1.0)), dict(rotation_deg=(5, -5)),
                                    dict(output_size=4), dict(brightness=-0.1)])
    def test_invalid_policy(self, kw):
        with pytest.raises(ValueError):
            AugmentationPolicy(**kw)


class TestViewPair:
    def setup_method(self):
        r = np.random.default_rng(0)
        self.img = r.random((16, 16, 3))
        self.bank = StyleBank([lo + 0.1 * r.random((10, 10, 3)) for lo in (0.2, 0.4, 0.6, 0.8)])

    def test_p_nst_zero_is_regular_only(self):
        p = AugmentationPolicy(p_nst=0.0, output_size=16)
        a, b = make_view_pair(self.img, p, None, np.random.default_rng(3))
        r = np.random.default_rng(3)
        r.random()  # use_nst; an empty bank draws no style index
        expect_a = apply_regular(self.img, p, r)
        r.random()
        expect_b = apply_regular(self.img, p, r)
        np.testing.assert_array_equal(a, expect_a)
        np.testing.assert_array_equal(b, expect_b)

    def test_p_nst_one_carries_bank_stats(self):
        p = AugmentationPolicy.disabled(output_size=16)
        p = AugmentationPolicy(**{**p.to_dict(), "p_nst": 1.0, "nst_alpha": 1.0, "epsilon": 0.0})
        bank_stats = [channel_stats(np.moveaxis(s, -1, 0)) for s in self.bank.styles]
        hits = set()
        for seed in range(6):
            for view in make_view_pair(self.img, p, self.bank, np.random.default_rng(seed)):
                mu, sd = channel_stats(np.moveaxis(view, -1, 0))
                match = [k for k, (m, s) in enumerate(bank_stats)
                         if np.allclose(mu, m, atol=1e-6) and np.allclose(sd, s, atol=1e-6)]
                assert len(match) == 1
                hits.add(match[0])
        assert len(hits) > 1

    def test_same_seed_same_pair(self):
        p = AugmentationPolicy(output_size=16)
        a = make_view_pair(self.img, p, self.bank, np.random.default_rng(9))
        b = make_view_pair(self.img, p, self.bank, np.random.default_rng(9))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        assert not np.array_equal(*a)

    def test_empty_bank_rejected(self):
        with pytest.raises(ValueError):
            make_view_pair(self.img, AugmentationPolicy(p_nst=0.5), StyleBank(), np.random.default_rng(0))

    def test_preview_pairs(self):
        pairs = style_preview([self.img], self.bank, AugmentationPolicy(), np.random.default_rng(0))
        assert len(pairs) == 1 and pairs[0][0] is self.img and pairs[0][1].shape == self.img.shape
