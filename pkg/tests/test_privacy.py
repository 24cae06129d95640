import numpy as np
import pytest
from scipy import stats

from conftest import random_adapter
from fedlora.aggregation import ClientUpdate, aggregate_fra
from fedlora.lora import LoraAdapter, delta_w
from fedlora.privacy import NoiseSpec, dp_per_adapter, dp_post_aggregation, noise_matrix

TRIALS = 2000


class TestNoiseSpec:
    @pytest.mark.parametrize("scale", [0.0, -1.0, float("nan")])
    def test_scale_must_be_positive(self, scale):
        with pytest.raises(ValueError, match="scale"):
            NoiseSpec(scale=scale)

    def test_unknown_distribution(self):
        with pytest.raises(ValueError):
            NoiseSpec("cauchy")

    def test_derive_is_deterministic_and_distinct(self):
        spec = NoiseSpec(seed=5)
        assert spec.derive(1, 2) == spec.derive(1, 2)
        assert spec.derive(1).seed != spec.derive(2).seed


class TestNoiseMatrix:
    def test_same_seed_same_matrix(self):
        spec = NoiseSpec(seed=11)
        np.testing.assert_array_equal(noise_matrix(4, 5, spec), noise_matrix(4, 5, spec))

    def test_tiny_scale_is_tiny(self):
        assert np.max(np.abs(noise_matrix(8, 8, NoiseSpec(scale=1e-300)))) < 1e-298

    def test_gaussian_moments(self):
        x = noise_matrix(1000, 100, NoiseSpec(seed=3)).ravel()
        assert abs(x.mean()) <= 0.02
        assert 0.98 <= x.std() <= 1.02

    def test_laplace_moments(self):
        # Laplace(b) has mean 0 and variance 2 b^2.
        x = noise_matrix(1000, 100, NoiseSpec("laplace", 0.5, seed=3)).ravel()
        assert abs(x.mean()) <= 0.02
        assert x.std() == pytest.approx(np.sqrt(2) * 0.5, rel=0.02)
        assert np.mean(np.abs(x)) == pytest.approx(0.5, rel=0.02)


class TestPerAdapter:
    def test_zero_adapter_gives_pure_quadratic_term(self):
        ad = LoraAdapter(np.zeros((6, 2)), np.zeros((2, 5)))
        spec = NoiseSpec(seed=4)
        noisy, err = dp_per_adapter(ad, spec)
        np.testing.assert_allclose(err, noisy.b @ noisy.a, atol=1e-14)
        nb = noise_matrix(6, 2, spec.derive(0))
        na = noise_matrix(2, 5, spec.derive(1))
        np.testing.assert_allclose(err, nb @ na, atol=1e-14)

    def test_error_expands_into_cross_and_quadratic_terms(self, rng):
        ad = random_adapter(rng, 6, 5, 2)
        noisy, err = dp_per_adapter(ad, NoiseSpec(seed=9))
        nb, na = noisy.b - ad.b, noisy.a - ad.a
        np.testing.assert_allclose(err, ad.b @ na + nb @ ad.a + nb @ na, atol=1e-12)

    def test_small_scale_first_order_bound(self, rng):
        ad = random_adapter(rng, 16, 12, 4)
        _, err = dp_per_adapter(ad, NoiseSpec(scale=1e-12, seed=1))
        bound = 1e-6 * (np.linalg.norm(ad.a) + np.linalg.norm(ad.b) + 1)
        assert np.linalg.norm(err) <= bound

    def test_deterministic(self, rng):
        ad = random_adapter(rng, 6, 5, 2)
        spec = NoiseSpec(seed=2)
        np.testing.assert_array_equal(dp_per_adapter(ad, spec)[1], dp_per_adapter(ad, spec)[1])

    def test_product_error_is_not_gaussian(self):
        rng = np.random.default_rng(0)
        ad = random_adapter(rng, 64, 64, 4)
        samples = np.array([dp_per_adapter(ad, NoiseSpec(seed=t))[1][3, 7] for t in range(TRIALS)])
        assert stats.jarque_bera(samples).pvalue < 0.01
        assert stats.kurtosis(samples) > 0.3


class TestPostAggregation:
    def test_vanishing_noise_matches_fra(self, rng):
        ups = [ClientUpdate(random_adapter(rng, 8, 6, 2)) for _ in range(2)]
        fra = aggregate_fra(ups, 4)
        out = dp_post_aggregation(fra.exact_delta, 4, NoiseSpec(scale=1e-300))
        np.testing.assert_allclose(delta_w(out.adapter), delta_w(fra.adapter), atol=1e-9)

    def test_full_rank_reproduces_noise(self, rng):
        exact = rng.normal(size=(9, 7))
        spec = NoiseSpec(seed=8)
        out = dp_post_aggregation(exact, 7, spec)
        np.testing.assert_allclose(delta_w(out.adapter) - exact, noise_matrix(9, 7, spec), rtol=0, atol=1e-9)
        assert out.err_norm <= 1e-9

    def test_scaling_keeps_additivity(self, rng):
        exact = rng.normal(size=(6, 6))
        spec = NoiseSpec("laplace", 0.3, seed=8)
        out = dp_post_aggregation(exact, 6, spec, scaling=2.0)
        assert out.adapter.scaling == 2.0
        np.testing.assert_allclose(delta_w(out.adapter) - exact, noise_matrix(6, 6, spec), rtol=0, atol=1e-9)

    def test_truncation_residual_reported(self, rng):
        exact = rng.normal(size=(9, 7))
        spec = NoiseSpec(seed=8)
        out = dp_post_aggregation(exact, 3, spec)
        s = np.linalg.svd(exact + noise_matrix(9, 7, spec), compute_uv=False)
        assert out.err_norm == pytest.approx(np.sqrt(np.sum(s[3:] ** 2)), rel=1e-9)

    @pytest.mark.parametrize("r", [0, 8])
    def test_rank_out_of_range(self, rng, r):
        with pytest.raises(ValueError, match="rank"):
            dp_post_aggregation(rng.normal(size=(9, 7)), r, NoiseSpec())

    def test_full_rank_error_is_gaussian(self):
        rng = np.random.default_rng(0)
        ad = random_adapter(rng, 16, 12, 4)
        exact = delta_w(ad)
        samples = np.array([
            (delta_w(dp_post_aggregation(exact, 12, NoiseSpec(seed=t)).adapter) - exact)[3, 7]
            for t in range(TRIALS)
        ])
        assert stats.jarque_bera(samples).pvalue >= 0.01
