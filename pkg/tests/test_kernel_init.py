import numpy as np
import pytest
from scipy.stats import kstest

from hmm_gpsm.data import MissingSpec, Sequence, inject_missing
from hmm_gpsm.kernel_init import (
    SpectralDensity,
    density_cdf,
    empirical_spectral_density,
    gmm_fit,
    init_all,
    inverse_cdf_sample,
    kmeans_cluster,
    kmeans_inertia,
    periodogram,
)


class TestSpectralDensity:
    def test_sinusoid_peak(self):
        t = np.arange(400) / 200.0
        d = empirical_spectral_density(np.sin(2 * np.pi * 5 * t), 200.0)
        peak = np.argmax(d.mass)
        assert d.frequencies[peak] == pytest.approx(5.0)
        assert d.mass[peak] >= 0.95

    def test_normalized_grid(self):
        d = empirical_spectral_density(np.random.default_rng(0).standard_normal(101), 50.0)
        assert d.mass.sum() == pytest.approx(1.0, abs=1e-10)
        assert np.all(np.diff(d.frequencies) > 0)
        assert d.frequencies[-1] <= 25.0

    def test_constant_signal_uniform(self):
        d = empirical_spectral_density(np.full(64, 3.0), 64.0)
        np.testing.assert_allclose(d.mass, 1.0 / d.mass.size)

    @pytest.mark.parametrize("n", [63, 64])
    def test_parseval(self, n):
        y = np.random.default_rng(n).standard_normal(n)
        _, power = periodogram(y, 10.0)
        assert power.sum() == pytest.approx(np.sum(y ** 2), rel=1e-6)

    def test_too_short(self):
        with pytest.raises(ValueError):
            empirical_spectral_density([1.0], 10.0)


class TestKmeans:
    def test_each_own_center(self):
        data = np.random.default_rng(1).dirichlet(np.ones(6), 4)
        centers, labels = kmeans_cluster(data, 4, np.random.default_rng(2))
        np.testing.assert_allclose(centers[labels], data, atol=1e-12)

    def test_two_copies(self):
        a, b = np.eye(5)[0], np.full(5, 0.2)
        centers, labels = kmeans_cluster([a, b, a, b], 2, np.random.default_rng(3))
        np.testing.assert_allclose(centers[labels[0]], a, atol=1e-12)
        np.testing.assert_allclose(centers[labels[1]], b, atol=1e-12)
        assert labels[0] == labels[2] and labels[1] == labels[3]

    def test_beats_random_assignment(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            data = rng.dirichlet(np.ones(8), 30)
            centers, labels = kmeans_cluster(data, 3, rng)
            rand = rng.integers(0, 3, 30)
            rand_centers = np.stack([data[rand == k].mean(0) if np.any(rand == k) else data[0] for k in range(3)])
            assert kmeans_inertia(data, centers, labels) <= kmeans_inertia(data, rand_centers, rand) + 1e-12

    def test_too_few(self):
        with pytest.raises(ValueError):
            kmeans_cluster(np.ones((2, 3)), 3, np.random.default_rng(5))


class TestInverseCdf:
    def _density(self, mass):
        mass = np.asarray(mass, float)
        return SpectralDensity(np.arange(1, mass.size + 1) * 0.5, mass / mass.sum())

    def test_single_bin(self):
        d = self._density([0, 0, 1, 0])
        s = inverse_cdf_sample(d, 1000, np.random.default_rng(6))
        assert np.all((s >= 1.5 - 0.25) & (s < 1.5 + 0.25))

    def test_ks(self):
        d = self._density(np.random.default_rng(7).uniform(size=30))
        s = inverse_cdf_sample(d, 100_000, np.random.default_rng(8))
        assert kstest(s, lambda f: density_cdf(d, f)).statistic < 0.01

    def test_seeded(self):
        d = self._density([1, 2, 3])
        a = inverse_cdf_sample(d, 10, np.random.default_rng(9))
        b = inverse_cdf_sample(d, 10, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)


class TestGmm:
    def test_single_gaussian(self):
        s = np.random.default_rng(10).normal(5.0, 0.5, 10_000)
        p = gmm_fit(s, 1, np.random.default_rng(11))
        assert abs(p.means[0] - 5.0) < 0.05
        assert abs(p.stds[0] - 0.5) < 0.05

    def test_bimodal(self):
        rng = np.random.default_rng(12)
        s = np.concatenate([rng.normal(2, 0.3, 3000), rng.normal(9, 0.5, 2000)])
        p = gmm_fit(s, 2, rng, total_weight=2.5)
        np.testing.assert_allclose(np.sort(p.means), [2.0, 9.0], atol=0.2)
        assert p.weights.sum() == pytest.approx(2.5, rel=1e-12)

    def test_degenerate(self):
        p = gmm_fit(np.full(50, 3.0), 3, np.random.default_rng(13), std_floor=0.01)
        assert p.n_components == 1
        assert p.means[0] == 3.0 and p.stds[0] == pytest.approx(0.01, rel=1e-12)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            gmm_fit([1.0], 2, np.random.default_rng(14))


def tone_sequence(freqs, labels, hz=100, noise=0.05, seed=0):
    rng = np.random.default_rng(seed)
    x = np.arange(hz) / hz
    ys = [np.sin(2 * np.pi * freqs[k] * x + rng.uniform(0, 6)) + noise * rng.standard_normal(hz) for k in labels]
    return Sequence.from_arrays(x, ys, labels=np.asarray(labels) + 1, sample_rate=hz)


class TestInitAll:
    def test_single_tone(self):
        seq = tone_sequence([5.0], [0] * 6, noise=0.0)
        init = init_all(seq, 1, 2, np.random.default_rng(15))
        k = init.kernels[0]
        assert k.means[np.argmax(k.weights)] == pytest.approx(5.0, abs=0.5)

    def test_two_tones(self):
        labels = np.random.default_rng(16).integers(0, 2, 30)
        seq = tone_sequence([3.0, 17.0], labels)
        init = init_all(seq, 2, 1, np.random.default_rng(17))
        np.testing.assert_allclose(sorted(k.means[0] for k in init.kernels), [3.0, 17.0], atol=0.5)
        np.testing.assert_allclose([k.weights.sum() for k in init.kernels],
                                   np.var(np.concatenate(seq.y)), rtol=1e-10)
        assert init.noise_std == pytest.approx(0.1 * np.std(np.concatenate(seq.y)))

    def test_deterministic_and_prior_copy(self):
        seq = tone_sequence([3.0, 9.0], [0, 1, 0, 1, 1, 0])
        a = init_all(seq, 2, 2, np.random.default_rng(18))
        b = init_all(seq, 2, 2, np.random.default_rng(18))
        for ka, kb, pa in zip(a.kernels, b.kernels, a.priors):
            np.testing.assert_array_equal(ka.to_vector(), kb.to_vector())
            np.testing.assert_array_equal(ka.to_vector(), pa.to_vector())
            assert pa.means is not ka.means
            assert np.all(ka.weights > 0) and np.all(ka.stds > 0)

    def test_handles_missing(self):
        seq = inject_missing(tone_sequence([3.0, 9.0], [0, 1] * 5), MissingSpec("im", 25))
        init = init_all(seq, 2, 1, np.random.default_rng(19))
        assert all(np.all(np.isfinite(k.to_vector())) for k in init.kernels)

    def test_too_few_segments(self):
        with pytest.raises(ValueError):
            init_all(tone_sequence([3.0], [0, 0]), 3, 1, np.random.default_rng(20))
