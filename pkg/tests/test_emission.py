import time

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from hmm_gpsm.emission import (
    EmissionModel,
    IllConditionedError,
    bound_gradient,
    emission_loglik_grid,
    exact_lml,
    exact_lml_grad,
    regularized_bound,
    sparse_features,
    sparse_lml,
)
from hmm_gpsm.spectral import SmKernelParams, default_counts, sm_gram, spectral_kl


def make_params(rng, q=2):
    return SmKernelParams.from_natural(rng.uniform(0.3, 1.2, q), rng.uniform(0.5, 4, q), rng.uniform(0.2, 1.0, q))


def dense_lml(y, cov):
    return multivariate_normal(mean=np.zeros(len(y)), cov=cov).logpdf(y)


class TestExactLml:
    def test_scalar_closed_form(self):
        p = SmKernelParams.from_natural([1.0], [0.0], [1.0])
        assert exact_lml([0.0], [0.0], p, 1.0) == pytest.approx(-0.5 * np.log(2) - 0.5 * np.log(2 * np.pi), abs=1e-12)
        assert exact_lml([0.0], [0.0], p, 1.0) == pytest.approx(-1.26552, abs=1e-5)

    def test_matches_dense_mvn(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            p = make_params(rng)
            x = np.sort(rng.uniform(0, 1, 6))
            y = rng.standard_normal(6)
            cov = sm_gram(x, p) + 0.3 ** 2 * np.eye(6)
            assert abs(exact_lml(y, x, p, 0.3) - dense_lml(y, cov)) < 1e-9

    def test_zero_outputs(self):
        rng = np.random.default_rng(1)
        p = make_params(rng)
        x = rng.uniform(0, 1, 7)
        cov = sm_gram(x, p) + 0.2 ** 2 * np.eye(7)
        expected = -0.5 * np.linalg.slogdet(cov)[1] - 3.5 * np.log(2 * np.pi)
        assert exact_lml(np.zeros(7), x, p, 0.2) == pytest.approx(expected, abs=1e-10)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(2)
        p = make_params(rng, 3)
        x, y = rng.uniform(0, 1, 15), rng.standard_normal(15)
        perm = rng.permutation(15)
        assert abs(exact_lml(y, x, p, 0.1) - exact_lml(y[perm], x[perm], p, 0.1)) < 1e-10

    def test_length_mismatch(self):
        p = make_params(np.random.default_rng(3))
        with pytest.raises(ValueError):
            exact_lml([1.0, 2.0], [0.0], p, 0.1)
        with pytest.raises(ValueError):
            exact_lml([], [], p, 0.1)

    def test_ill_conditioned_raises(self):
        from hmm_gpsm.emission import _cholesky
        with pytest.raises(IllConditionedError):
            _cholesky(-np.eye(3), 1.0)

    def test_near_singular_rescued_by_jitter(self):
        p = SmKernelParams.from_natural([1.0], [0.0], [1e-3])
        x = np.linspace(0, 1e-3, 40)
        value = exact_lml(np.ones(40), x, p, 1e-10)
        assert np.isfinite(value)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        p = make_params(rng)
        x, y = np.sort(rng.uniform(0, 1, 12)), rng.standard_normal(12)
        _, g, gn = exact_lml_grad(y, x, p, 0.4)
        vec, h = p.to_vector(), 1e-5
        for i in range(vec.size):
            e = np.zeros_like(vec)
            e[i] = h
            fd = (exact_lml(y, x, SmKernelParams.from_vector(vec + e), 0.4)
                  - exact_lml(y, x, SmKernelParams.from_vector(vec - e), 0.4)) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)
        fd = (exact_lml(y, x, p, 0.4 * np.exp(h)) - exact_lml(y, x, p, 0.4 * np.exp(-h))) / (2 * h)
        assert gn == pytest.approx(fd, rel=1e-5)


class TestSparseLml:
    @pytest.mark.parametrize("seed", range(20))
    def test_equals_dense_on_low_rank_gram(self, seed):
        rng = np.random.default_rng(seed)
        p = make_params(rng, 1)
        x, y = rng.uniform(0, 1, 50), rng.standard_normal(50)
        phi = sparse_features(x, p, rng.standard_normal(5), [5])
        cov = phi @ phi.T + 0.5 ** 2 * np.eye(50)
        assert abs(sparse_lml(y, phi, 0.5) - dense_lml(y, cov)) < 1e-8

    def test_zero_features_is_pure_noise(self):
        y = np.random.default_rng(5).standard_normal(9)
        expected = np.sum(-0.5 * (y / 0.7) ** 2 - np.log(0.7) - 0.5 * np.log(2 * np.pi))
        assert sparse_lml(y, np.zeros((9, 6)), 0.7) == pytest.approx(expected, abs=1e-12)

    def test_row_mismatch(self):
        with pytest.raises(ValueError):
            sparse_lml(np.zeros(4), np.zeros((5, 2)), 0.1)

    def test_faster_than_exact(self):
        rng = np.random.default_rng(6)
        p = make_params(rng, 1)
        x, y = np.sort(rng.uniform(0, 10, 2000)), rng.standard_normal(2000)
        phi = sparse_features(x, p, rng.standard_normal(10), [10])

        def best(fn, reps):
            times = []
            for _ in range(reps):
                start = time.perf_counter()
                fn()
                times.append(time.perf_counter() - start)
            return min(times)

        t_sparse = best(lambda: sparse_lml(y, phi, 0.3), 5)
        t_exact = best(lambda: exact_lml(y, x, p, 0.3), 2)
        assert t_sparse < t_exact / 20


class TestRegularizedBound:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.p = make_params(rng, 2)
        self.counts = default_counts(2, 10)
        self.x, self.y = np.sort(rng.uniform(0, 1, 20)), rng.standard_normal(20)
        self.noise = rng.standard_normal((3, 10))

    def test_zero_kl_at_prior(self):
        b = regularized_bound(self.y, self.x, self.p, self.p, 0.3, self.noise, self.counts)
        terms = [sparse_lml(self.y, sparse_features(self.x, self.p, e, self.counts), 0.3) for e in self.noise]
        assert b == pytest.approx(np.mean(terms), abs=1e-10)

    def test_kl_subtracted(self):
        prior = SmKernelParams(self.p.log_weights, self.p.means + 0.3, self.p.log_stds)
        a = regularized_bound(self.y, self.x, self.p, self.p, 0.3, self.noise, self.counts)
        b = regularized_bound(self.y, self.x, self.p, prior, 0.3, self.noise, self.counts)
        assert a - b == pytest.approx(spectral_kl(self.p, prior), abs=1e-10)

    def test_duplicated_noise(self):
        one = self.noise[:1]
        a = regularized_bound(self.y, self.x, self.p, self.p, 0.3, one, self.counts)
        b = regularized_bound(self.y, self.x, self.p, self.p, 0.3, np.vstack([one, one]), self.counts)
        assert a == pytest.approx(b, abs=1e-12)
        ga = bound_gradient(self.y, self.x, self.p, self.p, 0.3, one, self.counts)
        gb = bound_gradient(self.y, self.x, self.p, self.p, 0.3, np.vstack([one, one]), self.counts)
        np.testing.assert_allclose(ga[1], gb[1], atol=1e-12)
        assert ga[2] == pytest.approx(gb[2], abs=1e-12)

    def test_bound_below_exact_on_average(self):
        rng = np.random.default_rng(8)
        draws = np.array([
            regularized_bound(self.y, self.x, self.p, self.p, 0.3, rng.standard_normal((1, 10)), self.counts)
            for _ in range(200)
        ])
        se = draws.std(ddof=1) / np.sqrt(draws.size)
        assert draws.mean() <= exact_lml(self.y, self.x, self.p, 0.3) + 3 * se

    def test_noise_shape_checked(self):
        with pytest.raises(ValueError):
            regularized_bound(self.y, self.x, self.p, self.p, 0.3, np.zeros((2, 9)), self.counts)

    def test_kl_gradient_vanishes_at_prior(self):
        # with zero features the data term has no dependence on mu, leaving only the KL
        zeros = SmKernelParams(np.full(2, -40.0), self.p.means, self.p.log_stds)
        _, g, _ = bound_gradient(self.y, self.x, zeros, zeros, 0.3, self.noise, self.counts)
        np.testing.assert_allclose(g[2:4], 0.0, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        prior = SmKernelParams(self.p.log_weights, self.p.means + 0.2, self.p.log_stds - 0.1)
        _, g, gn = bound_gradient(self.y, self.x, self.p, prior, 0.3, self.noise, self.counts)
        vec, h = self.p.to_vector(), 1e-5

        def f(v, s=0.3):
            return regularized_bound(self.y, self.x, SmKernelParams.from_vector(v), prior, s, self.noise, self.counts)

        for i in range(vec.size):
            e = np.zeros_like(vec)
            e[i] = h
            fd = (f(vec + e) - f(vec - e)) / (2 * h)
            assert abs(g[i] - fd) <= 1e-4 * max(abs(fd), 1e-3)
        fd = (f(vec, 0.3 * np.exp(h)) - f(vec, 0.3 * np.exp(-h))) / (2 * h)
        assert abs(gn - fd) <= 1e-4 * max(abs(fd), 1e-3)


class TestScaleMismatch:
    def test_all_variants_drop_for_scaled_outputs(self):
        rng = np.random.default_rng(9)
        p = make_params(rng, 2)
        p = SmKernelParams.from_natural(p.weights / p.weights.sum(), p.means, p.stds)
        x, y = np.sort(rng.uniform(0, 1, 25)), rng.standard_normal(25)
        counts, noise = default_counts(2, 10), rng.standard_normal((2, 10))
        phi = sparse_features(x, p, noise[0], counts)
        assert exact_lml(10 * y, x, p, 0.3) < exact_lml(y, x, p, 0.3)
        assert sparse_lml(10 * y, phi, 0.3) < sparse_lml(y, phi, 0.3)
        assert (regularized_bound(10 * y, x, p, p, 0.3, noise, counts)
                < regularized_bound(y, x, p, p, 0.3, noise, counts))


class TestLogLikGrid:
    def test_single_cell(self):
        rng = np.random.default_rng(10)
        p = make_params(rng)
        x, y = np.linspace(0, 1, 8), rng.standard_normal(8)
        grid = emission_loglik_grid([(x, y)], EmissionModel((p,), np.log(0.2)))
        assert grid.shape == (1, 1)
        assert grid.values[0, 0] == pytest.approx(exact_lml(y, x, p, 0.2), abs=1e-12)

    def test_identical_states_identical_columns(self):
        rng = np.random.default_rng(11)
        p = make_params(rng)
        segs = [(np.linspace(0, 1, 6), rng.standard_normal(6)) for _ in range(4)]
        grid = emission_loglik_grid(segs, EmissionModel((p, p, p), np.log(0.2)))
        np.testing.assert_array_equal(grid.values[:, 0], grid.values[:, 2])

    def test_matches_elementwise_exact(self):
        rng = np.random.default_rng(12)
        kernels = (make_params(rng), make_params(rng, 3))
        segs = [(np.linspace(0, 1, 6), rng.standard_normal(6)),
                (np.sort(rng.uniform(0, 1, 4)), rng.standard_normal(4)),
                (np.linspace(0, 1, 6), rng.standard_normal(6))]
        grid = emission_loglik_grid(segs, EmissionModel(kernels, np.log(0.3)))
        for t, (x, y) in enumerate(segs):
            for k, p in enumerate(kernels):
                assert grid.values[t, k] == pytest.approx(exact_lml(y, x, p, 0.3), abs=1e-10)

    def test_matches_elementwise_sparse_with_grad(self):
        rng = np.random.default_rng(13)
        kernels = (make_params(rng), make_params(rng))
        counts = [default_counts(2, 6)] * 2
        noise = [rng.standard_normal((2, 6)) for _ in range(2)]
        segs = [(np.linspace(0, 1, 5), rng.standard_normal(5)) for _ in range(3)]
        grid = emission_loglik_grid(segs, EmissionModel(kernels, np.log(0.3)), "sparse",
                                    noise=noise, counts=counts, priors=kernels, with_grad=True)
        for t, (x, y) in enumerate(segs):
            for k, p in enumerate(kernels):
                v, g, gn = bound_gradient(y, x, p, p, 0.3, noise[k], counts[k])
                assert grid.values[t, k] == pytest.approx(v, abs=1e-10)
                np.testing.assert_allclose(grid.grad_theta[k][t], g, atol=1e-10)
                assert grid.grad_noise[t, k] == pytest.approx(gn, abs=1e-10)

    def test_bad_mode(self):
        p = make_params(np.random.default_rng(14))
        with pytest.raises(ValueError):
            emission_loglik_grid([(np.zeros(2), np.zeros(2))], EmissionModel((p,), 0.0), "dense")
        with pytest.raises(ValueError):
            emission_loglik_grid([(np.zeros(2), np.zeros(2))], EmissionModel((p,), 0.0), "sparse")

    def test_model_vector_round_trip(self):
        rng = np.random.default_rng(15)
        m = EmissionModel((make_params(rng), make_params(rng, 3)), -1.0)
        np.testing.assert_array_equal(m.with_vector(m.to_vector()).to_vector(), m.to_vector())
        with pytest.raises(ValueError):
            m.with_vector(np.zeros(5))
