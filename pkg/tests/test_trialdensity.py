import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pathclosure.polymoment import GaussianMoments, Polynomial, gaussian_covariance, gaussian_expectation
from pathclosure.trialdensity import (
    NonNormalizable,
    TrialFamily,
    TrialPoint,
    fisher_matrix,
    fit_psi,
    fixed_covariance_family,
    gaussian_family,
    gaussian_kl,
    log_partition,
    monomial_family,
    sample,
    to_gaussian,
)

fam1 = monomial_family([(1,), (2,)])


def random_point(rng, n):
    fam = gaussian_family(n)
    B = rng.normal(size=(n, n))
    cov = B @ B.T / n + 0.5 * np.eye(n)
    return fam.point(fam.natural_from_moments(rng.normal(size=n), cov))


def fd_grad_hess(pt, h):
    lam = pt.lam
    m = lam.size
    f = lambda v: log_partition(TrialPoint(pt.family, v))
    E = np.eye(m) * h
    grad = np.array([(f(lam + E[i]) - f(lam - E[i])) / (2 * h) for i in range(m)])
    hess = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            hess[i, j] = (
                f(lam + E[i] + E[j]) - f(lam + E[i] - E[j]) - f(lam - E[i] + E[j]) + f(lam - E[i] - E[j])
            ) / (4 * h * h)
    return grad, hess


class TestToGaussian:
    def test_standard(self):
        g = to_gaussian(fam1.point([0.0, -0.5]))
        np.testing.assert_allclose(g.mean, [0.0], atol=1e-15)
        np.testing.assert_allclose(g.covariance, [[1.0]])

    def test_complete_square(self):
        mu, s2 = 1.5, 0.7
        g = to_gaussian(fam1.point([mu / s2, -1 / (2 * s2)]))
        assert g.mean[0] == pytest.approx(mu)
        assert g.covariance[0, 0] == pytest.approx(s2)

    @pytest.mark.parametrize("l2", [0.0, 0.3])
    def test_non_normalizable(self, l2):
        with pytest.raises(NonNormalizable):
            to_gaussian(fam1.point([0.1, l2]))

    def test_reference_function_contributes(self):
        fam = fixed_covariance_family(1, Polynomial.monomial((2,), 0.5), 2.0)
        g = to_gaussian(fam.point([1.0]))
        assert g.covariance[0, 0] == pytest.approx(0.5)
        assert g.mean[0] == pytest.approx(0.5)

    def test_batched_moments_flag(self):
        mean, cov, ok = fam1.moments(np.array([[0.0, -0.5], [0.0, 0.5]]))
        assert ok.tolist() == [True, False]
        assert np.isnan(mean[1]).all()

    def test_round_trip(self, rng):
        for n in (1, 2, 3):
            for _ in range(5):
                pt = random_point(rng, n)
                g = to_gaussian(pt)
                lam = pt.family.natural_from_moments(g.mean, g.covariance)
                np.testing.assert_allclose(lam, pt.lam, atol=1e-10, rtol=1e-10)

    def test_unreachable_moments(self):
        fam = fixed_covariance_family(1, Polynomial.monomial((2,), 0.5), 1.0)
        with pytest.raises(ValueError):
            fam.natural_from_moments([0.0], [[3.0]])


class TestLogPartition:
    def test_standard(self):
        assert log_partition(fam1.point([0.0, -0.5])) == pytest.approx(0.5 * np.log(2 * np.pi))

    def test_shift(self):
        mu, s2 = -0.8, 1.9
        a = log_partition(fam1.point([mu / s2, -1 / (2 * s2)]))
        b = log_partition(fam1.point([0.0, -1 / (2 * s2)]))
        assert a - b == pytest.approx(mu * mu / (2 * s2), rel=1e-12)

    def test_gradient_is_mean(self, rng):
        for n in (1, 2):
            pt = random_point(rng, n)
            g = to_gaussian(pt)
            grad, _ = fd_grad_hess(pt, 1e-5)
            want = [gaussian_expectation(q, g) for q in pt.family.Q]
            np.testing.assert_allclose(grad, want, atol=1e-6, rtol=1e-6)

    def test_non_normalizable(self):
        with pytest.raises(NonNormalizable):
            log_partition(fam1.point([0.0, 1.0]))


class TestFisher:
    def test_standard(self):
        np.testing.assert_allclose(fisher_matrix(fam1.point([0.0, -0.5])), [[1.0, 0.0], [0.0, 2.0]], atol=1e-15)

    def test_matches_covariance_route(self, rng):
        pt = random_point(rng, 2)
        g = to_gaussian(pt)
        Q = pt.family.Q
        want = np.array([[gaussian_covariance(a, b, g) for b in Q] for a in Q])
        np.testing.assert_allclose(fisher_matrix(pt), want, rtol=1e-11, atol=1e-12)

    def test_duplicate_component_singular(self):
        xv = Polynomial.variable(1, 0)
        fam = TrialFamily((xv, 2.0 * xv, xv * xv), Polynomial.zero(1))
        G = fisher_matrix(fam.point([0.3, 0.1, -0.5]))
        assert abs(np.linalg.det(G)) <= 1e-12

    def test_hessian_of_log_partition(self, rng):
        for n in (1, 2):
            for _ in range(3):
                pt = random_point(rng, n)
                _, hess = fd_grad_hess(pt, 1e-4)
                G = fisher_matrix(pt)
                assert np.max(np.abs(hess - G)) <= 1e-5 * (1 + np.max(np.abs(G)))

    def test_psd_sweep(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 4))
            G = fisher_matrix(random_point(rng, n))
            assert np.array_equal(G, G.T)
            assert np.linalg.eigvalsh(G).min() >= -1e-10


class TestSample:
    def test_standard_mean(self):
        xs = sample(fam1.point([0.0, -0.5]), 10**6, seed=4)
        assert abs(xs.mean()) <= 4 / 1e3

    def test_deterministic(self):
        pt = fam1.point([0.2, -0.5])
        assert np.array_equal(sample(pt, 100, 9), sample(pt, 100, 9))
        assert not np.array_equal(sample(pt, 100, 9), sample(pt, 100, 10))

    def test_variance(self):
        xs = sample(fam1.point([3 / 2, -1 / 4]), 10**6, seed=5)
        assert xs.mean() == pytest.approx(3.0, abs=0.01)
        assert xs.var() == pytest.approx(2.0, rel=0.05)

    def test_bad_count(self):
        with pytest.raises(ValueError):
            sample(fam1.point([0.0, -0.5]), 0, 1)


class TestKL:
    def test_identical(self):
        g = GaussianMoments([1.0, 2.0], [[2.0, 0.5], [0.5, 1.0]])
        assert gaussian_kl(g, g) == 0.0

    def test_mean_shift(self):
        for mu in (0.1, 1.0, 3.0):
            assert gaussian_kl(GaussianMoments([mu], [[1.0]]), GaussianMoments([0.0], [[1.0]])) == pytest.approx(mu * mu / 2)

    def test_variance_ratio(self):
        for v in (0.2, 1.5, 4.0):
            got = gaussian_kl(GaussianMoments([0.0], [[v]]), GaussianMoments([0.0], [[1.0]]))
            assert got == pytest.approx(0.5 * (v - 1 - np.log(v)), rel=1e-12)

    def test_singular(self):
        with pytest.raises(ValueError):
            gaussian_kl(GaussianMoments([0.0, 0.0], np.ones((2, 2))), GaussianMoments([0.0, 0.0], np.eye(2)))

    def test_monte_carlo(self, rng):
        p = GaussianMoments([0.3, -0.2], [[1.0, 0.4], [0.4, 0.8]])
        q = GaussianMoments([0.0, 0.1], [[1.5, -0.2], [-0.2, 0.6]])
        xs = rng.multivariate_normal(p.mean, p.covariance, size=400000)

        def logpdf(g, x):
            d = x - g.mean
            P = np.linalg.inv(g.covariance)
            return -0.5 * np.einsum("ij,jk,ik->i", d, P, d) - 0.5 * np.log(np.linalg.det(2 * np.pi * g.covariance))

        vals = logpdf(p, xs) - logpdf(q, xs)
        assert abs(gaussian_kl(p, q) - vals.mean()) <= 4 * vals.std() / np.sqrt(len(vals))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kl_non_negative(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    a, b = (to_gaussian(random_point(rng, n)) for _ in range(2))
    assert gaussian_kl(a, b) >= 0.0
    assert gaussian_kl(a, a) == 0.0


class TestFitPsi:
    def test_standard_normal(self, rng):
        xs = rng.standard_normal((200000, 2))
        psi, beta = fit_psi(xs)
        assert beta == 1.0
        want = Polynomial.quadratic(0.5 * np.eye(2))
        for k in [(2, 0), (0, 2), (1, 1), (1, 0), (0, 1), (0, 0)]:
            assert psi.coefficient(k) == pytest.approx(want.coefficient(k), abs=0.01)

    def test_moment_matching(self, rng):
        xs = rng.multivariate_normal([1.0, -2.0, 0.5], [[2, 0.3, 0], [0.3, 1, 0.2], [0, 0.2, 0.5]], size=500)
        psi, beta = fit_psi(xs)
        fam = fixed_covariance_family(3, psi, beta)
        g = to_gaussian(fam.point(np.zeros(3)))
        np.testing.assert_allclose(g.mean, xs.mean(axis=0), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(g.covariance, np.cov(xs, rowvar=False), rtol=1e-10, atol=1e-12)

    def test_too_few(self, rng):
        with pytest.raises(ValueError):
            fit_psi(rng.normal(size=(30, 2)))

    def test_degenerate(self, rng):
        col = rng.normal(size=(100, 1))
        with pytest.raises(ValueError):
            fit_psi(np.hstack([col, col]))

    def test_decaying_case_uses_zero_beta(self):
        fam = monomial_family([(1,), (2,)], beta=0.0)
        assert fam.beta == 0.0 and fam.psi.is_zero()


class TestFamilyValidation:
    def test_degree_limit(self):
        with pytest.raises(ValueError):
            monomial_family([(3,)])

    def test_duplicate_monomials(self):
        with pytest.raises(ValueError):
            monomial_family([(1,), (1,)])

    def test_negative_beta(self):
        with pytest.raises(ValueError):
            fixed_covariance_family(1, Polynomial.monomial((2,)), -1.0)

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            fam1.point([1.0])
