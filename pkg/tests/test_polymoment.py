import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import quadrature_expectation, random_gaussian, random_poly
from pathclosure.polymoment import (
    ISSERLIS_DEGREE_CAP,
    ZERO_DEGREE,
    DegreeCapError,
    DimensionError,
    DomainError,
    GaussianMoments,
    MomentPlan,
    Polynomial,
    gaussian_covariance,
    gaussian_expectation,
    gaussian_product_expectation,
    poly_from_text,
    poly_mul,
    poly_partial,
    poly_to_text,
    polys_from_text,
    polys_to_text,
)

x = Polynomial.variable(1, 0)
x1, x2, x3, x4 = (Polynomial.variable(4, i) for i in range(4))
y1, y2 = (Polynomial.variable(2, i) for i in range(2))


class TestArithmetic:
    def test_difference_of_squares(self):
        assert poly_mul(x + 1, x - 1) == x * x - 1

    def test_zero_annihilates(self):
        p = 3 * x * x + x - 2
        assert poly_mul(p, Polynomial.zero(1)).is_zero()
        assert poly_mul(p, Polynomial.zero(1)).degree == ZERO_DEGREE

    def test_binomial_square(self):
        sq = poly_mul(y1 + y2, y1 + y2)
        assert sq == y1 * y1 + 2 * y1 * y2 + y2 * y2
        assert sq.coefficient((1, 1)) == 2.0

    def test_degree_adds(self, rng):
        for _ in range(20):
            p, q = random_poly(rng, 3, 4, 5), random_poly(rng, 3, 4, 5)
            if p.is_zero() or q.is_zero():
                continue
            assert poly_mul(p, q).degree == p.degree + q.degree

    def test_nvars_mismatch(self):
        with pytest.raises(DimensionError):
            poly_mul(x, y1)

    def test_cancellation_prunes_exact_zero(self):
        p = (y1 + y2) - y2
        assert p == y1
        assert len(p) == 1
        tiny = Polynomial(1, {(1,): 1e-300})
        assert len(tiny) == 1

    def test_grlex_order(self):
        p = Polynomial(2, {(0, 0): 1, (0, 2): 1, (1, 1): 1, (2, 0): 1, (1, 0): 1})
        assert list(p.terms) == [(0, 0), (1, 0), (2, 0), (1, 1), (0, 2)]

    def test_evaluation_matches_manual(self):
        p = 2 * y1 * y1 * y2 - y2 + 0.5
        pts = np.array([[1.0, 2.0], [-0.5, 3.0]])
        np.testing.assert_allclose(p(pts), 2 * pts[:, 0] ** 2 * pts[:, 1] - pts[:, 1] + 0.5)

    def test_shift(self, rng):
        p = random_poly(rng, 2, 4, 6)
        c = rng.normal(size=2)
        pts = rng.normal(size=(5, 2))
        np.testing.assert_allclose(p.shift(c)(pts), p(pts + c), rtol=1e-12, atol=1e-12)


class TestPartial:
    def test_examples(self):
        assert poly_partial(x1 * x1 * x2, 0) == 2 * x1 * x2
        assert poly_partial(Polynomial.constant(4, 5.0), 2).is_zero()
        assert poly_partial(x1 + x2, 1) == Polynomial.constant(4, 1.0)

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            poly_partial(x1, 4)
        with pytest.raises(IndexError):
            poly_partial(x1, -1)

    def test_matches_finite_difference(self, rng):
        p = random_poly(rng, 3, 5, 8)
        pt = rng.normal(size=3)
        h = 1e-6
        for i in range(3):
            e = np.eye(3)[i] * h
            fd = (p(pt + e) - p(pt - e)) / (2 * h)
            assert abs(poly_partial(p, i)(pt) - fd) <= 1e-6 * (1 + abs(fd))


class TestGaussianExpectation:
    def test_fourth_moment(self):
        for s in (0.5, 1.0, 2.0):
            g = GaussianMoments([0.0], [[s * s]])
            assert gaussian_expectation(x**4, g) == pytest.approx(3 * s**4, rel=1e-15)

    def test_mean(self):
        assert gaussian_expectation(x, GaussianMoments([1.7], [[2.0]])) == pytest.approx(1.7)

    def test_four_way_isserlis(self, rng):
        g = random_gaussian(rng, 4)
        S = g.covariance
        centred = GaussianMoments(np.zeros(4), S)
        want = S[0, 1] * S[2, 3] + S[0, 2] * S[1, 3] + S[0, 3] * S[1, 2]
        assert gaussian_expectation(x1 * x2 * x3 * x4, centred) == pytest.approx(want, rel=1e-14)

    def test_second_moment_shifted(self):
        assert gaussian_expectation(x * x, GaussianMoments([1.0], [[1.0]])) == pytest.approx(2.0)

    def test_non_psd_rejected(self):
        with pytest.raises(DomainError):
            GaussianMoments([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])

    def test_covariance_stored_symmetric(self):
        g = GaussianMoments([0.0, 0.0], [[1.0, 0.3], [0.3 + 1e-17, 1.0]])
        assert np.array_equal(g.covariance, g.covariance.T)

    def test_degenerate_psd_allowed(self):
        g = GaussianMoments([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]])
        # x1 == x2 almost surely
        assert gaussian_expectation((y1 - y2) ** 2, g) == pytest.approx(0.0, abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            gaussian_expectation(y1, GaussianMoments([0.0], [[1.0]]))

    def test_degree_cap(self):
        g = GaussianMoments([0.0], [[1.0]])
        assert gaussian_expectation(x**ISSERLIS_DEGREE_CAP, g) == pytest.approx(10395.0)
        with pytest.raises(DegreeCapError):
            gaussian_expectation(x ** (ISSERLIS_DEGREE_CAP + 1), g)

    def test_odd_centred_moments_exactly_zero(self, rng):
        g = random_gaussian(rng, 3)
        centred = GaussianMoments(np.zeros(3), g.covariance)
        for _ in range(30):
            e = rng.integers(0, 4, size=3)
            if e.sum() % 2 == 0:
                e[0] += 1
            assert gaussian_expectation(Polynomial.monomial(tuple(e)), centred) == 0.0


class TestCovariance:
    g = GaussianMoments([0.0], [[1.0]])

    def test_examples(self):
        assert gaussian_covariance(x, x, self.g) == pytest.approx(1.0)
        assert gaussian_covariance(x, x * x, self.g) == 0.0
        # <x^4> - <x^2>^2 via the expectation route
        want = gaussian_expectation(x**4, self.g) - gaussian_expectation(x * x, self.g) ** 2
        assert want == pytest.approx(2.0)
        assert gaussian_covariance(x * x, x * x, self.g) == pytest.approx(want, rel=1e-15)

    def test_product_route_matches_expanded(self, rng):
        for _ in range(10):
            p, q = random_poly(rng, 2, 3, 4), random_poly(rng, 2, 3, 4)
            g = random_gaussian(rng, 2)
            a = gaussian_product_expectation(p, q, g)
            b = gaussian_expectation(p * q, g)
            assert a == pytest.approx(b, rel=1e-11, abs=1e-11)


@st.composite
def linear_case(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    n = draw(st.integers(1, 4))
    rng = np.random.default_rng(seed)
    return rng, n


@settings(max_examples=60, deadline=None)
@given(linear_case(), st.floats(-5, 5), st.floats(-5, 5))
def test_linearity(case, a, b):
    rng, n = case
    p, q = random_poly(rng, n, 6, 6), random_poly(rng, n, 6, 6)
    g = random_gaussian(rng, n)
    lhs = gaussian_expectation(a * p + b * q, g)
    ep, eq = gaussian_expectation(p, g), gaussian_expectation(q, g)
    rhs = a * ep + b * eq
    scale = abs(a * ep) + abs(b * eq) + 1e-300
    assert abs(lhs - rhs) <= 1e-12 * scale


@pytest.mark.parametrize("n", [1, 2])
def test_quadrature_oracle(n, rng):
    for _ in range(15):
        p = random_poly(rng, n, 6, 6)
        g = random_gaussian(rng, n)
        a = gaussian_expectation(p, g)
        b = quadrature_expectation(p, g)
        mag = quadrature_expectation(_abs_bound(p), g)
        assert abs(a - b) <= 1e-8 * max(abs(b), mag)


def _abs_bound(p):
    # sum |c| x^(2 alpha) gives a positive scale for the comparison
    return Polynomial(p.nvars, {tuple(2 * e for e in k): abs(c) for k, c in p.items()})


def test_monte_carlo_oracle(rng):
    draws = 10**6
    for case in range(5):
        n = 1 + case % 3
        p = random_poly(rng, n, 4, 5)
        g = random_gaussian(rng, n, 0.5)
        xs = np.random.default_rng(case).multivariate_normal(g.mean, g.covariance, size=draws)
        vals = p(xs)
        se = vals.std(ddof=1) / np.sqrt(draws)
        assert abs(gaussian_expectation(p, g) - vals.mean()) <= 4 * se


class TestMomentPlan:
    def test_matches_isserlis(self, rng):
        n = 3
        monos = sorted({tuple(int(v) for v in rng.integers(0, 4, size=n)) for _ in range(25)})
        plan = MomentPlan(monos, n)
        gs = [random_gaussian(rng, n) for _ in range(4)]
        means = np.array([g.mean for g in gs])
        covs = np.array([g.covariance for g in gs])
        E = plan.evaluate_all(means, covs)
        for b, g in enumerate(gs):
            for alpha in monos:
                want = gaussian_expectation(Polynomial.monomial(alpha), g)
                assert E[b, plan.index[alpha]] == pytest.approx(want, rel=1e-11, abs=1e-11)

    def test_batch_independent(self, rng):
        n = 2
        monos = [(i, j) for i in range(5) for j in range(5 - i)]
        plan = MomentPlan(monos, n)
        gs = [random_gaussian(rng, n) for _ in range(6)]
        means = np.array([g.mean for g in gs])
        covs = np.array([g.covariance for g in gs])
        full = plan.evaluate_all(means, covs)
        for b in range(6):
            assert np.array_equal(full[b], plan.evaluate_all(means[b : b + 1], covs[b : b + 1])[0])


class TestText:
    def test_round_trip(self, rng):
        for _ in range(10):
            p = random_poly(rng, 3, 5, 7)
            assert poly_from_text(poly_to_text(p)) == p

    def test_zero_round_trip(self):
        z = Polynomial.zero(3)
        back = poly_from_text(poly_to_text(z))
        assert back.is_zero() and back.nvars == 3

    def test_comments_and_blocks(self):
        text = "# drift\n1.0 1 0\n-2 0 1\n\n0.5 2 0 # square\n"
        a, b = polys_from_text(text)
        assert a == y1 - 2 * y2
        assert b == 0.5 * y1 * y1
        assert polys_from_text(polys_to_text([a, b])) == [a, b]

    def test_bad_width(self):
        with pytest.raises(DimensionError):
            poly_from_text("1 1 0\n1 1\n")

    def test_bad_number(self):
        with pytest.raises(ValueError, match="line 1"):
            poly_from_text("abc 1 0\n")
