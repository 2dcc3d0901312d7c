import math

import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from lrds.errors import DomainError, NotPositiveDefinite, SpecError
from lrds.model import (
    INTERCEPT_MEAN,
    INTERCEPT_VAR,
    CompactSupport,
    MaternParams,
    ModelParams,
    PredictiveProcessBasis,
    RandomWalkPrior,
    basis_matrix,
    compact_correlation,
    evaluate_basis,
    evolution,
    matern_correlation,
    prior_mean,
    prior_precision,
    regular_grid,
)
from lrds.numerics import cholesky

from helpers import random_knots

MATERN = MaternParams(1.0, 1.25, 15.0)


def test_matern_zero_distance_is_one():
    assert matern_correlation((3.0, -2.0), (3.0, -2.0), MATERN) == 1.0


def test_matern_exponential_case():
    rho = matern_correlation((0, 0), (1, 0), MaternParams(1.0, 0.5, 1.0))
    assert rho == pytest.approx(math.exp(-math.sqrt(2)), rel=1e-13)
    assert rho == pytest.approx(0.2431167, abs=1e-7)


def test_matern_three_halves_closed_form():
    # x = 2 (d / kappa) sqrt(nu); rho = (1 + x) exp(-x)
    x = 2 * 0.5 * math.sqrt(1.5)
    assert x == pytest.approx(1.2247449, abs=1e-7)
    rho = matern_correlation((0, 0), (0, 1), MaternParams(1.0, 1.5, 2.0))
    assert rho == pytest.approx((1 + x) * math.exp(-x), rel=1e-13)
    assert rho == pytest.approx(0.6537027, abs=1e-7)


def test_spherical_examples():
    assert compact_correlation((0, 0), (0, 0), 2.0) == 1.0
    assert compact_correlation((0, 0), (2, 0), 2.0) == 0.0
    assert compact_correlation((0, 0), (1, 0), 2.0) == 0.3125


def test_basis_at_knot_is_one():
    knots = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    spec = PredictiveProcessBasis(knots)
    p = ModelParams.natural(sigma=1.0)
    assert evaluate_basis(spec, p, knots[1])[1] == 1.0


def test_basis_far_from_knots_is_small():
    spec = PredictiveProcessBasis(np.array([[0.0, 0.0], [1.0, 0.0]]))
    p = ModelParams.natural(sigma=5.0, smoothness=1.25, scale=1.0)
    b = evaluate_basis(spec, p, (30.0, 0.0))
    assert np.all(b < 5e-6) and np.all(b >= 0)


def test_compact_basis_outside_support_is_zero():
    spec = PredictiveProcessBasis(np.array([[0.0, 0.0], [1.0, 1.0]]), CompactSupport(2.0))
    b = evaluate_basis(spec, ModelParams.natural(), (10.0, 10.0))
    assert np.all(b == 0.0)


def test_intercept_is_appended_last():
    spec = PredictiveProcessBasis(np.array([[0.0, 0.0]]), include_intercept=True)
    b = evaluate_basis(spec, ModelParams.natural(sigma=2.0), (0.0, 0.0))
    np.testing.assert_array_equal(b, [2.0, 1.0])


def test_prior_precision_single_knot():
    spec = PredictiveProcessBasis(np.array([[1.0, 1.0]]))
    assert prior_precision(spec, ModelParams.natural(), 0.0).to_dense()[0, 0] == 1.0
    assert prior_precision(spec, ModelParams.natural(), 0.25).to_dense()[0, 0] == 1.25


def test_prior_precision_near_coincident_knots_fail():
    # at this separation the correlation rounds to exactly 1
    spec = PredictiveProcessBasis(np.array([[0.0, 0.0], [1e-12, 0.0]]))
    with pytest.raises(NotPositiveDefinite):
        cholesky(prior_precision(spec, ModelParams.natural(smoothness=1.9), 0.0))


def test_prior_precision_grid_is_elementwise():
    knots = regular_grid((0, 10), (0, 10), 5.0)
    assert len(knots) == 9
    p = ModelParams.natural(smoothness=1.25, scale=15.0)
    P = prior_precision(PredictiveProcessBasis(knots), p).to_dense()
    ref = np.array([[matern_correlation(a, b, p.matern) for b in knots] for a in knots])
    np.testing.assert_allclose(P, ref, rtol=1e-14)
    np.testing.assert_array_equal(P, P.T)
    np.testing.assert_array_equal(np.diag(P), 1.0)


def test_intercept_prior_is_block_diagonal():
    spec = PredictiveProcessBasis(regular_grid((0, 5), (0, 5), 5.0), include_intercept=True)
    P = prior_precision(spec, ModelParams.natural()).to_dense()
    np.testing.assert_array_equal(P[-1, :-1], 0.0)
    assert P[-1, -1] == 1.0 / INTERCEPT_VAR
    m = prior_mean(spec)
    assert m[-1] == INTERCEPT_MEAN and np.all(m[:-1] == 0)


def test_evolution_alpha_zero():
    spec = PredictiveProcessBasis(regular_grid((0, 5), (0, 5), 5.0))
    p = ModelParams.natural(alpha=0.0)
    ev = evolution(p, spec)
    np.testing.assert_array_equal(ev.H, 0.0)
    np.testing.assert_allclose(ev.U_precision.to_dense(), prior_precision(spec, p).to_dense(),
                               rtol=1e-15)


def test_evolution_single_knot():
    spec = PredictiveProcessBasis(np.array([[0.0, 0.0]]))
    ev = evolution(ModelParams.natural(alpha=0.8), spec)
    np.testing.assert_array_equal(ev.H, [[0.8]])
    assert ev.U_precision.to_dense()[0, 0] == pytest.approx(1 / 0.36, rel=1e-14)
    assert ev.U_precision.to_dense()[0, 0] == pytest.approx(2.7778, abs=1e-4)


def test_evolution_is_stationary_for_single_knot():
    spec = PredictiveProcessBasis(np.array([[0.0, 0.0]]))
    alpha = 0.8
    ev = evolution(ModelParams.natural(alpha=alpha), spec)
    K = 1.0
    assert alpha ** 2 * K + ev.U[0, 0] == pytest.approx(K, rel=1e-14)


def test_evolution_rejects_unit_alpha():
    spec = PredictiveProcessBasis(np.array([[0.0, 0.0]]))
    with pytest.raises(DomainError):
        evolution(ModelParams.natural(alpha=None), spec)


def test_intercept_random_walk_in_evolution():
    spec = PredictiveProcessBasis(np.array([[0.0, 0.0]]), include_intercept=True)
    ev = evolution(ModelParams.natural(alpha=0.5), spec, intercept_innovation_var=0.0)
    np.testing.assert_array_equal(np.diag(ev.H), [0.5, 1.0])
    assert ev.U[1, 1] == 0.0 and ev.U_precision is None


def test_parameter_domains():
    with pytest.raises(DomainError):
        MaternParams(1.0, 2.0, 1.0)
    with pytest.raises(DomainError):
        ModelParams.natural(fine_scale_var=-1.0)
    with pytest.raises(DomainError):
        ModelParams.natural(alpha=1.0)


def test_duplicate_knots_rejected():
    with pytest.raises(SpecError):
        PredictiveProcessBasis(np.array([[0.0, 0.0], [0.0, 0.0]]))


@given(st.floats(0.01, 0.99), st.floats(0.1, 10), st.floats(0.05, 1.95), st.floats(0.1, 50),
       st.floats(1e-3, 10))
def test_transformed_round_trip(alpha, sigma, nu, kappa, s2):
    p = ModelParams.natural(alpha=alpha, sigma=sigma, smoothness=nu, scale=kappa,
                            fine_scale_var=s2)
    q = ModelParams.from_transformed(p.to_transformed())
    np.testing.assert_allclose(q.to_vector(), p.to_vector(), rtol=1e-12)


def test_random_walk_moments(rng):
    walk = RandomWalkPrior(np.zeros(5), 0.1)
    draws = walk.sample(rng, 20000)
    np.testing.assert_allclose(draws.var(axis=0), 0.1, rtol=0.05)
    lp = walk.logpdf(np.zeros(5))
    assert lp[0] == pytest.approx(-2.5 * math.log(2 * math.pi * 0.1))


@given(st.floats(0.05, 1.95), st.floats(0.5, 30.0), st.floats(-10, 10), st.floats(-10, 10),
       st.floats(-10, 10), st.floats(-10, 10))
@example(1.5, 21.0, 1.3569935713007734e-128, 1.5, 0.0, 1.5)
def test_matern_symmetric_and_bounded(nu, kappa, x1, y1, x2, y2):
    p = MaternParams(1.0, nu, kappa)
    a = matern_correlation((x1, y1), (x2, y2), p)
    assert a == matern_correlation((x2, y2), (x1, y1), p)
    assert 0.0 <= a <= 1.0
    if (x1, y1) != (x2, y2) and math.hypot(x1 - x2, y1 - y2) > 1e-6:
        assert a < 1.0


@given(st.floats(0.05, 1.95), st.floats(0.5, 30.0), st.floats(0, 2 * math.pi))
def test_matern_decreasing_along_ray(nu, kappa, angle):
    d = np.linspace(0, 5 * kappa, 200)
    pts = np.column_stack([d * math.cos(angle), d * math.sin(angle)])
    spec = PredictiveProcessBasis(np.zeros((1, 2)))
    rho = basis_matrix(spec, ModelParams.natural(sigma=1.0, smoothness=nu, scale=kappa), pts)[:, 0]
    assert np.all(np.diff(rho) <= 0)


@given(st.integers(2, 50), st.floats(0.1, 1.9), st.floats(0.5, 5.0), st.integers(0, 2**32 - 1))
def test_knot_correlation_is_spd(r, nu, kappa, seed):
    knots = random_knots(np.random.default_rng(seed), r)
    p = ModelParams.natural(smoothness=nu, scale=kappa)
    cholesky(prior_precision(PredictiveProcessBasis(knots), p))


@given(st.floats(0.5, 5.0), st.integers(0, 2**32 - 1))
def test_compact_support_pattern(h, seed):
    rng = np.random.default_rng(seed)
    knots = random_knots(rng, 12)
    spec = PredictiveProcessBasis(knots, CompactSupport(h))
    s = rng.uniform(0, 10, size=2)
    b = evaluate_basis(spec, ModelParams.natural(), s)
    d = np.hypot(*(knots - s).T)
    np.testing.assert_array_equal(b != 0, d < h)
