import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lrds.coordinator import (
    LocalSource,
    PredictionResult,
    effective_sample_size,
    importance_sample,
    normalize_log_weights,
    prediction_map,
    run_sir,
    systematic_resample,
    weighted_interval,
)
from lrds.errors import DegenerateWeights
from lrds.model import ModelParams, RandomWalkPrior, prior_state
from lrds.oracle import DenseInstance, dense_loglik

from helpers import random_instance, random_stream


def hand_systematic(weights, u):
    """Walk the cumulative weights once, as in the textbook description."""
    M = len(weights)
    out, k, c = [], 0, weights[0]
    for i in range(M):
        pos = (u + i) / M
        while pos >= c and k < M - 1:
            k += 1
            c += weights[k]
        out.append(k)
    return out


def test_uniform_weights_pick_each_once(rng):
    idx = systematic_resample(np.full(8, 1 / 8), rng)
    np.testing.assert_array_equal(np.sort(idx), np.arange(8))


def test_single_heavy_particle(rng):
    w = np.zeros(6)
    w[4] = 1.0
    np.testing.assert_array_equal(systematic_resample(w, rng), np.full(6, 4))


@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_systematic_matches_hand_trace(M, seed):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(M))
    u = np.random.default_rng(seed + 1).random()
    got = systematic_resample(w, np.random.default_rng(seed + 1))
    assert list(got) == hand_systematic(w, u)


@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_systematic_counts_are_balanced(M, seed):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(M))
    counts = np.bincount(systematic_resample(w, rng), minlength=M)
    assert counts.sum() == M
    assert np.all(np.abs(counts - M * w) < 1 + 1e-9)


def test_normalize_and_ess():
    w = np.exp(normalize_log_weights([0.0, 0.0, -np.inf, 0.0]))
    np.testing.assert_allclose(w, [1 / 3, 1 / 3, 0, 1 / 3])
    assert effective_sample_size(w) == pytest.approx(3.0)
    with pytest.raises(DegenerateWeights):
        normalize_log_weights([-np.inf, -np.inf])


def test_weighted_interval():
    v = np.arange(100.0)
    lo, hi = weighted_interval(v, np.full(100, 0.01), 0.91)
    assert (lo, hi) == (4.0, 95.0)


def pr(mean, var):
    return PredictionResult(np.zeros((len(mean), 2)), np.asarray(mean, float), np.asarray(var, float))


def test_prediction_map_single_particle():
    out = prediction_map([1.0], [pr([1.5, 2.0], [0.3, 0.4])])
    np.testing.assert_array_equal(out.mean, [1.5, 2.0])
    np.testing.assert_array_equal(out.variance, [0.3, 0.4])


def test_prediction_map_two_particles():
    out = prediction_map([0.5, 0.5], [pr([0.0], [1.0]), pr([2.0], [1.0])])
    assert out.mean[0] == 1.0 and out.variance[0] == 2.0


def test_prediction_map_floor():
    res = [pr([0.0], [1.0]), pr([2.0], [1.0]), pr([5.0], [3.0])]
    w = [0.3, 0.3, 0.4]
    a = prediction_map(w, res, 0.0)
    b = prediction_map(w, res, 1e-4)
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.variance, b.variance)
    c = prediction_map([0.5, 0.5 - 1e-5, 1e-5], res, 1e-4)
    assert c.mean[0] == pytest.approx(1.0, rel=1e-4)


def spatial_case(rng, n=200):
    shards, spec, p, _ = random_instance(rng, n=n, r=4, J=2)
    p = ModelParams.natural(alpha=0.5, sigma=p.matern.sigma, smoothness=p.matern.smoothness,
                            scale=p.matern.scale, fine_scale_var=p.fine_scale_var)
    return shards, spec, p


def test_importance_single_particle(rng):
    shards, spec, p = spatial_case(rng)
    res = importance_sample(LocalSource.from_shards(shards, spec),
                            RandomWalkPrior(p.to_transformed(), 0.1), 1, rng)
    assert res.weights[0] == 1.0


def test_importance_identical_particles(rng):
    shards, spec, p = spatial_case(rng)
    theta = p.to_transformed()
    res = importance_sample(LocalSource.from_shards(shards, spec), RandomWalkPrior(theta, 0.1),
                            2, rng, thetas=[theta, theta])
    np.testing.assert_allclose(res.weights, [0.5, 0.5], rtol=1e-14)


def test_importance_all_invalid(rng):
    shards, spec, p = spatial_case(rng)
    bad = np.full((3, 5), np.nan)
    with pytest.raises(DegenerateWeights):
        importance_sample(LocalSource.from_shards(shards, spec), RandomWalkPrior(np.zeros(5), 0.1),
                          3, rng, thetas=bad)


def test_importance_matches_dense_reference(rng):
    shards, spec, p = spatial_case(rng, n=150)
    proposal = RandomWalkPrior(p.to_transformed(), 0.02)
    res = importance_sample(LocalSource.from_shards(shards, spec), proposal, 50,
                            np.random.default_rng(11), min_ess=1.0)
    # non-distributed reference sampler: same seed, same draws, dense likelihood
    thetas = proposal.sample(np.random.default_rng(11), 50)
    ll = []
    for th in thetas:
        q = ModelParams.from_transformed(th)
        ll.append(-0.5 * dense_loglik(DenseInstance.from_shards(shards, spec, q, prior_state(spec, q))))
    w = np.exp(normalize_log_weights(ll))
    np.testing.assert_allclose(res.weights, w, rtol=1e-7, atol=1e-12)
    ref_mean = w @ thetas
    ref_sd = np.sqrt(w @ (thetas - ref_mean) ** 2)
    se = ref_sd / math.sqrt(effective_sample_size(w))
    assert np.all(np.abs(res.posterior_mean() - ref_mean) <= 2 * se + 1e-12)


def toy_sir(seed, stream_rng_seed=3):
    spec, p, prior, evs, shards, _ = random_stream(np.random.default_rng(stream_rng_seed), T=3,
                                                    J=2, r=4, n_per=40)
    source = LocalSource.from_shards([s for sh in shards.values() for s in sh], spec)
    return run_sir(source, [1, 2, 3], p.to_transformed(), 8, np.random.default_rng(seed),
                   intercept_innovation_var=0.3), p


def test_sir_is_deterministic_and_traceable():
    steps, _ = toy_sir(5)
    again, _ = toy_sir(5)
    for a, b in zip(steps, again):
        np.testing.assert_array_equal(a.ancestors, b.ancestors)
        np.testing.assert_array_equal(a.thetas(), b.thetas())
    # replay the random stream: a (M, 5) normal block then one uniform per step
    rng = np.random.default_rng(5)
    for s in steps:
        rng.standard_normal((8, 5))
        u = rng.random()
        assert list(s.ancestors) == hand_systematic(s.weights, u)


def test_sir_resampled_particles_follow_ancestors():
    steps, p = toy_sir(9)
    theta0 = p.to_transformed()
    walk = np.random.default_rng(9).standard_normal((8, 5)) * math.sqrt(0.1)
    np.testing.assert_allclose(steps[0].thetas(), theta0 + walk, rtol=1e-15)
    for prev, cur in zip(steps, steps[1:]):
        parents = prev.thetas()[prev.ancestors]
        moved = cur.thetas() - parents
        assert np.all(np.abs(moved) < 3.0)
