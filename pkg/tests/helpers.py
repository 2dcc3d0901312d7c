"""Random instances shared by the test modules."""
from __future__ import annotations

import numpy as np

from lrds.model import (
    CompactSupport,
    FixedBasis,
    ModelParams,
    PredictiveProcessBasis,
    regular_grid,
)
from lrds.numerics import SymMatrix
from lrds.worker import Shard


def random_params(rng, temporal=False) -> ModelParams:
    return ModelParams.natural(
        alpha=float(rng.uniform(0.2, 0.9)) if temporal else None,
        sigma=float(rng.uniform(0.5, 3.0)),
        smoothness=float(rng.uniform(0.3, 1.8)),
        scale=float(rng.uniform(1.5, 5.0)),
        fine_scale_var=float(rng.uniform(0.1, 1.0)),
    )


def random_knots(rng, r, extent=10.0) -> np.ndarray:
    # jittered grid keeps knots distinct and the correlation matrix well conditioned
    side = int(np.ceil(np.sqrt(r)))
    cells = rng.choice(side * side, size=r, replace=False)
    step = extent / side
    xy = np.column_stack([cells % side, cells // side]).astype(float) * step
    return xy + rng.uniform(0.2, 0.8, size=(r, 2)) * step


def random_pp_spec(rng, r, intercept=None, compact=None) -> PredictiveProcessBasis:
    if intercept is None:
        intercept = bool(rng.integers(2)) and r > 3
    base = r - int(intercept)
    corr = "matern" if compact is None else CompactSupport(compact)
    return PredictiveProcessBasis(random_knots(rng, base), corr, include_intercept=intercept)


def random_shards(rng, n, J, time_index=None, extent=10.0, mean=0.0):
    """n measurements split at random over servers 1..J."""
    locs = rng.uniform(0, extent, size=(n, 2))
    z = mean + rng.normal(0, 2.0, size=n)
    server = np.sort(rng.integers(1, J + 1, size=n))
    noise = np.array([0.25, 1.0, 4.0, 0.5, 2.0])[server - 1]
    return [Shard(j, locs[server == j], z[server == j], noise[server == j], time_index)
            for j in range(1, J + 1)]


def random_fixed_spec(rng, r, width=4.0) -> FixedBasis:
    centers = random_knots(rng, r)
    A = rng.normal(size=(r, r))
    K0 = A @ A.T / r + np.eye(r)
    return FixedBasis("bisquare", centers, width, SymMatrix.from_dense(np.linalg.inv(K0)))


def spd(rng, r, eps=1.0) -> np.ndarray:
    M = rng.normal(size=(r, r))
    return M.T @ M + eps * np.eye(r)


def grid_spec(spacing=5.0, nx=4, ny=3, **kw) -> PredictiveProcessBasis:
    knots = regular_grid((0, spacing * (nx - 1)), (0, spacing * (ny - 1)), spacing)
    return PredictiveProcessBasis(knots, **kw)


def random_instance(rng, n=None, r=None, J=None):
    """(shards, spec, params, prior) for a random spatial instance."""
    from lrds.model import prior_state
    n = int(rng.integers(100, 501)) if n is None else n
    r = int(rng.integers(3, 11)) if r is None else r
    J = int(rng.choice([1, 2, 5])) if J is None else J
    spec = random_pp_spec(rng, r)
    p = random_params(rng)
    mean = spec.intercept_mean if spec.include_intercept else 0.0
    shards = random_shards(rng, n, J, mean=mean)
    return shards, spec, p, prior_state(spec, p)


def distributed_posterior(shards, spec, p, prior):
    from lrds.coordinator import combine
    from lrds.worker import compute_summary
    return combine(prior, [compute_summary(s, spec, p) for s in shards])


def repartition(shards, J, rng):
    """Same measurements spread over J servers in a different way."""
    from lrds.worker import Shard
    locs = np.vstack([s.locs for s in shards if len(s)])
    z = np.concatenate([s.values for s in shards])
    v = np.concatenate([s.noise_var for s in shards])
    server = rng.integers(1, J + 1, size=len(z))
    return [Shard(j, locs[server == j], z[server == j], v[server == j]) for j in range(1, J + 1)]


def random_stream(rng, T=4, J=2, r=5, n_per=60, missing=()):
    """Spatio-temporal instance: summaries keyed by t, the dense stream and evolutions."""
    from lrds.model import evolution, prior_state
    from lrds.oracle import DenseInstance
    spec = random_pp_spec(rng, r)
    p = random_params(rng, temporal=True)
    prior = prior_state(spec, p)
    ev = evolution(p, spec, intercept_innovation_var=0.3)
    shards = {}
    for t in range(1, T + 1):
        if t in missing:
            shards[t] = []
            continue
        mean = spec.intercept_mean if spec.include_intercept else 0.0
        shards[t] = random_shards(rng, n_per, J, time_index=t, mean=mean)
    dense = [DenseInstance.from_shards(shards[t], spec, p, prior) if shards[t] else None
             for t in range(1, T + 1)]
    return spec, p, prior, [ev] * T, shards, dense


def em_instance(J=1, n=500, seed=7):
    """Bisquare fixed-basis data with r = 4 and constant measurement error."""
    from lrds.model import FixedBasis, basis_matrix
    from lrds.worker import ServerData, Shard
    rng = np.random.default_rng(seed)
    centers = np.array([[2.5, 2.5], [7.5, 2.5], [2.5, 7.5], [7.5, 7.5]])
    spec = FixedBasis("bisquare", centers, 6.0, SymMatrix.identity(4))
    locs = rng.uniform(0, 10, (n, 2))
    eta = rng.multivariate_normal(np.zeros(4), np.diag([4.0, 2.0, 3.0, 1.0]))
    z = basis_matrix(spec, None, locs) @ eta + rng.normal(0, np.sqrt(0.5), n) + rng.normal(0, 0.5, n)
    server = np.arange(n) % J + 1
    servers = [ServerData(j, [Shard(j, locs[server == j], z[server == j],
                                    np.full(int(np.sum(server == j)), 0.25))])
               for j in range(1, J + 1)]
    return servers, spec
