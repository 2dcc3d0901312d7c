"""Particle methods over the parameters theta.

Particles live on the transformed scale
(Phi^-1(alpha), log sigma, Phi^-1(nu/2), log kappa, log sigma2_delta), so the
random-walk kernel and the Gaussian prior are unconstrained.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from ..errors import DegenerateWeights, DomainError, NotPositiveDefinite
from ..model import (
    BasisSpec,
    GaussianState,
    ModelParams,
    RandomWalkPrior,
    as_locations,
    evolution,
    prior_state,
)
from .sources import SummarySource, spatial_summaries
from .spatial import PredictionResult, a_total, combine, neg2_loglik, predict
from .temporal import st_filter_loglik, st_forecast

WEIGHT_FLOOR = 1e-4
WALK_SCALE = 0.1


@dataclass
class Particle:
    id: int
    theta: np.ndarray
    log_weight: float = 0.0

    @property
    def params(self) -> ModelParams:
        return ModelParams.from_transformed(self.theta)

    @property
    def alive(self) -> bool:
        return self.log_weight > -math.inf


def normalize_log_weights(log_w) -> np.ndarray:
    """Shift log-weights so that they log-sum-exp to zero."""
    log_w = np.asarray(log_w, dtype=np.float64)
    if not np.any(np.isfinite(log_w)):
        raise DegenerateWeights("every particle has zero weight")
    return log_w - logsumexp(log_w)


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    return float(1.0 / np.sum(w * w))


def systematic_resample(weights, rng: np.random.Generator) -> np.ndarray:
    """Ancestor indices from a single uniform draw at positions (u + k) / M."""
    w = np.asarray(weights, dtype=np.float64)
    M = len(w)
    positions = (rng.random() + np.arange(M)) / M
    cum = np.cumsum(w)
    cum[-1] = 1.0
    return np.minimum(np.searchsorted(cum, positions, side="right"), M - 1)


def weighted_quantile(values, weights, q) -> np.ndarray:
    """Inverse of the weighted empirical distribution function."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    v = values[order]
    cum = np.cumsum(np.asarray(weights, dtype=np.float64)[order])
    cum /= cum[-1]
    idx = np.searchsorted(cum, np.atleast_1d(q), side="left")
    return v[np.minimum(idx, len(v) - 1)]


def weighted_interval(values, weights, level: float = 0.99):
    tail = 0.5 * (1.0 - level)
    lo, hi = weighted_quantile(values, weights, [tail, 1.0 - tail])
    return float(lo), float(hi)


def prediction_map(weights, results: Sequence[PredictionResult],
                   weight_floor: float = WEIGHT_FLOOR) -> PredictionResult:
    """Moment-matched mixture of per-particle predictions with weight > floor."""
    w = np.asarray(weights, dtype=np.float64)
    keep = np.flatnonzero(w > weight_floor)
    if len(keep) == 0:
        raise DegenerateWeights(f"no particle has weight above {weight_floor}")
    wk = w[keep] / np.sum(w[keep])
    means = np.array([results[i].mean for i in keep])
    variances = np.array([results[i].variance for i in keep])
    mean = wk @ means
    variance = wk @ (variances + (means - mean) ** 2)
    return PredictionResult(results[keep[0]].locations, mean, variance)


def _mixture_over(particles, states, spec, pred_locs, weight_floor):
    w = np.exp([p.log_weight for p in particles])
    results = [None] * len(particles)
    for i in np.flatnonzero(w > weight_floor):
        results[i] = predict(states[i], spec, particles[i].params, pred_locs)
    return prediction_map(w, results, weight_floor)


# -- importance sampling ------------------------------------------------------

@dataclass
class ImportanceResult:
    particles: List[Particle]
    posteriors: List[Optional[GaussianState]]
    neg2_loglik: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return np.exp([p.log_weight for p in self.particles])

    @property
    def ess(self) -> float:
        return effective_sample_size(self.weights)

    def thetas(self) -> np.ndarray:
        return np.array([p.theta for p in self.particles])

    def posterior_mean(self) -> np.ndarray:
        return self.weights @ self.thetas()

    def predict(self, spec: BasisSpec, pred_locs, weight_floor: float = WEIGHT_FLOOR):
        return _mixture_over(self.particles, self.posteriors, spec, pred_locs, weight_floor)


def _try_params(theta):
    try:
        return ModelParams.from_transformed(theta)
    except DomainError:
        return None


def importance_sample(source: SummarySource, proposal: RandomWalkPrior, M: int,
                      rng: np.random.Generator, prior: Optional[RandomWalkPrior] = None,
                      jitter: float = 0.0, thetas=None,
                      min_ess: float = 1.0 + 1e-9) -> ImportanceResult:
    """Weight M draws from ``proposal`` by p(theta) L(theta) / q(theta).

    All particles go out in one request. With no separate ``prior`` the
    proposal is the prior and the weights are proportional to L. Raises
    DegenerateWeights when M > 1 and the effective sample size falls below
    ``min_ess``.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    thetas = proposal.sample(rng, M) if thetas is None else np.atleast_2d(thetas)
    particles = [Particle(m, np.asarray(th, dtype=np.float64)) for m, th in enumerate(thetas)]
    params = [_try_params(p.theta) for p in particles]
    valid = [m for m, p in enumerate(params) if p is not None]
    table = spatial_summaries(source, [params[m] for m in valid])
    neg2 = np.full(M, np.inf)
    posts: List[Optional[GaussianState]] = [None] * M
    for m, sums in zip(valid, table):
        try:
            pr = prior_state(source.spec, params[m], jitter)
            posts[m] = combine(pr, sums)
            neg2[m] = neg2_loglik(pr, posts[m], a_total(sums))
        except NotPositiveDefinite:
            posts[m] = None
    log_w = -0.5 * neg2
    if prior is not None:
        log_w = log_w + prior.logpdf(thetas) - proposal.logpdf(thetas)
    log_w = normalize_log_weights(log_w)
    for p, lw in zip(particles, log_w):
        p.log_weight = float(lw)
    result = ImportanceResult(particles, posts, neg2)
    if M > 1 and result.ess < min_ess:
        raise DegenerateWeights(f"effective sample size {result.ess} below {min_ess}")
    return result


# -- sequential importance resampling ----------------------------------------

@dataclass
class SIRStep:
    """One time step: weighted particles before resampling, and the ancestry drawn."""

    t: int
    particles: List[Particle]
    neg2_loglik: np.ndarray
    ancestors: np.ndarray
    prediction: Optional[PredictionResult] = None

    @property
    def weights(self) -> np.ndarray:
        return np.exp([p.log_weight for p in self.particles])

    @property
    def ess(self) -> float:
        return effective_sample_size(self.weights)

    def thetas(self) -> np.ndarray:
        return np.array([p.theta for p in self.particles])


@dataclass
class SIRState:
    """Resampled particles with their filtered states (None before the first step)."""

    particles: List[Particle]
    states: List[Optional[GaussianState]]
    covs: List[Optional[np.ndarray]] = field(default_factory=list)


def initial_sir_state(theta0, M: int) -> SIRState:
    theta0 = np.asarray(theta0, dtype=np.float64)
    return SIRState([Particle(m, theta0.copy()) for m in range(M)], [None] * M, [None] * M)


def sir_step(state: SIRState, t: int, source: SummarySource, rng: np.random.Generator,
             walk: RandomWalkPrior, jitter: float = 0.0, intercept_innovation_var: float = 0.0,
             pred_locs=None, weight_floor: float = WEIGHT_FLOOR):
    """Propagate, weight by the filtering likelihood at t, and resample.

    Returns the step record and the resampled state for t + 1; a particle's
    filter state travels with it when it is chosen as an ancestor.
    """
    spec = source.spec
    M = len(state.particles)
    thetas = np.array([p.theta for p in state.particles])
    thetas = walk.sample(rng, M, center=0.0) + thetas
    particles = [Particle(m, thetas[m]) for m in range(M)]
    params = [_try_params(th) for th in thetas]
    valid = [m for m, p in enumerate(params) if p is not None
             and p.temporal_coef is not None and abs(p.temporal_coef) < 1]
    table = source.summaries([params[m] for m in valid], (t,))
    neg2 = np.full(M, np.inf)
    filtered: List[Optional[GaussianState]] = [None] * M
    covs: List[Optional[np.ndarray]] = [None] * M
    for m, row in zip(valid, table):
        sums = row[t]
        try:
            prev = state.states[m]
            prev_cov = state.covs[m] if state.covs else None
            if prev is None:
                prev, prev_cov = prior_state(spec, params[m], jitter), None
            ev = evolution(params[m], spec, jitter, intercept_innovation_var)
            fc = st_forecast(prev, ev, prev_cov)
            filtered[m] = combine(fc, sums)
            covs[m] = filtered[m].covariance()
            neg2[m] = st_filter_loglik(fc, filtered[m], a_total(sums))
        except (NotPositiveDefinite, DomainError):
            filtered[m] = None
    log_w = normalize_log_weights(-0.5 * neg2)
    for p, lw in zip(particles, log_w):
        p.log_weight = float(lw)
    weights = np.exp(log_w)
    ancestors = systematic_resample(weights, rng)
    step = SIRStep(t, particles, neg2, ancestors)
    if pred_locs is not None:
        step.prediction = _mixture_over(particles, filtered, spec, pred_locs, weight_floor)
    nxt = SIRState([Particle(k, thetas[a].copy()) for k, a in enumerate(ancestors)],
                   [filtered[a] for a in ancestors], [covs[a] for a in ancestors])
    return step, nxt


def run_sir(source: SummarySource, times: Sequence[int], theta0, M: int,
            rng: np.random.Generator, walk_scale: float = WALK_SCALE, jitter: float = 0.0,
            intercept_innovation_var: float = 0.0, pred_locs=None,
            weight_floor: float = WEIGHT_FLOOR,
            on_step: Optional[Callable[[SIRStep], None]] = None) -> List[SIRStep]:
    """SIR over the given time steps, starting every particle at ``theta0``."""
    theta0 = np.asarray(theta0, dtype=np.float64)
    walk = RandomWalkPrior(np.zeros_like(theta0), walk_scale)
    state = initial_sir_state(theta0, M)
    if pred_locs is not None:
        pred_locs = as_locations(pred_locs)
    steps = []
    for t in times:
        step, state = sir_step(state, t, source, rng, walk, jitter, intercept_innovation_var,
                               pred_locs, weight_floor)
        steps.append(step)
        if on_step is not None:
            on_step(step)
    return steps
