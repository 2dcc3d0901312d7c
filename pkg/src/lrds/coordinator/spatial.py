"""Central-node spatial inference from worker summaries.

The posterior of eta given all servers is assembled in information form,

    K_z^{-1} = K_0^{-1} + sum_j R_j,
    nu_z     = K_z (K_0^{-1} nu_0 + sum_j gamma_j),

which is exactly the single-node posterior because the R_j and gamma_j are
additive over disjoint subsets of the data.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from ..errors import DomainError, RankMismatch
from ..model import BasisSpec, GaussianState, as_locations, basis_matrix
from ..numerics import SymMatrix, cholesky, inverse_dense, logdet, solve
from ..worker import EMContribution, Summary, _fine_scale_var


def _ordered(summaries: Iterable[Summary]) -> list:
    return sorted(summaries, key=lambda s: (s.server_id, -1 if s.time_index is None else s.time_index))


def combine(prior: GaussianState, summaries: Iterable[Summary]) -> GaussianState:
    """Posterior from the prior and any number of server summaries."""
    summaries = _ordered(summaries)
    precision = prior.precision.data.copy()
    info = prior.information_vector()
    for s in summaries:
        if s.rank != prior.dim:
            raise RankMismatch(
                f"summary from server {s.server_id} has rank {s.rank}, prior has {prior.dim}")
        precision += s.R.data
        info = info + s.gamma
    if not summaries:
        return prior
    P = SymMatrix(prior.dim, precision)
    f = cholesky(P)
    return GaussianState(solve(f, info), P, f)


def a_total(summaries: Iterable[Summary]) -> float:
    return float(sum(s.a for s in _ordered(summaries)))


def neg2_loglik(prior: GaussianState, posterior: GaussianState, a_sum: float) -> float:
    """-2 log L without the normalizing constant:

    -log|K_0^{-1}| + nu_0'K_0^{-1}nu_0 + log|K_z^{-1}| - nu_z'K_z^{-1}nu_z + sum a_j
    """
    return (-logdet(prior.chol) + float(prior.mean @ prior.information_vector())
            + logdet(posterior.chol) - float(posterior.mean @ posterior.information_vector())
            + a_sum)


@dataclass
class PredictionResult:
    locations: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    covariance: Optional[SymMatrix] = None

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.variance)


def _predict_from_basis(posterior: GaussianState, BP: np.ndarray, noise_diag: np.ndarray,
                        locs, full_cov: bool) -> PredictionResult:
    mean = BP @ posterior.mean
    # b' K_z b = ||L^{-1} b||^2 with K_z^{-1} = L L'
    W = solve_triangular(posterior.chol.lower, BP.T, lower=True)
    variance = np.sum(W * W, axis=0) + noise_diag
    cov = None
    if full_cov:
        dense = W.T @ W + np.diag(noise_diag)
        dense[np.diag_indices_from(dense)] = variance
        cov = SymMatrix.from_dense(dense)
    return PredictionResult(as_locations(locs), mean, variance, cov)


def predict(posterior: GaussianState, spec: BasisSpec, p, pred_locs,
            full_cov: bool = False) -> PredictionResult:
    """y^P | z ~ N(B^P nu_z, B^P K_z B^P' + sigma2_delta I); no location may be observed."""
    pred_locs = as_locations(pred_locs)
    if posterior.dim != spec.rank:
        raise RankMismatch(f"posterior rank {posterior.dim} != basis rank {spec.rank}")
    BP = basis_matrix(spec, p, pred_locs)
    noise = np.full(len(pred_locs), _fine_scale_var(p))
    return _predict_from_basis(posterior, BP, noise, pred_locs, full_cov)


def augmented_prior(prior: GaussianState, q: int, fine_scale_var: float) -> GaussianState:
    """Prior of (eta, delta at the q observed prediction locations)."""
    if q == 0:
        return prior
    if not fine_scale_var > 0:
        raise DomainError("observed prediction locations need a positive fine-scale variance")
    r = prior.dim
    P = np.zeros((r + q, r + q))
    P[:r, :r] = prior.precision.to_dense()
    P[r:, r:] = np.eye(q) / fine_scale_var
    return GaussianState.from_precision(np.concatenate([prior.mean, np.zeros(q)]), P)


def predict_with_overlap(aug_posterior: GaussianState, spec: BasisSpec, p, pred_locs, q: int,
                         full_cov: bool = False) -> PredictionResult:
    """Prediction when the first q prediction locations are also observed.

    The fine-scale values at those q locations are part of the augmented
    state, so they enter through the basis (B^P, [I_q; 0]) and carry no extra
    fine-scale variance.
    """
    pred_locs = as_locations(pred_locs)
    r = spec.rank
    if aug_posterior.dim != r + q:
        raise RankMismatch(f"augmented posterior rank {aug_posterior.dim} != {r} + {q}")
    if q > len(pred_locs):
        raise ValueError("q exceeds the number of prediction locations")
    BP = np.zeros((len(pred_locs), r + q))
    BP[:, :r] = basis_matrix(spec, p, pred_locs)
    BP[np.arange(q), r + np.arange(q)] = 1.0
    noise = np.full(len(pred_locs), _fine_scale_var(p))
    noise[:q] = 0.0
    return _predict_from_basis(aug_posterior, BP, noise, pred_locs, full_cov)


def em_step(posterior: GaussianState, fine_scale_var: float,
            contributions: Sequence[EMContribution], pooled: bool = False):
    """One EM update for a fixed basis: returns (K_0 new as dense, sigma2_delta new).

    K_0 <- K_z + nu_z nu_z'. For the fine-scale variance each server's
    contribution is scaled by sigma2_delta^2 / n_j; with ``pooled`` the sum is
    scaled once by sigma2_delta^2 / n, n the total count. Only the pooled
    form with ``trace="marginal"`` contributions is an exact EM step for
    more than one server.
    """
    K_z = inverse_dense(posterior.chol)
    K0_new = K_z + np.outer(posterior.mean, posterior.mean)
    s4 = fine_scale_var * fine_scale_var
    contributions = sorted(contributions, key=lambda c: c.server_id)
    if pooled:
        n = sum(c.n for c in contributions)
        step = s4 / n * sum(c.scalar for c in contributions) if n else 0.0
    else:
        step = sum(s4 / c.n * c.scalar for c in contributions if c.n)
    s2_new = fine_scale_var + step
    if fine_scale_var > 0 and not s2_new > 0:
        raise DomainError(f"fine-scale variance update left the domain: {s2_new}")
    return K0_new, s2_new
