"""EM estimation of (K_0, sigma2_delta) for a fixed basis.

Each iteration is two rounds: the servers' summaries give the posterior and
-2 log L at the current estimates, then the posterior goes back out and each
server returns its scalar contribution to the fine-scale variance update.
With ``one_pass`` the servers are asked once for B'B, B'z, z'z and every
later iteration runs at the coordinator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ..errors import SpecError
from ..model import FixedBasis, GaussianState
from ..numerics import SymMatrix, cholesky, inverse_dense
from .sources import SummarySource, spatial_summaries
from .spatial import a_total, combine, em_step, neg2_loglik


@dataclass
class EMResult:
    K0: np.ndarray
    fine_scale_var: float
    neg2_loglik: List[float] = field(default_factory=list)
    steps: List[float] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.steps)


def _prior(K0_precision: np.ndarray) -> GaussianState:
    return GaussianState.from_precision(np.zeros(K0_precision.shape[0]), K0_precision)


def run_em(source: SummarySource, fine_scale_var: float, K0: Optional[np.ndarray] = None,
           max_iter: int = 1000, tol: float = 1e-6, trace: str = "omega",
           pooled: bool = False, one_pass: bool = False) -> EMResult:
    """Iterate until the change ||(K_0, sigma2_delta)|| drops below ``tol``.

    K_0 starts from the basis' stored prior precision unless given. The
    recorded -2 log L values belong to the iterates, the last one to the
    returned estimate.

    The defaults follow the published update: Omega_j built from K_z and a
    sigma2_delta^2 / n_j factor per server. ``trace="marginal", pooled=True``
    gives the exact EM step instead, which stays monotone for any number of
    servers; the published form can overshoot when there are three or more.
    """
    spec = source.spec
    if not isinstance(spec, FixedBasis) or spec.include_intercept:
        raise SpecError("EM needs a fixed basis with a zero-mean prior (no intercept)")
    if K0 is None:
        K0_prec = spec.prior_precision.to_dense()
    else:
        K0_prec = inverse_dense(cholesky(np.asarray(K0, dtype=np.float64)))
    stats = source.sre_stats() if one_pass else None
    s2 = float(fine_scale_var)
    out = EMResult(inverse_dense(cholesky(K0_prec)), s2)

    def evaluate(prec, s2):
        prior = _prior(prec)
        if stats is None:
            sums = spatial_summaries(source, [s2])[0]
        else:
            sums = [st.summary(s2) for st in stats]
        post = combine(prior, sums)
        return post, neg2_loglik(prior, post, a_total(sums))

    post, ll = evaluate(K0_prec, s2)
    out.neg2_loglik.append(ll)
    for _ in range(max_iter):
        if stats is None:
            contribs = source.em_contributions(post, s2, trace)
        else:
            contribs = [st.em_contribution(s2, post, trace) for st in stats]
        K0_new, s2_new = em_step(post, s2, contribs, pooled=pooled)
        K0_new = 0.5 * (K0_new + K0_new.T)
        step = float(np.sqrt(np.sum((K0_new - out.K0) ** 2) + (s2_new - s2) ** 2))
        out.K0, s2 = K0_new, s2_new
        out.fine_scale_var = s2
        out.steps.append(step)
        K0_prec = inverse_dense(cholesky(K0_new))
        post, ll = evaluate(K0_prec, s2)
        out.neg2_loglik.append(ll)
        if step < tol:
            out.converged = True
            break
    return out


def fitted_basis(spec: FixedBasis, result: EMResult) -> FixedBasis:
    """The basis with its prior precision replaced by the EM estimate."""
    return spec.with_prior_precision(SymMatrix.from_dense(inverse_dense(cholesky(result.K0))))
