"""Spatio-temporal filtering and smoothing at the central node.

Filtering alternates a covariance-form forecast with the same
information-form update used for spatial data; the smoother runs the
classical backward recursion on the stored filter output.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from ..errors import MissingTimeStep, NotPositiveDefinite
from ..model import Evolution, GaussianState
from ..numerics import SymMatrix, cholesky, inverse_dense
from ..worker import Summary
from .spatial import a_total, combine, neg2_loglik


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def st_forecast(filtered: GaussianState, ev: Evolution,
                filtered_cov: Optional[np.ndarray] = None) -> GaussianState:
    """nu_{t|t-1} = H nu, K_{t|t-1} = H K H' + U, returned in precision form."""
    K = filtered.covariance() if filtered_cov is None else filtered_cov
    mean = ev.H @ filtered.mean
    cov = _sym(ev.H @ K @ ev.H.T + ev.U)
    precision = inverse_dense(cholesky(cov))
    return GaussianState.from_precision(mean, precision)


def st_filter_step(forecast: GaussianState, summaries: Sequence[Summary]) -> GaussianState:
    return combine(forecast, summaries)


def st_filter_loglik(forecast: GaussianState, filtered: GaussianState, a_sum: float) -> float:
    """Constant-free -2 log of the one-step predictive density of the data at t."""
    return neg2_loglik(forecast, filtered, a_sum)


@dataclass
class FilterTrajectory:
    """Filter output for t = 1..T (list position t-1)."""

    forecast: List[GaussianState] = field(default_factory=list)
    filtered: List[GaussianState] = field(default_factory=list)
    filtered_cov: List[np.ndarray] = field(default_factory=list)
    neg2_loglik: List[float] = field(default_factory=list)

    def __len__(self):
        return len(self.filtered)

    def append(self, forecast: GaussianState, filtered: GaussianState, ll: float):
        self.forecast.append(forecast)
        self.filtered.append(filtered)
        self.filtered_cov.append(filtered.covariance())
        self.neg2_loglik.append(ll)


def st_filter(prior: GaussianState, summaries_by_t: Sequence[Sequence[Summary]],
              evolutions: Sequence[Evolution]) -> FilterTrajectory:
    """Run the filter from the time-0 prior over t = 1..T.

    ``summaries_by_t[t-1]`` holds the summaries at time t and
    ``evolutions[t-1]`` the transition from t-1 into t.
    """
    if len(summaries_by_t) != len(evolutions):
        raise ValueError("need one evolution per time step")
    traj = FilterTrajectory()
    state, cov = prior, None
    for summaries, ev in zip(summaries_by_t, evolutions):
        fc = st_forecast(state, ev, cov)
        filt = st_filter_step(fc, summaries)
        traj.append(fc, filt, st_filter_loglik(fc, filt, a_total(summaries)))
        state, cov = filt, traj.filtered_cov[-1]
    return traj


def st_smooth(traj: FilterTrajectory, evolutions: Sequence[Evolution]) -> List[GaussianState]:
    """Backward recursion with J_t = K_{t|t} H_{t+1}' K_{t+1|t}^{-1}.

    The state at t = T is the filtered state object itself.
    """
    T = len(traj)
    if T == 0:
        return []
    out: List[Optional[GaussianState]] = [None] * T
    out[-1] = traj.filtered[-1]
    s_mean = traj.filtered[-1].mean
    s_cov = traj.filtered_cov[-1]
    for t in range(T - 2, -1, -1):
        H = evolutions[t + 1].H
        fc = traj.forecast[t + 1]
        J = traj.filtered_cov[t] @ H.T @ fc.precision.to_dense()
        s_mean = traj.filtered[t].mean + J @ (s_mean - fc.mean)
        s_cov = _sym(traj.filtered_cov[t] + J @ (s_cov - fc.covariance()) @ J.T)
        try:
            out[t] = GaussianState.from_precision(s_mean, inverse_dense(cholesky(s_cov)))
        except NotPositiveDefinite as exc:
            raise NotPositiveDefinite(exc.pivot_index, f"smoothed covariance at t={t + 1}") from exc
    return out


def st_batch_smooth(summaries: Mapping[int, Sequence[Summary]], prior: GaussianState,
                    evolutions: Sequence[Evolution]):
    """Filter and smooth from summaries of all T steps delivered at once.

    ``summaries`` maps t = 1..T to that step's summaries (an empty list means
    no data at t); a missing key raises MissingTimeStep. Returns the
    trajectory and the smoothed states.
    """
    T = len(evolutions)
    by_t: Dict[int, Sequence[Summary]] = dict(summaries)
    for t in range(1, T + 1):
        if t not in by_t:
            raise MissingTimeStep(t)
    traj = st_filter(prior, [by_t[t] for t in range(1, T + 1)], evolutions)
    return traj, st_smooth(traj, evolutions)


__all__ = [
    "FilterTrajectory", "st_forecast", "st_filter_step", "st_filter_loglik", "st_filter",
    "st_smooth", "st_batch_smooth",
]
