"""Centralized brute-force reference computations.

Everything here materializes the full n x r basis matrix and, where the
computation calls for it, the n x n data covariance, then uses plain
``numpy.linalg``. This is the conventional single-node analysis that the
distributed algorithms must reproduce; it is deliberately slow and capped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CapExceeded, NotPositiveDefinite
from .model import BasisSpec, Evolution, GaussianState, as_locations, basis_matrix
from .worker import COORD_DECIMALS, Shard, _fine_scale_var

DENSE_CAP = 2000


@dataclass(eq=False)
class DenseInstance:
    """All measurements stacked on one node, with the model that explains them."""

    locs: np.ndarray
    values: np.ndarray
    noise_var: np.ndarray
    spec: BasisSpec
    params: object
    prior_mean: np.ndarray
    prior_precision: np.ndarray
    cap: int = DENSE_CAP

    def __post_init__(self):
        if len(self.values) > self.cap:
            raise CapExceeded(f"dense oracle capped at {self.cap} points, got {len(self.values)}")
        self.locs = as_locations(self.locs) if len(self.values) else np.zeros((0, 2))

    @classmethod
    def from_shards(cls, shards: Sequence[Shard], spec, params, prior: GaussianState,
                    cap: int = DENSE_CAP) -> "DenseInstance":
        shards = list(shards)
        nonempty = [s for s in shards if len(s)]
        locs = np.vstack([s.locs for s in nonempty]) if nonempty else np.zeros((0, 2))
        values = np.concatenate([s.values for s in shards]) if shards else np.zeros(0)
        noise = np.concatenate([s.noise_var for s in shards]) if shards else np.zeros(0)
        return cls(locs, values, noise, spec, params, prior.mean.copy(),
                   prior.precision.to_dense(), cap)

    @property
    def n(self) -> int:
        return len(self.values)

    def basis(self) -> np.ndarray:
        if self.n == 0:
            return np.zeros((0, self.spec.rank))
        return basis_matrix(self.spec, self.params, self.locs)

    def noise_matrix(self) -> np.ndarray:
        return np.diag(self.noise_var + _fine_scale_var(self.params))

    def prior_cov(self) -> np.ndarray:
        return np.linalg.inv(self.prior_precision)


def _chol_logdet(a: np.ndarray, what: str) -> float:
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(-1, what) from exc
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def dense_posterior(inst: DenseInstance) -> GaussianState:
    B = inst.basis()
    Vinv = np.linalg.inv(inst.noise_matrix()) if inst.n else np.zeros((0, 0))
    precision = inst.prior_precision + B.T @ Vinv @ B
    rhs = inst.prior_precision @ inst.prior_mean + B.T @ Vinv @ inst.values
    mean = np.linalg.solve(precision, rhs)
    return GaussianState.from_precision(mean, precision)


def dense_covariance(inst: DenseInstance) -> np.ndarray:
    """Sigma = B K_0 B' + V."""
    B = inst.basis()
    return B @ inst.prior_cov() @ B.T + inst.noise_matrix()


def dense_loglik(inst: DenseInstance) -> float:
    """-2 log density of the data, including the n log(2 pi) constant."""
    if inst.n == 0:
        return 0.0
    S = dense_covariance(inst)
    resid = inst.values - inst.basis() @ inst.prior_mean
    return (inst.n * math.log(2 * math.pi) + _chol_logdet(S, "data covariance")
            + float(resid @ np.linalg.solve(S, resid)))


def dense_logdet_lemma(inst: DenseInstance) -> float:
    """log|Sigma| via the determinant lemma: sum log V_ii - log|K_0^-1| + log|K_z^-1|."""
    B = inst.basis()
    v = inst.noise_var + _fine_scale_var(inst.params)
    post_prec = inst.prior_precision + (B / v[:, None]).T @ B
    return (float(np.sum(np.log(v))) - _chol_logdet(inst.prior_precision, "prior")
            + _chol_logdet(post_prec, "posterior"))


@dataclass
class DensePrediction:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.cov).copy()


def _keys(locs):
    return [(round(float(x), COORD_DECIMALS), round(float(y), COORD_DECIMALS)) for x, y in locs]


def dense_conditional(inst: DenseInstance, pred_locs, include_overlap: bool = True) -> DensePrediction:
    """Conditional law of y^P = B^P eta + delta^P given all data, via the joint Gaussian.

    With ``include_overlap`` the fine-scale term is shared between a
    measurement and a prediction location at the same (rounded) coordinates.
    """
    pred_locs = as_locations(pred_locs)
    s2 = _fine_scale_var(inst.params)
    B = inst.basis()
    BP = basis_matrix(inst.spec, inst.params, pred_locs)
    K0 = inst.prior_cov()
    Szz = B @ K0 @ B.T + inst.noise_matrix()
    Spp = BP @ K0 @ BP.T + s2 * np.eye(len(pred_locs))
    Szp = B @ K0 @ BP.T
    if include_overlap and inst.n:
        obs = _keys(inst.locs)
        pred = {k: l for l, k in enumerate(_keys(pred_locs))}
        for i, k in enumerate(obs):
            if k in pred:
                Szp[i, pred[k]] += s2
    mean_z = B @ inst.prior_mean
    mean_p = BP @ inst.prior_mean
    if inst.n == 0:
        return DensePrediction(mean_p, Spp)
    gain = np.linalg.solve(Szz, Szp).T
    mean = mean_p + gain @ (inst.values - mean_z)
    cov = Spp - gain @ Szp
    return DensePrediction(mean, 0.5 * (cov + cov.T))


@dataclass
class DenseKalmanResult:
    forecast_mean: list = field(default_factory=list)
    forecast_cov: list = field(default_factory=list)
    filtered_mean: list = field(default_factory=list)
    filtered_cov: list = field(default_factory=list)
    smoothed_mean: list = field(default_factory=list)
    smoothed_cov: list = field(default_factory=list)
    neg2_predictive: list = field(default_factory=list)


def dense_kalman(stream: Sequence[Optional[DenseInstance]], prior_mean, prior_cov,
                 evolutions: Sequence[Evolution]) -> DenseKalmanResult:
    """Covariance-form Kalman filter and RTS smoother over t = 1..T.

    ``stream[t-1]`` holds the stacked data at time t (None or empty for no
    data) and ``evolutions[t-1]`` the transition into time t. Also returns
    -2 log of each one-step predictive density, constant included.
    """
    if sum(0 if s is None else s.n for s in stream) > DENSE_CAP:
        raise CapExceeded("dense Kalman oracle capped")
    out = DenseKalmanResult()
    m = np.asarray(prior_mean, dtype=np.float64)
    P = np.asarray(prior_cov, dtype=np.float64)
    for inst, ev in zip(stream, evolutions):
        m = ev.H @ m
        P = ev.H @ P @ ev.H.T + ev.U
        out.forecast_mean.append(m.copy())
        out.forecast_cov.append(P.copy())
        if inst is None or inst.n == 0:
            out.neg2_predictive.append(0.0)
        else:
            B = inst.basis()
            S = B @ P @ B.T + inst.noise_matrix()
            resid = inst.values - B @ m
            out.neg2_predictive.append(
                inst.n * math.log(2 * math.pi) + _chol_logdet(S, "innovation")
                + float(resid @ np.linalg.solve(S, resid)))
            G = np.linalg.solve(S, B @ P).T
            m = m + G @ resid
            I_GB = np.eye(len(m)) - G @ B
            P = I_GB @ P @ I_GB.T + G @ inst.noise_matrix() @ G.T
        out.filtered_mean.append(m.copy())
        out.filtered_cov.append(P.copy())
    T = len(stream)
    sm = [None] * T
    sP = [None] * T
    if T:
        sm[-1] = out.filtered_mean[-1]
        sP[-1] = out.filtered_cov[-1]
    for t in range(T - 2, -1, -1):
        H = evolutions[t + 1].H
        J = out.filtered_cov[t] @ H.T @ np.linalg.inv(out.forecast_cov[t + 1])
        sm[t] = out.filtered_mean[t] + J @ (sm[t + 1] - out.forecast_mean[t + 1])
        sP[t] = out.filtered_cov[t] + J @ (sP[t + 1] - out.forecast_cov[t + 1]) @ J.T
    out.smoothed_mean = sm
    out.smoothed_cov = sP
    return out


def relative_error(a, b, floor: float = 1e-8) -> float:
    """Largest elementwise relative error of ``a`` against reference ``b``.

    Entries of ``b`` smaller than ``floor`` times its largest magnitude are
    compared against that threshold instead, so that values which are zero
    up to rounding do not dominate.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    if b.size == 0:
        return 0.0
    scale = float(np.max(np.abs(b)))
    if scale == 0.0:
        return float(np.max(np.abs(a)))
    denom = np.maximum(np.abs(b), floor * scale)
    return float(np.max(np.abs(a - b) / denom))


def capped_subset(shards: Sequence[Shard], cap: int = DENSE_CAP) -> list:
    """Take measurements server by server, in order, until ``cap`` are collected."""
    out = []
    left = cap
    for sh in shards:
        k = min(left, len(sh))
        out.append(sh.subset(slice(0, k)))
        left -= k
    return out


def verify(shards: Sequence[Shard], spec: BasisSpec, params, pred_locs, alt_params=None,
           cap: int = DENSE_CAP) -> dict:
    """Distributed versus dense answers on a capped subset; returns max relative
    errors (absolute for the likelihood difference)."""
    from .coordinator.spatial import a_total, combine, neg2_loglik, predict
    from .model import prior_state
    from .worker import summarize

    shards = capped_subset(shards, cap)
    prior = prior_state(spec, params)
    post = combine(prior, [summarize(s, spec, params) for s in shards])
    inst = DenseInstance.from_shards(shards, spec, params, prior, cap)
    ref = dense_posterior(inst)
    out = {
        "posterior_mean": relative_error(post.mean, ref.mean),
        "posterior_precision": relative_error(post.precision.data, ref.precision.data),
    }
    pred = predict(post, spec, params, pred_locs)
    dref = dense_conditional(inst, pred_locs, include_overlap=False)
    out["prediction_mean"] = relative_error(pred.mean, dref.mean)
    out["prediction_variance"] = relative_error(pred.variance, dref.variance)
    if alt_params is not None:
        vals = []
        for p in (params, alt_params):
            pr = prior_state(spec, p)
            sums = [summarize(s, spec, p) for s in shards]
            ll = neg2_loglik(pr, combine(pr, sums), a_total(sums))
            vals.append((ll, dense_loglik(DenseInstance.from_shards(shards, spec, p, pr, cap))))
        out["loglik_difference_abs"] = abs((vals[0][0] - vals[1][0]) - (vals[0][1] - vals[1][1]))
    return out
