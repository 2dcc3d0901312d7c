"""Computations that run next to the data.

Each server turns its shard into fixed-size quantities whose size depends on
the basis rank only: the summary (R, gamma, a, n) with
R = B'V^{-1}B, gamma = B'V^{-1}z and a = log|V| + z'V^{-1}z, the one-pass
statistics of a fixed basis, the scalar EM contribution, and the summary over
a basis augmented with indicators of observed prediction locations.

All accumulations stream over the shard in fixed-size chunks, so the n x r
basis matrix is never held in full.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np

from .errors import CapExceeded, SpecError
from .model import (
    BasisSpec,
    CompactSupport,
    FixedBasis,
    GaussianState,
    ModelParams,
    PredictiveProcessBasis,
    as_locations,
    basis_matrix,
    knot_pair_mask,
)
from .numerics import SymMatrix, cholesky, solve

CHUNK_ROWS = 4096
OVERLAP_CAP = 1024
COORD_DECIMALS = 9

# Measurement-error variances (mm^2) of the three precipitable-water sensor
# systems, keyed by server id: GPS, GOES sounders, MIRS.
TPW_NOISE_VAR = {1: 0.75 ** 2, 2: 2.0 ** 2, 3: 4.5 ** 2}


class Measurement(NamedTuple):
    x: float
    y: float
    value: float
    noise_var: float


@dataclass(eq=False)
class Shard:
    """One server's measurements at one time step (or all of them, if spatial)."""

    server_id: int
    locs: np.ndarray
    values: np.ndarray
    noise_var: np.ndarray
    time_index: Optional[int] = None

    def __post_init__(self):
        self.locs = as_locations(self.locs) if len(self.locs) else np.zeros((0, 2))
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        self.noise_var = np.asarray(self.noise_var, dtype=np.float64).reshape(-1)
        if not (len(self.locs) == len(self.values) == len(self.noise_var)):
            raise ValueError("locs, values and noise_var lengths differ")
        if np.any(~(self.noise_var > 0)):
            raise ValueError("noise variances must be positive")

    @classmethod
    def from_measurements(cls, server_id, measurements, time_index=None) -> "Shard":
        rows = list(measurements)
        if not rows:
            return cls.empty(server_id, time_index)
        a = np.array(rows, dtype=np.float64)
        return cls(server_id, a[:, :2], a[:, 2], a[:, 3], time_index)

    @classmethod
    def empty(cls, server_id, time_index=None) -> "Shard":
        return cls(server_id, np.zeros((0, 2)), np.zeros(0), np.zeros(0), time_index)

    def __len__(self):
        return len(self.values)

    def measurements(self):
        for (x, y), z, v in zip(self.locs, self.values, self.noise_var):
            yield Measurement(float(x), float(y), float(z), float(v))

    def subset(self, index) -> "Shard":
        return Shard(self.server_id, self.locs[index], self.values[index],
                     self.noise_var[index], self.time_index)


@dataclass(eq=False)
class Summary:
    server_id: int
    R: SymMatrix
    gamma: np.ndarray
    a: float
    n: int
    time_index: Optional[int] = None

    @property
    def rank(self) -> int:
        return self.R.dim

    @classmethod
    def zero(cls, server_id, r, time_index=None) -> "Summary":
        return cls(server_id, SymMatrix.zeros(r), np.zeros(r), 0.0, 0, time_index)

    def __add__(self, other: "Summary") -> "Summary":
        return Summary(self.server_id, self.R + other.R, self.gamma + other.gamma,
                       self.a + other.a, self.n + other.n, self.time_index)


@dataclass(eq=False)
class SREStats:
    BtB: SymMatrix
    Btz: np.ndarray
    ztz: float
    n: int
    server_id: int = 0
    time_index: Optional[int] = None
    noise_var: float = math.nan

    def to_summary(self, total_var: float) -> Summary:
        """Summary for V = total_var * I, total_var = sigma2_delta + sigma2_eps."""
        return Summary(
            self.server_id,
            self.BtB * (1.0 / total_var),
            self.Btz / total_var,
            self.n * math.log(total_var) + self.ztz / total_var,
            self.n,
            self.time_index,
        )

    def _total_var(self, fine_scale_var: float) -> float:
        if not math.isfinite(self.noise_var):
            raise SpecError(f"server {self.server_id} has heterogeneous measurement error; "
                            "one-pass statistics need a constant variance")
        return self.noise_var + fine_scale_var

    def summary(self, fine_scale_var: float) -> Summary:
        if self.n == 0:
            return Summary.zero(self.server_id, self.BtB.dim, self.time_index)
        return self.to_summary(self._total_var(fine_scale_var))

    def em_contribution(self, fine_scale_var: float, posterior: GaussianState,
                        trace: str = "omega") -> EMContribution:
        """compute_em_contribution evaluated from the statistics alone."""
        if trace not in ("omega", "marginal"):
            raise ValueError(f"unknown trace form {trace!r}")
        if self.n == 0:
            return EMContribution(0.0, 0, self.server_id)
        v = self._total_var(fine_scale_var)
        BtB = self.BtB.to_dense()
        nu = posterior.mean
        resid = (self.ztz - 2.0 * float(nu @ self.Btz) + float(nu @ BtB @ nu)) / (v * v)
        M = BtB / (v * v)
        if trace == "omega":
            inner = solve(cholesky(posterior.precision.to_dense() + BtB / v), M)
        else:
            inner = solve(posterior.chol, M)
        return EMContribution(resid - (self.n / v - float(np.trace(inner))), self.n,
                              self.server_id)


@dataclass(frozen=True)
class EMContribution:
    scalar: float
    n: int
    server_id: int = 0


def _fine_scale_var(p: Union[ModelParams, float]) -> float:
    if isinstance(p, ModelParams):
        return p.fine_scale_var
    return float(p)


def _chunks(n):
    for start in range(0, n, CHUNK_ROWS):
        yield slice(start, min(start + CHUNK_ROWS, n))


def _accumulate(shard: Shard, spec: BasisSpec, p, total_var: np.ndarray):
    r = spec.rank
    R = np.zeros((r, r))
    gamma = np.zeros(r)
    a = 0.0
    for sl in _chunks(len(shard)):
        B = basis_matrix(spec, p, shard.locs[sl])
        w = 1.0 / total_var[sl]
        z = shard.values[sl]
        R += (B * w[:, None]).T @ B
        gamma += B.T @ (w * z)
        a += float(np.sum(np.log(total_var[sl]) + z * z * w))
    return R, gamma, a


def compute_summary(shard: Shard, spec: BasisSpec, p) -> Summary:
    """(R, gamma, a, n) for one shard; ``p`` is ModelParams or, for a fixed
    basis, just the fine-scale variance."""
    V = shard.noise_var + _fine_scale_var(p)
    R, gamma, a = _accumulate(shard, spec, p, V)
    return Summary(shard.server_id, SymMatrix.from_dense(R), gamma, a, len(shard),
                   shard.time_index)


def compute_summary_sparse(shard: Shard, spec: PredictiveProcessBasis, p) -> Summary:
    """Same values as compute_summary, with R restricted to the knot-pair mask.

    Under a compactly supported parent, R[l, m] can only be nonzero when knots
    l and m are closer than twice the support range.
    """
    if not isinstance(spec, PredictiveProcessBasis) or not isinstance(
            spec.correlation, CompactSupport):
        raise SpecError("sparse summaries need a compactly supported predictive process")
    V = shard.noise_var + _fine_scale_var(p)
    R, gamma, a = _accumulate(shard, spec, p, V)
    R[~knot_pair_mask(spec)] = 0.0
    return Summary(shard.server_id, SymMatrix.from_dense(R), gamma, a, len(shard),
                   shard.time_index)


def summarize(shard: Shard, spec: BasisSpec, p) -> Summary:
    """compute_summary, or its masked form under a compactly supported basis."""
    if isinstance(spec, PredictiveProcessBasis) and isinstance(spec.correlation, CompactSupport):
        return compute_summary_sparse(shard, spec, p)
    return compute_summary(shard, spec, p)


def compute_sre_stats(shard: Shard, spec: BasisSpec) -> SREStats:
    """B'B, B'z, z'z and n, which suffice for any (sigma2_delta, sigma2_eps)."""
    if not isinstance(spec, FixedBasis):
        raise SpecError("one-pass statistics need a fixed (parameter-free) basis")
    r = spec.rank
    BtB = np.zeros((r, r))
    Btz = np.zeros(r)
    ztz = 0.0
    for sl in _chunks(len(shard)):
        B = basis_matrix(spec, None, shard.locs[sl])
        z = shard.values[sl]
        BtB += B.T @ B
        Btz += B.T @ z
        ztz += float(z @ z)
    v = np.unique(shard.noise_var)
    noise = float(v[0]) if len(v) == 1 else math.nan
    return SREStats(SymMatrix.from_dense(BtB), Btz, ztz, len(shard), shard.server_id,
                    shard.time_index, noise)


def compute_em_contribution(shard: Shard, spec: BasisSpec, p, posterior: GaussianState,
                            trace: str = "omega") -> EMContribution:
    """Server term of the fine-scale variance update.

    scalar = ||V^{-1}(z - B nu_z)||^2 - tr(S), where S is, for
    ``trace="omega"``, Omega^{-1} with Omega = B K_z B' + V, evaluated as
    sum 1/V_ii - tr(M (K_z^{-1} + B'V^{-1}B)^{-1}) with M = B'V^{-2}B; and for
    ``trace="marginal"``, V^{-1} - V^{-1} B K_z B' V^{-1}, i.e.
    sum 1/V_ii - tr(M K_z). Neither forms an n x n matrix.
    """
    if trace not in ("omega", "marginal"):
        raise ValueError(f"unknown trace form {trace!r}")
    V = shard.noise_var + _fine_scale_var(p)
    r = spec.rank
    M = np.zeros((r, r))
    R = np.zeros((r, r))
    resid = 0.0
    inv_v = 0.0
    for sl in _chunks(len(shard)):
        B = basis_matrix(spec, p, shard.locs[sl])
        w = 1.0 / V[sl]
        e = (shard.values[sl] - B @ posterior.mean) * w
        resid += float(e @ e)
        inv_v += float(np.sum(w))
        Bw = B * w[:, None]
        R += Bw.T @ B
        M += Bw.T @ Bw
    if trace == "omega":
        inner = solve(cholesky(posterior.precision.to_dense() + R), M)
    else:
        inner = solve(posterior.chol, M)
    return EMContribution(resid - (inv_v - float(np.trace(inner))), len(shard),
                          shard.server_id)


def _coord_key(x, y):
    return (round(float(x), COORD_DECIMALS), round(float(y), COORD_DECIMALS))


def overlap_index(shard: Shard, overlap_locs) -> np.ndarray:
    """For each measurement, the index of the coinciding overlap location or -1.

    Coordinates are compared after rounding to 1e-9.
    """
    lookup = {}
    for l, (x, y) in enumerate(as_locations(overlap_locs) if len(overlap_locs) else []):
        key = _coord_key(x, y)
        if key in lookup:
            raise SpecError("overlap locations must be pairwise distinct")
        lookup[key] = l
    return np.array([lookup.get(_coord_key(x, y), -1) for x, y in shard.locs], dtype=int)


def compute_augmented_summary(shard: Shard, spec: BasisSpec, p, overlap_locs,
                              cap: int = OVERLAP_CAP) -> Summary:
    """Summary over the basis (B, P) where P_{il} = 1 if s_i is overlap location l.

    Measurements at an overlap location carry only their measurement-error
    variance, since their fine-scale term is part of the augmented state.
    """
    q = len(overlap_locs)
    if q > cap:
        raise CapExceeded(f"{q} overlap locations exceed the cap of {cap}")
    hit = overlap_index(shard, overlap_locs) if q else np.full(len(shard), -1)
    V = shard.noise_var + np.where(hit >= 0, 0.0, _fine_scale_var(p))
    R_b, gamma_b, a = _accumulate(shard, spec, p, V)
    r = spec.rank
    R = np.zeros((r + q, r + q))
    R[:r, :r] = R_b
    gamma = np.concatenate([gamma_b, np.zeros(q)])
    for i in np.flatnonzero(hit >= 0):
        l = r + hit[i]
        w = 1.0 / V[i]
        b = basis_matrix(spec, p, shard.locs[i])[0]
        R[l, :r] += b * w
        R[l, l] += w
        gamma[l] += shard.values[i] * w
    return Summary(shard.server_id, SymMatrix.from_dense(R), gamma, a, len(shard),
                   shard.time_index)


class ServerData:
    """All shards held by one server, keyed by time index (None if spatial)."""

    def __init__(self, server_id: int, shards=()):
        self.server_id = int(server_id)
        self.shards = {}
        for sh in shards:
            if sh.server_id != self.server_id:
                raise SpecError(f"shard of server {sh.server_id} given to server {self.server_id}")
            if sh.time_index in self.shards:
                raise SpecError(f"duplicate shard for time {sh.time_index}")
            self.shards[sh.time_index] = sh

    def shard(self, time_index=None) -> Shard:
        sh = self.shards.get(time_index)
        return Shard.empty(self.server_id, time_index) if sh is None else sh

    @property
    def times(self):
        return sorted(t for t in self.shards if t is not None)

    def n(self, time_index=None) -> int:
        return len(self.shard(time_index))
