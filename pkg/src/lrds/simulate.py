"""Synthetic data from the low-rank model, for testing and re-enactments.

eta_0 ~ N(nu_0, K_0), eta_t = H eta_{t-1} + u_t, and at each measurement
z = b(s)'eta_t + delta(s) + eps(s) with server-specific error variances.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.linalg import solve_triangular

from .config import RunConfig
from .io import canonical_coord, ensure_dir, write_shards, write_table
from .model import basis_matrix, evolution, prior_mean, prior_precision
from .numerics import cholesky
from .worker import Shard


@dataclass
class Simulation:
    shards: Dict[int, List[Shard]]
    eta: List[np.ndarray]
    surface: List[np.ndarray] = field(default_factory=list)
    grid: Optional[np.ndarray] = None

    @property
    def times(self) -> List[Optional[int]]:
        if len(self.eta) == 1:
            return [None]
        return list(range(1, len(self.eta)))


def _draw_prior(rng, spec, p, jitter) -> np.ndarray:
    f = cholesky(prior_precision(spec, p, jitter))
    # precision = L L'  =>  L'^{-1} w ~ N(0, precision^{-1})
    return prior_mean(spec) + solve_triangular(f.lower.T, rng.standard_normal(spec.rank),
                                               lower=False)


def _draw_innovation(rng, U: np.ndarray) -> np.ndarray:
    w = rng.standard_normal(U.shape[0])
    keep = np.flatnonzero(np.diag(U) > 0)
    out = np.zeros(U.shape[0])
    if len(keep):
        L = np.linalg.cholesky(U[np.ix_(keep, keep)])
        out[keep] = L @ w[keep]
    return out


def simulate(cfg: RunConfig, seed: int) -> Simulation:
    """Draw one data set; ``cfg.simulate.times = 0`` gives spatial data only."""
    sim = cfg.simulate
    spec = cfg.basis_spec()
    p = cfg.model_params()
    rng = np.random.default_rng(seed)
    jitter = cfg.model.jitter
    T = sim.times
    eta = [_draw_prior(rng, spec, p, jitter)]
    if T > 0:
        ev = evolution(p, spec, jitter, cfg.model.intercept_innovation_var)
        for _ in range(T):
            eta.append(ev.H @ eta[-1] + _draw_innovation(rng, ev.U))
    steps = [None] if T == 0 else list(range(1, T + 1))
    per = max(1, sim.n // (sim.servers * len(steps)))
    shards: Dict[int, List[Shard]] = {j: [] for j in range(1, sim.servers + 1)}
    sd_delta = math.sqrt(p.fine_scale_var)
    for t in steps:
        state = eta[0] if t is None else eta[t]
        for j in range(1, sim.servers + 1):
            x = rng.uniform(*sim.domain_x, per)
            y = rng.uniform(*sim.domain_y, per)
            locs = np.array([[canonical_coord(a), canonical_coord(b)] for a, b in zip(x, y)])
            signal = basis_matrix(spec, p, locs) @ state
            noise_sd = sim.noise_sd[j - 1]
            z = (signal + sd_delta * rng.standard_normal(per)
                 + noise_sd * rng.standard_normal(per))
            shards[j].append(Shard(j, locs, z, np.full(per, noise_sd ** 2), t))
    out = Simulation(shards, eta)
    grid = cfg.prediction_grid()
    if grid is not None:
        BP = basis_matrix(spec, p, grid)
        out.grid = grid
        out.surface = [BP @ e for e in (eta if T == 0 else eta[1:])]
    return out


def write_simulation(sim: Simulation, out_dir, cfg: RunConfig) -> List[str]:
    """Shard files ``server_<j>.csv`` plus truth files; returns the shard paths."""
    ensure_dir(out_dir)
    paths = []
    for j, shards in sim.shards.items():
        path = os.path.join(out_dir, f"server_{j}.csv")
        write_shards(path, shards)
        paths.append(path)
    timed = len(sim.eta) > 1
    write_table(os.path.join(out_dir, "truth_eta.csv"), ["t", "k", "eta"],
                ((t, k, float(v)) for t, e in enumerate(sim.eta) for k, v in enumerate(e)))
    p = cfg.model_params()
    theta = p.to_transformed() if p.temporal_coef is not None and 0 < p.temporal_coef < 1 \
        else np.full(5, np.nan)
    names = ["alpha", "sigma", "smoothness", "scale", "fine_scale_var"]
    write_table(os.path.join(out_dir, "truth_params.csv"), ["name", "natural", "transformed"],
                ((n, float(a), float(b)) for n, a, b in zip(names, p.to_vector(), theta)))
    if sim.grid is not None:
        rows = []
        for i, surf in enumerate(sim.surface):
            t = i + 1 if timed else 0
            rows.extend((t, float(x), float(y), float(v)) for (x, y), v in zip(sim.grid, surf))
        write_table(os.path.join(out_dir, "truth_surface.csv"), ["t", "x", "y", "signal"], rows)
    return paths
