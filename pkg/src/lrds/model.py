"""Low-rank spatial model: basis functions, correlations, priors, evolution.

The process is y(s) = b(s)'eta + delta(s) with eta ~ N(nu_0, K_0). Two basis
families are supported: a fixed (parameter-free) basis, as in the spatial
random effects model, and the predictive process built from a parent
correlation and a set of knots. Either may carry a trailing intercept
coordinate.

Locations are handled as float arrays of shape (n, 2) holding (x, y); a
single point may be passed as a pair.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional, Union

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import DomainError, SpecError
from .numerics import CholFactor, SymMatrix, bessel_k, cholesky, inverse_dense

# Intercept prior used for the precipitable-water setup (mm, mm^2).
INTERCEPT_MEAN = 13.2
INTERCEPT_VAR = 15.9


class Location(NamedTuple):
    x: float
    y: float


def as_locations(locs) -> np.ndarray:
    a = np.asarray(locs, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, 2)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError(f"locations must have shape (n, 2), got {a.shape}")
    return a


def distances(a, b) -> np.ndarray:
    """Planar Euclidean distance matrix between two location sets."""
    a = as_locations(a)
    b = as_locations(b)
    return np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])


def regular_grid(x_range, y_range, spacing) -> np.ndarray:
    """Grid points (x fastest) covering [x0, x1] x [y0, y1] inclusive."""
    nx = int(round((x_range[1] - x_range[0]) / spacing)) + 1
    ny = int(round((y_range[1] - y_range[0]) / spacing)) + 1
    xs = x_range[0] + spacing * np.arange(nx)
    ys = y_range[0] + spacing * np.arange(ny)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


# -- parameters ---------------------------------------------------------------

@dataclass(frozen=True)
class MaternParams:
    sigma: float
    smoothness: float
    scale: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.smoothness < 2:
            raise DomainError(f"smoothness must lie in (0, 2), got {self.smoothness}")
        if not self.scale > 0:
            raise DomainError(f"scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class ModelParams:
    matern: MaternParams
    fine_scale_var: float
    temporal_coef: Optional[float] = None

    def __post_init__(self):
        if not self.fine_scale_var >= 0:
            raise DomainError(f"fine_scale_var must be >= 0, got {self.fine_scale_var}")
        if self.temporal_coef is not None and not abs(self.temporal_coef) < 1:
            raise DomainError(f"|temporal_coef| must be < 1, got {self.temporal_coef}")

    @classmethod
    def natural(cls, alpha=None, sigma=5.0, smoothness=1.25, scale=15.0,
                fine_scale_var=0.5) -> "ModelParams":
        return cls(MaternParams(sigma, smoothness, scale), fine_scale_var, alpha)

    def to_vector(self) -> np.ndarray:
        """Natural-scale (alpha, sigma, smoothness, scale, fine_scale_var).

        A missing temporal coefficient is encoded as NaN.
        """
        a = np.nan if self.temporal_coef is None else self.temporal_coef
        m = self.matern
        return np.array([a, m.sigma, m.smoothness, m.scale, self.fine_scale_var])

    @classmethod
    def from_vector(cls, v) -> "ModelParams":
        a, sigma, nu, kappa, s2 = (float(x) for x in v)
        return cls(MaternParams(sigma, nu, kappa), s2, None if math.isnan(a) else a)

    def to_transformed(self) -> np.ndarray:
        """(Phi^-1(alpha), log sigma, Phi^-1(nu/2), log kappa, log sigma2_delta)."""
        if self.temporal_coef is None or not 0 < self.temporal_coef < 1:
            raise DomainError("transformed scale needs temporal_coef in (0, 1)")
        m = self.matern
        return np.array([
            ndtri(self.temporal_coef),
            math.log(m.sigma),
            ndtri(m.smoothness / 2.0),
            math.log(m.scale),
            math.log(self.fine_scale_var),
        ])

    @classmethod
    def from_transformed(cls, theta) -> "ModelParams":
        t = np.asarray(theta, dtype=np.float64)
        return cls(
            MaternParams(math.exp(t[1]), 2.0 * float(ndtr(t[2])), math.exp(t[3])),
            math.exp(t[4]),
            float(ndtr(t[0])),
        )


DEFAULT_PARAMS = ModelParams.natural(alpha=0.8, sigma=5.0, smoothness=1.25,
                                     scale=15.0, fine_scale_var=0.5)


@dataclass(frozen=True)
class RandomWalkPrior:
    """Gaussian prior on the transformed parameter vector, N(center, scale * I).

    Serves both as the initial prior and as the per-step random-walk kernel.
    """

    center: np.ndarray
    scale: float = 0.1

    @property
    def dim(self) -> int:
        return len(self.center)

    def sample(self, rng, size: int, center=None) -> np.ndarray:
        c = self.center if center is None else np.asarray(center)
        noise = rng.standard_normal((size, self.dim)) * math.sqrt(self.scale)
        return c + noise

    def logpdf(self, theta, center=None) -> np.ndarray:
        c = self.center if center is None else np.asarray(center)
        d = np.atleast_2d(theta) - c
        k = self.dim
        return -0.5 * (np.sum(d * d, axis=-1) / self.scale
                       + k * math.log(2 * math.pi * self.scale))


# -- correlation functions ----------------------------------------------------

def matern_from_distance(d, p: MaternParams) -> np.ndarray:
    """Matern correlation as a function of distance; exactly 1 at d = 0."""
    d = np.asarray(d, dtype=np.float64)
    nu = p.smoothness
    out = np.ones(d.shape)
    pos = d > 0
    if pos.any():
        x = 2.0 * (d[pos] / p.scale) * math.sqrt(nu)
        const = 2.0 ** (1.0 - nu) / math.gamma(nu)
        with np.errstate(under="ignore"):
            # round-off can push tiny distances a few ulp above 1
            out[pos] = np.minimum(x ** nu * bessel_k(nu, x) * const, 1.0)
    return out


def spherical_from_distance(d, h: float) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    u = d / h
    return np.where(u < 1.0, 1.0 - 1.5 * u + 0.5 * u ** 3, 0.0)


def matern_correlation(s1, s2, p: MaternParams) -> float:
    return float(matern_from_distance(distances(s1, s2), p)[0, 0])


def compact_correlation(s1, s2, h: float) -> float:
    if not h > 0:
        raise DomainError("support range must be positive")
    return float(spherical_from_distance(distances(s1, s2), h)[0, 0])


# -- basis specifications -----------------------------------------------------

@dataclass(frozen=True)
class CompactSupport:
    """Spherical parent correlation with support radius ``range``."""

    range: float

    def __post_init__(self):
        if not self.range > 0:
            raise DomainError("support range must be positive")


Correlation = Union[str, CompactSupport]  # "matern" or CompactSupport


def _bisquare(locs, centers, width):
    d = distances(locs, centers) / width
    return np.where(d < 1.0, (1.0 - d * d) ** 2, 0.0)


def _gaussian_rbf(locs, centers, width):
    d = distances(locs, centers) / width
    return np.exp(-0.5 * d * d)


EVALUATORS: dict[str, Callable] = {
    "bisquare": _bisquare,
    "gaussian": _gaussian_rbf,
}


@dataclass(frozen=True, eq=False)
class FixedBasis:
    """Parameter-free basis, b_k(s) = f(||s - c_k|| / width) for a named f."""

    evaluator: str
    centers: np.ndarray
    width: float
    prior_precision: SymMatrix
    include_intercept: bool = False
    intercept_mean: float = INTERCEPT_MEAN
    intercept_var: float = INTERCEPT_VAR

    def __post_init__(self):
        if self.evaluator not in EVALUATORS:
            raise SpecError(f"unknown basis evaluator {self.evaluator!r}")
        object.__setattr__(self, "centers", as_locations(self.centers))
        if self.prior_precision.dim != len(self.centers):
            raise SpecError("prior_precision dim must equal the number of centers")

    @property
    def base_rank(self) -> int:
        return len(self.centers)

    @property
    def rank(self) -> int:
        return self.base_rank + int(self.include_intercept)

    def with_prior_precision(self, precision: SymMatrix) -> "FixedBasis":
        return replace(self, prior_precision=precision)


@dataclass(frozen=True, eq=False)
class PredictiveProcessBasis:
    """b(s) = sigma * (rho(s, w_1), ..., rho(s, w_r)) for knots w_k."""

    knots: np.ndarray
    correlation: Correlation = "matern"
    include_intercept: bool = False
    intercept_mean: float = INTERCEPT_MEAN
    intercept_var: float = INTERCEPT_VAR

    def __post_init__(self):
        knots = as_locations(self.knots)
        object.__setattr__(self, "knots", knots)
        if len(knots) < 1:
            raise SpecError("at least one knot is required")
        if not (self.correlation == "matern" or isinstance(self.correlation, CompactSupport)):
            raise SpecError(f"unknown correlation {self.correlation!r}")
        if len(np.unique(knots, axis=0)) != len(knots):
            raise SpecError("knots must be pairwise distinct")

    @property
    def base_rank(self) -> int:
        return len(self.knots)

    @property
    def rank(self) -> int:
        return self.base_rank + int(self.include_intercept)


BasisSpec = Union[FixedBasis, PredictiveProcessBasis]


def _correlate(spec: PredictiveProcessBasis, p: ModelParams, d) -> np.ndarray:
    if isinstance(spec.correlation, CompactSupport):
        return spherical_from_distance(d, spec.correlation.range)
    return matern_from_distance(d, p.matern)


def basis_matrix(spec: BasisSpec, p: Optional[ModelParams], locs) -> np.ndarray:
    """Rows b(s_i)' for each location; shape (n, rank)."""
    locs = as_locations(locs)
    if isinstance(spec, FixedBasis):
        core = EVALUATORS[spec.evaluator](locs, spec.centers, spec.width)
    else:
        if not isinstance(p, ModelParams):
            raise SpecError("a predictive-process basis needs the full model parameters")
        core = p.matern.sigma * _correlate(spec, p, distances(locs, spec.knots))
    if spec.include_intercept:
        core = np.column_stack([core, np.ones(len(locs))])
    return core


def evaluate_basis(spec: BasisSpec, p: Optional[ModelParams], s) -> np.ndarray:
    return basis_matrix(spec, p, s)[0]


def knot_pair_mask(spec: PredictiveProcessBasis) -> np.ndarray:
    """Boolean r x r mask of knot pairs that can share data (distance < 2h).

    Intercept coordinates, when present, interact with every knot.
    """
    if not isinstance(spec.correlation, CompactSupport):
        raise SpecError("knot-pair mask needs a compactly supported correlation")
    mask = distances(spec.knots, spec.knots) < 2.0 * spec.correlation.range
    if spec.include_intercept:
        r = spec.rank
        full = np.ones((r, r), dtype=bool)
        full[:-1, :-1] = mask
        mask = full
    return mask


def knot_correlation(spec: PredictiveProcessBasis, p: ModelParams) -> np.ndarray:
    return _correlate(spec, p, distances(spec.knots, spec.knots))


def _with_intercept(core: np.ndarray, spec: BasisSpec) -> np.ndarray:
    if not spec.include_intercept:
        return core
    r = core.shape[0] + 1
    out = np.zeros((r, r))
    out[:-1, :-1] = core
    out[-1, -1] = 1.0 / spec.intercept_var
    return out


def prior_precision(spec: BasisSpec, p: Optional[ModelParams], jitter: float = 0.0) -> SymMatrix:
    """K_0^{-1}: knot correlation matrix (predictive process) or the stored one."""
    if jitter < 0:
        raise DomainError("jitter must be non-negative")
    if isinstance(spec, FixedBasis):
        core = spec.prior_precision.to_dense()
    else:
        core = knot_correlation(spec, p)
    if jitter:
        core = core + jitter * np.eye(core.shape[0])
    return SymMatrix.from_dense(_with_intercept(core, spec))


def prior_mean(spec: BasisSpec) -> np.ndarray:
    mean = np.zeros(spec.rank)
    if spec.include_intercept:
        mean[-1] = spec.intercept_mean
    return mean


# -- Gaussian states ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianState:
    """N(mean, precision^{-1}) kept in information form with a cached factor."""

    mean: np.ndarray
    precision: SymMatrix
    chol: CholFactor = field(repr=False)

    @classmethod
    def from_precision(cls, mean, precision) -> "GaussianState":
        if not isinstance(precision, SymMatrix):
            precision = SymMatrix.from_dense(precision)
        mean = np.asarray(mean, dtype=np.float64)
        if mean.shape != (precision.dim,):
            raise SpecError(f"mean of shape {mean.shape} does not match dim {precision.dim}")
        return cls(mean, precision, cholesky(precision))

    @classmethod
    def from_covariance(cls, mean, cov) -> "GaussianState":
        return cls.from_precision(mean, inverse_dense(cholesky(cov)))

    @property
    def dim(self) -> int:
        return self.precision.dim

    def covariance(self) -> np.ndarray:
        return inverse_dense(self.chol)

    def information_vector(self) -> np.ndarray:
        """precision @ mean."""
        return self.precision.to_dense() @ self.mean


def prior_state(spec: BasisSpec, p: Optional[ModelParams], jitter: float = 0.0) -> GaussianState:
    return GaussianState.from_precision(prior_mean(spec), prior_precision(spec, p, jitter))


# -- temporal evolution -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Evolution:
    """eta_t | eta_{t-1} ~ N(H eta_{t-1}, U).

    U is kept as a covariance because it may be singular (an intercept with
    zero innovation, or the no-innovation case); ``U_precision`` is only set
    when U is invertible.
    """

    H: np.ndarray
    U: np.ndarray
    U_precision: Optional[SymMatrix] = None

    @classmethod
    def identity(cls, r: int) -> "Evolution":
        """H = I with no innovation."""
        return cls(np.eye(r), np.zeros((r, r)))


def evolution(p: ModelParams, spec: PredictiveProcessBasis, jitter: float = 0.0,
              intercept_innovation_var: float = 0.0) -> Evolution:
    """H = alpha I and U^{-1} = (1 - alpha^2)^{-1} times the knot correlation.

    The intercept coordinate, if any, follows a random walk (H = 1) with the
    given innovation variance.
    """
    alpha = p.temporal_coef
    if alpha is None or not abs(alpha) < 1:
        raise DomainError(f"temporal coefficient must satisfy |alpha| < 1, got {alpha}")
    corr = knot_correlation(spec, p)
    if jitter:
        corr = corr + jitter * np.eye(corr.shape[0])
    core_prec = corr / (1.0 - alpha * alpha)
    core_cov = inverse_dense(cholesky(core_prec))
    r0 = spec.base_rank
    H = alpha * np.eye(spec.rank)
    U = np.zeros((spec.rank, spec.rank))
    U[:r0, :r0] = core_cov
    U_prec = None
    if spec.include_intercept:
        H[-1, -1] = 1.0
        U[-1, -1] = intercept_innovation_var
        if intercept_innovation_var > 0:
            full = np.zeros_like(U)
            full[:r0, :r0] = core_prec
            full[-1, -1] = 1.0 / intercept_innovation_var
            U_prec = SymMatrix.from_dense(full)
    else:
        U_prec = SymMatrix.from_dense(core_prec)
    return Evolution(H, U, U_prec)


__all__ = [
    "Location", "MaternParams", "ModelParams", "RandomWalkPrior", "CompactSupport",
    "FixedBasis", "PredictiveProcessBasis", "BasisSpec", "GaussianState", "Evolution",
    "matern_correlation", "compact_correlation", "evaluate_basis", "basis_matrix",
    "prior_precision", "prior_mean", "prior_state", "evolution", "knot_correlation",
    "knot_pair_mask", "distances", "regular_grid", "DEFAULT_PARAMS",
]
