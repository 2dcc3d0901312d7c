"""Dense symmetric linear algebra and the modified Bessel function K_nu.

Matrices here are small (r up to a few hundred), so everything is dense.
Symmetric matrices are stored as a packed lower triangle in row-major order,
which is also the layout used on the wire.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.linalg import cho_solve, lapack

from .errors import DimensionMismatch, DomainError, NotPositiveDefinite

__all__ = [
    "SymMatrix",
    "CholFactor",
    "cholesky",
    "logdet",
    "solve",
    "invert",
    "bessel_k",
]


def packed_size(dim: int) -> int:
    return dim * (dim + 1) // 2


def packed_index(i: int, j: int) -> int:
    if i < j:
        i, j = j, i
    return i * (i + 1) // 2 + j


class SymMatrix:
    """Symmetric matrix held as its packed lower triangle.

    Only one triangle is stored, so the represented matrix is symmetric by
    construction.
    """

    __slots__ = ("dim", "data")

    def __init__(self, dim: int, data=None):
        if dim < 0:
            raise ValueError("dim must be non-negative")
        self.dim = int(dim)
        n = packed_size(self.dim)
        if data is None:
            self.data = np.zeros(n)
        else:
            data = np.asarray(data, dtype=np.float64)
            if data.shape != (n,):
                raise DimensionMismatch(
                    f"packed data of length {data.size} does not match dim {dim}")
            self.data = data

    @classmethod
    def from_dense(cls, a) -> "SymMatrix":
        """Pack the lower triangle of a square array (the upper one is ignored)."""
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
        return cls(a.shape[0], a[np.tril_indices(a.shape[0])].copy())

    @classmethod
    def zeros(cls, dim: int) -> "SymMatrix":
        return cls(dim)

    @classmethod
    def identity(cls, dim: int) -> "SymMatrix":
        return cls.diag(np.ones(dim))

    @classmethod
    def diag(cls, values) -> "SymMatrix":
        values = np.asarray(values, dtype=np.float64)
        m = cls(values.size)
        idx = np.arange(values.size)
        m.data[idx * (idx + 3) // 2] = values
        return m

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        rows, cols = np.tril_indices(self.dim)
        out[rows, cols] = self.data
        out[cols, rows] = self.data
        return out

    def diagonal(self) -> np.ndarray:
        idx = np.arange(self.dim)
        return self.data[idx * (idx + 3) // 2].copy()

    def copy(self) -> "SymMatrix":
        return SymMatrix(self.dim, self.data.copy())

    def __getitem__(self, ij):
        i, j = ij
        self._check(i, j)
        return float(self.data[packed_index(i, j)])

    def __setitem__(self, ij, value):
        i, j = ij
        self._check(i, j)
        self.data[packed_index(i, j)] = value

    def _check(self, i, j):
        if not (0 <= i < self.dim and 0 <= j < self.dim):
            raise IndexError(f"index ({i}, {j}) out of range for dim {self.dim}")

    def _same_dim(self, other):
        if not isinstance(other, SymMatrix):
            return NotImplemented
        if other.dim != self.dim:
            raise DimensionMismatch(f"dims {self.dim} and {other.dim} differ")
        return True

    def __add__(self, other):
        if self._same_dim(other) is NotImplemented:
            return NotImplemented
        return SymMatrix(self.dim, self.data + other.data)

    def __sub__(self, other):
        if self._same_dim(other) is NotImplemented:
            return NotImplemented
        return SymMatrix(self.dim, self.data - other.data)

    def __mul__(self, scalar):
        return SymMatrix(self.dim, self.data * float(scalar))

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, SymMatrix):
            return NotImplemented
        return self.dim == other.dim and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"SymMatrix(dim={self.dim}, data={self.data!r})"


@dataclass(frozen=True)
class CholFactor:
    """Lower-triangular L with positive diagonal, A = L L'."""

    lower: np.ndarray

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


def _as_dense(m) -> np.ndarray:
    if isinstance(m, SymMatrix):
        return m.to_dense()
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    return a


def cholesky(m) -> CholFactor:
    """Cholesky factor of a symmetric positive definite matrix.

    Accepts a SymMatrix or a dense array (only its lower triangle is read).
    No jitter is added; a non-positive pivot raises NotPositiveDefinite with
    the zero-based index of the failing pivot.
    """
    a = _as_dense(m)
    if a.shape[0] == 0:
        return CholFactor(np.zeros((0, 0)))
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite(0, "non-finite entries")
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefinite(info - 1)
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return CholFactor(c)


def logdet(f: CholFactor) -> float:
    return 2.0 * float(np.sum(np.log(np.diagonal(f.lower))))


def solve(f: CholFactor, b):
    """Solve A x = b for vector or matrix right-hand side."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != f.dim:
        raise DimensionMismatch(
            f"right-hand side has {b.shape[0]} rows, factor has dim {f.dim}")
    if f.dim == 0:
        return b.copy()
    return cho_solve((f.lower, True), b)


def inverse_dense(f: CholFactor) -> np.ndarray:
    """Symmetric dense inverse of the factored matrix."""
    if f.dim == 0:
        return np.zeros((0, 0))
    inv, info = lapack.dpotri(f.lower, lower=1)
    if info != 0:
        raise NotPositiveDefinite(max(info - 1, 0), "dpotri")
    lower = np.tril(inv)
    return lower + np.tril(inv, -1).T


def invert(f: CholFactor) -> SymMatrix:
    return SymMatrix.from_dense(inverse_dense(f))


# -- modified Bessel function of the second kind -----------------------------

_EPS = 1e-16
_MAX_ITER = 10_000

# Taylor coefficients of 1/Gamma(z) about 0: 1/Gamma(z) = sum_k c[k] z**k.
_RGAMMA_TAYLOR = (
    0.0,
    1.0,
    0.5772156649015328606065,
    -0.655878071520253881077,
    -0.042002635034095235529,
    0.1665386113822914895017,
    -0.04219773455554433674821,
    -0.009621971527876973562115,
    0.007218943246663099542395,
    -0.001165167591859065112114,
    -0.0002152416741149509728157,
    0.0001280502823881161861532,
    -0.00002013485478078823865569,
    -0.000001250493482142670657345,
    0.000001133027231981695882374,
    -2.05633841697760710345e-7,
    6.116095104481415817862e-9,
    5.002007644469222930056e-9,
    -1.181274570487020144588e-9,
    1.043426711691100510492e-10,
    7.78226343990507125405e-12,
    -3.696805618642205708188e-12,
    5.100370287454475979015e-13,
    -2.058326053566506783222e-14,
    -5.34812253942301798237e-15,
    1.226778628238260790159e-15,
    -1.181259301697458769514e-16,
)
# gam2 = sum over odd k of c[k] mu^(k-1); -gam1 = sum over even k of c[k] mu^(k-2)
_RGAMMA_ODD = np.array(_RGAMMA_TAYLOR[1::2])
_RGAMMA_EVEN = np.array(_RGAMMA_TAYLOR[2::2])


@njit(cache=True)
def _k_pair_series(mu, gam1, gam2, gampl, gammi, x):
    """K_mu(x), K_{mu+1}(x) for 0 < x < 2 by Temme's series."""
    mu2 = mu * mu
    x2 = 0.5 * x
    pimu = math.pi * mu
    fact = 1.0 if abs(pimu) < _EPS else pimu / math.sin(pimu)
    d = -math.log(x2)
    e = mu * d
    fact2 = 1.0 if abs(e) < _EPS else math.sinh(e) / e
    ff = fact * (gam1 * math.cosh(e) + gam2 * fact2 * d)
    total = ff
    e = math.exp(e)
    p = 0.5 * e / gampl
    q = 0.5 / (e * gammi)
    c = 1.0
    dd = x2 * x2
    total1 = p
    for i in range(1, _MAX_ITER):
        ff = (i * ff + p + q) / (i * i - mu2)
        c *= dd / i
        p /= i - mu
        q /= i + mu
        term = c * ff
        total += term
        total1 += c * (p - i * ff)
        if abs(term) < abs(total) * _EPS:
            break
    return total, total1 * 2.0 / x


@njit(cache=True)
def _k_pair_steed(mu, x):
    """K_mu(x), K_{mu+1}(x) for x >= 2 by Steed's continued fraction."""
    mu2 = mu * mu
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = d
    delh = d
    q1 = 0.0
    q2 = 1.0
    a1 = 0.25 - mu2
    q = a1
    c = a1
    a = -a1
    s = 1.0 + q * delh
    for i in range(2, _MAX_ITER):
        a -= 2 * (i - 1)
        c = -a * c / i
        qnew = (q1 - b * q2) / a
        q1 = q2
        q2 = qnew
        q += c * qnew
        b += 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h += delh
        dels = q * delh
        s += dels
        if abs(dels) < abs(s) * _EPS:
            break
    h = a1 * h
    kmu = math.sqrt(math.pi / (2.0 * x)) * math.exp(-x) / s
    return kmu, kmu * (mu + x + 0.5 - h) / x


@njit(cache=True)
def _bessel_k_into(nu, xs, out):
    nl = int(nu + 0.5)
    mu = nu - nl
    # gam1, gam2 from the even/odd parts of the 1/Gamma Taylor series
    mu2 = mu * mu
    gam2 = 0.0
    for k in range(len(_RGAMMA_ODD) - 1, -1, -1):
        gam2 = gam2 * mu2 + _RGAMMA_ODD[k]
    gam1 = 0.0
    for k in range(len(_RGAMMA_EVEN) - 1, -1, -1):
        gam1 = gam1 * mu2 + _RGAMMA_EVEN[k]
    gam1 = -gam1
    gampl = gam2 - mu * gam1
    gammi = gam2 + mu * gam1
    for j in range(xs.size):
        x = xs[j]
        if x < 2.0:
            kmu, k1 = _k_pair_series(mu, gam1, gam2, gampl, gammi, x)
        else:
            kmu, k1 = _k_pair_steed(mu, x)
        for i in range(1, nl + 1):
            kmu, k1 = k1, (mu + i) * (2.0 / x) * k1 + kmu
        out[j] = kmu


def bessel_k(nu, x):
    """Modified Bessel function of the second kind K_nu(x), 0 < nu < 2, x > 0.

    Temme's method: the order is split as nu = mu + n with |mu| <= 1/2, K_mu
    and K_{mu+1} come from a power series (x < 2) or Steed's continued
    fraction (x >= 2), and at most two steps of the upward recurrence reach
    nu. Accepts a scalar or an array for x.
    """
    nu = float(nu)
    if not (0.0 < nu < 2.0) or not math.isfinite(nu):
        raise DomainError(f"order must lie in (0, 2), got {nu}")
    xa = np.asarray(x, dtype=np.float64)
    if np.any(~(xa > 0.0)) or np.any(~np.isfinite(xa)):
        raise DomainError("argument must be positive and finite")
    flat = np.ascontiguousarray(xa).reshape(-1)
    out = np.empty_like(flat)
    _bessel_k_into(nu, flat, out)
    if xa.ndim == 0:
        return float(out[0])
    return out.reshape(xa.shape)
