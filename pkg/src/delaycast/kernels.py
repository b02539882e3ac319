"""Covariance-function algebra: kernel evaluation, Gram assembly, Kronecker
composition, and jittered Cholesky factorization.

All kernels are stationary, so every evaluation reduces to a profile over the
distance r = |x1 - x2|:

    SE        alpha^2 * exp(-r^2 / (2 rho^2))
    Matern12  alpha^2 * exp(-r / rho)
    Matern32  alpha^2 * (1 + sqrt(3) r / rho) * exp(-sqrt(3) r / rho)
    White     sigma^2 * [r == 0]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack, blas

from .errors import DomainError, NotPositiveDefiniteError, SizeError

SE = "se"
MATERN12 = "matern12"
MATERN32 = "matern32"
WHITE = "white"

_KINDS = (SE, MATERN12, MATERN32, WHITE)

#: Hard cap on the row count of any assembled Gram matrix.
MAX_GRAM_SIZE = 20_000

#: Default base jitter for `cholesky_jitter`; escalated tenfold up to 1e6x.
DEFAULT_JITTER = 1e-8

_SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class KernelSpec:
    """One covariance term. ``sigma`` is only meaningful for white noise."""

    kind: str
    alpha: float = 1.0
    rho: float = 1.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise DomainError(f"unknown kernel kind {self.kind!r}")
        if self.kind == WHITE:
            if self.sigma < 0:
                raise DomainError("white-noise sigma must be >= 0")
        else:
            if self.alpha <= 0 or self.rho <= 0:
                raise DomainError("alpha and rho must be > 0")


@dataclass(frozen=True)
class CompositeKernelSpec:
    """Sum of kernel terms, optionally with a separable 2D part.

    ``terms`` are summed over a shared 1D input. When ``time_terms`` and
    ``delay_terms`` are given (equal lengths, >= 1 each), additive component i
    is the Kronecker product time_terms[i] x delay_terms[i]; plain white-noise
    ``terms`` then act on the diagonal of the summed 2D Gram.
    """

    terms: tuple[KernelSpec, ...] = ()
    time_terms: tuple[KernelSpec, ...] = ()
    delay_terms: tuple[KernelSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "time_terms", tuple(self.time_terms))
        object.__setattr__(self, "delay_terms", tuple(self.delay_terms))
        if len(self.time_terms) != len(self.delay_terms):
            raise DomainError("time_terms and delay_terms must pair up")
        if not self.terms and not self.time_terms:
            raise DomainError("composite kernel needs at least one term")


@dataclass
class GramMatrix:
    """Realized covariance matrix plus the jitter already folded into it."""

    values: np.ndarray
    jitter_applied: float = 0.0

    @property
    def n(self) -> int:
        return self.values.shape[0]


def kernel_profile(spec: KernelSpec, r: np.ndarray) -> np.ndarray:
    """Vectorized kernel value over non-negative distances ``r``."""
    r = np.asarray(r, dtype=float)
    if spec.kind == SE:
        return spec.alpha**2 * np.exp(-(r**2) / (2.0 * spec.rho**2))
    if spec.kind == MATERN12:
        return spec.alpha**2 * np.exp(-r / spec.rho)
    if spec.kind == MATERN32:
        s = _SQRT3 * r / spec.rho
        return spec.alpha**2 * (1.0 + s) * np.exp(-s)
    # white noise
    return np.where(r == 0.0, spec.sigma**2, 0.0)


def kernel_profile_rho_grad(spec: KernelSpec, r: np.ndarray) -> np.ndarray:
    """d kernel / d rho over distances ``r`` (zero for white noise)."""
    r = np.asarray(r, dtype=float)
    if spec.kind == SE:
        return kernel_profile(spec, r) * r**2 / spec.rho**3
    if spec.kind == MATERN12:
        return kernel_profile(spec, r) * r / spec.rho**2
    if spec.kind == MATERN32:
        s = _SQRT3 * r / spec.rho
        return spec.alpha**2 * s**2 * np.exp(-s) / spec.rho
    return np.zeros_like(r)


def kernel_eval(spec: KernelSpec, x1: float, x2: float) -> float:
    """Evaluate one kernel at a pair of scalar inputs."""
    if not (math.isfinite(x1) and math.isfinite(x2)):
        raise DomainError("kernel inputs must be finite")
    return float(kernel_profile(spec, abs(x1 - x2)))


def gram(spec: CompositeKernelSpec | KernelSpec, points: np.ndarray) -> GramMatrix:
    """Assemble the Gram matrix of a (composite) kernel over 1D points.

    White-noise terms contribute to the diagonal only.
    """
    if isinstance(spec, KernelSpec):
        spec = CompositeKernelSpec(terms=(spec,))
    if spec.time_terms:
        raise DomainError("separable composites need kron_gram, not gram")
    points = np.asarray(points, dtype=float)
    if points.ndim != 1 or points.size < 1:
        raise DomainError("points must be a non-empty 1D vector")
    if not np.all(np.isfinite(points)):
        raise DomainError("points must be finite")
    if points.size > MAX_GRAM_SIZE:
        raise SizeError(f"gram size {points.size} exceeds cap {MAX_GRAM_SIZE}")
    r = np.abs(points[:, None] - points[None, :])
    n = points.size
    out = np.zeros((n, n))
    for term in spec.terms:
        if term.kind == WHITE:
            out[np.diag_indices(n)] += term.sigma**2
        else:
            out += kernel_profile(term, r)
    return GramMatrix(values=out, jitter_applied=0.0)


def kron_gram(kt: GramMatrix, kd: GramMatrix, max_size: int = MAX_GRAM_SIZE) -> GramMatrix:
    """Kronecker product Gram over the time x delay grid.

    Index convention is time-major: flattened index = t * n_delay + d, so block
    (i, j) of the result is Kt[i, j] * Kd.
    """
    n = kt.n * kd.n
    if n > max_size:
        raise SizeError(f"kron size {n} exceeds cap {max_size}")
    return GramMatrix(values=np.kron(kt.values, kd.values), jitter_applied=0.0)


def cholesky_jitter(
    k: GramMatrix | np.ndarray, base_jitter: float = DEFAULT_JITTER
) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of K + jitter*I with a geometric jitter ladder.

    Tries jitter in {base, 10*base, ..., 1e6*base} and returns the first
    successful factor together with the jitter used.
    """
    values = k.values if isinstance(k, GramMatrix) else np.asarray(k, dtype=float)
    if base_jitter <= 0:
        raise DomainError("base_jitter must be > 0")
    n = values.shape[0]
    jitter = base_jitter
    for _ in range(7):
        trial = values.copy()
        trial[np.diag_indices(n)] += jitter
        c, info = lapack.dpotrf(trial, lower=1, clean=1, overwrite_a=1)
        if info == 0:
            return c, jitter
        jitter *= 10.0
    raise NotPositiveDefiniteError(
        f"matrix not positive definite up to jitter {base_jitter * 1e6:g}"
    )


def cholesky_backward(L: np.ndarray, L_bar: np.ndarray) -> np.ndarray:
    """Pull a gradient on the Cholesky factor back to the input matrix.

    Given d(loss)/dL for K = L L^T, returns d(loss)/dK such that contracting
    with any symmetric perturbation dK reproduces <L_bar, dL>. Standard
    reverse-mode rule: K_bar = L^-T Phi(L^T L_bar) L^-1 with Phi keeping the
    lower triangle and halving the diagonal.
    """
    p = np.tril(L.T @ L_bar)
    p[np.diag_indices_from(p)] *= 0.5
    x = blas.dtrsm(1.0, L, p, side=0, lower=1, trans_a=1)
    k_bar = blas.dtrsm(1.0, L, x, side=1, lower=1, trans_a=0)
    return 0.5 * (k_bar + k_bar.T)


def cholesky_backward_rank1(L: np.ndarray, u: np.ndarray, z: np.ndarray) -> np.ndarray:
    """`cholesky_backward` specialized to L_bar = tril(u z^T).

    This is the case that arises from differentiating out = L @ z: then
    Phi(L^T tril(u z^T)) collapses to tril(c z^T) with c = L^T u, saving one
    triangular matrix product.
    """
    c = L.T @ u
    p = np.tril(np.outer(c, z))
    p[np.diag_indices_from(p)] *= 0.5
    x = blas.dtrsm(1.0, L, p, side=0, lower=1, trans_a=1)
    k_bar = blas.dtrsm(1.0, L, x, side=1, lower=1, trans_a=0)
    return 0.5 * (k_bar + k_bar.T)
