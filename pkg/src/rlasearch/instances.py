"""Seeded problem-instance generators with controlled conditioning.

All constructions go through an SVD/eigendecomposition so the spectrum,
and hence the condition number, is exact by design: singular values are
log-spaced from 1 down to 1/kappa.  Leverage structure is controlled by
the ensemble of the left singular vectors (Gaussian rows give near-
uniform leverage, Student-t rows give heavy-tailed leverage).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

PSD = "PSD"
LOW_COND = "LOW_COND"
MID_COND = "MID_COND"
HIGH_COND = "HIGH_COND"
LOGISTIC_FAMILY = "LOGISTIC"
EIGEN_FAMILY = "EIGEN"

LINEAR_FAMILIES = (PSD, LOW_COND, MID_COND, HIGH_COND)
FAMILIES = LINEAR_FAMILIES + (LOGISTIC_FAMILY, EIGEN_FAMILY)

GAUSSIAN = "GAUSSIAN"
HEAVY_TAILED = "HEAVY_TAILED"

# default kappa bands per conditioning family
KAPPA_BANDS = {LOW_COND: (2.0, 10.0), MID_COND: (1e2, 1e3), HIGH_COND: (1e5, 1e6)}


class GenerationError(Exception):
    pass


@dataclass(frozen=True)
class InstanceSpec:
    family: str
    m: int
    n: int
    kappa_target: float = 10.0
    leverage: str = GAUSSIAN
    vt_dist: str = GAUSSIAN
    noise_sigma: float = 0.0  # logistic label noise
    spectral_gap: float = 1.0  # eigen only: floor on lambda_1/lambda_2

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise GenerationError(f"unknown family {self.family!r}")
        if not (self.m >= self.n >= 1):
            raise GenerationError(f"require m >= n >= 1, got m={self.m}, n={self.n}")
        if self.kappa_target < 1.0:
            raise GenerationError("kappa_target must be >= 1")
        if self.leverage not in (GAUSSIAN, HEAVY_TAILED):
            raise GenerationError(f"unknown leverage ensemble {self.leverage!r}")
        if self.vt_dist not in (GAUSSIAN, HEAVY_TAILED):
            raise GenerationError(f"unknown vt ensemble {self.vt_dist!r}")
        if self.spectral_gap < 1.0:
            raise GenerationError("spectral_gap must be >= 1")

    @property
    def env(self) -> str:
        if self.family == LOGISTIC_FAMILY:
            return "logistic"
        if self.family == EIGEN_FAMILY:
            return "eigen"
        return "linear"


@dataclass
class ProblemInstance:
    env: str
    A: np.ndarray
    b: np.ndarray  # right-hand side, labels, or empty for eigen
    x_star: Optional[np.ndarray]
    realized_kappa: float
    spec: InstanceSpec
    lambda_max: Optional[float] = None  # eigen only
    top_eigenvector: Optional[np.ndarray] = None  # eigen only

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]


def _orthonormal(rows: int, cols: int, dist: str, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal columns from a Gaussian or Student-t(2) draw."""
    if dist == GAUSSIAN:
        raw = rng.standard_normal((rows, cols))
    else:
        raw = rng.standard_t(df=2, size=(rows, cols))
    Q, R = np.linalg.qr(raw)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs[None, :]


def _log_spaced_singular_values(n: int, kappa: float) -> np.ndarray:
    if n == 1 or kappa == 1.0:
        return np.ones(n)
    return np.logspace(0.0, -math.log10(kappa), n)


def gen_linear(spec: InstanceSpec, seed: int) -> ProblemInstance:
    """A = U diag(sigma) V^T with exact spectrum; b = A x_star (consistent)."""
    if spec.family not in LINEAR_FAMILIES:
        raise GenerationError(f"gen_linear cannot build family {spec.family}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, _family_tag(spec.family))))
    kappa = spec.kappa_target
    if spec.family == PSD:
        n = spec.n
        Q = _orthonormal(n, n, GAUSSIAN, rng)
        lam = _log_spaced_singular_values(n, kappa)
        A = (Q * lam[None, :]) @ Q.T
        A = 0.5 * (A + A.T)
    else:
        U = _orthonormal(spec.m, spec.n, spec.leverage, rng)
        V = _orthonormal(spec.n, spec.n, spec.vt_dist, rng)
        sigma = _log_spaced_singular_values(spec.n, kappa)
        A = (U * sigma[None, :]) @ V.T
    x_star = rng.standard_normal(spec.n)
    b = A @ x_star
    return ProblemInstance(spec.env, A, b, x_star, kappa, spec)


def gen_logistic(spec: InstanceSpec, seed: int) -> ProblemInstance:
    """X via the SVD construction; labels sign(x_i^T w* + eps_i) in {-1, +1}."""
    if spec.family != LOGISTIC_FAMILY:
        raise GenerationError(f"gen_logistic cannot build family {spec.family}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 5)))
    U = _orthonormal(spec.m, spec.n, spec.leverage, rng)
    V = _orthonormal(spec.n, spec.n, spec.vt_dist, rng)
    sigma = _log_spaced_singular_values(spec.n, spec.kappa_target)
    X = (U * sigma[None, :]) @ V.T
    w_star = rng.standard_normal(spec.n)
    margins = X @ w_star
    scale = float(np.median(np.abs(margins)))
    if scale > 0:
        w_star = w_star * (3.0 / scale)
        margins = X @ w_star
    for _ in range(10):
        eps = rng.standard_normal(spec.m) * spec.noise_sigma
        y = np.sign(margins + eps)
        y[y == 0] = 1.0
        if np.any(y > 0) and np.any(y < 0):
            return ProblemInstance(spec.env, X, y, w_star, spec.kappa_target, spec)
    raise GenerationError("degenerate single-class label draw after 10 retries")


def gen_eigen(spec: InstanceSpec, seed: int) -> ProblemInstance:
    """A = Q diag(lambda) Q^T, Haar Q, log-uniform spectrum on [1/kappa, 1].

    The top eigenvalue is pinned at 1; ``spectral_gap`` > 1 additionally
    caps the remaining eigenvalues at 1/gap so power-type iterations have
    a testable convergence rate.
    """
    if spec.family != EIGEN_FAMILY:
        raise GenerationError(f"gen_eigen cannot build family {spec.family}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 6)))
    n = spec.n
    Q = _orthonormal(n, n, GAUSSIAN, rng)
    lo = 1.0 / spec.kappa_target
    hi = 1.0 / spec.spectral_gap
    if n == 1:
        lam = np.array([1.0])
    else:
        body = np.exp(rng.uniform(math.log(lo), math.log(max(hi, lo)), size=n - 2)) \
            if n > 2 else np.array([])
        lam = np.concatenate(([1.0], np.sort(body)[::-1], [lo]))
    A = (Q * lam[None, :]) @ Q.T
    A = 0.5 * (A + A.T)
    return ProblemInstance(spec.env, A, np.zeros(0), None, spec.kappa_target, spec,
                           lambda_max=1.0, top_eigenvector=Q[:, 0])


def generate_instance(spec: InstanceSpec, seed: int) -> ProblemInstance:
    if spec.family == LOGISTIC_FAMILY:
        return gen_logistic(spec, seed)
    if spec.family == EIGEN_FAMILY:
        return gen_eigen(spec, seed)
    return gen_linear(spec, seed)


def _family_tag(family: str) -> int:
    return {PSD: 1, LOW_COND: 2, MID_COND: 3, HIGH_COND: 4}[family]
