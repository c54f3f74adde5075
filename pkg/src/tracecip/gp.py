"""
Gaussian-process and multivariate-normal primitives.

Kernels are evaluated on sample indices (time already resampled to the
index grid), covariances are assembled densely, and every inverse goes
through a Cholesky factorization.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

DEFAULT_JITTER = 1e-8


class SingularMatrixError(np.linalg.LinAlgError):
    """A block that must be positive definite is not (after jitter)."""

    def __init__(self, what: str, cond: float):
        super().__init__(f"{what} is singular or indefinite (condition estimate {cond:.3e})")
        self.cond = cond


class KernelFamily(str, enum.Enum):
    RBF = "rbf"
    PERIODIC = "periodic"


@dataclass(frozen=True)
class KernelSpec:
    """
    Stationary kernel over sample indices.

    Parameters
    ----------
    family : KernelFamily
        ``rbf`` or ``periodic``.
    l_eff : float
        Effective lengthscale in index units.
    period : float, optional
        Period in index units (periodic family only).
    variance : float
        Marginal variance; 1 for normalized traces.
    jitter : float
        Added to the diagonal by :func:`build_covariance`.
    """

    family: KernelFamily = KernelFamily.RBF
    l_eff: float = 1.0
    period: float | None = None
    variance: float = 1.0
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        for name in ("l_eff", "variance", "jitter"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
        if self.l_eff <= 0:
            raise ValueError(f"l_eff must be positive, got {self.l_eff}")
        if self.variance <= 0:
            raise ValueError(f"variance must be positive, got {self.variance}")
        if self.jitter < 0:
            raise ValueError(f"jitter must be nonnegative, got {self.jitter}")
        if self.family is KernelFamily.PERIODIC:
            if self.period is None or not math.isfinite(self.period) or self.period <= 0:
                raise ValueError(f"periodic kernel needs a positive finite period, got {self.period}")

    def with_lengthscale(self, l_eff: float) -> "KernelSpec":
        return KernelSpec(self.family, l_eff, self.period, self.variance, self.jitter)

    def describe(self) -> str:
        text = f"{self.family.value}:l_eff={self.l_eff:.17g}"
        if self.family is KernelFamily.PERIODIC:
            text += f",period={self.period:.17g}"
        return text + f",variance={self.variance:.17g},jitter={self.jitter:.17g}"

    @classmethod
    def parse(cls, text: str) -> "KernelSpec":
        family, _, rest = text.partition(":")
        kwargs = {}
        for item in filter(None, rest.split(",")):
            key, _, value = item.partition("=")
            kwargs[key.strip()] = float(value)
        return cls(family=KernelFamily(family.strip().lower()), **kwargs)


def _kernel_values(spec: KernelSpec, dist: np.ndarray) -> np.ndarray:
    dist = np.abs(dist)
    if spec.family is KernelFamily.RBF:
        return spec.variance * np.exp(-(dist ** 2) / (2.0 * spec.l_eff ** 2))
    s = np.sin(np.pi * dist / spec.period)
    return spec.variance * np.exp(-2.0 * s ** 2 / spec.l_eff ** 2)


def kernel_eval(spec: KernelSpec, i: float, j: float) -> float:
    """Kernel value between indices ``i`` and ``j`` (jitter not included)."""
    if i < 0 or j < 0:
        raise ValueError("indices must be nonnegative")
    return float(_kernel_values(spec, np.asarray(float(i) - float(j))))


def build_covariance(spec: KernelSpec, n: int, positions=None) -> np.ndarray:
    """
    Dense covariance of ``n`` samples, with ``spec.jitter`` on the diagonal.

    ``positions`` overrides the default index grid ``0..n-1`` (used when two
    traces are placed on a common time axis).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    pos = np.arange(n, dtype=float) if positions is None else np.asarray(positions, dtype=float)
    if pos.shape != (n,):
        raise ValueError("positions must have length n")
    cov = _kernel_values(spec, pos[:, None] - pos[None, :])
    cov[np.diag_indices(n)] += spec.jitter
    return cov


@dataclass(frozen=True)
class MVN:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean length {mean.size}")
        scale = max(1.0, float(np.max(np.abs(cov)))) if cov.size else 1.0
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * scale):
            raise ValueError("cov must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def n(self) -> int:
        return self.mean.size

    def blocks(self, secret_indices):
        """Return ``(mu_s, mu_u, S_ss, S_uu, S_us)`` for the given secret set."""
        s, u = split_indices(self.n, secret_indices)
        c = self.cov
        return self.mean[s], self.mean[u], c[np.ix_(s, s)], c[np.ix_(u, u)], c[np.ix_(u, s)]


@dataclass(frozen=True)
class ConditionalGaussian:
    """Distribution of the remainder given the secret block."""

    mean: np.ndarray
    cov: np.ndarray
    regression: np.ndarray


def split_indices(n: int, secret_indices) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(sorted(set(int(i) for i in secret_indices)), dtype=int)
    if s.size == 0:
        raise ValueError("secret set is empty")
    if s[0] < 0 or s[-1] >= n:
        raise ValueError(f"secret indices must lie in [0, {n})")
    u = np.setdiff1d(np.arange(n), s)
    if u.size == 0:
        raise ValueError("secret set must leave a nonempty remainder")
    return s, u


def cho_factor_checked(mat: np.ndarray, what: str = "matrix"):
    """Cholesky factor, raising :class:`SingularMatrixError` with a condition estimate."""
    try:
        return linalg.cho_factor(mat, lower=True, check_finite=True)
    except linalg.LinAlgError:
        pass
    try:
        cond = float(np.linalg.cond(mat))
    except np.linalg.LinAlgError:
        cond = math.inf
    raise SingularMatrixError(what, cond)


def regression_and_schur(cov: np.ndarray, secret_indices):
    """
    ``A = S_us S_ss^-1`` and ``S_u|s = S_uu - A S_su`` from a joint covariance.

    A is obtained from a factorized solve, never from an explicit inverse.
    """
    n = cov.shape[0]
    s, u = split_indices(n, secret_indices)
    c_ss = cov[np.ix_(s, s)]
    c_us = cov[np.ix_(u, s)]
    factor = cho_factor_checked(c_ss, "secret covariance block")
    reg = linalg.cho_solve(factor, c_us.T).T
    schur = cov[np.ix_(u, u)] - reg @ c_us.T
    return reg, 0.5 * (schur + schur.T)


def gaussian_conditional(dist: MVN, secret_indices, x_s) -> ConditionalGaussian:
    """Condition ``dist`` on the secret block taking value ``x_s``."""
    s, u = split_indices(dist.n, secret_indices)
    x_s = np.atleast_1d(np.asarray(x_s, dtype=float))
    if x_s.shape != (s.size,):
        raise ValueError(f"x_s must have length {s.size}")
    reg, schur = regression_and_schur(dist.cov, s)
    mean = dist.mean[u] + reg @ (x_s - dist.mean[s])
    return ConditionalGaussian(mean=mean, cov=schur, regression=reg)


def _check_order(lam: float) -> None:
    if not lam > 1:
        raise ValueError(f"Renyi order must exceed 1, got {lam}")


def renyi_mean_shift(mu1, mu2, cov, lam: float) -> float:
    """Renyi divergence of order ``lam`` between two Gaussians sharing ``cov``."""
    _check_order(lam)
    diff = np.atleast_1d(np.asarray(mu1, dtype=float) - np.asarray(mu2, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if not np.any(diff):
        return 0.0
    factor = cho_factor_checked(cov, "covariance")
    return float(0.5 * lam * diff @ linalg.cho_solve(factor, diff))


def _logdet_pd(mat: np.ndarray) -> float | None:
    try:
        chol = linalg.cholesky(mat, lower=True)
    except linalg.LinAlgError:
        return None
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def renyi_general_gaussian(p: MVN, q: MVN, lam: float) -> float:
    """
    Renyi divergence ``D_lam(p || q)`` between Gaussians with arbitrary covariances.

    Returns ``inf`` when ``lam*cov_q + (1-lam)*cov_p`` is not positive
    definite, in which case the divergence is infinite.
    """
    _check_order(lam)
    if p.n != q.n:
        raise ValueError("dimension mismatch")
    diff = p.mean - q.mean
    mix = lam * q.cov + (1.0 - lam) * p.cov
    mix = 0.5 * (mix + mix.T)
    ld_mix = _logdet_pd(mix)
    if ld_mix is None:
        return math.inf
    ld_p = _logdet_pd(p.cov)
    ld_q = _logdet_pd(q.cov)
    if ld_p is None or ld_q is None:
        raise SingularMatrixError("covariance", math.inf)
    quad = float(diff @ linalg.cho_solve(linalg.cho_factor(mix, lower=True), diff)) if np.any(diff) else 0.0
    value = 0.5 * lam * quad - (ld_mix - (1.0 - lam) * ld_p - lam * ld_q) / (2.0 * (lam - 1.0))
    # rounding can leave tiny negatives when p == q
    return max(value, 0.0)


def sample_mvn(dist: MVN, seed: int, count: int) -> np.ndarray:
    """Draw ``count`` samples (rows) from ``dist``; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    vals, vecs = np.linalg.eigh(dist.cov)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    noise = rng.standard_normal((count, dist.n))
    return dist.mean + noise @ root.T
