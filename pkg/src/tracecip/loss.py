"""
Privacy-loss computations for additive Gaussian mechanisms under GP
conditional priors: the certified bound, the exact loss of a hypothesis
pair, odds conversion, composition, misspecification and independent
dimensions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .gp import MVN, cho_factor_checked, regression_and_schur, renyi_general_gaussian, split_indices
from .mechanisms import NoiseMechanism, check_structure, format_record, parse_record
from .secrets import SecretSet, delta_ball_radius


@dataclass(frozen=True)
class PrivacyReport:
    epsilon: float
    lam: float
    radius: float
    unique_times: int
    direct_term: float
    alpha_star: float
    mse: float
    sigma_s_sq: float

    def recompute(self) -> float:
        return 0.5 * self.lam * self.unique_times * self.radius ** 2 * (self.direct_term + self.alpha_star)

    def to_record(self) -> str:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["r"] = d.pop("radius")
        d["S"] = d.pop("unique_times")
        order = ("epsilon", "lambda", "r", "S", "sigma_s_sq", "alpha_star", "direct_term", "mse")
        return format_record({k: d[k] for k in order})

    @classmethod
    def from_record(cls, text: str) -> "PrivacyReport":
        d = parse_record(text)
        return cls(
            epsilon=float(d["epsilon"]), lam=float(d["lambda"]), radius=float(d["r"]),
            unique_times=int(d["S"]), direct_term=float(d["direct_term"]),
            alpha_star=float(d["alpha_star"]), mse=float(d["mse"]), sigma_s_sq=float(d["sigma_s_sq"]),
        )


@dataclass(frozen=True)
class GapConversion:
    epsilon_prime: float
    delta: float

    @property
    def odds_multiplier(self) -> float:
        return math.exp(self.epsilon_prime)


def _check_order(lam: float) -> None:
    if not lam > 1:
        raise ValueError(f"Renyi order must exceed 1, got {lam}")


def _mech_cov(mech) -> np.ndarray:
    return np.asarray(mech.cov if hasattr(mech, "cov") else mech, dtype=float)


def sigma_eff(prior_cov, mech, secret: SecretSet) -> np.ndarray:
    """
    Inferential-loss matrix ``A^T (S_u|s + G_uu)^-1 A`` with ``A = S_us S_ss^-1``.

    ``mech`` may be a :class:`NoiseMechanism` or a bare covariance; only its
    remainder block enters.
    """
    prior_cov = np.asarray(prior_cov, dtype=float)
    g = _mech_cov(mech)
    n = prior_cov.shape[0]
    if g.shape != (n, n):
        raise ValueError("prior and mechanism dimensions differ")
    s, u = split_indices(n, secret.indices)
    reg, schur = regression_and_schur(prior_cov, s)
    inner = schur + g[np.ix_(u, u)]
    factor = cho_factor_checked(0.5 * (inner + inner.T), "conditional-plus-noise covariance")
    out = reg.T @ linalg.cho_solve(factor, reg)
    return 0.5 * (out + out.T)


def cip_bound(prior_cov, mech: NoiseMechanism, secret: SecretSet, lam: float) -> PrivacyReport:
    """Certified loss ``(lam/2) S r^2 (1/sigma_s^2 + alpha*)`` for a structured mechanism."""
    _check_order(lam)
    if not isinstance(mech, NoiseMechanism):
        raise TypeError("cip_bound needs a structured NoiseMechanism; use worst_case_loss for general covariances")
    if set(mech.secret_indices) != set(secret.indices):
        check_structure(mech.cov, secret.indices, mech.sigma_s_sq)
    if mech.sigma_s_sq <= 0:
        raise ValueError("sigma_s_sq = 0 gives unbounded direct loss")
    eff = sigma_eff(prior_cov, mech, secret)
    alpha = max(float(np.linalg.eigvalsh(eff)[-1]), 0.0)
    direct = 1.0 / mech.sigma_s_sq
    eps = 0.5 * lam * secret.unique_times * secret.radius ** 2 * (direct + alpha)
    return PrivacyReport(eps, lam, secret.radius, secret.unique_times, direct, alpha, mech.mse, mech.sigma_s_sq)


def exact_cip_loss(prior_cov, mech: NoiseMechanism, secret: SecretSet, s_i, s_j, lam: float) -> float:
    """Renyi divergence between release distributions given ``X_S = s_i`` and ``X_S = s_j``."""
    _check_order(lam)
    delta = np.atleast_1d(np.asarray(s_i, dtype=float) - np.asarray(s_j, dtype=float))
    if delta.shape != (secret.size,):
        raise ValueError("hypotheses must have one entry per secret index")
    if mech.sigma_s_sq <= 0:
        raise ValueError("sigma_s_sq = 0 gives unbounded direct loss")
    eff = sigma_eff(prior_cov, mech, secret)
    return float(0.5 * lam * (delta @ delta / mech.sigma_s_sq + delta @ eff @ delta))


def release_information(prior_cov, mech_cov, secret: SecretSet) -> np.ndarray:
    """
    Information matrix of the release about the secret block for an arbitrary
    noise covariance: ``T^T (Gamma + G)^-1 T`` where ``T = [I; A]`` maps the
    secret to the conditional mean of the trace and ``Gamma`` holds the
    conditional remainder covariance.

    For a structured mechanism this equals ``I/sigma_s^2 + sigma_eff``.
    """
    prior_cov = np.asarray(prior_cov, dtype=float)
    g = np.asarray(mech_cov, dtype=float)
    n = prior_cov.shape[0]
    s, u = split_indices(n, secret.indices)
    reg, schur = regression_and_schur(prior_cov, s)
    lift = np.zeros((n, s.size))
    lift[s, np.arange(s.size)] = 1.0
    lift[u] = reg
    gamma = g.copy()
    gamma[np.ix_(u, u)] += schur
    factor = cho_factor_checked(0.5 * (gamma + gamma.T), "release covariance given the secret")
    out = lift.T @ linalg.cho_solve(factor, lift)
    return 0.5 * (out + out.T)


def worst_case_loss(prior_cov, mech_cov, secret: SecretSet, lam: float) -> float:
    """
    Largest exact loss over hypothesis differences in the ``sqrt(S) r`` ball,
    for any noise covariance (structured or not).
    """
    _check_order(lam)
    info = release_information(prior_cov, mech_cov, secret)
    return 0.5 * lam * delta_ball_radius(secret) ** 2 * float(np.linalg.eigvalsh(info)[-1])


def prior_posterior_gap(epsilon: float, lam: float, delta: float) -> GapConversion:
    _check_order(lam)
    if not 0 < delta <= 1:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    return GapConversion(epsilon + math.log(1.0 / delta) / (lam - 1.0), delta)


def compose_bound(joint_prior_cov, mech: NoiseMechanism, mech2, secret: SecretSet, lam: float) -> PrivacyReport:
    """
    Bound for a secret of the first trace when a second trace is also
    released. ``joint_prior_cov`` covers both traces, first trace first.
    """
    _check_order(lam)
    g1 = mech.cov
    g2 = _mech_cov(mech2)
    n, m = g1.shape[0], g2.shape[0]
    joint_prior_cov = np.asarray(joint_prior_cov, dtype=float)
    if joint_prior_cov.shape != (n + m, n + m):
        raise ValueError("joint prior must cover both traces")
    joint_g = linalg.block_diag(g1, g2)
    eff = sigma_eff(joint_prior_cov, joint_g, secret)
    alpha = max(float(np.linalg.eigvalsh(eff)[-1]), 0.0)
    direct = 1.0 / mech.sigma_s_sq
    eps = 0.5 * lam * secret.unique_times * secret.radius ** 2 * (direct + alpha)
    return PrivacyReport(eps, lam, secret.radius, secret.unique_times, direct, alpha,
                         float(np.trace(joint_g)), mech.sigma_s_sq)


def misspec_delta(prior_p_cov, prior_q_cov, secret: SecretSet, s_i, lam: float) -> float:
    """
    Larger of the two directed divergences between the remainder
    conditionals of the assumed (P) and true (Q) priors at ``X_S = s_i``.
    Both priors are taken mean-free.
    """
    _check_order(lam)
    p_cov = np.asarray(prior_p_cov, dtype=float)
    q_cov = np.asarray(prior_q_cov, dtype=float)
    s_i = np.atleast_1d(np.asarray(s_i, dtype=float))
    reg_p, schur_p = regression_and_schur(p_cov, secret.indices)
    reg_q, schur_q = regression_and_schur(q_cov, secret.indices)
    p = MVN(reg_p @ s_i, schur_p)
    q = MVN(reg_q @ s_i, schur_q)
    return max(renyi_general_gaussian(p, q, lam), renyi_general_gaussian(q, p, lam))


def misspec_delta_grid(prior_p_cov, prior_q_cov, secret: SecretSet, grid: Sequence, lam: float) -> float:
    """Maximum of :func:`misspec_delta` over a finite set of secret values."""
    best = 0.0
    for s_i in grid:
        best = max(best, misspec_delta(prior_p_cov, prior_q_cov, secret, s_i, lam))
        if math.isinf(best):
            break
    return best


def misspec_bound(epsilon_fn: Callable[[float], float], delta_fn: Callable[[float], float], lam: float) -> float:
    """Loss bound against a true prior outside the assumed class."""
    _check_order(lam)
    d_2 = delta_fn(2.0 * lam)
    d_4 = delta_fn(4.0 * lam - 3.0)
    e_4 = epsilon_fn(4.0 * lam - 2.0)
    if math.isinf(d_2) or math.isinf(d_4) or math.isinf(e_4):
        return math.inf
    return (lam - 0.5) / (lam - 1.0) * d_2 + d_4 + (2.0 * lam - 1.5) / (2.0 * lam - 2.0) * e_4


def combine_independent_dims(reports: Sequence[PrivacyReport]) -> PrivacyReport:
    """Combine per-dimension bounds on a shared secret by summing inferential terms."""
    if not reports:
        raise ValueError("need at least one report")
    first = reports[0]
    for rep in reports[1:]:
        same = (
            math.isclose(rep.lam, first.lam) and math.isclose(rep.radius, first.radius)
            and rep.unique_times == first.unique_times and math.isclose(rep.sigma_s_sq, first.sigma_s_sq)
        )
        if not same:
            raise ValueError("reports must share lambda, r, S and sigma_s_sq")
    if len(reports) == 1:
        return first
    alpha = sum(rep.alpha_star for rep in reports)
    eps = 0.5 * first.lam * first.unique_times * first.radius ** 2 * (first.direct_term + alpha)
    return PrivacyReport(eps, first.lam, first.radius, first.unique_times, first.direct_term,
                         alpha, sum(rep.mse for rep in reports), first.sigma_s_sq)


def joint_independent_bound(prior_cov, mech: NoiseMechanism, secret: SecretSet, dim_labels, lam: float) -> PrivacyReport:
    """
    Independent-dimension bound computed from the joint (interleaved) prior:
    the inferential matrix of the whole trace is split along dimensions and
    the top eigenvalue of each dimension's block is summed.
    """
    _check_order(lam)
    eff = sigma_eff(prior_cov, mech, secret)
    labels = [dim_labels[i] for i in sorted(secret.indices)]
    alpha = 0.0
    for label in dict.fromkeys(labels):
        pos = [k for k, lab in enumerate(labels) if lab == label]
        alpha += max(float(np.linalg.eigvalsh(eff[np.ix_(pos, pos)])[-1]), 0.0)
    direct = 1.0 / mech.sigma_s_sq
    times = secret.unique_times
    eps = 0.5 * lam * times * secret.radius ** 2 * (direct + alpha)
    return PrivacyReport(eps, lam, secret.radius, times, direct, alpha, mech.mse, mech.sigma_s_sq)
