"""
Mechanism design by semidefinite programming: the single-secret design,
the PSD-dominating merge, and the multiple-secrets composition.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from ..gp import regression_and_schur, split_indices
from ..mechanisms import PSD_TOL, NoiseMechanism, UtilityBudget
from ..secrets import SecretSet
from .solver import (
    LMI,
    LmiProblem,
    LinearIneq,
    SolverOptions,
    SolverResult,
    SolverStatus,
    solve_interior_point,
)

log = logging.getLogger(__name__)

# regression coefficients below this are treated as an independent prior
DEGENERATE_TOL = 1e-12


class Objective(str, enum.Enum):
    EXACT = "exact"
    PSEUDO_INVERSE = "pseudo_inverse"


class RankDeficientError(ValueError):
    def __init__(self, rank: int, cols: int):
        super().__init__(f"regression matrix has rank {rank} < {cols} columns")
        self.rank = rank
        self.cols = cols


@dataclass
class SdpAProblem:
    """
    Single-secret design problem. ``reg`` is ``S_us S_ss^-1`` and
    ``schur`` the conditional remainder covariance.
    """

    prior_cov: np.ndarray
    secret: SecretSet
    budget: UtilityBudget
    reg: np.ndarray = field(init=False)
    schur: np.ndarray = field(init=False)
    s_idx: np.ndarray = field(init=False)
    u_idx: np.ndarray = field(init=False)

    def __post_init__(self):
        self.prior_cov = np.asarray(self.prior_cov, dtype=float)
        n = self.prior_cov.shape[0]
        if self.budget.n != n:
            raise ValueError(f"budget is for n={self.budget.n}, prior has n={n}")
        self.secret.check_within(n)
        self.s_idx, self.u_idx = split_indices(n, self.secret.indices)
        self.reg, self.schur = regression_and_schur(self.prior_cov, self.s_idx)

    @property
    def n(self) -> int:
        return self.prior_cov.shape[0]

    @property
    def k(self) -> int:
        return self.s_idx.size

    @property
    def m(self) -> int:
        return self.u_idx.size

    @property
    def rank(self) -> int:
        return int(np.linalg.matrix_rank(self.reg))

    @property
    def is_degenerate(self) -> bool:
        return float(np.max(np.abs(self.reg))) <= DEGENERATE_TOL

    def pseudo_inverse(self) -> np.ndarray:
        """Left inverse ``(I + A^T A)^-1 [I, A^T]`` of the stacked map ``[I; A]``."""
        gram = np.eye(self.k) + self.reg.T @ self.reg
        return np.linalg.solve(gram, np.hstack([np.eye(self.k), self.reg.T]))

    def assemble(self, sigma_s_sq: float, remainder: np.ndarray) -> np.ndarray:
        cov = np.zeros((self.n, self.n))
        cov[self.s_idx, self.s_idx] = sigma_s_sq
        cov[np.ix_(self.u_idx, self.u_idx)] = 0.5 * (remainder + remainder.T)
        return cov

    def exact_objective(self, sigma_s_sq: float, remainder: np.ndarray) -> float:
        """``maxeig(T^T Btilde T)``: direct term plus top inferential eigenvalue."""
        if sigma_s_sq <= 0:
            return math.inf
        inner = self.schur + remainder
        eff = self.reg.T @ np.linalg.solve(inner, self.reg)
        return 1.0 / sigma_s_sq + max(float(np.linalg.eigvalsh(0.5 * (eff + eff.T))[-1]), 0.0)

    def approx_objective(self, sigma_s_sq: float, remainder: np.ndarray) -> float:
        """Reciprocal of ``mineig(Ainv Btilde^-1 Ainv^T)``, the pseudo-inverse surrogate."""
        pinv = self.pseudo_inverse()
        ps, pu = pinv[:, : self.k], pinv[:, self.k:]
        mat = sigma_s_sq * ps @ ps.T + pu @ (self.schur + remainder) @ pu.T
        low = float(np.linalg.eigvalsh(0.5 * (mat + mat.T))[0])
        return math.inf if low <= 0 else 1.0 / low


@dataclass
class SdpSolution:
    """
    Designed mechanism. ``beta_star`` is the optimized objective: the
    precision ``1/sigma_s^2 + alpha*`` for the exact objective, the
    maximized minimum eigenvalue for the pseudo-inverse objective.
    ``approx_beta`` is the pseudo-inverse surrogate at the same design in
    precision units.
    """

    mechanism: NoiseMechanism
    beta_star: float
    solver_status: SolverStatus
    duality_gap: float
    iterations: int = 0
    approx_beta: float = math.nan
    objective: Objective = Objective.EXACT

    @property
    def trace(self) -> float:
        return self.mechanism.mse


def psd_dominates(a, b, tol: float = PSD_TOL) -> bool:
    """True iff ``a - b`` has minimum eigenvalue at least ``-tol``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return bool(np.linalg.eigvalsh(0.5 * (diff + diff.T))[0] >= -tol)


def _check_backend(backend: str) -> None:
    if backend not in ("builtin", "cvxpy"):
        raise ValueError(f"unknown backend {backend!r}")


def _degenerate_solution(prob: SdpAProblem) -> SdpSolution:
    sigma = prob.budget.total / prob.k
    cov = prob.assemble(sigma, np.zeros((prob.m, prob.m)))
    mech = NoiseMechanism(cov, tuple(prob.s_idx), sigma)
    log.info("sdp_a degenerate regression: all budget to the secret block sigma_s_sq=%.6g", sigma)
    return SdpSolution(mech, 1.0 / sigma, SolverStatus.OPTIMAL, 0.0, 0, 1.0 / sigma)


def _basic_closed_form(prob: SdpAProblem) -> tuple[float, np.ndarray]:
    """
    Exact optimum for a single secret index.

    For a remainder budget ``B`` the best remainder noise is ``B v v^T`` with
    ``v`` the unit vector along ``(C + B I)^-1 a``, giving inferential term
    ``a^T (C + B I)^-1 a``; the split between ``sigma_s^2`` and ``B`` is a
    one-dimensional convex problem.
    """
    a = prob.reg[:, 0]
    c_vals, c_vecs = np.linalg.eigh(prob.schur)
    c_vals = np.clip(c_vals, 0.0, None)
    w = (c_vecs.T @ a) ** 2
    total = prob.budget.total

    def slope(t):
        return -1.0 / t ** 2 + float(np.sum(w / (c_vals + total - t) ** 2))

    if slope(total) <= 0:
        t = total
    else:
        lo = total * 1e-12
        t = optimize.brentq(slope, lo, total, xtol=1e-15 * total, rtol=4 * np.finfo(float).eps)
    rest = total - t
    if rest <= 0:
        return t, np.zeros((prob.m, prob.m))
    v = c_vecs @ ((c_vecs.T @ a) / (c_vals + rest))
    v /= np.linalg.norm(v)
    return t, rest * np.outer(v, v)


def _exact_problem(prob: SdpAProblem) -> tuple[LmiProblem, np.ndarray, np.ndarray]:
    """
    Variables ``X`` (remainder noise) and ``y = (t, gamma, tau)`` with
    ``t = sigma_s^2``; minimize ``gamma + tau``.
    """
    k, m = prob.k, prob.m
    A, C = prob.reg, prob.schur
    total = prob.budget.total
    const1 = np.zeros((k + m, k + m))
    const1[:k, k:] = A.T
    const1[k:, :k] = A
    const1[k:, k:] = C
    embed1 = np.vstack([np.zeros((k, m)), np.eye(m)])
    g_gamma = np.zeros((k + m, k + m))
    g_gamma[:k, :k] = np.eye(k)
    lmi_info = LMI(const1, embed1, {1: g_gamma})
    lmi_psd = LMI(np.zeros((m, m)), np.eye(m))
    lmi_recip = LMI(np.array([[0.0, 1.0], [1.0, 0.0]]), None,
                    {0: np.array([[1.0, 0.0], [0.0, 0.0]]), 2: np.array([[0.0, 0.0], [0.0, 1.0]])})
    budget = LinearIneq(total, -np.eye(m), np.array([-float(k), 0.0, 0.0]))
    bp = LmiProblem(m=m, p=3, c_mat=None, c_vec=np.array([0.0, 1.0, 1.0]),
                        lmis=[lmi_info, lmi_psd, lmi_recip], linear=[budget])
    t0 = 0.5 * total / k
    X0 = 0.4 * total / m * np.eye(m)
    eff = A.T @ np.linalg.solve(C + X0, A)
    gamma0 = 2.0 * float(np.linalg.eigvalsh(0.5 * (eff + eff.T))[-1]) + 1.0 / total
    y0 = np.array([t0, gamma0, 2.0 / t0])
    return bp, X0, y0


def _pinv_problem(prob: SdpAProblem) -> tuple[LmiProblem, np.ndarray, np.ndarray]:
    """Variables ``X`` and ``y = (t, beta)``; maximize ``beta``."""
    if prob.rank < prob.k:
        raise RankDeficientError(prob.rank, prob.k)
    k, m = prob.k, prob.m
    total = prob.budget.total
    pinv = prob.pseudo_inverse()
    ps, pu = pinv[:, :k], pinv[:, k:]
    lmi_obj = LMI(pu @ prob.schur @ pu.T, pu, {0: ps @ ps.T, 1: -np.eye(k)})
    lmi_psd = LMI(np.zeros((m, m)), np.eye(m))
    budget = LinearIneq(total, -np.eye(m), np.array([-float(k), 0.0]))
    positive = LinearIneq(0.0, None, np.array([1.0, 0.0]))
    bp = LmiProblem(m=m, p=2, c_mat=None, c_vec=np.array([0.0, -1.0]),
                        lmis=[lmi_obj, lmi_psd], linear=[budget, positive])
    t0 = 0.5 * total / k
    X0 = 0.4 * total / m * np.eye(m)
    mat = t0 * ps @ ps.T + pu @ (prob.schur + X0) @ pu.T
    beta0 = 0.5 * float(np.linalg.eigvalsh(0.5 * (mat + mat.T))[0])
    return bp, X0, np.array([t0, beta0])


def _project_budget(prob: SdpAProblem, sigma: float, X: np.ndarray) -> tuple[float, np.ndarray]:
    """
    Scale the design up to the full budget. Interior-point iterates stay
    strictly inside the budget; extra noise never raises the bound.
    """
    used = prob.k * sigma + float(np.trace(X))
    if used <= 0:
        return sigma, X
    scale = prob.budget.total / used
    return sigma * scale, X * scale


def solve_sdp_a(
    prior_cov,
    secret: SecretSet,
    budget: UtilityBudget,
    objective: Objective | str = Objective.EXACT,
    backend: str = "builtin",
    options: SolverOptions | None = None,
    method: str = "auto",
) -> SdpSolution:
    """
    Design a structured noise covariance for one secret under a trace budget.

    Parameters
    ----------
    prior_cov : ndarray
        Prior covariance of the trace.
    secret : SecretSet
        Secret to protect.
    budget : UtilityBudget
        ``trace(cov) <= n * o_t``.
    objective : {"exact", "pseudo_inverse"}
        ``exact`` minimizes ``1/sigma_s^2 + maxeig(A^T (C + X)^-1 A)``;
        ``pseudo_inverse`` maximizes the minimum eigenvalue of the mapped
        noise-plus-conditional covariance through the left inverse of ``[I; A]``.
    backend : {"builtin", "cvxpy"}
    options : SolverOptions, optional
        Built-in solver settings.
    method : {"auto", "sdp"}
        ``auto`` uses the closed-form optimum for a single secret index under
        the exact objective and the interior-point solver otherwise; ``sdp``
        always runs the solver.

    Returns
    -------
    SdpSolution
    """
    if method not in ("auto", "sdp"):
        raise ValueError(f"unknown method {method!r}")
    objective = Objective(objective)
    _check_backend(backend)
    prob = SdpAProblem(prior_cov, secret, budget)
    if prob.is_degenerate:
        return _degenerate_solution(prob)
    if prob.rank < prob.k:
        log.info("sdp_a regression rank %d < %d; stacked map [I; A] still has full column rank",
                 prob.rank, prob.k)
    if backend == "cvxpy":
        from .cvxpy_backend import solve_sdp_a_cvxpy

        sigma, X, status, gap = solve_sdp_a_cvxpy(prob, objective)
        iters = 0
    elif method == "auto" and objective is Objective.EXACT and prob.k == 1:
        sigma, X = _basic_closed_form(prob)
        status, gap, iters = SolverStatus.OPTIMAL, 0.0, 0
    else:
        build = _exact_problem if objective is Objective.EXACT else _pinv_problem
        bp, X0, y0 = build(prob)
        res: SolverResult = solve_interior_point(bp, X0, y0, options)
        sigma, X, status, gap, iters = float(res.y[0]), res.X, res.status, res.duality_gap, res.iterations
    sigma, X = _project_budget(prob, max(sigma, 0.0), X)
    # clip roundoff negatives so the remainder block is PSD
    vals, vecs = np.linalg.eigh(0.5 * (X + X.T))
    X = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    cov = prob.assemble(sigma, X)
    mech = NoiseMechanism(cov, tuple(int(i) for i in prob.s_idx), sigma)
    exact = prob.exact_objective(sigma, X)
    approx = prob.approx_objective(sigma, X) if prob.rank == prob.k else math.nan
    beta = exact if objective is Objective.EXACT else (1.0 / approx if approx > 0 else 0.0)
    log.info("sdp_a objective=%s status=%s gap=%.3e exact_beta=%.10g approx_beta=%.10g trace=%.10g",
             objective.value, status.value, gap, exact, approx, mech.mse)
    return SdpSolution(mech, beta, status, gap, iters, approx, objective)


def solve_sdp_b(family: Sequence, backend: str = "builtin", options: SolverOptions | None = None):
    """
    Trace-minimal covariance dominating every member of ``family``.

    Returns
    -------
    cov : ndarray
    result : SolverResult or None
        Solver diagnostics; ``None`` for a single-member family.
    """
    _check_backend(backend)
    mats = [np.asarray(f.cov if hasattr(f, "cov") else f, dtype=float) for f in family]
    if not mats:
        raise ValueError("family must be nonempty")
    n = mats[0].shape[0]
    for mat in mats:
        if mat.shape != (n, n):
            raise ValueError("family members must share dimensions")
    mats = [0.5 * (mat + mat.T) for mat in mats]
    if len(mats) == 1:
        return mats[0].copy(), None
    if backend == "cvxpy":
        from .cvxpy_backend import solve_sdp_b_cvxpy

        return solve_sdp_b_cvxpy(mats), None
    # pairwise-dominated duplicates add nothing
    unique = []
    for mat in mats:
        if not any(np.array_equal(mat, u) for u in unique):
            unique.append(mat)
    if len(unique) == 1:
        return unique[0].copy(), None
    scale = max(1.0, max(float(np.trace(m)) for m in unique) / n)
    lmis = [LMI(-m / scale, np.eye(n)) for m in unique]
    bp = LmiProblem(m=n, p=0, c_mat=np.eye(n), c_vec=np.zeros(0), lmis=lmis)
    X0 = sum(unique) / scale + np.eye(n)
    opts = options or SolverOptions(tol=1e-6 / scale)
    res = solve_interior_point(bp, X0, np.zeros(0), opts)
    X = res.X * scale
    log.info("sdp_b members=%d status=%s gap=%.3e trace=%.10g sum_traces=%.10g", len(unique),
             res.status.value, res.duality_gap * scale, float(np.trace(X)), sum(float(np.trace(m)) for m in mats))
    return 0.5 * (X + X.T), res


@dataclass
class MultipleSecretsResult:
    cov: np.ndarray
    per_secret: list[SdpSolution]

    @property
    def mse(self) -> float:
        return float(np.trace(self.cov))


def multiple_secrets(
    prior_cov,
    secrets: Sequence[SecretSet],
    o_t: float,
    total_budget: bool = False,
    objective: Objective | str = Objective.EXACT,
    backend: str = "builtin",
    options: SolverOptions | None = None,
) -> MultipleSecretsResult:
    """
    Design one mechanism per secret and merge them into a single covariance
    that dominates each.

    ``total_budget=True`` gives each secret ``o_t / N`` instead of ``o_t``.
    """
    if not secrets:
        raise ValueError("need at least one secret")
    prior_cov = np.asarray(prior_cov, dtype=float)
    n = prior_cov.shape[0]
    per_o_t = o_t / len(secrets) if total_budget else o_t
    budget = UtilityBudget(per_o_t, n)
    sols = [solve_sdp_a(prior_cov, s, budget, objective, backend, options) for s in secrets]
    cov, _ = solve_sdp_b([sol.mechanism.cov for sol in sols], backend, options)
    return MultipleSecretsResult(cov, sols)
