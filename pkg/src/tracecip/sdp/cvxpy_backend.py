"""Optional cvxpy backend for the design problems (needs the ``cvxpy`` extra)."""

from __future__ import annotations

import numpy as np

from .solver import SolverStatus


def _cvxpy():
    try:
        import cvxpy as cp
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ImportError("the cvxpy backend needs the optional 'cvxpy' dependency") from exc
    return cp


def _status(cp, prob) -> SolverStatus:
    if prob.status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        return SolverStatus.OPTIMAL
    if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return SolverStatus.INFEASIBLE
    return SolverStatus.MAX_ITERATIONS


def solve_sdp_a_cvxpy(prob, objective):
    cp = _cvxpy()
    k, m = prob.k, prob.m
    A, C = prob.reg, prob.schur
    X = cp.Variable((m, m), symmetric=True)
    t = cp.Variable(nonneg=True)
    cons = [X >> 0, k * t + cp.trace(X) <= prob.budget.total]
    if getattr(objective, "value", objective) == "exact":
        gamma = cp.Variable()
        tau = cp.Variable()
        block = cp.bmat([[gamma * np.eye(k), A.T], [A, C + X]])
        cons += [0.5 * (block + block.T) >> 0, cp.bmat([[t, 1.0], [1.0, tau]]) >> 0]
        goal = cp.Minimize(gamma + tau)
    else:
        pinv = prob.pseudo_inverse()
        ps, pu = pinv[:, :k], pinv[:, k:]
        beta = cp.Variable()
        mat = t * (ps @ ps.T) + pu @ (C + X) @ pu.T - beta * np.eye(k)
        cons.append(0.5 * (mat + mat.T) >> 0)
        goal = cp.Maximize(beta)
    problem = cp.Problem(goal, cons)
    problem.solve(solver=cp.CLARABEL)
    return float(t.value), np.asarray(X.value), _status(cp, problem), 0.0


def solve_sdp_b_cvxpy(mats):
    cp = _cvxpy()
    n = mats[0].shape[0]
    X = cp.Variable((n, n), symmetric=True)
    problem = cp.Problem(cp.Minimize(cp.trace(X)), [X - m >> 0 for m in mats])
    problem.solve(solver=cp.CLARABEL)
    return np.asarray(X.value)
