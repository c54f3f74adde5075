"""
Dense primal-dual interior-point solver for the small semidefinite
programs used in mechanism design.

Problems have one symmetric matrix variable ``X`` (m x m) and a handful of
scalar variables ``y``::

    minimize    <C, X> + c^T y
    subject to  S_j = F_j0 + E_j X E_j^T + sum_k y_k G_jk  >= 0   (PSD)
                s_l = a_l + <A_l, X> + b_l^T y             >= 0

The iterates keep ``(X, y)`` strictly feasible and carry dual matrices
``Z_j`` (and scalars ``z_l``). Search directions use Nesterov-Todd scaling
with a Mehrotra-type centering choice. The normal equations are reduced
to the X block plus a small dense system; the X block is solved in closed
form when at most two LMIs touch X (simultaneous diagonalization) and by
a dense Cholesky in svec coordinates otherwise.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

log = logging.getLogger(__name__)


class SolverStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE = "infeasible"


@dataclass
class LMI:
    """``const + embed @ X @ embed.T + sum_k y_k * coeffs[k]`` must be PSD."""

    const: np.ndarray
    embed: np.ndarray | None = None
    coeffs: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.const.shape[0]

    def value(self, X, y) -> np.ndarray:
        return _sym(self.const + self.linear_part(X, y))

    def linear_part(self, X, y) -> np.ndarray:
        out = np.zeros_like(self.const)
        if self.embed is not None:
            out += self.embed @ X @ self.embed.T
        for k, G in self.coeffs.items():
            out += y[k] * G
        return out


@dataclass
class LinearIneq:
    """``offset + <mat, X> + vec @ y >= 0``."""

    offset: float
    mat: np.ndarray | None = None
    vec: np.ndarray | None = None

    def value(self, X, y) -> float:
        return self.offset + self.linear_part(X, y)

    def linear_part(self, X, y) -> float:
        val = 0.0
        if self.mat is not None:
            val += float(np.sum(self.mat * X))
        if self.vec is not None:
            val += float(self.vec @ y)
        return val


@dataclass
class LmiProblem:
    m: int
    p: int
    c_mat: np.ndarray | None
    c_vec: np.ndarray
    lmis: list[LMI]
    linear: list[LinearIneq] = field(default_factory=list)

    @property
    def cone_degree(self) -> int:
        return sum(l.size for l in self.lmis) + len(self.linear)

    def objective(self, X, y) -> float:
        val = float(self.c_vec @ y) if self.p else 0.0
        if self.c_mat is not None:
            val += float(np.sum(self.c_mat * X))
        return val

    def adjoint(self, Zs, zs):
        """``sum_j A_j^*(Z_j) + sum_l z_l A_l`` split into X and y parts."""
        out_X = np.zeros((self.m, self.m))
        out_y = np.zeros(self.p)
        for lmi, Z in zip(self.lmis, Zs):
            if lmi.embed is not None:
                out_X += lmi.embed.T @ Z @ lmi.embed
            for k, G in lmi.coeffs.items():
                out_y[k] += np.sum(G * Z)
        for l, z in zip(self.linear, zs):
            if l.mat is not None:
                out_X += z * l.mat
            if l.vec is not None:
                out_y += z * l.vec
        return _sym(out_X), out_y


@dataclass
class SolverResult:
    X: np.ndarray
    y: np.ndarray
    status: SolverStatus
    objective: float
    duality_gap: float
    iterations: int
    dual_residual: float = 0.0


@dataclass
class SolverOptions:
    """
    ``tol`` bounds the complementarity gap relative to ``max(1, |objective|)``;
    ``feas_tol`` bounds the relative dual residual.
    """

    tol: float = 1e-6
    feas_tol: float = 1e-8
    max_iter: int = 200
    step_fraction: float = 0.95
    corrector_min_step: float = 0.2
    mu0_scale: float = 30.0


def _sym(a):
    return 0.5 * (a + a.T)


class _XBlockSolver:
    """Solves ``sum_j K_j D K_j = R`` for symmetric ``D``."""

    def __init__(self, Ks: list[np.ndarray]):
        self.Ks = Ks
        m = Ks[0].shape[0]
        self.m = m
        if len(Ks) == 1:
            self.mode = "single"
            self.chol = linalg.cho_factor(Ks[0], lower=True)
        elif len(Ks) == 2:
            self.mode = "pair"
            P, Q = Ks
            try:
                d, V = linalg.eigh(P, Q)
            except linalg.LinAlgError:
                d, V = linalg.eigh(Q, P)
            self.V = V
            self.denom = np.outer(d, d) + 1.0
        else:
            self.mode = "dense"
            self._build_dense()

    def _build_dense(self):
        m = self.m
        a, b = np.triu_indices(m)
        self.a, self.b = a, b
        c = np.where(a == b, 0.5, 1.0 / math.sqrt(2.0))
        self.c = c
        V = np.stack([K.reshape(-1) for K in self.Ks])
        T = V.T @ V  # T[(a,c),(b,d)] = sum_k K[a,c] K[b,d]
        aa = a[:, None] * m + a[None, :]
        bb = b[:, None] * m + b[None, :]
        ab = a[:, None] * m + b[None, :]
        ba = b[:, None] * m + a[None, :]
        H = 2.0 * np.outer(c, c) * (T[aa, bb] + T[ab, ba])
        self.chol = linalg.cho_factor(H, lower=True)

    def _svec(self, R):
        return 2.0 * self.c * R[self.a, self.b]

    def _smat(self, z):
        D = np.zeros((self.m, self.m))
        D[self.a, self.b] = self.c * z
        return D + D.T

    def solve(self, R: np.ndarray) -> np.ndarray:
        R = _sym(R)
        if self.mode == "single":
            tmp = linalg.cho_solve(self.chol, R)
            return _sym(linalg.cho_solve(self.chol, tmp.T))
        if self.mode == "pair":
            V = self.V
            Y = (V.T @ R @ V) / self.denom
            return _sym(V @ Y @ V.T)
        return self._smat(linalg.cho_solve(self.chol, self._svec(R)))


class _NormalEquations:
    """
    Factorized operator ``dx -> sum_j A_j^*(H_j A_j(dx) H_j) + sum_l d_l A_l <A_l, dx>``
    for per-LMI scaling matrices ``H_j`` and positive weights ``d_l``.
    """

    def __init__(self, prob: LmiProblem, Hs, ds):
        self.prob = prob
        self.Hs = Hs
        self.ds = ds
        p, m = prob.p, prob.m
        Ks = []
        cross = [np.zeros((m, m)) for _ in range(p)]
        H_yy = np.zeros((p, p))
        for lmi, H in zip(prob.lmis, Hs):
            HG = {k: H @ G for k, G in lmi.coeffs.items()}
            for k, hg in HG.items():
                for k2, hg2 in HG.items():
                    H_yy[k, k2] += np.sum(hg * hg2.T)
            if lmi.embed is not None:
                E = lmi.embed
                HE = H @ E
                Ks.append(_sym(E.T @ HE))
                for k, hg in HG.items():
                    cross[k] += _sym(E.T @ hg @ HE)
        self.xsolve = _XBlockSolver(Ks)
        lin = prob.linear
        self.cols = cross + [l.mat if l.mat is not None else np.zeros((m, m)) for l in lin]
        self.solved = [self.xsolve.solve(c) for c in self.cols]
        size = p + len(lin)
        Q = np.zeros((size, size))
        Q[:p, :p] = H_yy
        for li, (l, d) in enumerate(zip(lin, ds)):
            if l.vec is not None:
                Q[:p, p + li] = l.vec
                Q[p + li, :p] = l.vec
            Q[p + li, p + li] = -1.0 / d
        G = np.zeros((size, size))
        for r in range(size):
            for c in range(size):
                G[r, c] = np.sum(self.cols[r] * self.solved[c])
        self.size = size
        self.small = linalg.lu_factor(Q - G) if size else None

    def apply(self, dX, dy):
        prob = self.prob
        dSs = [_sym(H @ lmi.linear_part(dX, dy) @ H) for lmi, H in zip(prob.lmis, self.Hs)]
        dss = np.array([l.linear_part(dX, dy) for l in prob.linear]) * self.ds
        return prob.adjoint(dSs, dss)

    def solve(self, rhs_X, rhs_y, refine: int = 2):
        """Solve with a few rounds of iterative refinement."""
        dX, dy = self._solve(rhs_X, rhs_y)
        for _ in range(refine):
            oX, oy = self.apply(dX, dy)
            eX, ey = self._solve(rhs_X - oX, rhs_y - oy)
            dX, dy = dX + eX, dy + ey
        return dX, dy

    def _solve(self, rhs_X, rhs_y):
        p = self.prob.p
        D0 = self.xsolve.solve(rhs_X)
        if not self.size:
            return D0, np.zeros(0)
        rhs = np.concatenate([rhs_y, np.zeros(self.size - p)])
        rhs -= np.array([np.sum(c * D0) for c in self.cols])
        w = linalg.lu_solve(self.small, rhs)
        dX = D0.copy()
        for c in range(self.size):
            dX -= w[c] * self.solved[c]
        return _sym(dX), w[:p]


@dataclass
class _NTScaling:
    """``W = G G^T`` with ``G^T Z G = G^-1 S G^-T = diag(lam)``."""

    G: np.ndarray
    Ginv: np.ndarray
    lam: np.ndarray

    @classmethod
    def build(cls, S_chol, Z_chol) -> "_NTScaling":
        U, lam, Vt = linalg.svd(Z_chol.T @ S_chol)
        Linv = linalg.solve_triangular(S_chol, np.eye(S_chol.shape[0]), lower=True)
        Ginv = np.sqrt(lam)[:, None] * (Vt @ Linv)
        G = (S_chol @ Vt.T) / np.sqrt(lam)[None, :]
        return cls(G, Ginv, lam)

    @property
    def w_inv(self) -> np.ndarray:
        return _sym(self.Ginv.T @ self.Ginv)

    def rhs(self, target: float, dS=None, dZ=None) -> np.ndarray:
        """
        Complementarity right-hand side ``Rc`` with optional second-order
        term from a predictor pair ``(dS, dZ)``.
        """
        lam = self.lam
        R = np.diag(target / lam - lam)
        if dS is not None:
            dS_t = self.Ginv @ dS @ self.Ginv.T
            dZ_t = self.G.T @ dZ @ self.G
            C = _sym(dS_t @ dZ_t)
            R -= 2.0 * C / (lam[:, None] + lam[None, :])
        return _sym(self.Ginv.T @ R @ self.Ginv)


def _max_step_psd(chol, dM) -> float:
    tmp = linalg.solve_triangular(chol, _sym(dM), lower=True)
    tmp = linalg.solve_triangular(chol, tmp.T, lower=True)
    low = np.linalg.eigvalsh(_sym(tmp))[0]
    return math.inf if low >= 0 else -1.0 / low


def _max_step_vec(v, dv) -> float:
    neg = dv < 0
    return float(np.min(-v[neg] / dv[neg])) if np.any(neg) else math.inf


def _embed_norm(lmi: LMI) -> float:
    norms = [float(np.linalg.norm(G, 2)) for G in lmi.coeffs.values()]
    if lmi.embed is not None:
        norms.append(float(np.linalg.norm(lmi.embed, 2)) ** 2)
    return max(norms, default=0.0)


def _chol(M):
    try:
        return linalg.cholesky(M, lower=True)
    except linalg.LinAlgError:
        return None


def solve_interior_point(prob: LmiProblem, X0: np.ndarray, y0: np.ndarray, options: SolverOptions | None = None) -> SolverResult:
    """
    Primal-dual path following from a strictly feasible ``(X0, y0)``.

    The dual start ``Z_j = mu0 S_j^-1`` lies on the central complementarity
    curve but need not satisfy the dual equality; the dual residual is
    driven to zero alongside the gap.
    """
    opts = options or SolverOptions()
    if not any(lmi.embed is not None for lmi in prob.lmis):
        raise ValueError("at least one LMI must involve the matrix variable")
    X = np.array(X0, dtype=float)
    y = np.array(y0, dtype=float)
    Ss = [lmi.value(X, y) for lmi in prob.lmis]
    ss = np.array([l.value(X, y) for l in prob.linear])
    S_chols = [_chol(S) for S in Ss]
    if any(c is None for c in S_chols) or np.any(ss <= 0):
        raise ValueError("starting point is not strictly feasible")
    nu = prob.cone_degree
    mu0 = opts.mu0_scale * max(abs(prob.objective(X, y)), 1.0) / nu
    Zs = [mu0 * linalg.cho_solve((c, True), np.eye(c.shape[0])) for c in S_chols]
    zs = mu0 / ss
    c_X = prob.c_mat if prob.c_mat is not None else np.zeros((prob.m, prob.m))
    c_y = prob.c_vec.astype(float)
    c_norm = 1.0 + math.sqrt(float(np.sum(c_X ** 2) + c_y @ c_y))
    status = SolverStatus.MAX_ITERATIONS
    it = 0
    while True:
        gap = sum(float(np.sum(S * Z)) for S, Z in zip(Ss, Zs)) + float(ss @ zs)
        aX, ay = prob.adjoint(Zs, zs)
        rX, ry = c_X - aX, c_y - ay
        # relative to the magnitude of the terms that cancel in A^*(Z)
        z_norm = sum(float(np.linalg.norm(Z)) * _embed_norm(l) for l, Z in zip(prob.lmis, Zs))
        res_norm = math.sqrt(float(np.sum(rX ** 2) + ry @ ry)) / (c_norm + z_norm)
        obj = prob.objective(X, y)
        if gap <= opts.tol * max(1.0, abs(obj)) and res_norm <= opts.feas_tol:
            status = SolverStatus.OPTIMAL
            break
        if it >= opts.max_iter:
            break
        it += 1
        Z_chols = [_chol(Z) for Z in Zs]
        if any(c is None for c in Z_chols):
            log.warning("dual iterate lost definiteness at iteration %d", it)
            break
        scalings = [_NTScaling.build(sc, zc) for sc, zc in zip(S_chols, Z_chols)]
        Hs = [sc.w_inv for sc in scalings]
        ds = zs / ss
        normal = _NormalEquations(prob, Hs, ds)
        mu = gap / nu

        def direction(sigma, aff=None):
            if aff is None:
                Rc = [sc.rhs(sigma * mu) for sc in scalings]
                rc = sigma * mu / ss - zs
            else:
                Rc = [sc.rhs(sigma * mu, dS, dZ) for sc, dS, dZ in zip(scalings, aff[0], aff[2])]
                rc = (sigma * mu - aff[1] * aff[3]) / ss - zs
            bX, by = prob.adjoint(Rc, rc)
            dX, dy = normal.solve(bX - rX, by - ry)
            dSs = [lmi.linear_part(dX, dy) for lmi in prob.lmis]
            dss = np.array([l.linear_part(dX, dy) for l in prob.linear])
            dZs = [_sym(R - H @ dS @ H) for R, H, dS in zip(Rc, Hs, dSs)]
            dzs = rc - ds * dss
            return dX, dy, dSs, dss, dZs, dzs

        def steps(dSs, dss, dZs, dzs):
            ap = min([_max_step_psd(c, d) for c, d in zip(S_chols, dSs)] + [_max_step_vec(ss, dss)])
            ad = min([_max_step_psd(c, d) for c, d in zip(Z_chols, dZs)] + [_max_step_vec(zs, dzs)])
            return min(1.0, opts.step_fraction * ap), min(1.0, opts.step_fraction * ad)

        # affine predictor picks the centering weight; corrector adds its second-order term
        _, _, dSs, dss, dZs, dzs = direction(0.0)
        ap, ad = steps(dSs, dss, dZs, dzs)
        gap_aff = sum(float(np.sum((S + ap * dS) * (Z + ad * dZ))) for S, dS, Z, dZ in zip(Ss, dSs, Zs, dZs))
        gap_aff += float((ss + ap * dss) @ (zs + ad * dzs))
        sigma = min(1.0, max(gap_aff / gap, 0.0) ** 3)
        if min(ap, ad) >= opts.corrector_min_step:
            dX, dy, dSs, dss, dZs, dzs = direction(sigma, (dSs, dss, dZs, dzs))
        else:
            # far from the central path the second-order term is unreliable
            sigma = max(sigma, 0.5)
            dX, dy, dSs, dss, dZs, dzs = direction(sigma)
        ap, ad = steps(dSs, dss, dZs, dzs)
        # slacks are recomputed from (X, y), so re-check definiteness
        while True:
            Xn, yn = X + ap * dX, y + ap * dy
            Sn = [lmi.value(Xn, yn) for lmi in prob.lmis]
            sn = np.array([l.value(Xn, yn) for l in prob.linear])
            cn = [_chol(S) for S in Sn]
            if all(c is not None for c in cn) and np.all(sn > 0):
                break
            ap *= 0.5
            if ap < 1e-14:
                break
        if ap < 1e-14:
            log.warning("primal step collapsed at iteration %d", it)
            break
        log.debug("iter=%d gap=%.3e res=%.3e sigma=%.3f ap=%.3f ad=%.3f", it, gap, res_norm, sigma, ap, ad)
        X, y, Ss, ss, S_chols = Xn, yn, Sn, sn, cn
        Zs = [_sym(Z + ad * dZ) for Z, dZ in zip(Zs, dZs)]
        zs = zs + ad * dzs
    obj = prob.objective(X, y)
    log.info("sdp solve status=%s iterations=%d gap=%.3e dual_residual=%.3e objective=%.10g",
             status.value, it, gap, res_norm, obj)
    return SolverResult(X=_sym(X), y=y, status=status, objective=obj, duality_gap=gap,
                        iterations=it, dual_residual=res_norm)
