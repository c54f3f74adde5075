"""Numerical Renyi divergences by direct integration of the density ratio."""

import math

import numpy as np
from scipy import integrate, stats


def renyi_quad_1d(mu_p, var_p, mu_q, var_q, lam):
    # the integrand is an unnormalized Gaussian; cover 40 of its sd
    prec = lam / var_p + (1 - lam) / var_q
    centre = (lam * mu_p / var_p + (1 - lam) * mu_q / var_q) / prec
    sd = math.sqrt(1 / prec)
    lo, hi = centre - 40 * sd, centre + 40 * sd

    def log_f(x):
        lp = stats.norm.logpdf(x, mu_p, math.sqrt(var_p))
        lq = stats.norm.logpdf(x, mu_q, math.sqrt(var_q))
        return lam * lp + (1 - lam) * lq

    # rescale by the peak so large orders do not overflow
    peak = float(np.max(log_f(np.linspace(lo, hi, 20001))))
    val, _ = integrate.quad(lambda x: math.exp(log_f(x) - peak), lo, hi, points=[centre], epsabs=0, epsrel=1e-13,
                            limit=400)
    return (math.log(val) + peak) / (lam - 1)


def renyi_quad_2d(mu_p, cov_p, mu_q, cov_q, lam, half_width=12.0, nodes=240):
    """Tensor Gauss-Legendre rule on a box centred on the integrand."""
    mu_p, mu_q = np.asarray(mu_p, float), np.asarray(mu_q, float)
    # the integrand is an unnormalized Gaussian; centre the box on it
    prec_p, prec_q = np.linalg.inv(cov_p), np.linalg.inv(cov_q)
    prec = lam * prec_p + (1 - lam) * prec_q
    cov = np.linalg.inv(prec)
    centre = cov @ (lam * prec_p @ mu_p + (1 - lam) * prec_q @ mu_q)
    reach = half_width * math.sqrt(float(np.max(np.linalg.eigvalsh(cov))))
    x, w = np.polynomial.legendre.leggauss(nodes)
    xs = centre[0] + reach * x
    ys = centre[1] + reach * x
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    lp = stats.multivariate_normal(mu_p, cov_p).logpdf(pts)
    lq = stats.multivariate_normal(mu_q, cov_q).logpdf(pts)
    log_vals = lam * lp + (1 - lam) * lq
    peak = float(np.max(log_vals))
    weights = np.outer(w, w).ravel() * reach ** 2
    return (math.log(float(np.exp(log_vals - peak) @ weights)) + peak) / (lam - 1)
