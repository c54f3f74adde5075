"""
Bayesian Gaussian adversary: posterior covariance of the trace given a
noisy release, uncertainty intervals for secrets, and sweep tables
comparing mechanisms at equal mean squared error.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import linalg

from .gp import KernelSpec, SingularMatrixError, build_covariance
from .mechanisms import UtilityBudget, concentrated_baseline, uniform_baseline
from .secrets import SecretKind, SecretSet

MechDesigner = Callable[[np.ndarray, SecretSet, UtilityBudget], np.ndarray]


def posterior_covariance(prior_cov, mech_cov) -> np.ndarray:
    """
    Covariance of the trace given ``z = x + g``.

    Uses ``S (S + G)^-1 G``, which equals ``(S^-1 + G^-1)^-1`` when both are
    invertible and stays exact when ``G`` is singular (zero-noise
    coordinates get zero posterior variance).
    """
    prior_cov = np.asarray(prior_cov, dtype=float)
    g = np.asarray(mech_cov.cov if hasattr(mech_cov, "cov") else mech_cov, dtype=float)
    if prior_cov.shape != g.shape or prior_cov.ndim != 2:
        raise ValueError("prior and mechanism covariances must have the same square shape")
    total = 0.5 * (prior_cov + g + (prior_cov + g).T)
    try:
        factor = linalg.cho_factor(total, lower=True)
    except linalg.LinAlgError:
        raise SingularMatrixError("prior plus noise covariance", math.inf) from None
    post = prior_cov @ linalg.cho_solve(factor, g)
    return 0.5 * (post + post.T)


def uncertainty_interval(post_cov, secret: SecretSet) -> float:
    """
    Width of the adversary's uncertainty about ``secret``.

    Basic secrets give ``2 sqrt(posterior variance)``, averaged over the
    secret's indices; compound secrets give twice the square root of the
    smallest eigenvalue of the posterior secret block.
    """
    post_cov = np.asarray(post_cov, dtype=float)
    idx = np.asarray(secret.indices)
    if idx.max() >= post_cov.shape[0]:
        raise ValueError(f"secret index {idx.max()} outside a {post_cov.shape[0]}-point covariance")
    if secret.kind is SecretKind.BASIC or secret.size == 1:
        return float(np.mean(2.0 * np.sqrt(np.clip(np.diag(post_cov)[idx], 0.0, None))))
    block = post_cov[np.ix_(idx, idx)]
    low = float(np.linalg.eigvalsh(0.5 * (block + block.T))[0])
    return 2.0 * math.sqrt(max(low, 0.0))


def mean_basic_interval(post_cov, indices: Iterable[int]) -> float:
    """Mean of per-index basic intervals (the all-basic report)."""
    diag = np.clip(np.diag(np.asarray(post_cov))[list(indices)], 0.0, None)
    return float(np.mean(2.0 * np.sqrt(diag)))


@dataclass
class SweepRow:
    l_eff: float
    mechanism: str
    mse: float
    interval: float
    epsilon_bound: float = math.nan
    scale_factor: float = 1.0


def write_sweep_csv(rows: Sequence[SweepRow], path, with_bound: bool = True) -> None:
    """Write sweep rows; the bound and scale-factor columns are optional."""
    names = [f.name for f in fields(SweepRow)]
    if not with_bound:
        names = ["l_eff", "mechanism", "mse", "interval"]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in rows:
            writer.writerow([_fmt(getattr(row, name)) for name in names])


def read_sweep_csv(path) -> list[SweepRow]:
    out = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            kwargs = {k: (v if k == "mechanism" else float(v)) for k, v in rec.items()}
            out.append(SweepRow(**kwargs))
    return out


def _fmt(value):
    return f"{value:.12g}" if isinstance(value, float) else value


def misspecification_sweep(
    assumed_kernel: KernelSpec,
    true_scale_factors: Sequence[float],
    mech_designer: MechDesigner,
    secret: SecretSet,
    budget: UtilityBudget,
) -> list[tuple[float, float]]:
    """
    Design against the assumed kernel, then measure the interval under
    priors whose lengthscale is scaled by each factor.

    Returns
    -------
    list of (factor, interval)
    """
    for c in true_scale_factors:
        if not c > 0:
            raise ValueError(f"scale factors must be positive, got {c}")
    n = budget.n
    assumed = build_covariance(assumed_kernel, n)
    mech = mech_designer(assumed, secret, budget)
    rows = []
    for c in true_scale_factors:
        true_cov = build_covariance(assumed_kernel.with_lengthscale(c * assumed_kernel.l_eff), n)
        rows.append((float(c), uncertainty_interval(posterior_covariance(true_cov, mech), secret)))
    return rows


def baseline_rows(prior_cov, secret: SecretSet, mse: float, l_eff: float) -> list[SweepRow]:
    """Uniform and concentrated baselines at total noise ``mse``."""
    n = prior_cov.shape[0]
    budget = UtilityBudget(mse / n, n)
    out = []
    for name, mech in (
        ("uniform", uniform_baseline(n, budget, secret.indices)),
        ("concentrated", concentrated_baseline(n, secret, budget)),
    ):
        post = posterior_covariance(prior_cov, mech)
        out.append(SweepRow(l_eff, name, mech.mse, uncertainty_interval(post, secret)))
    return out
