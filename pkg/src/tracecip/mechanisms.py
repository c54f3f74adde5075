"""
Additive Gaussian noise mechanisms: representation, the two independent
baselines, application to traces, and the mechanism file format.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gp import MVN, sample_mvn
from .secrets import SecretSet

PSD_TOL = 1e-7

HEADER_KEYS = ("n", "secret_indices", "sigma_s_sq", "lambda", "r", "report", "o_t", "kernel")


@dataclass(frozen=True)
class UtilityBudget:
    """Average per-point MSE ``o_t`` over a trace of length ``n``."""

    o_t: float
    n: int

    def __post_init__(self):
        if not (self.o_t > 0 and math.isfinite(self.o_t)):
            raise ValueError(f"o_t must be positive, got {self.o_t}")
        if self.n < 1:
            raise ValueError("n must be positive")

    @property
    def total(self) -> float:
        return self.n * self.o_t


@dataclass(frozen=True)
class NoiseMechanism:
    """
    Noise covariance with the structure required by the loss bound: equal
    independent variance ``sigma_s_sq`` on the secret block and no
    correlation between secret and remainder noise.
    """

    cov: np.ndarray
    secret_indices: tuple[int, ...]
    sigma_s_sq: float

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "secret_indices", tuple(int(i) for i in self.secret_indices))
        check_structure(cov, self.secret_indices, self.sigma_s_sq)

    @property
    def n(self) -> int:
        return self.cov.shape[0]

    @property
    def mse(self) -> float:
        return float(np.trace(self.cov))

    def remainder_block(self) -> np.ndarray:
        u = np.setdiff1d(np.arange(self.n), self.secret_indices)
        return self.cov[np.ix_(u, u)]


def check_structure(cov: np.ndarray, secret_indices, sigma_s_sq: float, tol: float = PSD_TOL) -> None:
    """Raise ``ValueError`` unless ``cov`` has the structured-mechanism block form."""
    n = cov.shape[0]
    if cov.shape != (n, n):
        raise ValueError("mechanism covariance must be square")
    scale = max(1.0, float(np.max(np.abs(cov))))
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * scale):
        raise ValueError("mechanism covariance must be symmetric")
    if np.linalg.eigvalsh(cov)[0] < -tol * scale:
        raise ValueError("mechanism covariance must be positive semidefinite")
    s = np.asarray(secret_indices, dtype=int)
    if s.size == 0 or s.min() < 0 or s.max() >= n:
        raise ValueError("secret indices out of range")
    u = np.setdiff1d(np.arange(n), s)
    atol = tol * scale
    if not np.allclose(cov[np.ix_(s, s)], sigma_s_sq * np.eye(s.size), rtol=0, atol=atol):
        raise ValueError("secret block must equal sigma_s_sq * I")
    if u.size and not np.allclose(cov[np.ix_(s, u)], 0.0, rtol=0, atol=atol):
        raise ValueError("secret/remainder cross block must vanish")
    if sigma_s_sq < 0:
        raise ValueError("sigma_s_sq must be nonnegative")


def uniform_baseline(n: int, budget: UtilityBudget, secret_indices=(0,)) -> NoiseMechanism:
    """Independent noise of variance ``o_t`` at every index."""
    if budget.n != n:
        raise ValueError("budget length does not match n")
    return NoiseMechanism(budget.o_t * np.eye(n), tuple(secret_indices), budget.o_t)


def concentrated_baseline(n: int, secret: SecretSet, budget: UtilityBudget) -> NoiseMechanism:
    """Whole budget spread evenly over the secret indices, nothing elsewhere."""
    if budget.n != n:
        raise ValueError("budget length does not match n")
    secret.check_within(n)
    var = budget.total / secret.size
    cov = np.zeros((n, n))
    idx = np.asarray(secret.indices)
    cov[idx, idx] = var
    return NoiseMechanism(cov, secret.indices, var)


def apply(mech, trace, seed: int) -> np.ndarray:
    """Release ``trace + g`` with ``g ~ N(0, mech.cov)``."""
    cov = mech.cov if hasattr(mech, "cov") else np.asarray(mech, dtype=float)
    x = np.asarray(trace, dtype=float)
    if x.shape != (cov.shape[0],):
        raise ValueError(f"trace length {x.shape} does not match mechanism dimension {cov.shape[0]}")
    noise = sample_mvn(MVN(np.zeros(x.size), cov), seed, 1)[0]
    return x + noise


@dataclass
class MechanismFile:
    """A mechanism covariance together with its header record."""

    cov: np.ndarray
    header: dict = field(default_factory=dict)

    @property
    def report(self) -> dict:
        return parse_record(self.header.get("report", ""))


def format_record(values: dict) -> str:
    parts = []
    for key, value in values.items():
        if isinstance(value, float):
            value = f"{value:.17g}"
        parts.append(f"{key}={value}")
    return " ".join(parts)


def parse_record(text: str) -> dict:
    out = {}
    for token in text.split():
        key, _, value = token.partition("=")
        try:
            out[key] = int(value)
        except ValueError:
            try:
                out[key] = float(value)
            except ValueError:
                out[key] = value
    return out


def save_mechanism(path, cov: np.ndarray, header: dict) -> None:
    """
    Write a mechanism as an 8-line ``# key: value`` header followed by the
    dense row-major matrix in CSV.
    """
    cov = np.asarray(cov, dtype=float)
    lines = []
    for key in HEADER_KEYS:
        value = header.get(key, "")
        if key == "n":
            value = cov.shape[0]
        elif key == "secret_indices" and not isinstance(value, str):
            value = ",".join(str(int(i)) for i in value)
        elif isinstance(value, float):
            value = f"{value:.17g}"
        elif isinstance(value, dict):
            value = format_record(value)
        lines.append(f"# {key}: {value}")
    buf = io.StringIO()
    np.savetxt(buf, cov, delimiter=",", fmt="%.17g")
    Path(path).write_text("\n".join(lines) + "\n" + buf.getvalue())


def load_mechanism(path) -> MechanismFile:
    text = Path(path).read_text().splitlines()
    header = {}
    body = []
    for line in text:
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            header[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    missing = [k for k in HEADER_KEYS if k not in header]
    if missing:
        raise ValueError(f"mechanism file missing header keys: {missing}")
    cov = np.loadtxt(io.StringIO("\n".join(body)), delimiter=",", ndmin=2)
    n = int(header["n"])
    if cov.shape != (n, n):
        raise ValueError(f"matrix shape {cov.shape} does not match header n={n}")
    parsed = dict(header)
    parsed["n"] = n
    parsed["secret_indices"] = tuple(int(i) for i in header["secret_indices"].split(",") if i.strip())
    for key in ("sigma_s_sq", "lambda", "r", "o_t"):
        try:
            parsed[key] = float(header[key])
        except ValueError:
            pass
    return MechanismFile(cov=cov, header=parsed)
