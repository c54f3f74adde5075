"""
Command-line front end: ``fit``, ``design``, ``sanitize`` and ``evaluate``.

Exit codes are 0 on success, 1 for input errors and 2 for solver failures.
"""

from __future__ import annotations

import argparse
import logging
import math
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import adversary, loss, mechanisms, sdp, traceio
from .gp import KernelFamily, KernelSpec, build_covariance
from .mechanisms import NoiseMechanism, UtilityBudget
from .secrets import SecretSet

log = logging.getLogger("tracecip")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_SOLVER = 2


class InputError(Exception):
    pass


class SolverFailure(Exception):
    pass


@dataclass(frozen=True)
class SecretRequest:
    """Parsed ``--secret`` value; ``secret`` is ``None`` for all-basic."""

    secret: SecretSet | None
    radius: float

    @property
    def all_basic(self) -> bool:
        return self.secret is None


def parse_secret(text: str) -> SecretRequest:
    """
    Parse ``basic:i=25,r=1``, ``compound:i=24,25;r=1`` or ``all-basic:r=1``.

    Compound secrets may add ``S=<unique times>``; it defaults to the
    number of indices.
    """
    kind, _, rest = text.strip().partition(":")
    kind = kind.strip().lower()
    fields: dict[str, list[str]] = {}
    key = None
    for token in filter(None, (t.strip() for t in re.split(r"[;,]", rest))):
        if "=" in token:
            key, _, value = token.partition("=")
            key = key.strip()
            fields.setdefault(key, []).append(value.strip())
        elif key is not None:
            fields[key].append(token)
        else:
            raise InputError(f"cannot parse secret {text!r}")
    unknown = set(fields) - {"i", "r", "S"}
    if unknown:
        raise InputError(f"unknown secret fields {sorted(unknown)} in {text!r}")
    try:
        radius = float(fields.get("r", ["1"])[-1])
        indices = tuple(int(v) for v in fields.get("i", []))
        if kind == "all-basic":
            if indices:
                raise InputError("all-basic takes no indices")
            return SecretRequest(None, radius)
        if not indices:
            raise InputError(f"secret {text!r} needs indices")
        if kind == "basic":
            return SecretRequest(SecretSet.basic(*indices, radius=radius), radius)
        if kind == "compound":
            times = int(fields["S"][-1]) if "S" in fields else None
            return SecretRequest(SecretSet.compound(indices, radius, times), radius)
    except ValueError as exc:
        raise InputError(f"invalid secret {text!r}: {exc}") from None
    raise InputError(f"unknown secret kind {kind!r}")


def parse_sweep(text: str) -> np.ndarray:
    """``l_eff=a:b:k`` gives ``k`` log-spaced values from ``a`` to ``b``."""
    m = re.fullmatch(r"\s*l_eff\s*=\s*([^:]+):([^:]+):(\d+)\s*", text)
    if not m:
        raise InputError(f"sweep must look like l_eff=a:b:k, got {text!r}")
    a, b, k = float(m.group(1)), float(m.group(2)), int(m.group(3))
    if not (0 < a <= b) or k < 1:
        raise InputError(f"sweep needs 0 < a <= b and k >= 1, got {text!r}")
    return np.geomspace(a, b, k)


def parse_floats(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise InputError("empty list")
    return values


def parse_grid(text: str | None) -> tuple[float, ...]:
    if text is None:
        return traceio.DEFAULT_GRID
    if ":" in text:
        return tuple(float(v) for v in parse_sweep("l_eff=" + text))
    return tuple(parse_floats(text))


def kernel_from_args(args, l_eff: float | None = None) -> KernelSpec:
    family = KernelFamily(args.kernel)
    period = args.period
    if family is KernelFamily.PERIODIC and period is None:
        period = args.n / 2.0
    try:
        return KernelSpec(family, args.l_eff if l_eff is None else l_eff, period, 1.0, args.jitter)
    except ValueError as exc:
        raise InputError(str(exc)) from None


# ---------------------------------------------------------------- design


@dataclass
class Design:
    cov: np.ndarray
    mechanism: NoiseMechanism | None
    status: str
    per_secret: list


def design_mechanism(prior_cov, request: SecretRequest, o_t: float, objective: str = "exact",
                     total_budget: bool = False) -> Design:
    n = prior_cov.shape[0]
    if request.all_basic:
        secrets = [SecretSet.basic(i, radius=request.radius) for i in range(n)]
        res = sdp.multiple_secrets(prior_cov, secrets, o_t, total_budget=total_budget, objective=objective)
        statuses = {s.solver_status for s in res.per_secret}
        status = "optimal" if statuses == {sdp.SolverStatus.OPTIMAL} else "failed"
        return Design(res.cov, None, status, res.per_secret)
    sol = sdp.solve_sdp_a(prior_cov, request.secret, UtilityBudget(o_t, n), objective=objective)
    return Design(sol.mechanism.cov, sol.mechanism, sol.solver_status.value, [sol])


def epsilon_for(prior_cov, cov, request: SecretRequest, lam: float) -> float:
    """Certified bound; for all-basic the largest per-index worst case."""
    n = prior_cov.shape[0]
    if request.all_basic:
        return max(loss.worst_case_loss(prior_cov, cov, SecretSet.basic(i, radius=request.radius), lam)
                   for i in range(n))
    mech = cov if isinstance(cov, NoiseMechanism) else None
    if mech is not None and mech.sigma_s_sq > 0:
        try:
            return loss.cip_bound(prior_cov, mech, request.secret, lam).epsilon
        except ValueError:
            pass
    return loss.worst_case_loss(prior_cov, np.asarray(getattr(cov, "cov", cov)), request.secret, lam)


def cmd_design(args) -> int:
    request = parse_secret(args.secret)
    kernel = kernel_from_args(args)
    prior = build_covariance(kernel, args.n)
    if request.secret is not None:
        try:
            request.secret.check_within(args.n)
        except ValueError as exc:
            raise InputError(str(exc)) from None
    design = design_mechanism(prior, request, args.budget, args.objective, args.total_budget)
    if design.status != "optimal":
        raise SolverFailure(f"solver status {design.status}")
    record: dict = {}
    if design.mechanism is not None:
        rep = loss.cip_bound(prior, design.mechanism, request.secret, args.lam)
        record = mechanisms.parse_record(rep.to_record())
        secret_idx = request.secret.indices
        sigma = design.mechanism.sigma_s_sq
    else:
        eps = epsilon_for(prior, design.cov, request, args.lam)
        dominated = all(sdp.psd_dominates(design.cov, s.mechanism.cov) for s in design.per_secret)
        before = max(loss.cip_bound(prior, s.mechanism, SecretSet.basic(*s.mechanism.secret_indices,
                                    radius=request.radius), args.lam).epsilon for s in design.per_secret)
        record = {"epsilon": eps, "lambda": args.lam, "r": request.radius, "S": 1,
                  "sigma_s_sq": math.nan, "alpha_star": math.nan, "direct_term": math.nan,
                  "mse": float(np.trace(design.cov)), "dominates": str(dominated).lower(),
                  "max_epsilon_before_merge": before}
        secret_idx = tuple(range(args.n))
        sigma = math.nan
    record["status"] = design.status
    record["objective"] = args.objective
    header = {
        "secret_indices": secret_idx, "sigma_s_sq": sigma, "lambda": float(args.lam),
        "r": float(request.radius), "report": record, "o_t": float(args.budget),
        "kernel": kernel.describe(),
    }
    mechanisms.save_mechanism(args.out, design.cov, header)
    print(mechanisms.format_record(record))
    return EXIT_OK


# ---------------------------------------------------------------- fit


def cmd_fit(args) -> int:
    directory = Path(args.input_dir)
    if not directory.is_dir():
        raise InputError(f"{directory} is not a directory")
    paths = sorted(directory.glob("*.csv"))
    if not paths:
        raise InputError(f"no CSV traces in {directory}")
    grid = parse_grid(args.grid)
    period = args.period
    if args.no_filter:
        limits = {"max_len": None, "min_dur": None, "max_dur": None}
    else:
        limits = {"min_len": args.min_len, "max_len": args.max_len, "min_dur": args.min_dur,
                  "max_dur": args.max_dur}
    rows = []
    for path in paths:
        try:
            trace = traceio.preprocess(traceio.read_trace_csv(path), **limits)
            per = period if period is not None or args.kernel != "periodic" else trace.n_points / 2.0
            rows.extend(traceio.fit_trace(trace, args.kernel, grid, per))
        except traceio.TraceRejected as exc:
            log.warning("rejected %s reason=%s", path.name, exc.reason.value)
        except (ValueError, OSError, traceio.FitError) as exc:
            log.warning("skipped %s: %s", path.name, exc)
    if not rows:
        raise InputError("no trace could be fitted")
    traceio.write_fits_csv(rows, args.out)
    summary = traceio.batch_summary([r.l_eff for r in rows])
    print(mechanisms.format_record(summary))
    return EXIT_OK


# ---------------------------------------------------------------- sanitize


def cmd_sanitize(args) -> int:
    try:
        trace = traceio.read_trace_csv(args.trace)
        mech = mechanisms.load_mechanism(args.mech)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None
    flat = trace.values.reshape(-1)
    if flat.size != mech.cov.shape[0]:
        raise InputError(f"trace has {flat.size} values, mechanism covers {mech.cov.shape[0]}")
    released = mechanisms.apply(mech.cov, flat, args.seed).reshape(trace.values.shape)
    out = traceio.Trace(trace.timestamps, released, trace.dim_labels, trace.trace_id)
    traceio.write_trace_csv(out, args.out)
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def _interval(post, request: SecretRequest) -> float:
    if request.all_basic:
        return adversary.mean_basic_interval(post, range(post.shape[0]))
    return adversary.uncertainty_interval(post, request.secret)


def _baseline(name: str, n: int, request: SecretRequest, budget: UtilityBudget):
    if request.all_basic:
        # the union of all basic secrets is the whole trace
        return mechanisms.uniform_baseline(n, budget, tuple(range(n)))
    if name == "uniform":
        return mechanisms.uniform_baseline(n, budget, request.secret.indices)
    return mechanisms.concentrated_baseline(n, request.secret, budget)


def evaluate_point(args, l_eff: float, request: SecretRequest, fixed, factors) -> list[adversary.SweepRow]:
    """All rows for one assumed lengthscale."""
    n = args.n
    kernel = kernel_from_args(args, l_eff)
    assumed = build_covariance(kernel, n)
    mechs: list[tuple[str, object]] = []
    if fixed is not None:
        mechs.append(("file", fixed))
    if args.design:
        design = design_mechanism(assumed, request, args.budget, args.objective, args.total_budget)
        if design.status != "optimal":
            raise SolverFailure(f"solver status {design.status} at l_eff={l_eff:.6g}")
        mechs.append(("multiple" if request.all_basic else "sdp",
                      design.mechanism if design.mechanism is not None else design.cov))
    mse = float(np.trace(getattr(mechs[0][1], "cov", mechs[0][1]))) if mechs else n * args.budget
    budget = UtilityBudget(mse / n, n)
    for name in args.baseline or []:
        mechs.append((name, _baseline(name, n, request, budget)))
    rows = []
    for c in factors:
        true = assumed if c == 1.0 else build_covariance(kernel.with_lengthscale(c * l_eff), n)
        for name, mech in mechs:
            cov = np.asarray(getattr(mech, "cov", mech))
            post = adversary.posterior_covariance(true, cov)
            eps = epsilon_for(true, mech, request, args.lam)
            rows.append(adversary.SweepRow(float(l_eff), name, float(np.trace(cov)), _interval(post, request),
                                           float(eps), float(c)))
    return rows


def _load_fixed(path, n: int, request: SecretRequest):
    try:
        mf = mechanisms.load_mechanism(path)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None
    if mf.cov.shape[0] != n:
        raise InputError(f"mechanism covers {mf.cov.shape[0]} points, --n is {n}")
    sigma = mf.header.get("sigma_s_sq")
    if request.all_basic or not isinstance(sigma, float) or not math.isfinite(sigma):
        return mf.cov
    try:
        return NoiseMechanism(mf.cov, request.secret.indices, sigma)
    except ValueError:
        return mf.cov


def cmd_evaluate(args) -> int:
    request = parse_secret(args.secret)
    if request.secret is not None:
        try:
            request.secret.check_within(args.n)
        except ValueError as exc:
            raise InputError(str(exc)) from None
    if not (args.mech or args.design or args.baseline):
        raise InputError("give --mech, --design or at least one --baseline")
    grid = parse_sweep(args.sweep) if args.sweep else np.array([args.l_eff])
    factors = parse_floats(args.misspec) if args.misspec else [1.0]
    if any(c <= 0 for c in factors):
        raise InputError("scale factors must be positive")
    fixed = _load_fixed(args.mech, args.n, request) if args.mech else None
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        chunks = list(pool.map(lambda l: evaluate_point(args, float(l), request, fixed, factors), grid))
    rows = [r for chunk in chunks for r in chunk]
    adversary.write_sweep_csv(rows, args.out)
    for r in rows:
        print(f"l_eff={r.l_eff:.6g} c={r.scale_factor:.6g} {r.mechanism}: "
              f"mse={r.mse:.6g} interval={r.interval:.6g} epsilon={r.epsilon_bound:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_kernel_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kernel", choices=[f.value for f in KernelFamily], default="rbf")
    p.add_argument("--l-eff", dest="l_eff", type=float, default=6.0, help="effective lengthscale (samples)")
    p.add_argument("--period", type=float, default=None, help="periodic kernel period; default n/2")
    p.add_argument("--jitter", type=float, default=1e-8)
    p.add_argument("--n", type=int, default=50)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracecip", description=__doc__.strip().splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit kernel lengthscales to a directory of traces")
    p.add_argument("input_dir")
    p.add_argument("--kernel", choices=[f.value for f in KernelFamily], default="rbf")
    p.add_argument("--period", type=float, default=None, help="periodic period; default half the trace")
    p.add_argument("--grid", default=None, help="comma list or a:b:k (log-spaced)")
    p.add_argument("--min-len", type=int, default=2)
    p.add_argument("--max-len", type=int, default=traceio.DEFAULT_MAX_LEN)
    p.add_argument("--min-dur", type=float, default=traceio.DEFAULT_MIN_DUR)
    p.add_argument("--max-dur", type=float, default=traceio.DEFAULT_MAX_DUR)
    p.add_argument("--no-filter", action="store_true", help="skip length and duration windows")
    p.add_argument("--out", default="fitted.csv")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("design", help="design a noise mechanism")
    _add_kernel_args(p)
    p.add_argument("--secret", required=True)
    p.add_argument("--budget", type=float, default=0.5, help="average per-point MSE o_t")
    p.add_argument("--lambda", dest="lam", type=float, default=2.0)
    p.add_argument("--objective", choices=[o.value for o in sdp.Objective], default="exact")
    p.add_argument("--total-budget", action="store_true", help="all-basic: split o_t across secrets")
    p.add_argument("--out", default="mech.csv")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("sanitize", help="add mechanism noise to a trace")
    p.add_argument("trace")
    p.add_argument("mech")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="z.csv")
    p.set_defaults(func=cmd_sanitize)

    p = sub.add_parser("evaluate", help="adversary intervals and bounds over a lengthscale sweep")
    _add_kernel_args(p)
    p.add_argument("--secret", required=True)
    p.add_argument("--mech", default=None, help="mechanism file to evaluate")
    p.add_argument("--design", action="store_true", help="design at every sweep point")
    p.add_argument("--baseline", action="append", choices=["uniform", "concentrated"])
    p.add_argument("--budget", type=float, default=0.5)
    p.add_argument("--lambda", dest="lam", type=float, default=2.0)
    p.add_argument("--objective", choices=[o.value for o in sdp.Objective], default="exact")
    p.add_argument("--total-budget", action="store_true")
    p.add_argument("--sweep", default=None, help="l_eff=a:b:k")
    p.add_argument("--misspec", default=None, help="true/assumed lengthscale factors, e.g. 0.5,1.0,1.5")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="curve.csv")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except SolverFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except np.linalg.LinAlgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (InputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
