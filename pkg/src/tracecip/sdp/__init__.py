"""Semidefinite-programming mechanism design."""

from .design import (
    MultipleSecretsResult,
    Objective,
    RankDeficientError,
    SdpAProblem,
    SdpSolution,
    multiple_secrets,
    psd_dominates,
    solve_sdp_a,
    solve_sdp_b,
)
from .solver import SolverOptions, SolverStatus

__all__ = [
    "MultipleSecretsResult",
    "Objective",
    "RankDeficientError",
    "SdpAProblem",
    "SdpSolution",
    "SolverOptions",
    "SolverStatus",
    "multiple_secrets",
    "psd_dominates",
    "solve_sdp_a",
    "solve_sdp_b",
]
