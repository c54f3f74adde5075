"""Secret sets, discriminative pairs and the hypothesis-difference ball."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

# closed-ball membership; absorbs rounding in e.g. hypot(0.6, 0.8)
_BALL_RTOL = 1e-12


class SecretKind(str, enum.Enum):
    BASIC = "basic"
    COMPOUND = "compound"


@dataclass(frozen=True)
class SecretSet:
    """
    Sensitive indices of a trace.

    ``unique_times`` is the number of distinct sample times covered by
    ``indices`` (a 2-d location occupies two indices but one time).
    """

    indices: tuple[int, ...]
    kind: SecretKind = SecretKind.BASIC
    radius: float = 1.0
    unique_times: int = 1

    def __post_init__(self):
        idx = tuple(sorted(int(i) for i in self.indices))
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "kind", SecretKind(self.kind))
        if not idx:
            raise ValueError("secret set must be nonempty")
        if len(set(idx)) != len(idx):
            raise ValueError("secret indices must be distinct")
        if min(idx) < 0:
            raise ValueError("secret indices must be nonnegative")
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.unique_times < 1 or self.unique_times > len(idx):
            raise ValueError("unique_times must lie in [1, len(indices)]")
        if self.kind is SecretKind.BASIC and self.unique_times != 1:
            raise ValueError("a basic secret covers exactly one time")
        if self.kind is SecretKind.COMPOUND and self.unique_times < 2:
            raise ValueError("a compound secret covers at least two times")

    @classmethod
    def basic(cls, *indices: int, radius: float = 1.0) -> "SecretSet":
        return cls(tuple(indices), SecretKind.BASIC, radius, 1)

    @classmethod
    def compound(cls, indices, radius: float = 1.0, unique_times: int | None = None) -> "SecretSet":
        indices = tuple(indices)
        return cls(indices, SecretKind.COMPOUND, radius, unique_times or len(indices))

    @property
    def size(self) -> int:
        return len(self.indices)

    def check_within(self, n: int) -> None:
        if max(self.indices) >= n:
            raise ValueError(f"secret index {max(self.indices)} outside trace of length {n}")
        if len(self.indices) >= n:
            raise ValueError("secret set must leave a nonempty remainder")


@dataclass(frozen=True)
class DiscriminativePair:
    """
    Two hypotheses on the secret block.

    ``grouping`` partitions vector positions into per-time sub-vectors;
    the default treats every position as its own time.
    """

    s_i: np.ndarray
    s_j: np.ndarray
    grouping: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        s_i = np.atleast_1d(np.asarray(self.s_i, dtype=float))
        s_j = np.atleast_1d(np.asarray(self.s_j, dtype=float))
        if s_i.shape != s_j.shape or s_i.ndim != 1:
            raise ValueError("hypotheses must be vectors of equal length")
        grouping = self.grouping
        if grouping is None:
            grouping = tuple((k,) for k in range(s_i.size))
        grouping = tuple(tuple(int(p) for p in g) for g in grouping)
        flat = sorted(p for g in grouping for p in g)
        if flat != list(range(s_i.size)):
            raise ValueError("grouping must partition the vector positions")
        object.__setattr__(self, "s_i", s_i)
        object.__setattr__(self, "s_j", s_j)
        object.__setattr__(self, "grouping", grouping)

    @property
    def delta(self) -> np.ndarray:
        return self.s_i - self.s_j


def delta_ball_radius(secret: SecretSet) -> float:
    """Radius ``sqrt(S) * r`` of the L2 ball enclosing all hypothesis differences."""
    return math.sqrt(secret.unique_times) * secret.radius


def is_discriminative_pair(pair: DiscriminativePair, secret: SecretSet) -> bool:
    if pair.s_i.size != secret.size:
        raise ValueError(f"hypotheses have length {pair.s_i.size}, secret has {secret.size} indices")
    limit = secret.radius * (1.0 + _BALL_RTOL)
    delta = pair.delta
    return all(np.linalg.norm(delta[list(g)]) <= limit for g in pair.grouping)


def dimension_index_map(dim_labels) -> dict:
    """Map each dimension label to the global indices carrying it, in trace order."""
    out: dict = {}
    for idx, label in enumerate(dim_labels):
        out.setdefault(label, []).append(idx)
    return {label: np.asarray(v, dtype=int) for label, v in out.items()}


def split_by_dimension(secret: SecretSet, dim_labels) -> list[tuple[object, SecretSet]]:
    """
    Split a secret over an interleaved multi-dimensional trace into
    per-dimension secrets expressed in each dimension's own index space.

    Returns ``(label, secret)`` pairs in order of first appearance of the
    label among the secret indices.
    """
    dim_labels = list(dim_labels)
    for i in secret.indices:
        if i >= len(dim_labels) or dim_labels[i] is None:
            raise ValueError(f"secret index {i} has no dimension label")
    index_map = dimension_index_map(dim_labels)
    local = {label: {int(g): k for k, g in enumerate(idx)} for label, idx in index_map.items()}
    order = []
    for i in secret.indices:
        if dim_labels[i] not in order:
            order.append(dim_labels[i])
    if len(order) == 1 and len(index_map) == 1:
        return [(order[0], secret)]
    out = []
    for label in order:
        positions = tuple(local[label][i] for i in secret.indices if dim_labels[i] == label)
        times = min(secret.unique_times, len(positions))
        kind = SecretKind.BASIC if times == 1 else SecretKind.COMPOUND
        out.append((label, SecretSet(positions, kind, secret.radius, times)))
    return out
