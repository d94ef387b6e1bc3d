"""Shared domain types: status spaces, system and population states, potential
landscapes, spatial partitions, adoption rules, and reproducible RNG streams.

All spatial quantities are in dimensionless model units.  Types are immutable
after construction (arrays are not defensively copied; callers must not
mutate them) and safe to share across replicas.  RNG streams are owned by one
replica each and never shared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ModelError(Exception):
    """Raised when a simulator or estimator detects an inconsistent model."""


# ---------------------------------------------------------------------------
# status space and states


@dataclass(frozen=True)
class StatusSpace:
    """Discrete set of agent statuses, e.g. ("1", "2") or ("S","E","I","R","D")."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ValueError("status space needs at least one status")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"status labels must be unique, got {self.labels}")

    @property
    def n_s(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown status label {label!r}, have {self.labels}")


TWO_STATUS = StatusSpace(("1", "2"))
SEIRD = StatusSpace(("S", "E", "I", "R", "D"))


@dataclass
class SystemState:
    """Microscale state: per-agent positions (n_a, d) and status indices (n_a,)."""

    positions: np.ndarray
    statuses: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.statuses = np.asarray(self.statuses, dtype=np.int64)
        if self.positions.ndim != 2:
            raise ValueError("positions must be a (n_a, d) array")
        if self.statuses.shape != (self.positions.shape[0],):
            raise ValueError("statuses must have one entry per agent")
        if self.statuses.size and self.statuses.min() < 0:
            raise ValueError("status indices must be nonnegative")

    @property
    def n_a(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "SystemState":
        return SystemState(self.positions.copy(), self.statuses.copy(), self.time)

    def status_counts(self, n_s: int) -> np.ndarray:
        return np.bincount(self.statuses, minlength=n_s)


@dataclass
class PopulationState:
    """Mesoscale state: (n_s, m) matrix of per-status, per-subpopulation counts.

    Entries are nonnegative; integer-valued for the stochastic metapopulation
    model, real-valued for the piecewise-deterministic one.  The total count
    is conserved by every simulator in this package.
    """

    counts: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.ndim != 2:
            raise ValueError("counts must be a (n_s, m) matrix")
        if self.counts.size and self.counts.min() < 0:
            raise ValueError("population counts must be nonnegative")

    @property
    def n_s(self) -> int:
        return self.counts.shape[0]

    @property
    def m(self) -> int:
        return self.counts.shape[1]

    @property
    def total(self) -> float:
        return float(self.counts.sum())


# ---------------------------------------------------------------------------
# potentials


class Potential:
    """Energy landscape over the motion space; subclasses provide vectorized
    ``evaluate`` (n, d) -> (n,) and ``gradient`` (n, d) -> (n, d)."""

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class DoubleWell(Potential):
    """U(x1, x2) = (x1^2 - 1)^2 + 7 x2^2 with minima at (+-1, 0)."""

    def evaluate(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return (x[:, 0] ** 2 - 1.0) ** 2 + 7.0 * x[:, 1] ** 2

    def gradient(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        g = np.empty_like(x)
        g[:, 0] = 4.0 * x[:, 0] * (x[:, 0] ** 2 - 1.0)
        g[:, 1] = 14.0 * x[:, 1]
        return g


@dataclass(frozen=True)
class Quadratic(Potential):
    """U(x) = sum_i a_i x_i^2, a convenient single-well test landscape."""

    weights: tuple[float, ...] = (1.0, 1.0)

    def evaluate(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return (np.asarray(self.weights) * x**2).sum(axis=1)

    def gradient(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return 2.0 * np.asarray(self.weights) * x


@dataclass(frozen=True)
class FlatPotential(Potential):
    """U = 0 everywhere (pure Brownian motion)."""

    def evaluate(self, x):
        return np.zeros(np.atleast_2d(x).shape[0])

    def gradient(self, x):
        return np.zeros_like(np.atleast_2d(np.asarray(x, dtype=float)))


# ---------------------------------------------------------------------------
# sampling box and spatial partitions


@dataclass(frozen=True)
class SamplingBox:
    """Axis-aligned box bounding all Monte Carlo integrals.

    The motion space itself may be unbounded (the guiding double-well example
    lives on R^2); the box truncates it for uniform sampling and set volumes.
    The default covers the region where the double-well stationary density
    carries all but a negligible fraction of its mass.
    """

    lo: tuple[float, ...] = (-2.5, -1.0)
    hi: tuple[float, ...] = (2.5, 1.0)

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or any(
            l >= h for l, h in zip(self.lo, self.hi)
        ):
            raise ValueError(f"invalid box bounds lo={self.lo} hi={self.hi}")

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(np.asarray(self.hi) - np.asarray(self.lo)))

    def uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return lo + (hi - lo) * rng.random((n, self.dim))

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=1)


@dataclass(frozen=True)
class IntervalPartition:
    """Full partition of space into m slabs along one axis.

    Slab k is {x : edges[k-1] < x[axis] <= edges[k]} with edges extended by
    +-infinity, so membership is defined on all of R^d while volumes are
    measured inside the sampling box.
    """

    edges: tuple[float, ...]
    box: SamplingBox = SamplingBox()
    axis: int = 0
    kind: str = field(default="full", init=False)

    def __post_init__(self):
        if sorted(self.edges) != list(self.edges):
            raise ValueError("partition edges must be increasing")

    @property
    def m(self) -> int:
        return len(self.edges) + 1

    def member_index(self, x: np.ndarray) -> np.ndarray:
        """Set index for each point; a full partition never returns -1."""
        x = np.atleast_2d(x)
        return np.searchsorted(np.asarray(self.edges), x[:, self.axis], side="left")

    @property
    def volumes(self) -> np.ndarray:
        lo, hi = self.box.lo[self.axis], self.box.hi[self.axis]
        cuts = np.concatenate(([lo], np.clip(self.edges, lo, hi), [hi]))
        cross = self.box.volume / (hi - lo)
        return np.diff(cuts) * cross

    @property
    def total_volume(self) -> float:
        return self.box.volume


@dataclass(frozen=True)
class CoreSetPartition:
    """Core sets as disjoint slabs along one axis, with a transition region.

    ``intervals`` lists (lo, hi) in increasing order; points outside every
    interval belong to the transition region (index -1).  Infinite bounds are
    allowed; volumes are measured inside the sampling box.
    """

    intervals: tuple[tuple[float, float], ...]
    box: SamplingBox = SamplingBox()
    axis: int = 0
    kind: str = field(default="core", init=False)

    def __post_init__(self):
        flat = [b for iv in self.intervals for b in iv]
        if sorted(flat) != flat:
            raise ValueError("core set intervals must be disjoint and increasing")

    @property
    def m(self) -> int:
        return len(self.intervals)

    def member_index(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        v = x[:, self.axis]
        out = np.full(v.shape, -1, dtype=np.int64)
        for k, (lo, hi) in enumerate(self.intervals):
            out[(v >= lo) & (v <= hi)] = k
        return out

    @property
    def volumes(self) -> np.ndarray:
        lo, hi = self.box.lo[self.axis], self.box.hi[self.axis]
        cross = self.box.volume / (hi - lo)
        widths = [
            max(0.0, min(b, hi) - max(a, lo)) for a, b in self.intervals
        ]
        return np.asarray(widths) * cross

    @property
    def total_volume(self) -> float:
        return self.box.volume


EXAMPLE_CORE_SETS = CoreSetPartition(
    intervals=((-math.inf, -0.5), (0.5, math.inf))
)
EXAMPLE_FULL_PARTITION = IntervalPartition(edges=(0.0,))


# ---------------------------------------------------------------------------
# adoption rules


@dataclass(frozen=True)
class FirstOrderRule:
    """Spontaneous status change i -> j at spatially varying rate gamma(x).

    ``rate`` is either a constant or a vectorized callable (n, d) -> (n,).
    """

    i: int
    j: int
    rate: float | Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("adoption rules need i != j")
        if not callable(self.rate) and self.rate < 0:
            raise ValueError("adoption rates must be nonnegative")

    def rate_at(self, x: np.ndarray) -> np.ndarray:
        if callable(self.rate):
            return np.asarray(self.rate(x), dtype=float)
        return np.full(np.atleast_2d(x).shape[0], float(self.rate))


@dataclass(frozen=True)
class SecondOrderRule:
    """Contact-induced status change i -> j: an agent of status i adopts j at
    rate c per neighbor of status j within the interaction radius."""

    i: int
    j: int
    c: float
    radius: float

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("adoption rules need i != j")
        if self.c < 0:
            raise ValueError("rate constant must be nonnegative")
        if self.radius <= 0:
            raise ValueError("interaction radius must be positive")


@dataclass(frozen=True)
class AdoptionRuleSet:
    first_order: tuple[FirstOrderRule, ...] = ()
    second_order: tuple[SecondOrderRule, ...] = ()

    @property
    def max_radius(self) -> float:
        return max((r.radius for r in self.second_order), default=0.0)

    @property
    def n_rules(self) -> int:
        return len(self.first_order) + len(self.second_order)


EXAMPLE_RULES = AdoptionRuleSet(
    second_order=(SecondOrderRule(i=0, j=1, c=0.1, radius=0.15),)
)


# ---------------------------------------------------------------------------
# RNG streams


@dataclass(frozen=True)
class RngStream:
    """Reproducible, replica-indexed source of randomness.

    Identical (seed, stream_id) pairs reproduce identical event sequences;
    distinct stream_ids give statistically independent streams.  One stream
    is owned by exactly one replica.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.default_rng(seq)

    def substream(self, index: int) -> "RngStream":
        """Derived stream for internal sharding (e.g. MC shards)."""
        return RngStream(seed=self.seed, stream_id=(self.stream_id + 1) * 1_000_003 + index)


def replica_streams(seed: int, n: int, start: int = 0) -> list[RngStream]:
    """Streams for replicas start..start+n-1; replica r always gets stream r."""
    return [RngStream(seed=seed, stream_id=start + r) for r in range(n)]


# ---------------------------------------------------------------------------
# elementary operations


def distance_indicator(x1, x2, r: float):
    """1 if the Euclidean distance between x1 and x2 is <= r, else 0.

    Accepts single points or (n, d) arrays (broadcast pairwise by row).
    """
    if r <= 0:
        raise ValueError("interaction radius must be positive")
    a = np.atleast_2d(np.asarray(x1, dtype=float))
    b = np.atleast_2d(np.asarray(x2, dtype=float))
    d2 = ((a - b) ** 2).sum(axis=1)
    out = (d2 <= r * r).astype(int)
    return int(out[0]) if out.size == 1 and np.ndim(x1) <= 1 else out


def multinomial_log_weight(counts: np.ndarray, partition) -> float:
    """Log of the squared norm <Phi_N, Phi_N> of the indicator ansatz function.

    Under the flat measure, placing n_a distinguishable agents into the
    (set, status) boxes is multinomial with box probabilities
    p_{k,l} = vol(A_k) / (n_s * vol(X)), giving

        <Phi_N, Phi_N> = n_a! / prod N_l^(k)!  *  prod p_{k,l}^{N_l^(k)}.

    Computed in log space so counts up to 1e5 do not overflow.
    """
    if isinstance(counts, PopulationState):
        counts = counts.counts
    counts = np.asarray(counts)
    if counts.ndim != 2:
        raise ValueError("counts must be a (n_s, m) matrix")
    if not np.issubdtype(counts.dtype, np.integer):
        if not np.all(counts == np.floor(counts)):
            raise ValueError("multinomial weights need integer counts")
        counts = counts.astype(np.int64)
    if counts.size and counts.min() < 0:
        raise ValueError("multinomial weights need nonnegative counts")
    n_s = counts.shape[0]
    n_a = int(counts.sum())
    vols = np.asarray(partition.volumes, dtype=float)
    log_p = np.log(vols) - math.log(n_s * partition.total_volume)
    out = math.lgamma(n_a + 1)
    for k in range(counts.shape[1]):
        for i in range(n_s):
            c = int(counts[i, k])
            out += c * log_p[k] - math.lgamma(c + 1)
    return out


def multinomial_weight(counts, partition, n_s: int | None = None) -> float:
    """<Phi_N, Phi_N> itself; see :func:`multinomial_log_weight`."""
    mat = counts.counts if isinstance(counts, PopulationState) else np.asarray(counts)
    if n_s is not None and mat.shape[0] != n_s:
        raise ValueError(f"counts have {mat.shape[0]} statuses, expected {n_s}")
    return math.exp(multinomial_log_weight(mat, partition))
