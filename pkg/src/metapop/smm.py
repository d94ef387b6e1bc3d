"""Stochastic metapopulation model: exact Gillespie simulation of the
projected jump process on population-count matrices.

Channels come in four kinds: spatial jumps with rate lambda * N_i^(k),
first-order adoptions gamma * N_i^(k), second-order adoptions
gamma_hat * N_i^(k) * N_j^(k), and optional cross-over adoptions
c_ij * sum_{l != k} b_kl N_i^(k) N_j^(l).  Rates are recomputed from scratch
at every event (channel counts are small at this scale).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import ModelError, PopulationState, RngStream
from .projection import ProjectedModel


class SmmError(ModelError):
    pass


@dataclass
class JumpChannel:
    """One reaction channel: a state change ``delta`` (summing to zero, so the
    total count is conserved) firing at a state-dependent rate.

    Standard kinds vanish whenever the source compartment N_i^(k) is empty;
    ``custom`` channels supply their own rate_fn(counts) -> rate.
    """

    kind: str  # "spatial" | "adoption1" | "adoption2" | "crossover" | "custom"
    delta: np.ndarray
    coef: float = 0.0
    i: int = -1
    j: int = -1
    k: int = -1
    l: int = -1
    h: int = -1  # contact status of second-order channels; -1 means j itself
    weights: np.ndarray | None = None  # cross-over: b_kl over the source row
    rate_fn: Callable[[np.ndarray], float] | None = None

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.int64)
        if self.delta.sum() != 0:
            raise ValueError("channel delta must conserve the total count")
        if self.kind == "custom" and self.rate_fn is None:
            raise ValueError("custom channels need a rate_fn")
        if self.kind != "custom" and self.coef < 0:
            raise ValueError("rate coefficients must be nonnegative")

    def rate(self, counts: np.ndarray) -> float:
        if self.kind == "custom":
            return float(self.rate_fn(counts))
        if self.kind == "spatial":
            return self.coef * counts[self.i, self.k]
        if self.kind == "adoption1":
            return self.coef * counts[self.i, self.k]
        if self.kind == "adoption2":
            contact = self.j if self.h < 0 else self.h
            return self.coef * counts[self.i, self.k] * counts[contact, self.k]
        if self.kind == "crossover":
            return self.coef * counts[self.i, self.k] * float(
                self.weights @ counts[self.j, :]
            )
        raise ValueError(f"unknown channel kind {self.kind!r}")

    def describe(self) -> tuple:
        return (self.kind, self.i, self.j, self.k, self.l)


def _delta(n_s: int, m: int, minus: tuple[int, int], plus: tuple[int, int]):
    d = np.zeros((n_s, m), dtype=np.int64)
    d[minus] -= 1
    d[plus] += 1
    return d


def spatial_channel(n_s, m, i, k, l, rate) -> JumpChannel:
    return JumpChannel(
        kind="spatial", delta=_delta(n_s, m, (i, k), (i, l)), coef=rate, i=i, k=k, l=l
    )


def adoption1_channel(n_s, m, i, j, k, rate) -> JumpChannel:
    return JumpChannel(
        kind="adoption1", delta=_delta(n_s, m, (i, k), (j, k)), coef=rate, i=i, j=j, k=k
    )


def adoption2_channel(n_s, m, i, j, k, rate, contact: int | None = None) -> JumpChannel:
    """Contact-driven adoption i -> j in subpopulation k at rate
    coef * N_i^(k) * N_contact^(k); by default the contacted status is j."""
    return JumpChannel(
        kind="adoption2",
        delta=_delta(n_s, m, (i, k), (j, k)),
        coef=rate,
        i=i,
        j=j,
        k=k,
        h=-1 if contact is None else contact,
    )


def channels_from_model(model: ProjectedModel) -> list[JumpChannel]:
    """Reaction channels of the spatio-temporal master equation for a
    projected model: spatial jumps, first- and second-order adoptions, and
    cross-over adoptions only when the model enables them."""
    n_s, m = model.n_s, model.m
    channels: list[JumpChannel] = []
    for i in range(n_s):
        for k in range(m):
            for l in range(m):
                if l != k and model.lambda_[i, k, l] > 0:
                    channels.append(
                        spatial_channel(n_s, m, i, k, l, model.lambda_[i, k, l])
                    )
    for i in range(n_s):
        for j in range(n_s):
            for k in range(m):
                if model.gamma1[i, j, k] > 0:
                    channels.append(
                        adoption1_channel(n_s, m, i, j, k, model.gamma1[i, j, k])
                    )
                if model.gamma2_hat[i, j, k] > 0:
                    channels.append(
                        adoption2_channel(n_s, m, i, j, k, model.gamma2_hat[i, j, k])
                    )
    if model.include_crossover:
        for i in range(n_s):
            for j in range(n_s):
                if model.c[i, j] <= 0:
                    continue
                for k in range(m):
                    w = model.b[k].copy()
                    w[k] = 0.0
                    if w.any():
                        channels.append(
                            JumpChannel(
                                kind="crossover",
                                delta=_delta(n_s, m, (i, k), (j, k)),
                                coef=model.c[i, j],
                                i=i,
                                j=j,
                                k=k,
                                weights=w,
                            )
                        )
    return channels


# ---------------------------------------------------------------------------
# trajectory container


@dataclass
class SmmTrajectory:
    """Event log of one SSA run; the piecewise-constant state path is
    reconstructible from the initial counts plus the log."""

    initial: np.ndarray
    channels: list[JumpChannel]
    times: np.ndarray
    channel_indices: np.ndarray
    t_end: float
    final: np.ndarray
    stopped_at_watch: bool = False

    @property
    def n_events(self) -> int:
        return len(self.times)

    def states_on_grid(self, grid: np.ndarray) -> np.ndarray:
        """Counts at each grid time (last event carried forward)."""
        grid = np.asarray(grid, dtype=float)
        deltas = np.stack([ch.delta for ch in self.channels])
        if self.n_events:
            cum = np.cumsum(deltas[self.channel_indices], axis=0)
        else:
            cum = np.zeros((0,) + self.initial.shape, dtype=np.int64)
        pos = np.searchsorted(self.times, grid, side="right")
        out = np.repeat(self.initial[None], len(grid), axis=0)
        nz = pos > 0
        out[nz] += cum[pos[nz] - 1]
        return out

    def first_firing(self, channel_ids: Sequence[int]) -> float | None:
        hits = np.isin(self.channel_indices, np.asarray(channel_ids))
        if not hits.any():
            return None
        return float(self.times[np.argmax(hits)])


def watched_channel_ids(
    channels: Sequence[JumpChannel], i: int, k: int, l: int
) -> list[int]:
    return [
        c
        for c, ch in enumerate(channels)
        if ch.kind == "spatial" and (ch.i, ch.k, ch.l) == (i, k, l)
    ]


def critical_transition_time_smm(
    traj: SmmTrajectory, watched: tuple[int, int, int]
) -> float | None:
    """Time of the first spatial jump of status i from subpopulation k to l."""
    ids = watched_channel_ids(traj.channels, *watched)
    if not ids:
        return None
    return traj.first_firing(ids)


# ---------------------------------------------------------------------------
# the simulator


def simulate_ssa(
    channels: Sequence[JumpChannel],
    initial: PopulationState | np.ndarray,
    t_end: float,
    rng: RngStream,
    watch: tuple[int, int, int] | None = None,
    stop_at_watch: bool = False,
    max_events: int | None = None,
) -> SmmTrajectory:
    """Gillespie direct method: Exp(total rate) waiting times, channel chosen
    proportionally to its rate; stops at t_end or when the process absorbs.

    ``watch`` marks a spatial channel (status, from, to); with stop_at_watch
    the run ends right after it first fires.
    """
    counts0 = (
        initial.counts if isinstance(initial, PopulationState) else np.asarray(initial)
    )
    if np.any(counts0 < 0) or np.any(counts0 != np.floor(counts0)):
        raise SmmError("SSA needs nonnegative integer initial counts")
    N = counts0.astype(np.int64).copy()
    n_s, m = N.shape
    channels = list(channels)
    nc = len(channels)

    # fast path for the standard channel kinds
    coef = np.array([ch.coef for ch in channels])
    flat_a = np.array(
        [ch.i * m + ch.k if ch.kind != "custom" else 0 for ch in channels]
    )
    bil = np.array(
        [c for c, ch in enumerate(channels) if ch.kind == "adoption2"], dtype=np.int64
    )
    flat_b = np.array([channels[c].j * m + channels[c].k for c in bil], dtype=np.int64)
    others = [
        (c, channels[c])
        for c in range(nc)
        if channels[c].kind in ("crossover", "custom")
    ]
    minus_flat = np.empty(nc, dtype=np.int64)
    plus_flat = np.empty(nc, dtype=np.int64)
    simple_delta = np.zeros(nc, dtype=bool)
    for c, ch in enumerate(channels):
        flat = ch.delta.ravel()
        if (flat == -1).sum() == 1 and (flat == 1).sum() == 1 and (flat != 0).sum() == 2:
            minus_flat[c] = int(np.flatnonzero(flat == -1)[0])
            plus_flat[c] = int(np.flatnonzero(flat == 1)[0])
            simple_delta[c] = True

    watch_ids = (
        np.asarray(watched_channel_ids(channels, *watch)) if watch is not None else None
    )

    gen = rng.generator()
    Nf = N.ravel()
    t = 0.0
    times: list[float] = []
    fired: list[int] = []
    stopped = False

    while True:
        rates = coef * Nf[flat_a]
        if bil.size:
            rates[bil] *= Nf[flat_b]
        for c, ch in others:
            rates[c] = ch.rate(N)
        if rates.min() < 0:
            c = int(rates.argmin())
            raise SmmError(
                f"channel {channels[c].describe()} produced negative rate {rates[c]}"
            )
        total = rates.sum()
        if total <= 0:
            break  # absorbing state
        t += gen.exponential() / total
        if t >= t_end:
            break
        u = gen.random() * total
        c = min(int(np.searchsorted(np.cumsum(rates), u, side="right")), nc - 1)
        if simple_delta[c]:
            Nf[minus_flat[c]] -= 1
            Nf[plus_flat[c]] += 1
            if Nf[minus_flat[c]] < 0:
                raise SmmError(
                    f"channel {channels[c].describe()} emptied a compartment below zero"
                )
        else:
            N += channels[c].delta
            if N.min() < 0:
                raise SmmError(
                    f"channel {channels[c].describe()} emptied a compartment below zero"
                )
        times.append(t)
        fired.append(c)
        if watch_ids is not None and stop_at_watch and c in watch_ids:
            stopped = True
            break
        if max_events is not None and len(times) >= max_events:
            stopped = True
            break

    return SmmTrajectory(
        initial=counts0.astype(np.int64),
        channels=channels,
        times=np.asarray(times),
        channel_indices=np.asarray(fired, dtype=np.int64),
        t_end=min(t, t_end) if stopped else t_end,
        final=N.copy(),
        stopped_at_watch=stopped,
    )


def events_to_csv(traj: SmmTrajectory, path) -> None:
    """Event log as ``time,kind,i,j,k,l``."""
    with open(path, "w") as fh:
        fh.write("time,kind,i,j,k,l\n")
        for t, c in zip(traj.times, traj.channel_indices):
            kind, i, j, k, l = traj.channels[c].describe()
            fh.write(f"{t:.10g},{kind},{i},{j},{k},{l}\n")


def states_to_csv(traj: SmmTrajectory, grid: np.ndarray, path) -> None:
    """Resampled state path as ``time,status,subpop,count``."""
    states = traj.states_on_grid(grid)
    with open(path, "w") as fh:
        fh.write("time,status,subpop,count\n")
        for t, mat in zip(grid, states):
            for i in range(mat.shape[0]):
                for k in range(mat.shape[1]):
                    fh.write(f"{t:.10g},{i},{k},{int(mat[i, k])}\n")
