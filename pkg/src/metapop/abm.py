"""Microscale agent-based simulator.

Agents diffuse by Euler-Maruyama steps in a potential landscape while their
statuses change through first-order (spontaneous) and second-order (contact)
adoption events.  Events are scheduled with a temporal Gillespie scheme:
adoption propensities are frozen over each Euler step, their integral is
accumulated against an Exp(1) threshold, and a crossing fires one event at
the interpolated sub-step time.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import (
    AdoptionRuleSet,
    ModelError,
    Potential,
    SystemState,
    RngStream,
)


class AbmError(ModelError):
    pass


# ---------------------------------------------------------------------------
# neighbor search


class NeighborGrid:
    """Uniform cell list over agent positions for radius queries.

    Cells have side >= the query radius, so every pair within the radius sits
    in the same or an adjacent cell.  ``pairs_within`` returns ordered pairs
    (each unordered pair appears in both orientations, self-pairs excluded),
    exactly matching a brute-force pair scan.
    """

    def __init__(self, positions: np.ndarray, cell_size: float):
        if cell_size <= 0:
            raise ValueError("cell size must be positive")
        self.positions = np.asarray(positions, dtype=float)
        self.cell_size = float(cell_size)
        n, d = self.positions.shape
        if d != 2:
            raise NotImplementedError("neighbor grid supports 2-d positions")
        cells = np.floor(self.positions / self.cell_size).astype(np.int64)
        cmin = cells.min(axis=0) if n else np.zeros(2, dtype=np.int64)
        cells = cells - cmin + 1
        self._stride = int(cells[:, 1].max()) + 2 if n else 2
        self._keys = cells[:, 0] * self._stride + cells[:, 1]
        self._order = np.argsort(self._keys, kind="stable")
        self._sorted_keys = self._keys[self._order]
        self._cand: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def _candidates(self):
        """Ordered pairs (a, b) from same or adjacent cells, with squared
        distances; computed once per grid build."""
        if self._cand is not None:
            return self._cand
        n = self.positions.shape[0]
        offs = np.array(
            [dx * self._stride + dy for dx in (-1, 0, 1) for dy in (-1, 0, 1)],
            dtype=np.int64,
        )
        targets = (self._keys[:, None] + offs[None, :]).ravel()
        left = np.searchsorted(self._sorted_keys, targets, side="left")
        right = np.searchsorted(self._sorted_keys, targets, side="right")
        cnt = right - left
        a = np.repeat(np.repeat(np.arange(n), 9), cnt)
        starts = np.concatenate(([0], np.cumsum(cnt)))[:-1]
        within = np.arange(int(cnt.sum())) - np.repeat(starts, cnt)
        b = self._order[np.repeat(left, cnt) + within]
        keep = a != b
        a, b = a[keep], b[keep]
        diff = self.positions[a] - self.positions[b]
        d2 = (diff * diff).sum(axis=1)
        self._cand = (a, b, d2)
        return self._cand

    def pairs_within(self, radius: float):
        """All ordered pairs (a, b), a != b, with |x_a - x_b| <= radius."""
        if radius > self.cell_size * (1 + 1e-12):
            raise ValueError(
                f"radius {radius} exceeds grid cell size {self.cell_size}"
            )
        a, b, d2 = self._candidates()
        keep = d2 <= radius * radius
        return a[keep], b[keep]

    def neighbors_of(self, alpha: int, radius: float) -> np.ndarray:
        a, b = self.pairs_within(radius)
        return np.sort(b[a == alpha])


# ---------------------------------------------------------------------------
# propensities


@dataclass
class PropensityDecomposition:
    """Per-event adoption propensities at one instant, in the fixed
    (agent, rule) order used to break selection ties."""

    alphas: np.ndarray  # acting agent per event
    rule_ids: np.ndarray  # index into the flattened rule list
    from_status: np.ndarray
    to_status: np.ndarray
    rates: np.ndarray

    @property
    def total(self) -> float:
        return float(self.rates.sum())


def _rule_table(rules: AdoptionRuleSet):
    table = [(r.i, r.j, "first", r) for r in rules.first_order]
    table += [(r.i, r.j, "second", r) for r in rules.second_order]
    return table


def total_adoption_propensity(
    state: SystemState, rules: AdoptionRuleSet, grid: Optional[NeighborGrid]
) -> tuple[float, PropensityDecomposition]:
    """Sum of adoption rates over agents and rules, with its decomposition.

    The second-order rate for an agent of status i is c_ij times the number
    of agents of status j within the interaction radius; the grid must be
    built for the current positions.  With no second-order rules the grid is
    never queried and may be None.
    """
    X, S = state.positions, state.statuses
    alphas, rids, fr, to, rates = [], [], [], [], []
    for rid, (i, j, kind, rule) in enumerate(_rule_table(rules)):
        if kind == "first":
            sel = np.flatnonzero(S == i)
            if sel.size == 0:
                continue
            r = rule.rate_at(X[sel])
            pos = r > 0
            sel, r = sel[pos], r[pos]
        else:
            if grid is None:
                raise AbmError("second-order rules require a neighbor grid")
            a, b = grid.pairs_within(rule.radius)
            mask = (S[a] == i) & (S[b] == j)
            counts = np.bincount(a[mask], minlength=X.shape[0])
            sel = np.flatnonzero(counts)
            r = rule.c * counts[sel].astype(float)
            if rule.c == 0:
                continue
        alphas.append(sel)
        rids.append(np.full(sel.shape, rid))
        fr.append(np.full(sel.shape, i))
        to.append(np.full(sel.shape, j))
        rates.append(r)
    if alphas:
        alphas = np.concatenate(alphas)
        rids = np.concatenate(rids)
        fr = np.concatenate(fr)
        to = np.concatenate(to)
        rates = np.concatenate(rates)
        order = np.lexsort((rids, alphas))
        dec = PropensityDecomposition(
            alphas[order], rids[order], fr[order], to[order], rates[order]
        )
    else:
        z = np.zeros(0, dtype=np.int64)
        dec = PropensityDecomposition(z, z, z, z, np.zeros(0))
    return dec.total, dec


# ---------------------------------------------------------------------------
# diffusion step


def step_euler_maruyama(
    state: SystemState,
    potential: Potential,
    sigma: float,
    dt: float,
    rng: np.random.Generator,
) -> SystemState:
    """One Euler-Maruyama step of dx = -(sigma/2)^2 grad U dt + sigma dB.

    Statuses are unchanged (the returned state shares the status array).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    grad = potential.gradient(state.positions)
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad).all(axis=1))[0])
        raise AbmError(
            f"non-finite potential gradient at agent {bad}, "
            f"position {state.positions[bad]}"
        )
    drift = -((sigma / 2.0) ** 2) * grad * dt
    noise = sigma * np.sqrt(dt) * rng.standard_normal(state.positions.shape)
    return SystemState(state.positions + drift + noise, state.statuses, state.time + dt)


# ---------------------------------------------------------------------------
# configuration and trajectory containers


@dataclass
class AbmConfig:
    n_a: int
    sigma: float
    dt: float
    t_end: float
    potential: Potential
    rules: AdoptionRuleSet
    initial: SystemState | Callable[[np.random.Generator], SystemState]
    core_sets: object | None = None  # partition used for milestoning
    snapshot_stride: int = 0  # in steps; 0 disables snapshots

    def __post_init__(self):
        if self.dt <= 0 or self.t_end <= 0 or self.sigma <= 0:
            raise ValueError("dt, t_end and sigma must be positive")


@dataclass
class AbmTrajectory:
    """Event log plus milestone log of one ABM run.

    Adoption events carry strictly increasing times; milestone events record
    an agent entering a core set (from_set is -1 while unassigned).
    """

    initial_state: SystemState
    initial_milestones: np.ndarray | None
    event_times: np.ndarray
    event_agents: np.ndarray
    event_from: np.ndarray
    event_to: np.ndarray
    milestone_times: np.ndarray
    milestone_agents: np.ndarray
    milestone_from: np.ndarray
    milestone_to: np.ndarray
    t_end: float
    snapshots: list[tuple[float, SystemState]] = field(default_factory=list)
    critical_time: float | None = None
    n_steps: int = 0

    @property
    def n_events(self) -> int:
        return len(self.event_times)

    def status_counts_path(self, n_s: int, partition=None):
        """Times and per-(status, set) counts after each adoption/milestone
        change; with partition=None a single pooled column is used."""
        from .projection import project_trajectory_counts

        return project_trajectory_counts(self, n_s, partition)


def simulate_abm(
    config: AbmConfig,
    rng: RngStream,
    watch: tuple[int, int, int] | None = None,
    stop_at_watch: bool = False,
) -> AbmTrajectory:
    """Run the coupled diffusion/adoption process to t_end.

    ``watch`` = (status, from_set, to_set) marks the critical transition: the
    first milestone change from_set -> to_set by an agent currently of the
    given status.  Its time is recorded and, with stop_at_watch, ends the run
    early.
    """
    gen = rng.generator()
    state = config.initial(gen) if callable(config.initial) else config.initial.copy()
    X = np.array(state.positions, dtype=float)
    S = np.array(state.statuses, dtype=np.int64)
    if X.shape[0] != config.n_a:
        raise AbmError(f"initial state has {X.shape[0]} agents, config says {config.n_a}")
    rules = config.rules
    has_second = len(rules.second_order) > 0
    cell = rules.max_radius if has_second else 1.0
    sq = (config.sigma / 2.0) ** 2
    sdt = config.sigma * np.sqrt(config.dt)

    core = config.core_sets
    milestones = core.member_index(X).copy() if core is not None else None

    ev_t, ev_a, ev_i, ev_j = [], [], [], []
    mi_t, mi_a, mi_f, mi_to = [], [], [], []
    snapshots: list[tuple[float, SystemState]] = []
    critical: float | None = None
    warned = False

    n_steps = int(round(config.t_end / config.dt))
    threshold = gen.exponential()
    step = 0
    for step in range(n_steps):
        t = step * config.dt
        grid = NeighborGrid(X, cell) if has_second else None
        total, dec = total_adoption_propensity(
            SystemState(X, S, t), rules, grid
        )
        if not warned and total * config.dt > 0.1:
            warnings.warn(
                f"event probability per step is {total * config.dt:.3f} > 0.1; "
                "consider a smaller dt",
                stacklevel=2,
            )
            warned = True
        remaining = config.dt
        while total > 0 and threshold < total * remaining:
            tau = threshold / total
            t_event = t + (config.dt - remaining) + tau
            u = gen.random() * total
            idx = min(
                int(np.searchsorted(np.cumsum(dec.rates), u, side="right")),
                dec.rates.size - 1,
            )
            alpha = int(dec.alphas[idx])
            i, j = int(dec.from_status[idx]), int(dec.to_status[idx])
            S[alpha] = j
            ev_t.append(t_event)
            ev_a.append(alpha)
            ev_i.append(i)
            ev_j.append(j)
            remaining -= tau
            threshold = gen.exponential()
            total, dec = total_adoption_propensity(
                SystemState(X, S, t_event), rules, grid
            )
        threshold -= total * remaining

        grad = config.potential.gradient(X)
        if not np.all(np.isfinite(grad)):
            bad = int(np.flatnonzero(~np.isfinite(grad).all(axis=1))[0])
            raise AbmError(
                f"non-finite potential gradient at agent {bad}, position {X[bad]}"
            )
        X += -sq * grad * config.dt + sdt * gen.standard_normal(X.shape)
        t_next = (step + 1) * config.dt

        stop = False
        if core is not None:
            new_sets = core.member_index(X)
            changed = np.flatnonzero((new_sets >= 0) & (new_sets != milestones))
            for a in changed:
                old, new = int(milestones[a]), int(new_sets[a])
                mi_t.append(t_next)
                mi_a.append(int(a))
                mi_f.append(old)
                mi_to.append(new)
                if (
                    watch is not None
                    and critical is None
                    and int(S[a]) == watch[0]
                    and old == watch[1]
                    and new == watch[2]
                ):
                    critical = t_next
                    if stop_at_watch:
                        stop = True
                milestones[a] = new

        if config.snapshot_stride and (step + 1) % config.snapshot_stride == 0:
            snapshots.append((t_next, SystemState(X.copy(), S.copy(), t_next)))
        if stop:
            break

    t_final = (step + 1) * config.dt if n_steps else 0.0
    init_mil = (
        core.member_index(state.positions).copy() if core is not None else None
    )
    return AbmTrajectory(
        initial_state=state,
        initial_milestones=init_mil,
        event_times=np.asarray(ev_t),
        event_agents=np.asarray(ev_a, dtype=np.int64),
        event_from=np.asarray(ev_i, dtype=np.int64),
        event_to=np.asarray(ev_j, dtype=np.int64),
        milestone_times=np.asarray(mi_t),
        milestone_agents=np.asarray(mi_a, dtype=np.int64),
        milestone_from=np.asarray(mi_f, dtype=np.int64),
        milestone_to=np.asarray(mi_to, dtype=np.int64),
        t_end=t_final,
        snapshots=snapshots,
        critical_time=critical,
        n_steps=step + 1 if n_steps else 0,
    )


def critical_transition_time_abm(
    traj: AbmTrajectory, status: int = 1, from_set: int = 0, to_set: int = 1
) -> float | None:
    """First time an agent of the given status, whose last-visited core set is
    from_set, enters to_set; None if it never happens."""
    statuses = traj.initial_state.statuses.copy()
    ev = 0
    for idx in range(len(traj.milestone_times)):
        t = traj.milestone_times[idx]
        while ev < len(traj.event_times) and traj.event_times[ev] <= t:
            statuses[traj.event_agents[ev]] = traj.event_to[ev]
            ev += 1
        a = traj.milestone_agents[idx]
        if (
            traj.milestone_from[idx] == from_set
            and traj.milestone_to[idx] == to_set
            and statuses[a] == status
        ):
            return float(t)
    return None


# ---------------------------------------------------------------------------
# initial states

def sample_stationary_positions(
    n: int, potential: Potential, box, gen: np.random.Generator
) -> np.ndarray:
    """Rejection-sample positions from the diffusion's stationary density
    exp(-U/2) restricted to the sampling box (assumes min U = 0 in the box)."""
    out = np.empty((0, box.dim))
    while out.shape[0] < n:
        cand = box.uniform(2 * n + 64, gen)
        acc = gen.random(cand.shape[0]) < np.exp(-0.5 * potential.evaluate(cand))
        out = np.vstack([out, cand[acc]])
    return out[:n]


def seeded_initial_state(
    n_a: int,
    gen: np.random.Generator,
    potential: Potential,
    box,
    seed_partition=None,
    seed_set: int = 0,
    n_seeds: int = 1,
    seed_status: int = 1,
    base_status: int = 0,
) -> SystemState:
    """Stationary positions with ``n_seeds`` agents inside a chosen core set
    carrying ``seed_status`` and everyone else ``base_status``."""
    while True:
        X = sample_stationary_positions(n_a, potential, box, gen)
        S = np.full(n_a, base_status, dtype=np.int64)
        if seed_partition is None or n_seeds == 0:
            return SystemState(X, S)
        inside = np.flatnonzero(seed_partition.member_index(X) == seed_set)
        if inside.size >= n_seeds:
            S[inside[:n_seeds]] = seed_status
            return SystemState(X, S)


# ---------------------------------------------------------------------------
# CSV output

def events_to_csv(traj: AbmTrajectory, path) -> None:
    """Adoption event log as ``time,agent,from,to``."""
    with open(path, "w") as fh:
        fh.write("time,agent,from,to\n")
        for t, a, i, j in zip(
            traj.event_times, traj.event_agents, traj.event_from, traj.event_to
        ):
            fh.write(f"{t:.10g},{a},{i},{j}\n")


def snapshots_to_csv(traj: AbmTrajectory, n_s: int, path) -> None:
    """Snapshot log with wide per-status agent counts."""
    with open(path, "w") as fh:
        fh.write("time," + ",".join(f"count_{i}" for i in range(n_s)) + "\n")
        for t, st in traj.snapshots:
            counts = st.status_counts(n_s)
            fh.write(f"{t:.10g}," + ",".join(str(int(c)) for c in counts) + "\n")
