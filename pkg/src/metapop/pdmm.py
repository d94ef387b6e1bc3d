"""Piecewise-deterministic metapopulation simulator.

Within-subpopulation adoptions follow an ODE flow (forward Euler); rare
between-subpopulation transitions are stochastic jumps scheduled by the
temporal Gillespie scheme: the total jump intensity is integrated against an
Exp(1) threshold, a crossing is located by linear interpolation inside the
step, the chosen +-1 jump is applied, and the ODE restarts from the post-jump
state.

The engine advances many independent replicas in lock-step (vectorized over
a replica axis) while consuming randomness from strictly per-replica buffered
streams, so replica r of a batch reproduces a single run with stream r
bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import ModelError, PopulationState, RngStream
from .projection import ProjectedModel

NEG_TOL = 1e-9


class PdmmError(ModelError):
    pass


# ---------------------------------------------------------------------------
# drift of the adoption flow


def adoption_drift(state, model: ProjectedModel) -> np.ndarray:
    """dN/dt of the within-subpopulation adoption flow for one state:
    first-order gamma * N_i, second-order gamma_hat * N_i * N_j, plus
    cross-over terms when the model enables them."""
    N = state.counts if isinstance(state, PopulationState) else np.asarray(state)
    return _batched_drift(N[None].astype(float), model)[0]


def _batched_drift(N: np.ndarray, model: ProjectedModel) -> np.ndarray:
    """(R, n_s, m) -> (R, n_s, m); see adoption_drift."""
    flux = (
        model.gamma1[None, :, :, :]
        + model.gamma2_hat[None, :, :, :] * N[:, None, :, :]
    ) * N[:, :, None, :]
    if model.include_crossover:
        b_off = model.b - np.diag(np.diag(model.b))
        contact = np.einsum("rjl,kl->rjk", N, b_off)
        flux = flux + model.c[None, :, :, None] * N[:, :, None, :] * contact[:, None]
    return flux.sum(axis=1) - flux.sum(axis=2)


# ---------------------------------------------------------------------------
# rate models: what the engine needs to integrate and jump


class ProjectedRateModel:
    """Constant-rate adapter turning a ProjectedModel into engine callbacks."""

    def __init__(self, model: ProjectedModel):
        self.model = model
        self.n_status = model.n_s
        self.n_subpop = model.m
        self.jump_channels = [
            (i, k, l)
            for i in range(model.n_s)
            for k in range(model.m)
            for l in range(model.m)
            if l != k and model.lambda_[i, k, l] > 0
        ]
        self._coeffs = np.array(
            [model.lambda_[i, k, l] for (i, k, l) in self.jump_channels]
        )

    def reset(self, n_replicas: int) -> None:
        pass

    def drift(self, N, t, rows):
        return _batched_drift(N[rows], self.model)

    def jump_coeffs(self, N, t, rows):
        return np.broadcast_to(self._coeffs, (rows.size, self._coeffs.size))

    def after_step(self, t, N, rows):
        pass

    def after_jump(self, t_jump, N, rows):
        pass

    def state_records(self) -> dict:
        return {}


# ---------------------------------------------------------------------------
# per-replica buffered randomness


class _ReplicaRandom:
    """Blocks of exponential/uniform variates per replica, consumed in a fixed
    order so batched and single-replica runs see identical sequences."""

    def __init__(self, streams: Sequence[RngStream], block: int = 256):
        self.block = block
        self.gens = [s.generator() for s in streams]
        n = len(self.gens)
        self.exp_buf = np.empty((n, block))
        self.unif_buf = np.empty((n, block))
        self.exp_ptr = np.full(n, block, dtype=np.int64)
        self.unif_ptr = np.full(n, block, dtype=np.int64)

    def exponential(self, rows: np.ndarray) -> np.ndarray:
        need = rows[self.exp_ptr[rows] >= self.block]
        for r in need:
            self.exp_buf[r] = self.gens[r].standard_exponential(self.block)
            self.exp_ptr[r] = 0
        out = self.exp_buf[rows, self.exp_ptr[rows]]
        self.exp_ptr[rows] += 1
        return out

    def uniform(self, rows: np.ndarray) -> np.ndarray:
        need = rows[self.unif_ptr[rows] >= self.block]
        for r in need:
            self.unif_buf[r] = self.gens[r].random(self.block)
            self.unif_ptr[r] = 0
        out = self.unif_buf[rows, self.unif_ptr[rows]]
        self.unif_ptr[rows] += 1
        return out


# ---------------------------------------------------------------------------
# results


@dataclass
class PdmmTrajectory:
    """Dense state path of one run, its jump log, and any phase-change log."""

    times: np.ndarray
    path: np.ndarray  # (T, n_s, m)
    jump_times: np.ndarray
    jump_status: np.ndarray
    jump_from: np.ndarray
    jump_to: np.ndarray
    final: np.ndarray
    t_end: float
    critical_time: float | None = None
    phase_log: list[tuple[float, int, int]] = field(default_factory=list)

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)


@dataclass
class PdmmBatchResult:
    """Per-replica outcomes of a batched run."""

    final: np.ndarray  # (R, n_s, m)
    critical_times: np.ndarray  # (R,) NaN where the watched jump never fired
    n_jumps: np.ndarray
    times: np.ndarray | None = None
    paths: np.ndarray | None = None  # (R, T, n_s, m)
    records: dict = field(default_factory=dict)


@dataclass
class PdmmConfig:
    model: ProjectedModel | object  # ProjectedModel or a rate-model adapter
    initial: PopulationState | np.ndarray
    t_end: float
    ode_dt: float = 1e-3
    record_stride: int = 1  # in ODE steps; 0 disables the dense path
    hooks: tuple[Callable[[float, np.ndarray], None], ...] = ()

    def __post_init__(self):
        if self.ode_dt <= 0 or self.t_end <= 0:
            raise ValueError("ode_dt and t_end must be positive")


# ---------------------------------------------------------------------------
# the engine


def _as_rate_model(model):
    return ProjectedRateModel(model) if isinstance(model, ProjectedModel) else model


def simulate_pdmm_batch(
    model,
    initial: PopulationState | np.ndarray,
    t_end: float,
    ode_dt: float,
    streams: Sequence[RngStream],
    watch: tuple[int, int, int] | None = None,
    stop_at_watch: bool = False,
    record_stride: int = 0,
    record_jumps: bool = False,
    hooks: tuple[Callable, ...] = (),
) -> PdmmBatchResult:
    """Advance R independent replicas of the piecewise-deterministic process.

    All replicas share the initial state and the Euler grid; jumps, phase
    state, and randomness are per-replica.  ``watch`` = (status, from, to)
    records each replica's first matching jump time (the critical transition)
    and, with stop_at_watch, freezes that replica afterwards.
    """
    rm = _as_rate_model(model)
    counts0 = (
        initial.counts if isinstance(initial, PopulationState) else np.asarray(initial)
    )
    if counts0.min() < 0:
        raise PdmmError("initial counts must be nonnegative")
    R = len(streams)
    n_s, m = counts0.shape
    N = np.repeat(counts0[None].astype(float), R, axis=0)
    rm.reset(R)

    channels = list(rm.jump_channels)
    nc = len(channels)
    ch_i = np.array([c[0] for c in channels], dtype=np.int64)
    ch_k = np.array([c[1] for c in channels], dtype=np.int64)
    ch_l = np.array([c[2] for c in channels], dtype=np.int64)
    watch_idx = (
        channels.index(watch) if watch is not None and watch in channels else -1
    )

    rnd = _ReplicaRandom(streams)
    all_rows = np.arange(R)
    thresholds = rnd.exponential(all_rows)
    alive = np.ones(R, dtype=bool)
    critical = np.full(R, np.nan)
    n_jumps = np.zeros(R, dtype=np.int64)
    total0 = float(counts0.sum())

    jump_log: list[tuple[float, int, int, int]] = [] if record_jumps else None
    rec_times: list[float] = []
    rec_states: list[np.ndarray] = []
    if record_stride:
        rec_times.append(0.0)
        rec_states.append(N.copy())

    n_steps = int(np.ceil(t_end / ode_dt - 1e-12))

    def intensities(rows):
        src = N[rows[:, None], ch_i[None, :], ch_k[None, :]]
        lam = rm.jump_coeffs(N, t, rows) * np.where(src >= 1.0, src, 0.0)
        return lam

    for step in range(n_steps):
        t = step * ode_dt
        dt = min(ode_dt, t_end - t)
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break

        if nc:
            lam = intensities(rows)
            Lam = lam.sum(axis=1)
        else:
            lam = np.zeros((rows.size, 0))
            Lam = np.zeros(rows.size)
        D = rm.drift(N, t, rows)
        need = Lam * dt
        th = thresholds[rows]
        cross = th < need

        quiet = rows[~cross]
        N[quiet] += D[~cross] * dt
        thresholds[quiet] = th[~cross] - need[~cross]

        cur = rows[cross]
        rem = np.full(cur.size, dt)
        while cur.size:
            lam_c = intensities(cur)
            Lam_c = lam_c.sum(axis=1)
            D_c = rm.drift(N, t, cur)
            th_c = thresholds[cur]
            with np.errstate(divide="ignore"):
                tau = np.where(Lam_c > 0, th_c / np.where(Lam_c > 0, Lam_c, 1.0), np.inf)
            done = tau >= rem
            dn = cur[done]
            if dn.size:
                N[dn] += D_c[done] * rem[done, None, None]
                thresholds[dn] = th_c[done] - Lam_c[done] * rem[done]
            jm = ~done
            jrows = cur[jm]
            if jrows.size == 0:
                break
            tau_j = tau[jm]
            N[jrows] += D_c[jm] * tau_j[:, None, None]
            t_jump = t + (dt - rem[jm]) + tau_j
            cumr = np.cumsum(lam_c[jm], axis=1)
            u = rnd.uniform(jrows) * cumr[:, -1]
            cidx = np.minimum((cumr < u[:, None]).sum(axis=1), nc - 1)
            N[jrows, ch_i[cidx], ch_k[cidx]] -= 1.0
            N[jrows, ch_i[cidx], ch_l[cidx]] += 1.0
            n_jumps[jrows] += 1
            rm.after_jump(t_jump, N, jrows)
            if jump_log is not None:
                for rr, tt, cc in zip(jrows, t_jump, cidx):
                    jump_log.append(
                        (float(tt), int(ch_i[cc]), int(ch_k[cc]), int(ch_l[cc]))
                    )
            thresholds[jrows] = rnd.exponential(jrows)
            keep = np.ones(jrows.size, dtype=bool)
            if watch_idx >= 0:
                hits = cidx == watch_idx
                new = hits & np.isnan(critical[jrows])
                critical[jrows[new]] = t_jump[new]
                if stop_at_watch and hits.any():
                    alive[jrows[hits]] = False
                    keep &= ~hits
            rem = rem[jm][keep] - tau_j[keep]
            cur = jrows[keep]

        t = (step + 1) * ode_dt if step + 1 < n_steps else t_end
        rows = np.flatnonzero(alive)
        if rows.size:
            rm.after_step(t, N, rows)
            low = N[rows].min() if rows.size else 0.0
            if low < -NEG_TOL * max(total0, 1.0):
                bad = rows[np.unravel_index(np.argmin(N[rows]), N[rows].shape)[0]]
                raise PdmmError(
                    f"state went negative (min {low:.3e}) in replica {bad} at t={t:.6g}"
                )
            if low < 0.0:
                np.clip(N, 0.0, None, out=N)
            drift_err = np.abs(N[rows].sum(axis=(1, 2)) - total0).max()
            if drift_err > NEG_TOL * max(total0, 1.0):
                raise PdmmError(
                    f"total mass drifted by {drift_err:.3e} at t={t:.6g}"
                )
        for hook in hooks:
            hook(t, N)
        if record_stride and (step + 1) % record_stride == 0:
            rec_times.append(t)
            rec_states.append(N.copy())

    result = PdmmBatchResult(
        final=N.copy(),
        critical_times=critical,
        n_jumps=n_jumps,
        records=rm.state_records(),
    )
    if record_stride:
        result.times = np.asarray(rec_times)
        result.paths = np.stack(rec_states, axis=1)
    if record_jumps:
        result.records["jump_log"] = jump_log
    return result


def simulate_pdmm(
    config: PdmmConfig,
    rng: RngStream,
    watch: tuple[int, int, int] | None = None,
    stop_at_watch: bool = False,
) -> PdmmTrajectory:
    """Single-replica run with a dense state path and full jump log."""
    res = simulate_pdmm_batch(
        config.model,
        config.initial,
        config.t_end,
        config.ode_dt,
        [rng],
        watch=watch,
        stop_at_watch=stop_at_watch,
        record_stride=config.record_stride or 0,
        record_jumps=True,
        hooks=tuple(
            (lambda t, N, h=h: h(t, N[0])) for h in config.hooks
        ),
    )
    log = res.records.pop("jump_log")
    jt = np.array([e[0] for e in log])
    ji = np.array([e[1] for e in log], dtype=np.int64)
    jk = np.array([e[2] for e in log], dtype=np.int64)
    jl = np.array([e[3] for e in log], dtype=np.int64)
    phase_log = res.records.get("phase_log", [])
    crit = res.critical_times[0]
    return PdmmTrajectory(
        times=res.times if res.times is not None else np.array([config.t_end]),
        path=(
            res.paths[0]
            if res.paths is not None
            else res.final[0][None]
        ),
        jump_times=jt,
        jump_status=ji,
        jump_from=jk,
        jump_to=jl,
        final=res.final[0],
        t_end=config.t_end,
        critical_time=None if np.isnan(crit) else float(crit),
        phase_log=phase_log,
    )


def critical_transition_time_pdmm(
    traj: PdmmTrajectory, watched: tuple[int, int, int]
) -> float | None:
    """Time of the first jump of status i from subpopulation k to l."""
    i, k, l = watched
    hits = (traj.jump_status == i) & (traj.jump_from == k) & (traj.jump_to == l)
    if not hits.any():
        return None
    return float(traj.jump_times[np.argmax(hits)])


# ---------------------------------------------------------------------------
# CSV output


def states_to_csv(traj: PdmmTrajectory, path) -> None:
    """Dense state path as ``time,status,subpop,value``."""
    with open(path, "w") as fh:
        fh.write("time,status,subpop,value\n")
        for t, mat in zip(traj.times, traj.path):
            for i in range(mat.shape[0]):
                for k in range(mat.shape[1]):
                    fh.write(f"{t:.10g},{i},{k},{mat[i, k]:.10g}\n")


def jumps_to_csv(traj: PdmmTrajectory, path) -> None:
    """Jump log as ``time,status,from,to``."""
    with open(path, "w") as fh:
        fh.write("time,status,from,to\n")
        for t, i, k, l in zip(
            traj.jump_times, traj.jump_status, traj.jump_from, traj.jump_to
        ):
            fh.write(f"{t:.10g},{i},{k},{l}\n")


def phases_to_csv(traj: PdmmTrajectory, path) -> None:
    """Phase-change log as ``time,subpop,phase``."""
    with open(path, "w") as fh:
        fh.write("time,subpop,phase\n")
        for t, k, p in traj.phase_log:
            fh.write(f"{t:.10g},{k},{p}\n")
