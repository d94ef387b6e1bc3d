"""Model-reduction pipeline: estimate the parameters of the metapopulation
models (spatial jump rates, projected adoption rates, contact probabilities)
from geometry and agent-trajectory data.

Spatial rates are estimated by trajectory milestoning (maximum-likelihood
jump rates between last-visited core sets); adoption projections are Monte
Carlo averages over uniform samples in the partition sets.  Every estimate
carries a standard error and sampling provenance.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import AdoptionRuleSet, ModelError, PopulationState, RngStream


class ProjectionError(ModelError):
    pass


# ---------------------------------------------------------------------------
# the reduced-model parameterization


@dataclass
class ProjectedModel:
    """Parameters of the projected (metapopulation) dynamics.

    lambda_ has shape (n_s, m, m): per-capita spatial jump rates, zero
    diagonal.  gamma1 and gamma2_hat have shape (n_s, n_s, m): first-order
    rates gamma_ij^(k) and macroscopic second-order constants
    gamma_hat_ij^(k) = c_ij * b_kk.  b is the (m, m) matrix of conditional
    contact probabilities and c the raw (n_s, n_s) rate constants; they feed
    the cross-over propensities, disabled by default.
    """

    n_s: int
    m: int
    lambda_: np.ndarray
    gamma1: np.ndarray
    gamma2_hat: np.ndarray
    b: np.ndarray | None = None
    c: np.ndarray | None = None
    include_crossover: bool = False
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lambda_ = np.asarray(self.lambda_, dtype=float)
        self.gamma1 = np.asarray(self.gamma1, dtype=float)
        self.gamma2_hat = np.asarray(self.gamma2_hat, dtype=float)
        if self.lambda_.shape != (self.n_s, self.m, self.m):
            raise ValueError("lambda_ must have shape (n_s, m, m)")
        if self.gamma1.shape != (self.n_s, self.n_s, self.m):
            raise ValueError("gamma1 must have shape (n_s, n_s, m)")
        if self.gamma2_hat.shape != (self.n_s, self.n_s, self.m):
            raise ValueError("gamma2_hat must have shape (n_s, n_s, m)")
        for name, arr in (
            ("lambda_", self.lambda_),
            ("gamma1", self.gamma1),
            ("gamma2_hat", self.gamma2_hat),
        ):
            if arr.size and arr.min() < 0:
                raise ValueError(f"{name} must be nonnegative")
        if np.any(np.einsum("ikk->ik", self.lambda_) != 0):
            raise ValueError("lambda_ diagonal (k == l) must be zero")
        if self.b is not None:
            self.b = np.asarray(self.b, dtype=float)
            if self.b.shape != (self.m, self.m):
                raise ValueError("b must have shape (m, m)")
            if self.b.min() < 0 or self.b.max() > 1:
                raise ValueError("b entries must lie in [0, 1]")
        if self.c is not None:
            self.c = np.asarray(self.c, dtype=float)
            if self.c.shape != (self.n_s, self.n_s):
                raise ValueError("c must have shape (n_s, n_s)")
        if self.include_crossover and (self.b is None or self.c is None):
            raise ValueError("cross-over terms need both b and c")

    def to_json(self, path=None) -> str:
        doc = {
            "n_s": self.n_s,
            "m": self.m,
            "lambda": self.lambda_.tolist(),
            "gamma1": self.gamma1.tolist(),
            "gamma2_hat": self.gamma2_hat.tolist(),
            "b": None if self.b is None else self.b.tolist(),
            "c": None if self.c is None else self.c.tolist(),
            "include_crossover": self.include_crossover,
            "provenance": self.provenance,
        }
        text = json.dumps(doc, indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, source) -> "ProjectedModel":
        if isinstance(source, (str, bytes)) and str(source).lstrip().startswith("{"):
            doc = json.loads(source)
        else:
            with open(source) as fh:
                doc = json.load(fh)
        return cls(
            n_s=doc["n_s"],
            m=doc["m"],
            lambda_=np.asarray(doc["lambda"]),
            gamma1=np.asarray(doc["gamma1"]),
            gamma2_hat=np.asarray(doc["gamma2_hat"]),
            b=None if doc.get("b") is None else np.asarray(doc["b"]),
            c=None if doc.get("c") is None else np.asarray(doc["c"]),
            include_crossover=doc.get("include_crossover", False),
            provenance=doc.get("provenance", {}),
        )


# ---------------------------------------------------------------------------
# Monte Carlo estimators over the partition geometry


def _sample_in_set(partition, k: int, n: int, gen: np.random.Generator) -> np.ndarray:
    """Uniform points in set k via rejection from the sampling box."""
    box = partition.box
    out = np.empty((0, box.dim))
    attempts = 0
    while out.shape[0] < n:
        batch = max(4 * n, 1024)
        cand = box.uniform(batch, gen)
        hit = cand[partition.member_index(cand) == k]
        out = np.vstack([out, hit])
        attempts += 1
        if attempts > 200 and out.shape[0] == 0:
            raise ProjectionError(
                f"no accepted samples in set {k}; it may not intersect the sampling box"
            )
    return out[:n]


def estimate_bkl(
    partition, r: float, n_samples: int, rng: RngStream
) -> tuple[np.ndarray, np.ndarray]:
    """Contact probability matrix b_kl = P(|x1 - x2| <= r | x1 in A_k, x2 in A_l)
    under the uniform measure on the sets, with standard errors.

    Each ordered entry uses its own n_samples independent point pairs.  For a
    core-set partition, membership excludes the transition region, which
    realizes the indicator approximation of the committor ansatz.
    """
    if n_samples < 10_000:
        raise ValueError("need at least 1e4 samples per entry")
    if r <= 0:
        raise ValueError("radius must be positive")
    gen = rng.generator()
    m = partition.m
    b = np.zeros((m, m))
    se = np.zeros((m, m))
    for k in range(m):
        for l in range(m):
            x1 = _sample_in_set(partition, k, n_samples, gen)
            x2 = _sample_in_set(partition, l, n_samples, gen)
            hit = ((x1 - x2) ** 2).sum(axis=1) <= r * r
            p = hit.mean()
            b[k, l] = p
            se[k, l] = np.sqrt(p * (1 - p) / n_samples)
    return b, se


def estimate_gamma1(
    partition,
    rate_fn: Callable[[np.ndarray], np.ndarray],
    n_samples: int,
    rng: RngStream,
) -> tuple[np.ndarray, np.ndarray]:
    """Conditional expectation of a first-order rate function over each set,
    by uniform Monte Carlo, with standard errors."""
    if n_samples < 10_000:
        raise ValueError("need at least 1e4 samples per set")
    gen = rng.generator()
    m = partition.m
    out = np.zeros(m)
    se = np.zeros(m)
    for k in range(m):
        x = _sample_in_set(partition, k, n_samples, gen)
        vals = np.asarray(rate_fn(x), dtype=float)
        out[k] = vals.mean()
        se[k] = vals.std(ddof=1) / np.sqrt(n_samples)
    return out, se


# ---------------------------------------------------------------------------
# milestoning rate estimation from trajectory data


def milestone_statistics(traj, m: int, n_s: int, per_status: bool = False):
    """Occupation times and transition counts of the last-visited-set process.

    Returns (occupation, transitions): with per_status, shapes (n_s, m) and
    (n_s, m, m); otherwise pooled shapes (m,) and (m, m).  An agent's clock
    starts at its first core-set assignment; status segments follow the
    adoption event log.
    """
    if per_status:
        occ = np.zeros((n_s, m))
        cnt = np.zeros((n_s, m, m))
    else:
        occ = np.zeros(m)
        cnt = np.zeros((m, m))
    n_a = traj.initial_state.n_a
    statuses = traj.initial_state.statuses
    mil0 = traj.initial_milestones
    if mil0 is None:
        raise ProjectionError("trajectory carries no milestone log")

    # per-agent merged streams of (time, kind, payload)
    events: list[list[tuple[float, int, int]]] = [[] for _ in range(n_a)]
    for t, a, j in zip(traj.event_times, traj.event_agents, traj.event_to):
        events[int(a)].append((float(t), 1, int(j)))
    for t, a, s in zip(traj.milestone_times, traj.milestone_agents, traj.milestone_to):
        events[int(a)].append((float(t), 0, int(s)))

    for a in range(n_a):
        stream = sorted(events[a])
        cur_set = int(mil0[a])
        cur_status = int(statuses[a])
        t_prev = 0.0
        for t, kind, payload in stream:
            if cur_set >= 0:
                if per_status:
                    occ[cur_status, cur_set] += t - t_prev
                else:
                    occ[cur_set] += t - t_prev
            if kind == 0:
                if cur_set >= 0 and payload != cur_set:
                    if per_status:
                        cnt[cur_status, cur_set, payload] += 1
                    else:
                        cnt[cur_set, payload] += 1
                cur_set = payload
            else:
                cur_status = payload
            t_prev = t
        if cur_set >= 0:
            if per_status:
                occ[cur_status, cur_set] += traj.t_end - t_prev
            else:
                occ[cur_set] += traj.t_end - t_prev
    return occ, cnt


def estimate_lambda_from_trajectory(
    traj, partition, per_status: bool = False, n_s: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Maximum-likelihood spatial jump rates lambda_i^(kl) from milestoning.

    rate = (# milestone transitions k -> l) / (agent-time with milestone k);
    pooled over statuses unless per_status (motion independent of status in
    the guiding example).  Unvisited (i, k) give NaN entries plus a warning;
    the standard error of each rate is sqrt(count) / occupation.
    """
    m = partition.m
    if n_s is None:
        n_s = int(traj.initial_state.statuses.max()) + 1
    occ, cnt = milestone_statistics(traj, m, n_s, per_status=per_status)
    lam = np.zeros((n_s, m, m))
    se = np.zeros((n_s, m, m))
    if per_status:
        for i in range(n_s):
            for k in range(m):
                if occ[i, k] == 0:
                    if cnt[i, k].sum() == 0:
                        lam[i, k, :] = np.nan
                        se[i, k, :] = np.nan
                    continue
                for l in range(m):
                    if l == k:
                        continue
                    lam[i, k, l] = cnt[i, k, l] / occ[i, k]
                    se[i, k, l] = np.sqrt(max(cnt[i, k, l], 1.0)) / occ[i, k]
    else:
        pooled = np.zeros((m, m))
        pooled_se = np.zeros((m, m))
        for k in range(m):
            if occ[k] == 0:
                pooled[k, :] = np.nan
                pooled_se[k, :] = np.nan
                continue
            for l in range(m):
                if l == k:
                    continue
                pooled[k, l] = cnt[k, l] / occ[k]
                pooled_se[k, l] = np.sqrt(max(cnt[k, l], 1.0)) / occ[k]
        lam[:] = pooled[None, :, :]
        se[:] = pooled_se[None, :, :]
    if np.isnan(lam).any():
        warnings.warn(
            "some milestone sets were never occupied; their rates are missing",
            stacklevel=2,
        )
    np.einsum("ikk->ik", lam)[:] = 0.0
    np.einsum("ikk->ik", se)[:] = 0.0
    return lam, se


def project_trajectory_counts(traj, n_s: int, partition=None):
    """Piecewise-constant per-(status, set) counts along an ABM trajectory.

    Pooled over space when partition is None.  Returns (times, counts) with
    counts[t_idx, status, set]; agents outside every set are not counted.
    """
    m = partition.m if partition is not None else 1
    statuses = traj.initial_state.statuses.copy()
    if partition is not None:
        sets = traj.initial_milestones.copy()
    else:
        sets = np.zeros(traj.initial_state.n_a, dtype=np.int64)
    stream = []
    for t, a, j in zip(traj.event_times, traj.event_agents, traj.event_to):
        stream.append((float(t), int(a), 1, int(j)))
    if partition is not None:
        for t, a, s in zip(
            traj.milestone_times, traj.milestone_agents, traj.milestone_to
        ):
            stream.append((float(t), int(a), 0, int(s)))
    stream.sort()
    counts = np.zeros((n_s, m))
    for a in range(traj.initial_state.n_a):
        if sets[a] >= 0:
            counts[statuses[a], sets[a]] += 1
    times = [0.0]
    path = [counts.copy()]
    for t, a, kind, payload in stream:
        if sets[a] >= 0:
            counts[statuses[a], sets[a]] -= 1
        if kind == 0:
            sets[a] = payload
        else:
            statuses[a] = payload
        if sets[a] >= 0:
            counts[statuses[a], sets[a]] += 1
        times.append(t)
        path.append(counts.copy())
    return np.asarray(times), np.asarray(path)


# ---------------------------------------------------------------------------
# cross-over propensities and model assembly


def crossover_epsilon(model: ProjectedModel, state) -> np.ndarray:
    """Equilibrium cross-over adoption propensities
    eps_ij^(k)(N) = c_ij sum_{l != k} b_kl N_i^(k) N_j^(l)."""
    if model.b is None or model.c is None:
        raise ProjectionError("model carries no b/c data for cross-over terms")
    N = state.counts if isinstance(state, PopulationState) else np.asarray(state)
    if N.size and N.min() < 0:
        raise ValueError("population counts must be nonnegative")
    b_off = model.b - np.diag(np.diag(model.b))
    # sum_{l != k} b_kl N_j^(l)
    contact = N @ b_off.T  # (n_s, m)
    return model.c[:, :, None] * N[:, None, :] * contact[None, :, :]


def build_projected_model(
    partition,
    rules: AdoptionRuleSet,
    lambda_: np.ndarray,
    n_samples: int = 1_000_000,
    rng: RngStream = RngStream(0),
    n_s: int | None = None,
    include_crossover: bool = False,
    lambda_se: np.ndarray | None = None,
) -> ProjectedModel:
    """Assemble a ProjectedModel from geometry, adoption rules, and spatial
    rates (supplied or estimated elsewhere).

    gamma1 entries are Monte Carlo set-averages of the first-order rate
    functions; second-order rules contribute gamma_hat_ij^(k) = c_ij * b_kk.
    All second-order rules must share one interaction radius (the contact
    matrix b is a single-radius object).  Missing (NaN) lambda entries are
    zeroed with a warning so short calibration runs still yield usable models.
    """
    lambda_ = np.asarray(lambda_, dtype=float).copy()
    if n_s is None:
        n_s = lambda_.shape[0]
    m = partition.m
    if np.isnan(lambda_).any():
        warnings.warn("missing spatial rates replaced by zero", stacklevel=2)
        lambda_ = np.nan_to_num(lambda_)

    gamma1 = np.zeros((n_s, n_s, m))
    gamma1_se = np.zeros((n_s, n_s, m))
    sub = 0
    for rule in rules.first_order:
        est, se = estimate_gamma1(partition, rule.rate_at, n_samples, rng.substream(sub))
        sub += 1
        gamma1[rule.i, rule.j] += est
        gamma1_se[rule.i, rule.j] = np.hypot(gamma1_se[rule.i, rule.j], se)

    c = np.zeros((n_s, n_s))
    gamma2_hat = np.zeros((n_s, n_s, m))
    b = None
    b_se = None
    if rules.second_order:
        radii = {rule.radius for rule in rules.second_order}
        if len(radii) > 1:
            raise ProjectionError(
                "all second-order rules must share one interaction radius; "
                f"got {sorted(radii)}"
            )
        b, b_se = estimate_bkl(partition, radii.pop(), n_samples, rng.substream(sub))
        sub += 1
        for rule in rules.second_order:
            c[rule.i, rule.j] += rule.c
        gamma2_hat = c[:, :, None] * np.diag(b)[None, None, :]

    prov = {
        "n_samples": n_samples,
        "seed": rng.seed,
        "stream_id": rng.stream_id,
        "gamma1_se": gamma1_se.tolist(),
        "b_se": None if b_se is None else b_se.tolist(),
        "lambda_se": None if lambda_se is None else np.asarray(lambda_se).tolist(),
    }
    return ProjectedModel(
        n_s=n_s,
        m=m,
        lambda_=lambda_,
        gamma1=gamma1,
        gamma2_hat=gamma2_hat,
        b=b,
        c=c if rules.second_order else None,
        include_crossover=include_crossover,
        provenance=prov,
    )
