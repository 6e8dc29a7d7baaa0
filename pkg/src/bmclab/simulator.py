"""The branching Markov chain: vectorized steps, trajectories, exact oracles.

One step ``M_n -> M_{n+1}`` replaces every particle at ``x`` by an
independent draw from ``Pi_x``.  Particles sharing a site are handled in
bulk, which is equal in law to the particle-by-particle definition:

* independent placement: the total offspring of ``c`` particles at ``x``
  is a sum of ``c`` iid ``pi_x`` draws, placed multinomially by ``p_x``;
* vertex-coupled placement: the ``c`` particles choose their target
  multinomially by ``p_x``; each target then receives the sum of as many
  iid ``pi_x`` draws as particles chose it;
* mixture: each particle independently uses the first rule with
  probability ``lambda`` (a binomial split of ``c``).
"""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .branching import BranchingError, BranchingLaw
from .population import Population
from .rng import multinomial_rows, trajectory_stream
from .state_space import DepthQuotient, StateSpace, WordTree

DEFAULT_CAP = 10_000_000


class PopulationCapExceeded(RuntimeError):
    def __init__(self, size: int, cap: int, partial: Population):
        super().__init__(f"population size {size} exceeds cap {cap}")
        self.size = size
        self.cap = cap
        self.partial = partial


# ---------------------------------------------------------------------------
# one step


def _aggregate(targets: np.ndarray, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nz = counts > 0
    t = targets[nz]
    c = counts[nz]
    if t.size == 0:
        return t, c
    order = np.argsort(t, kind="stable")
    t = t[order]
    c = c[order]
    starts = np.concatenate([[0], np.nonzero(np.diff(t))[0] + 1])
    return t[starts], np.add.reduceat(c, starts)


def _sum_by_law(law: BranchingLaw, idx: np.ndarray, c: np.ndarray, rng) -> np.ndarray:
    laws = law.laws
    if len(laws) == 1:
        return laws[0].sum_iid(rng, c)
    out = np.zeros(c.size, dtype=np.int64)
    for j, pi in enumerate(laws):
        mask = idx == j
        if np.any(mask):
            out[mask] = pi.sum_iid(rng, c[mask])
    return out


def step_arrays(sites: np.ndarray, counts: np.ndarray, law: BranchingLaw, rng: np.random.Generator):
    """One branching step on raw arrays; returns aggregated ``(sites, counts)``."""
    T, P = law.space.kernel_rows(sites)
    idx = law.law_index(sites)
    w = law.independent_weight
    if w == 1.0:
        c_ind, c_vc = counts, None
    elif w == 0.0:
        c_ind, c_vc = None, counts
    else:
        c_ind = rng.binomial(counts, w)
        c_vc = counts - c_ind
    new = np.zeros(T.shape, dtype=np.int64)
    if c_ind is not None:
        totals = _sum_by_law(law, idx, c_ind, rng)
        new += multinomial_rows(rng, totals, P)
    if c_vc is not None:
        choose = multinomial_rows(rng, c_vc, P)
        k = T.shape[1]
        new += _sum_by_law(law, np.repeat(idx, k), choose.ravel(), rng).reshape(T.shape)
    return _aggregate(T.ravel(), new.ravel())


def step(m: Population, law: BranchingLaw, rng: np.random.Generator, cap: int = DEFAULT_CAP) -> Population:
    """``M_{n+1}`` given ``M_n = m``; raises :class:`PopulationCapExceeded`."""
    if m.size == 0:
        raise BranchingError("cannot branch the empty population")
    s, c = step_arrays(m.sites, m.counts, law, rng)
    new = Population(m.space, s, c)
    if new.size > cap:
        raise PopulationCapExceeded(new.size, cap, m)
    return new


# ---------------------------------------------------------------------------
# functionals


class Functional:
    """Per-step statistic ``(sites, counts, n) -> float`` (picklable)."""

    def __call__(self, sites: np.ndarray, counts: np.ndarray, n: int) -> float:
        raise NotImplementedError


@dataclass
class HarmonicMartingale(Functional):
    """``W^f_n = <M_n, f> / rho^n`` for ``f`` given on sites as an array map."""

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    rho: float

    def __call__(self, sites, counts, n):
        return float(np.dot(counts.astype(float), self.f(sites))) * self.rho ** (-n)


@dataclass
class EmpiricalAverage(Functional):
    """``<M_n, f> / ||M_n||``."""

    name: str
    f: Callable[[np.ndarray], np.ndarray]

    def __call__(self, sites, counts, n):
        c = counts.astype(float)
        return float(np.dot(c, self.f(sites)) / c.sum())


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectoryRecord:
    """Per-step record of one trajectory (steps ``0..n_recorded-1``)."""

    trajectory_id: int
    rho: float
    pop_size: np.ndarray
    w: np.ndarray
    distinct_sites: np.ndarray
    watched: np.ndarray
    functionals: np.ndarray
    truncated: bool = False
    truncated_at: int | None = None
    snapshots: dict = field(default_factory=dict)

    @property
    def n_recorded(self) -> int:
        return int(self.pop_size.size)

    @property
    def horizon(self) -> int:
        return self.n_recorded - 1


def run_trajectory(
    init: Population,
    law: BranchingLaw,
    N: int,
    rng: np.random.Generator,
    *,
    trajectory_id: int = 0,
    cap: int = DEFAULT_CAP,
    watched: Sequence[int] = (),
    functionals: Sequence[Functional] = (),
    snapshot_steps: Sequence[int] = (),
) -> TrajectoryRecord:
    rho = law.rho
    sites, counts = init.sites, init.counts
    watched = np.asarray(watched, dtype=np.int64)
    sizes, dist, wv, fv = [], [], [], []
    snaps = {}
    truncated_at = None
    for n in range(N + 1):
        size = int(counts.sum())
        sizes.append(size)
        dist.append(sites.size)
        if watched.size:
            pos = np.minimum(np.searchsorted(sites, watched), max(sites.size - 1, 0))
            wv.append(np.where(sites[pos] == watched, counts[pos], 0))
        if functionals:
            fv.append([f(sites, counts, n) for f in functionals])
        if n in snapshot_steps:
            snaps[n] = Population(init.space, sites, counts)
        if n == N:
            break
        new_sites, new_counts = step_arrays(sites, counts, law, rng)
        if int(new_counts.sum()) > cap:
            truncated_at = n + 1
            break
        sites, counts = new_sites, new_counts
    sizes_a = np.array(sizes, dtype=np.int64)
    n_idx = np.arange(sizes_a.size)
    return TrajectoryRecord(
        trajectory_id=trajectory_id,
        rho=rho,
        pop_size=sizes_a,
        w=sizes_a.astype(float) * rho ** (-n_idx.astype(float)),
        distinct_sites=np.array(dist, dtype=np.int64),
        watched=np.array(wv, dtype=np.int64).reshape(len(sizes), watched.size),
        functionals=np.array(fv, dtype=float).reshape(len(sizes), len(functionals)),
        truncated=truncated_at is not None,
        truncated_at=truncated_at,
        snapshots=snaps,
    )


@dataclass
class SimulationSpec:
    """Everything one batch of trajectories needs (picklable)."""

    init: Population
    law: BranchingLaw
    N: int
    trajectories: int
    seed: int
    cap: int = DEFAULT_CAP
    watched: tuple[int, ...] = ()
    functionals: tuple[Functional, ...] = ()
    snapshot_steps: tuple[int, ...] = ()
    first_id: int = 0


def _run_chunk(spec: SimulationSpec, ids: Sequence[int]) -> list[TrajectoryRecord]:
    out = []
    for i in ids:
        rng = trajectory_stream(spec.seed, i)
        out.append(
            run_trajectory(
                spec.init,
                spec.law,
                spec.N,
                rng,
                trajectory_id=i,
                cap=spec.cap,
                watched=spec.watched,
                functionals=spec.functionals,
                snapshot_steps=spec.snapshot_steps,
            )
        )
    return out


def resolve_threads(threads: int | None) -> int:
    env = os.environ.get("BMC_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"BMC_THREADS must be an integer, got {env!r}") from None
    return max(1, int(threads or 1))


def run(spec: SimulationSpec, threads: int | None = None) -> list[TrajectoryRecord]:
    """Run ``spec.trajectories`` trajectories; trajectory ``i`` uses stream ``(seed, i)``.

    Results are returned in trajectory order and do not depend on the
    number of workers.
    """
    ids = list(range(spec.first_id, spec.first_id + spec.trajectories))
    nt = resolve_threads(threads)
    if nt == 1 or len(ids) < 2 * nt:
        return _run_chunk(spec, ids)
    chunks = [ids[k::nt] for k in range(nt)]
    with ProcessPoolExecutor(max_workers=nt) as ex:
        parts = list(ex.map(_run_chunk, [spec] * nt, chunks))
    by_id = {r.trajectory_id: r for part in parts for r in part}
    return [by_id[i] for i in ids]


def run_base_chain(space: StateSpace, x0: int, N: int, rng: np.random.Generator) -> np.ndarray:
    """Sample path ``X_0..X_N`` of the underlying chain."""
    path = [int(x0)]
    for _ in range(N):
        path.append(space.sample_step(path[-1], rng))
    return np.array(path, dtype=np.int64)


# ---------------------------------------------------------------------------
# exact simulation on a lumped space


def simulation_space(space: StateSpace, law: BranchingLaw, depth: int, exact_vertices: bool = False):
    """Smallest exact lumping that resolves everything up to ``depth``.

    For radial tree kernels and position-independent or distance-banded
    offspring, the depth quotient is an exact Markov image; otherwise the
    original space is used.
    """
    if exact_vertices or not isinstance(space, WordTree) or not space.is_radial:
        return space, law
    if any(o.state is not None for o in law.overrides):
        return space, law
    Q = DepthQuotient(space, depth)
    return Q, law.on_space(Q)


def project_population(m: Population, target: StateSpace) -> Population:
    if target is m.space:
        return m
    if isinstance(target, DepthQuotient):
        return Population.from_arrays(target, target.project(m.sites), m.counts)
    raise ValueError("cannot project onto this space")


# ---------------------------------------------------------------------------
# exact one-step oracle


def enumerate_step(m: Population, law: BranchingLaw, max_outcomes: int = 200_000) -> dict:
    """Exact law of ``M_1`` given ``M_0 = m`` (finite supports only)."""
    dist: dict[Population, float] = {Population.empty(m.space): 1.0}
    for x, k in m.items():
        branch = law.enumerate_branch(x)
        for _ in range(k):
            nxt: dict[Population, float] = {}
            for pop, p in dist.items():
                for b, q in branch:
                    key = pop.merge(b)
                    nxt[key] = nxt.get(key, 0.0) + p * q
            dist = nxt
            if len(dist) > max_outcomes:
                raise BranchingError(f"enumeration exceeds {max_outcomes} outcomes")
    return dist


@dataclass
class StepExpectation:
    closed_form: float
    enumerated: float | None

    @property
    def difference(self) -> float:
        return abs(self.closed_form - self.enumerated) if self.enumerated is not None else float("nan")


def exact_step_expectation(m: Population, f, law: BranchingLaw, enumerate_: bool = True, max_outcomes: int = 200_000) -> StepExpectation:
    """``E[<M_1, f> | M_0 = m]`` in closed form ``sum m(x) rho_x Pf(x)`` and by enumeration.

    ``f`` is a mapping or callable on handles.
    """
    ff = f.__getitem__ if isinstance(f, dict) else f
    closed = 0.0
    for x, k in m.items():
        mm = law.mean_measures(x)
        closed += k * mm["rho"] * sum(p * ff(y) for y, p in mm["displacement"].items())
    enum = None
    if enumerate_:
        for x, _ in m.items():
            law.offspring_at(x).support()  # raises for unbounded support
        dist = enumerate_step(m, law, max_outcomes)
        enum = sum(p * pop.lift(ff) for pop, p in dist.items())
    return StepExpectation(closed, enum)


# ---------------------------------------------------------------------------
# CSV


def records_to_csv(
    records: Sequence[TrajectoryRecord],
    run_id: str,
    watched_names: Sequence[str] = (),
    functional_names: Sequence[str] = (),
) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_id", "trajectory_id", "n", "pop_size", "w_n", "distinct_sites", "truncated", *watched_names, *functional_names])
    for r in records:
        for n in range(r.n_recorded):
            w.writerow(
                [
                    run_id,
                    r.trajectory_id,
                    n,
                    int(r.pop_size[n]),
                    repr(float(r.w[n])),
                    int(r.distinct_sites[n]),
                    int(r.truncated),
                    *[int(v) for v in r.watched[n]],
                    *[repr(float(v)) for v in r.functionals[n]],
                ]
            )
    return buf.getvalue()
