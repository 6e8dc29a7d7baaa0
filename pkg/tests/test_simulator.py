import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bmclab.branching import BranchingError, BranchingLaw, Delta, Explicit, Geometric
from bmclab.population import Population
from bmclab.rng import trajectory_stream
from bmclab.simulator import (
    HarmonicMartingale,
    PopulationCapExceeded,
    SimulationSpec,
    enumerate_step,
    exact_step_expectation,
    project_population,
    records_to_csv,
    run,
    run_trajectory,
    simulation_space,
    step,
)
from bmclab.state_space import DepthQuotient, homogeneous_tree

T3 = homogeneous_tree(3)
O = T3.root
MODES = [("independent", 1.0), ("vertex_coupled", 0.0), ("mixture", 0.4)]


@pytest.mark.parametrize("mode,lam", MODES)
@pytest.mark.parametrize("k", [1, 2])
def test_delta_laws_have_deterministic_sizes(mode, lam, k):
    law = BranchingLaw(T3, Delta(k), mode, lam)
    rng = np.random.default_rng(5)
    m = Population.delta(T3, O, 3)
    for n in range(1, 7):
        m = step(m, law, rng)
        assert m.size == 3 * k**n
    rec = run_trajectory(Population.delta(T3, O), law, 10, rng)
    assert np.allclose(rec.w, 1.0)


def test_empty_population_cannot_branch():
    with pytest.raises(BranchingError):
        step(Population.empty(T3), BranchingLaw(T3, Delta(2)), np.random.default_rng(0))


@pytest.mark.parametrize("mode,lam", MODES)
def test_one_step_law_matches_enumeration(mode, lam):
    law = BranchingLaw(T3, Explicit.from_list([0.5, 0.5]), mode, lam)
    m0 = Population.delta(T3, O)
    exact = enumerate_step(m0, law)
    assert sum(exact.values()) == pytest.approx(1.0, abs=1e-14)
    outcomes = list(exact)
    index = {p: i for i, p in enumerate(outcomes)}
    rng = np.random.default_rng(77)
    n = 100_000 if mode == "independent" else 20_000
    obs = np.zeros(len(outcomes))
    for _ in range(n):
        obs[index[step(m0, law, rng)]] += 1
    expected = n * np.array([exact[p] for p in outcomes])
    assert stats.chisquare(obs, expected).pvalue > 0.01


def test_vertex_coupled_puts_everything_on_one_site():
    law = BranchingLaw(T3, Explicit.from_list([0.5, 0.5]), "vertex_coupled", 0.0)
    for pop in enumerate_step(Population.delta(T3, O), law):
        assert len(pop) == 1


def test_geometric_mean_size():
    law = BranchingLaw(T3, Geometric(0.5))
    N, T = 8, 2000
    w = np.array([run_trajectory(Population.delta(T3, O), law, N, trajectory_stream(3, i)).w[N] for i in range(T)])
    se = w.std(ddof=1) / math.sqrt(T)
    assert abs(w.mean() - 1.0) < 3 * se


def f_map(x):
    return float((x * 2654435761) % 97) / 97.0


@pytest.mark.parametrize("mode,lam", MODES)
def test_exact_step_expectation_examples(mode, lam):
    law = BranchingLaw(T3, Explicit.from_list([0.2, 0.3, 0.5]), mode, lam)
    a, ab = T3.parse("a"), T3.parse("ab")
    for m in (Population.delta(T3, O), Population.from_counts(T3, {O: 2, a: 1}), Population.from_counts(T3, {ab: 1, a: 1})):
        res = exact_step_expectation(m, f_map, law)
        assert res.difference < 1e-12 * max(1.0, abs(res.closed_form))


def test_exact_step_expectation_unbounded_support_refuses_enumeration():
    law = BranchingLaw(T3, Geometric(0.5))
    with pytest.raises(BranchingError):
        exact_step_expectation(Population.delta(T3, O), f_map, law)
    res = exact_step_expectation(Population.delta(T3, O), lambda x: 1.0, law, enumerate_=False)
    assert res.closed_form == pytest.approx(2.0)


def ones(sites):
    return np.ones(sites.size)


def _spec(seed, **kw):
    law = BranchingLaw(T3, Geometric(0.5))
    fun = (HarmonicMartingale("ones", ones, 2.0),)
    return SimulationSpec(Population.delta(T3, O), law, N=kw.pop("N", 6), trajectories=kw.pop("T", 12), seed=seed, functionals=fun, watched=(O,), **kw)


def test_csv_is_byte_identical_for_equal_seeds():
    a = records_to_csv(run(_spec(9)), "r", ["o"], ["ones"])
    b = records_to_csv(run(_spec(9)), "r", ["o"], ["ones"])
    c = records_to_csv(run(_spec(10)), "r", ["o"], ["ones"])
    assert a == b and a != c
    assert a.splitlines()[0] == "run_id,trajectory_id,n,pop_size,w_n,distinct_sites,truncated,o,ones"


def test_results_do_not_depend_on_worker_count():
    one = run(_spec(4, T=8), threads=1)
    two = run(_spec(4, T=8), threads=2)
    assert records_to_csv(one, "r") == records_to_csv(two, "r")


def test_env_threads_override(monkeypatch):
    monkeypatch.setenv("BMC_THREADS", "2")
    assert records_to_csv(run(_spec(4, T=8)), "r") == records_to_csv(run(_spec(4, T=8), threads=1), "r")


def test_functional_of_ones_is_w():
    for r in run(_spec(2)):
        assert np.allclose(r.functionals[:, 0], r.w)


def test_cap_truncates_and_flags():
    law = BranchingLaw(T3, Delta(2))
    rec = run_trajectory(Population.delta(T3, O), law, 20, np.random.default_rng(0), cap=100)
    assert rec.truncated and rec.truncated_at == 7
    assert rec.pop_size[-1] == 64 and rec.horizon == 6
    with pytest.raises(PopulationCapExceeded):
        step(Population.delta(T3, O, 60), law, np.random.default_rng(0), cap=100)


def test_quotient_simulation_preserves_sizes():
    law = BranchingLaw(T3, Delta(2))
    Q, qlaw = simulation_space(T3, law, 2)
    assert isinstance(Q, DepthQuotient)
    m = project_population(Population.from_counts(T3, {O: 1, T3.parse("abc"): 2}), Q)
    assert m.size == 3
    m1 = step(m, qlaw, np.random.default_rng(1))
    assert m1.size == 6
    assert simulation_space(T3, law, 2, exact_vertices=True)[0] is T3


@settings(max_examples=20)
@given(st.integers(0, 2**64 - 1), st.integers(0, 1000))
def test_trajectory_stream_reproducible(seed, tid):
    law = BranchingLaw(T3, Geometric(0.5))
    a = run_trajectory(Population.delta(T3, O), law, 4, trajectory_stream(seed, tid))
    b = run_trajectory(Population.delta(T3, O), law, 4, trajectory_stream(seed, tid))
    assert np.array_equal(a.pop_size, b.pop_size)
