import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from bmclab.branching import (
    BranchingError,
    BranchingLaw,
    Delta,
    Explicit,
    Geometric,
    HeavyTail,
    LaplaceToolkit,
    Override,
    dominates,
    envelope,
    law_from_config,
    mean_measures,
    moments,
    psi,
    remainder_suite,
    sample_branch,
)
from bmclab.state_space import homogeneous_tree

T3 = homogeneous_tree(3)
GRID = [2.0**k for k in range(-20, 5)]


# -- moments


def test_delta_moments():
    m = moments(Delta(2))
    assert m.mean == 2
    assert m.llogl.value == pytest.approx(2 * math.log(2), rel=1e-15)
    assert not m.llogl.divergent


def test_geometric_moments_against_series():
    m = moments(Geometric(0.5))
    assert m.mean == 2
    k = np.arange(1, 400, dtype=float)
    oracle = math.fsum((0.5**k * k * np.log(k)).tolist())
    assert m.llogl.value == pytest.approx(oracle, rel=1e-10)


def test_heavy_tail_flagged_divergent():
    ht = HeavyTail(mean=2.0)
    m = moments(ht)
    assert math.isfinite(m.mean) and m.mean == pytest.approx(2.0, rel=1e-12)
    assert m.llogl.divergent
    assert ht.tail(np.array([1]))[0] == pytest.approx(1.0)
    assert float(ht.pmf(np.array([1]))[0]) > 0.49


def test_explicit_pmf_validation():
    with pytest.raises(BranchingError):
        Explicit.from_list([0.5, 0.6])
    e = Explicit.from_dict({"1": 0.25, "3": 0.75})
    assert e.mean == pytest.approx(2.5)


# -- domination


def test_domination_examples():
    assert dominates(Delta(3), Delta(2))
    assert not dominates(Delta(2), Delta(3))
    assert dominates(Geometric(0.5), Delta(1))
    assert dominates(HeavyTail(), Delta(1))
    assert not dominates(Delta(5), Geometric(0.5))


pmfs = st.lists(st.integers(0, 6), min_size=1, max_size=5).map(
    lambda w: Explicit.from_list([x / sum(w) for x in w]) if sum(w) else Explicit.from_list([1.0])
)


@given(pmfs, pmfs, pmfs)
def test_domination_partial_order(a, b, c):
    assert dominates(a, a)
    if dominates(a, b) and dominates(b, a):
        n = np.arange(0, 8)
        assert np.allclose(a.tail(n), b.tail(n), atol=1e-12)
    if dominates(a, b) and dominates(b, c):
        assert dominates(a, c)


# -- envelope


def test_envelope_examples():
    e = envelope([Delta(2), Delta(3)])
    assert e.ok and e.pmf == Delta(3)
    e = envelope([Geometric(0.5), Geometric(1 / 3)])
    assert e.ok and e.pmf == Geometric(1 / 3) and e.llogl_finite


def test_envelope_of_crossing_tails():
    e = envelope([Delta(3), Geometric(0.5)])
    assert e.ok
    n = np.arange(1, 60)
    assert np.all(e.pmf.tail(n) >= np.maximum(Delta(3).tail(n), Geometric(0.5).tail(n)) - 1e-15)


def test_envelope_unbounded_means_fails():
    fam = (Delta(k) for k in range(1, 10**9))
    e = envelope(fam, max_members=200)
    assert not e.ok
    e = envelope([Delta(2), Delta(10**7)])
    assert not e.ok


def test_envelope_heavy_is_divergent():
    e = envelope([HeavyTail(), Delta(2)])
    assert e.ok and not e.llogl_finite
    # the head is lifted to the delta, the far tail is the heavy law's
    assert e.mean == pytest.approx(HeavyTail().mean + 1 - float(HeavyTail().tail(np.array([2]))[0]), rel=1e-12)


# -- Laplace toolkit


def test_remainder_single_atom():
    for s in (0.0, 0.1, 1.0, 3.0):
        r = remainder_suite(Delta(1), s)
        assert r.G == pytest.approx(math.exp(-s), rel=1e-15)
        assert r.R == pytest.approx(psi(s), rel=1e-12, abs=1e-300)


@pytest.mark.parametrize("pi", [Delta(2), Geometric(0.5), Explicit.from_list([0.2, 0.3, 0.5]), HeavyTail()], ids=str)
def test_R_zero_at_origin(pi):
    assert LaplaceToolkit(pi).R(0.0) == 0.0


def test_remainder_geometric_against_series():
    tk = LaplaceToolkit(Geometric(0.5))
    for s in (0.1, 0.5, 1.0):
        G = (0.5 * math.exp(-s)) / (1 - 0.5 * math.exp(-s))
        assert tk.G(s) == pytest.approx(G, rel=1e-13)
        assert tk.R(s) == pytest.approx(G - 1 + 2 * s, rel=1e-10)


@pytest.mark.parametrize("pi", [Delta(2), Geometric(0.5), Geometric(0.3), HeavyTail()], ids=str)
def test_R_monotone_on_grid(pi):
    tk = LaplaceToolkit(pi)
    R = np.array([tk.R(s) for s in GRID])
    assert np.all(np.diff(R) >= 0)
    assert np.all(np.diff(R / np.array(GRID)) >= -1e-15)


@pytest.mark.parametrize("small,big", [(Delta(2), Delta(3)), (Geometric(0.5), Geometric(1 / 3)), (Delta(1), Geometric(0.5))])
def test_R_respects_domination(small, big):
    assert dominates(big, small)
    a, b = LaplaceToolkit(small), LaplaceToolkit(big)
    assert all(a.R(s) <= b.R(s) + 1e-16 for s in GRID)


def test_s0_values():
    assert LaplaceToolkit(Geometric(0.5)).s0 == pytest.approx(0.5)
    assert LaplaceToolkit(Delta(2)).s0 == pytest.approx(0.5)
    tk = LaplaceToolkit(Geometric(0.2))
    s0 = tk.s0
    assert tk.R(s0) <= tk.rho * s0 + 1e-9 and tk.rho * s0 <= 1 + 1e-12


def test_integral_series_matches_quadrature():
    for pi in (Geometric(0.5), Explicit.from_list([0.1, 0.4, 0.5])):
        tk = LaplaceToolkit(pi)
        assert tk.integral_R_over_s2(1.0) == pytest.approx(tk.integral_quad(1.0), rel=1e-9)
        assert tk.integral_R_over_s2(0.3, 1e-3) == pytest.approx(tk.integral_quad(0.3, 1e-3), rel=1e-9)


def test_integral_dichotomy():
    geo = LaplaceToolkit(Geometric(0.5))
    vals = [geo.integral_R_over_s2(1.0, eps) for eps in (1e-2, 1e-4, 1e-8, 1e-16)]
    # R(s)/s^2 stays bounded near 0, so the lower end contributes O(eps)
    assert 0 <= vals[-1] - vals[-2] < 1e-7
    assert vals[-2] - vals[-3] < 1e-3
    ht = HeavyTail()
    hv = [ht.llogl_integral(eps, 1.0) for eps in (1e-2, 1e-8, 1e-32, 1e-128)]
    assert np.all(np.diff(hv) > 0.4)
    assert hv[-1] > 5.0


def test_heavy_tail_integral_matches_quadrature():
    ht = HeavyTail()
    tk = LaplaceToolkit(ht)
    f = lambda u: tk.R(math.exp(u)) / math.exp(u)
    val, _ = integrate.quad(f, math.log(1e-3), 0.0, limit=400, epsrel=1e-10)
    assert ht.llogl_integral(1e-3, 1.0, untruncated=False) == pytest.approx(val, rel=1e-6)


def test_telescoped_bound_needs_supercritical():
    with pytest.raises(BranchingError):
        LaplaceToolkit(Delta(1)).telescoped_bound(0.1)


# -- laws


@pytest.mark.parametrize("mode,lam", [("independent", 1.0), ("vertex_coupled", 0.0), ("mixture", 0.5)])
def test_mean_measures_mode_free(mode, lam):
    law = BranchingLaw(T3, Delta(2), mode, lam)
    mm = mean_measures(law, T3.root)
    assert mm["rho"] == 2
    assert sum(mm["barycentre"].values()) == pytest.approx(2.0, abs=1e-12)
    assert all(p == pytest.approx(1 / 3) for p in mm["displacement"].values())
    assert sorted(mm["displacement"]) == sorted(y for y, _ in T3.neighbors(T3.root))


def test_barycentre_mass_equals_mean_everywhere():
    law = BranchingLaw(T3, Geometric(0.5), overrides=(Override(Geometric(0.5), band=(2, 3)),))
    for x in T3.ball(3).tolist():
        mm = mean_measures(law, x)
        assert sum(mm["barycentre"].values()) == pytest.approx(law.offspring_at(x).mean, abs=1e-12)


def test_sample_branch_delta1_moves_one_particle():
    law = BranchingLaw(T3, Delta(1))
    rng = np.random.default_rng(3)
    nbrs = {y for y, _ in T3.neighbors(T3.root)}
    for _ in range(50):
        m = sample_branch(law, T3.root, rng)
        assert m.size == 1 and int(m.sites[0]) in nbrs


def test_sample_branch_vertex_coupled_delta3():
    law = BranchingLaw(T3, Delta(3), "vertex_coupled", 0.0)
    rng = np.random.default_rng(4)
    seen = set()
    for _ in range(60):
        m = sample_branch(law, T3.root, rng)
        assert len(m.sites) == 1 and m.size == 3
        seen.add(int(m.sites[0]))
    assert len(seen) == 3


def test_sample_branch_geometric_goodness_of_fit():
    law = BranchingLaw(T3, Geometric(0.5))
    rng = np.random.default_rng(2024)
    n = 100_000
    sizes = np.array([law.sample_branch(T3.root, rng).size for _ in range(n)])
    K = 12
    obs = np.array([np.sum(sizes == k) for k in range(1, K)] + [np.sum(sizes >= K)])
    exp_ = n * np.append(0.5 ** np.arange(1, K), 0.5 ** (K - 1))
    assert stats.chisquare(obs, exp_).pvalue > 0.01
    # mean of ||sample|| within 4 sigma of rho (variance of geom(1/2) is 2)
    assert abs(sizes.mean() - 2.0) < 4 * math.sqrt(2.0 / n)


def test_overrides_must_keep_rho():
    with pytest.raises(BranchingError):
        BranchingLaw(T3, Delta(2), overrides=(Override(Delta(3), band=(1, 2)),))
    law = BranchingLaw(T3, Delta(2), overrides=(Override(Delta(3), band=(1, 2)),), require_constant_rho=False)
    with pytest.raises(BranchingError):
        law.rho


def test_law_from_config_band_and_alias():
    law = law_from_config(
        {"mode": "independent_bd", "offspring": {"kind": "delta", "k": 2}, "overrides": [{"band": [1, 2], "offspring": {"kind": "explicit", "pmf": [0.5, 0, 0.5]}}]},
        T3,
    )
    assert law.mode == "independent"
    idx = law.law_index(np.array([0, T3.parse("a"), T3.parse("abc")]))
    assert idx.tolist() == [0, 1, 0]


def test_heavy_tail_sampler_matches_pmf():
    ht = HeavyTail()
    rng = np.random.default_rng(11)
    x = ht.sample(rng, 200_000)
    for k in (1, 2, 3, 10):
        p = float(ht.pmf(np.array([k]))[0])
        assert abs(np.mean(x == k) - p) < 4 * math.sqrt(p * (1 - p) / x.size)
    for n in (100, 10_000):
        t = float(ht.tail(np.array([n]))[0])
        assert abs(np.mean(x >= n) - t) < 4 * math.sqrt(t / x.size) + 1e-12
