import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bmclab.boundary import (
    BoundaryError,
    SiteKappa,
    TestFunction as Phi,
    TreeFirstPassage,
    anchors,
    comb_hitting,
    fp_for,
    green_martin,
    green_truncation,
    harmonic_extension,
    hitting_cylinder,
    kappa_population,
    kappa_table,
    spectral_radius,
    stationarity_residual,
    truncation_hitting,
)
from bmclab.population import Population
from bmclab.state_space import DepthQuotient, TransienceError, free_group, homogeneous_tree

T3 = homogeneous_tree(3)
T4 = homogeneous_tree(4)
A, AB = T3.parse("a"), T3.parse("ab")


@pytest.mark.parametrize("tree,F", [(T3, 0.5), (T4, 1 / 3)])
def test_first_passage_on_homogeneous_trees(tree, F):
    assert fp_for(tree).F_up == pytest.approx(F, rel=1e-14)
    assert TreeFirstPassage(tree, force_letters=True).F_letter == pytest.approx(np.full(tree.d, F), rel=1e-12)


def test_radial_half_is_recurrent():
    tree = homogeneous_tree(3, {"toward_root": 0.5})
    fp = fp_for(tree)
    assert not fp.transient
    with pytest.raises(TransienceError):
        fp.kappa(0, tree.parse("a"))
    with pytest.raises(TransienceError):
        green_martin(tree, 0, 0)


def test_kappa_root_values():
    fp = fp_for(T3)
    assert fp.kappa(0, A) == pytest.approx(1 / 3, rel=1e-14)
    assert fp.kappa(0, AB) == pytest.approx(1 / 6, rel=1e-14)
    assert hitting_cylinder(T3, T3.parse("b"), AB) == pytest.approx(1 / 12, rel=1e-12)


def test_letter_system_is_a_fixed_point():
    F = free_group(2, [0.4, 0.3, 0.2, 0.1])
    fp = TreeFirstPassage(F)
    mu, inv = F.letter_weights(), np.asarray(F.inverse)
    s = mu * fp.F_letter[inv]
    assert np.allclose(mu + fp.F_letter * (s.sum() - s), fp.F_letter, atol=1e-12)
    assert np.all((0 < fp.F_letter) & (fp.F_letter < 1))
    assert fp.green(0, 0) == pytest.approx(green_truncation(F, 0, 0, 11), rel=1e-5)


@pytest.mark.parametrize("word", ["a", "ab", "bca"])
@pytest.mark.parametrize("start", ["", "a", "b", "abc", "cb"])
def test_comb_matches_closed_form(word, start):
    v, x = T3.parse(word), T3.parse(start or "-")
    c = comb_hitting(T3, x, v, tol=1e-10)
    assert c.lower - 1e-12 <= hitting_cylinder(T3, x, v) <= c.upper + 1e-12
    assert c.value == pytest.approx(hitting_cylinder(T3, x, v), abs=1e-10)


def test_truncation_converges_to_closed_form():
    x = T3.parse("b")
    c = truncation_hitting(T3, x, AB, tol=1e-5)
    exact = hitting_cylinder(T3, x, AB)
    # successive radii contract the error by about 1/2, so error ~ last gap
    assert c.width <= 1e-5
    assert abs(c.value - exact) <= 2 * c.width
    with pytest.raises(BoundaryError):
        truncation_hitting(T3, x, AB, tol=1e-10, max_vertices=50_000)


def test_harmonic_extension_mean_value_property():
    phi = Phi.from_config(T3, [["ab", 1.0], ["c", -0.5]])
    f = harmonic_extension(T3, phi)
    for x in T3.ball(3).tolist():
        assert f.mean_value_residual(x) < 1e-13
    assert f(0) == pytest.approx(1 / 6 - 0.5 / 3)


def test_full_boundary_extension_is_one():
    phi = Phi.full_boundary(T3)
    sk = SiteKappa(T3, phi)
    sites = T3.ball(3)
    assert np.allclose(sk(sites), 1.0)
    assert np.allclose(sk.extension(sites), 1.0)


def test_extension_agrees_with_indicator_below_anchor():
    phi = Phi.indicator(T3, AB)
    sk = SiteKappa(T3, phi)
    deep = np.array([T3.parse(w) for w in ("ab", "aba", "abca", "ac", "bab", "abcb")])
    assert sk.extension(deep).tolist() == [1.0, 1.0, 1.0, 0.0, 0.0, 1.0]
    shallow = np.array([0, A])
    assert np.allclose(sk.extension(shallow), sk(shallow))


def test_site_kappa_on_quotient_matches_tree():
    Q = DepthQuotient(T3, 2)
    phi = Phi.from_config(T3, [["ab", 1.0], ["b", 2.0]])
    sites = T3.ball(4)
    on_tree = SiteKappa(T3, phi)(sites)
    on_q = SiteKappa(Q, phi)(Q.project(sites))
    assert np.allclose(on_tree, on_q, atol=1e-14)
    with pytest.raises(BoundaryError):
        SiteKappa(DepthQuotient(T3, 1), phi)


def test_kappa_population_examples():
    m = Population.from_counts(T3, {0: 2, A: 1})
    tab = kappa_population(m, 2)
    assert tab.total == pytest.approx(3.0)
    assert tab.consistency_residual() < 1e-14
    assert tab.mass[A] == pytest.approx(2 * (1 / 3) + fp_for(T3).kappa(A, A))
    norm = kappa_population(m, 2, normalized=True)
    assert norm.total == pytest.approx(1.0)
    with pytest.raises(BoundaryError):
        kappa_population(m, 13)


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_cylinders_partition_the_boundary(depth):
    assert len(anchors(T3, depth)) == 3 * 2 ** (depth - 1)
    tab = kappa_table(T3, T3.parse("ca"), depth)
    assert sum(tab.mass[v] for v in anchors(T3, depth)) == pytest.approx(1.0, abs=1e-14)
    assert tab.consistency_residual() < 1e-14


def test_stationarity():
    assert stationarity_residual(T3, 4, 3) < 1e-13
    assert stationarity_residual(T4, 2, 2) < 1e-13


@settings(max_examples=40)
@given(st.integers(0, 21), st.integers(0, 21))
def test_green_symmetry_for_symmetric_walks(i, j):
    ball = T3.ball(3)
    x, y = int(ball[i]), int(ball[j])
    fp = fp_for(T3)
    assert fp.green(x, y) == pytest.approx(fp.green(y, x), rel=1e-12)
    assert green_martin(T3, 0, y).K == pytest.approx(1.0, rel=1e-14)


def test_green_values_T3():
    assert green_martin(T3, 0, 0).G == pytest.approx(2.0, rel=1e-14)
    assert green_martin(T3, 0, A).G == pytest.approx(1.0, rel=1e-14)
    assert green_martin(T3, A, AB).K == pytest.approx(2.0, rel=1e-13)
    assert green_truncation(T3, 0, 0, 40) == pytest.approx(2.0, abs=1e-9)


@pytest.mark.parametrize("tree,r", [(T3, 2 * math.sqrt(2) / 3), (T4, math.sqrt(3) / 2)])
def test_spectral_radius(tree, r):
    s = spectral_radius(tree, 500)
    assert s.estimate <= s.lower <= r + 1e-12
    assert abs(s.upper - r) < 5e-3
    with pytest.raises(BoundaryError):
        spectral_radius(tree, 50, tol=1e-6)


def test_kappa_along_a_ray_tends_to_one():
    fp = fp_for(T3)
    ray = ["ab" + "cb" * k for k in range(0, 15, 2)]
    vals = [fp.kappa(T3.parse(w), AB) for w in ray]
    assert np.all(np.diff(vals) > 0)
    assert 1 - vals[-1] < 1e-7
    # off the ray the mass decays geometrically
    off = [fp.kappa(T3.parse("ac" + "bc" * k), AB) for k in range(0, 15, 2)]
    assert off[-1] < 1e-7
