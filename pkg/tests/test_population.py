from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bmclab.population import Population, PopulationError
from bmclab.state_space import free_group, homogeneous_tree

T3 = homogeneous_tree(3)
F2 = free_group(2)
BALL = T3.ball(3)

pops = st.lists(
    st.tuples(st.sampled_from(BALL.tolist()), st.integers(1, 5)), min_size=1, max_size=8
).map(lambda items: Population.from_counts(T3, _merge(items)))


def _merge(items):
    d = {}
    for x, k in items:
        d[x] = d.get(x, 0) + k
    return d


def test_empirical_examples():
    x, y = T3.parse("a"), T3.parse("b")
    m = Population.from_counts(T3, {x: 2, y: 1})
    assert m.empirical(exact=True) == {x: Fraction(2, 3), y: Fraction(1, 3)}
    assert Population.delta(T3, x).empirical() == {x: 1.0}
    five = Population.from_counts(T3, {int(v): 1 for v in BALL[:5]})
    assert all(v == pytest.approx(0.2) for v in five.empirical().values())


def test_empirical_of_empty_raises():
    with pytest.raises(PopulationError):
        Population.empty(T3).empirical()


def test_lift_examples():
    x, y = T3.parse("a"), T3.parse("bc")
    f = lambda v: float(v) ** 0.5 + 1.0
    assert Population.delta(T3, x).lift(f) == f(x)
    m = Population.from_counts(T3, {x: 2, y: 1})
    # brute force over particles
    particles = [x, x, y]
    assert m.lift(f) == pytest.approx(sum(f(p) for p in particles), abs=1e-14)
    assert m.lift(f) == pytest.approx(2 * f(x) + f(y))


def test_lift_undefined_raises():
    m = Population.delta(T3, 1)
    with pytest.raises(PopulationError):
        m.lift({0: 1.0})


def test_merge_examples():
    x = T3.parse("a")
    assert Population.delta(T3, x) + Population.delta(T3, x) == Population.delta(T3, x, 2)


def test_merge_different_spaces_raises():
    with pytest.raises(PopulationError):
        Population.delta(T3, 0) + Population.delta(F2, 0)


def test_counts_must_be_positive():
    with pytest.raises(PopulationError):
        Population.from_counts(T3, {0: -1})


def test_csv_round_trip():
    m = Population.from_counts(T3, {0: 3, T3.parse("ab"): 2})
    text = m.to_csv()
    assert text.splitlines()[0] == "vertex,count"
    assert Population.from_csv(T3, text) == m


def test_from_spec_forms():
    a = Population.from_spec(T3, {"-": 1, "ab": 2})
    b = Population.from_spec(T3, [["-", 1], ["ab", 2]])
    assert a == b and a.size == 3


@given(pops)
def test_lift_constant_is_size(m):
    assert m.lift() == m.size
    assert m.lift(lambda x: 1.0) == m.size


@given(pops, pops)
def test_sizes_add(m, n):
    assert (m + n).size == m.size + n.size


@given(pops, pops, pops)
def test_merge_commutative_associative(a, b, c):
    assert a + b == b + a
    assert (a + b) + c == a + (b + c)


@given(pops, pops, st.floats(-3, 3), st.floats(-3, 3))
def test_lift_linear_and_additive(m, n, s, t):
    f = {int(v): float(np.sin(v)) for v in BALL}
    g = {int(v): float(np.cos(3 * v)) for v in BALL}
    comb = {k: s * f[k] + t * g[k] for k in f}
    assert m.lift(comb) == pytest.approx(s * m.lift(f) + t * m.lift(g), abs=1e-9)
    assert (m + n).lift(f) == pytest.approx(m.lift(f) + n.lift(f), abs=1e-9)


@given(pops)
def test_empirical_sums_to_one(m):
    assert sum(m.empirical(exact=True).values()) == 1
