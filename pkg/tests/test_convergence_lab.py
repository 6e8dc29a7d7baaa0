import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bmclab import convergence_lab as lab
from bmclab.branching import Delta, Geometric
from bmclab.config import from_dict

T3 = {"type": "tree", "degree": 3, "step_law": "simple"}
SINGLE = {"type": "explicit", "states": ["o"], "matrix": [[1.0]]}


def cfg(space=T3, offspring=None, seed=1, **exp):
    raw = {
        "state_space": space,
        "branching": {"mode": "independent", "offspring": offspring or {"kind": "geometric", "q": 0.5}},
        "experiment": {"horizon": 8, "trajectories": 60, **exp},
    }
    return from_dict(raw, seed=seed)


# -- helpers


def test_within_band_floor_and_sigma():
    assert within(1.0, 1.0 + 1e-14, 0.0)
    assert not within(1.0, 1.0 + 1e-9, 0.0)
    assert within(1.0, 1.2, 0.1) and not within(1.0, 1.4, 0.1)


def within(v, t, se):
    return lab.within_band(v, t, se, 3.0).passed


def test_clopper_pearson_brackets():
    lo, hi = lab.clopper_pearson(0, 100)
    assert lo == 0.0 and hi == pytest.approx(0.0362, abs=1e-4)
    lo, hi = lab.clopper_pearson(50, 100)
    assert lo < 0.5 < hi


def test_curve_stats_ignores_nan():
    X = np.array([[1.0, np.nan], [3.0, 2.0]])
    rows = lab.curve_stats(X)
    assert rows[0]["mean"] == 2.0 and rows[1]["count"] == 1 and rows[1]["se"] == 0.0


@given(st.floats(1e-300, 1e300))
def test_poisson_coordinate_range_base_two(w):
    p = lab.poisson_coordinate(np.array([w]), 2.0)[0]
    assert 1.0 <= p < 2.0
    assert math.log2(w / p) == pytest.approx(round(math.log2(w / p)), abs=1e-9)


@given(st.floats(1e-100, 1e100), st.floats(1.1, 5.0))
def test_poisson_coordinate_range_general(w, rho):
    p = lab.poisson_coordinate(np.array([w]), rho)[0]
    assert 1.0 <= p < rho


def test_gw_laplace_exact_delta():
    # delta_2: W_N = 1 exactly
    assert lab.gw_laplace_exact(Delta(2), 0.3, 10, 2.0) == pytest.approx(math.exp(-0.3), rel=1e-12)


def test_gw_laplace_exact_geometric_closed_form():
    # geom(1/2) from one ancestor: Z_N ~ geom(2^-N), so E exp(-s Z_N / 2^N) is explicit
    s, N = 0.7, 6
    q = 2.0**-N
    u = math.exp(-s * q)
    assert lab.gw_laplace_exact(Geometric(0.5), s, N, 2.0) == pytest.approx(q * u / (1 - (1 - q) * u), rel=1e-10)


def test_pilot_bands_present():
    for name in ("cauchy_gap_depth2", "positivity_fraction_below_1e-3"):
        assert lab.pilot_band(name)["value"] > 0
    with pytest.raises(lab.StudyError):
        lab.pilot_band("nope")


# -- studies


def test_martingale_delta2_exact():
    rep = lab.martingale_study(cfg(offspring={"kind": "delta", "k": 2}))
    assert rep.verdict("exact_constant").passed and rep.passed
    assert rep.to_json() == lab.martingale_study(cfg(offspring={"kind": "delta", "k": 2})).to_json()


def test_martingale_heavy_reports_divergence():
    rep = lab.martingale_study(cfg(SINGLE, {"kind": "heavy_tail", "mean": 2.0}, horizon=10, trajectories=300, cap=10**6))
    assert rep.extra["llogl_finite"] is False
    assert rep.verdict("ui_proxy").passed is None
    assert rep.verdict("median_decrease").passed is not None


def test_report_serialization_is_deterministic_and_strict():
    rep = lab.martingale_study(cfg(seed=5))
    d = json.loads(rep.to_json())
    assert d["seeds"]["master"] == 5 and d["horizon"] == 8
    assert rep.per_n_csv().startswith("curve,n,count,mean")
    assert rep.verdicts_csv().splitlines()[0] == "name,passed,statistic,threshold,sample_size,detail"
    assert lab.martingale_study(cfg(seed=5)).to_json() == rep.to_json()
    assert lab.martingale_study(cfg(seed=6)).to_json() != rep.to_json()


def test_positivity_small():
    rep = lab.positivity_study(cfg(multiples=[1, 2]))
    assert rep.verdict("min_W_N_positive_k1").passed
    assert rep.verdict("min_W_N_floor_k2").passed
    assert len(rep.omega) == 2


def test_boundary_full_test_function_gives_trivial_limits():
    rep = lab.boundary_limit_study(cfg(test_function="full"))
    t = rep.terminal
    assert np.allclose(t["a_N"], t["W_N"])
    assert np.allclose(t["b_N"], 1.0) and np.allclose(t["c_N"], 1.0)
    assert rep.passed


def test_boundary_cylinder_small():
    rep = lab.boundary_limit_study(cfg(test_function=[["ab", 1.0]], trajectories=200))
    assert rep.extra["target"] == pytest.approx(1 / 6)
    assert rep.verdict("domination").passed and rep.verdict("c_in_range").passed
    assert rep.verdict("cauchy_gap").passed is None


def test_transition_probabilities_T3():
    from bmclab.state_space import homogeneous_tree

    T = homogeneous_tree(3)
    p = lab.transition_probabilities(T, 0, 0, 6)
    assert p[0] == 1 and p[1] == 0 and p[2] == pytest.approx(1 / 3)
    assert p[4] == pytest.approx(1 / 3 * 1 / 3 + 1 / 3 * 2 / 3 * 1 / 3)


def test_disappear_small():
    rep = lab.disappear_study(cfg(offspring={"kind": "delta", "k": 2}, horizon=12, trajectories=100, watched=["-", "a"]))
    assert rep.verdict("finite_horizon_mean(-)").passed
    assert rep.verdict("finite_horizon_mean(a)").passed


def test_gw_requires_singleton_space():
    with pytest.raises(lab.StudyError):
        lab.gw_boundary_study(cfg())
    rep = lab.gw_boundary_study(cfg(SINGLE))
    assert rep.verdict("shift_identity").passed and rep.verdict("poisson_range").passed


def test_gw_degenerate_law_has_no_histogram_verdict():
    rep = lab.gw_boundary_study(cfg(SINGLE, {"kind": "delta", "k": 2}))
    assert rep.verdict("w_bins_positive").passed is None


def test_inequalities_reject_s_outside_range():
    with pytest.raises(lab.StudyError):
        lab.inequality_checks(cfg(s_grid=[0.9]))
    rep = lab.inequality_checks(cfg(s_grid=[0.1], trajectories=200))
    assert rep.verdict("pipe_exact").passed and rep.verdict("telescoped_bound(s=0.1)").passed


def test_green_study():
    rep = lab.green_study(cfg(watched=["-", "a"], n_max=400))
    g = {(r["x"], r["y"]): r["G"] for r in rep.extra["green"]}
    assert g[("-", "-")] == pytest.approx(2.0) and g[("-", "a")] == pytest.approx(1.0)
    assert rep.passed


def test_invariant_suite_all_pass():
    rep = lab.invariant_suite(cfg(seed=0))
    assert [v.name for v in rep.verdicts if not v.passed] == []
    assert len(rep.verdicts) == 15
