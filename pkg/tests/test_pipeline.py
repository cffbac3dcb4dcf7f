import json

import numpy as np
import pytest

import oracles
from mpmkit import load_model
from mpmkit.pipeline import (
    _modes,
    commute_compare,
    m_of_q,
    prepare,
    q_of_m,
    resize,
    slow_stationary_histogram,
)
from mpmkit.qe import UntaggedModelError, make_partition


def test_resize_keeps_densities():
    m = prepare(load_model("gene"))
    big = resize(m, 400)
    assert big.N == 400 and big.params["Y1"] == 400
    assert big.init == (0, 0)
    t = resize(load_model("toggle"), 50)
    assert t.init == (50, 0, 0)


def test_prepare_only_reduces_with_invariants():
    assert prepare(load_model("toggle")) is not None
    assert prepare(load_model("toggle")).vars == ("X1", "X2", "X3")
    assert prepare(load_model("gene")).vars == ("X2", "X3")


def test_q_of_m_gene():
    m = prepare(load_model("gene").with_params(k_p=2.0, k_b=0.5))
    taus = np.linspace(0, 5, 26)
    sol = q_of_m(m, T=5.0, grid=taus)
    ref = oracles.gene_reduced_ode(taus, k_p=2.0, k_b=0.5)
    assert np.abs(sol.x[:, 0] - ref).max() <= 1e-8


def test_q_of_m_toggle_saturates_at_high_root():
    sol = q_of_m(load_model("toggle"), T=30.0, grid=31)
    b = oracles.toggle_fixed_points()[-1]
    assert sol.final[0] == pytest.approx(b, abs=1e-6)


def test_m_of_q_gene_matches_limit():
    m = prepare(load_model("gene").with_params(init=[40, 0, 0], N=40))
    res = m_of_q(m, T=5.0, grid=11, source=load_model("gene").with_params(init=[40, 0, 0], N=40))
    ref = oracles.gene_reduced_ode(np.linspace(0, 5, 11))
    assert np.abs(res.solution.x[:, 0] - ref).max() <= 1e-9
    assert res.doubling["checked"] and res.doubling["converged"]


def test_single_scale_model_propagates_partition_error():
    with pytest.raises(UntaggedModelError):
        m_of_q(load_model("flip"))
    rep = commute_compare(load_model("flip"))
    assert rep.verdict == "inconclusive" and "error" in rep.stages["partition"]


def test_gene_report_and_determinism():
    m = load_model("gene").with_params(init=[30, 0, 0], N=30)
    a = commute_compare(m, with_ssa=True, replicates=10, seed=3)
    b = commute_compare(m, with_ssa=True, replicates=10, seed=3)
    assert a.to_json() == b.to_json()
    assert a.verdict == "commutes" and a.D <= 1e-6
    doc = json.loads(a.to_json())
    assert doc["uniqueness"]["verdict"] == "unique"
    cols, data = a.curves()
    assert cols == ["tau", "y_qm_X3", "y_mq_X3", "ssa_mean_X3"]
    assert data.shape == (201, 4)


def test_deterministic_curves_do_not_depend_on_eps():
    base = load_model("gene").with_params(init=[30, 0, 0], N=30)
    r1 = commute_compare(base.with_params(eps=1e-2), doubling=False)
    r2 = commute_compare(base.with_params(eps=1e-3), doubling=False)
    assert np.array_equal(r1.y_qm, r2.y_qm)
    assert np.array_equal(r1.y_mq, r2.y_mq)


def test_ssa_clock_is_rescaled():
    m = load_model("gene").with_params(init=[30, 0, 0], N=30, eps=0.05)
    rep = commute_compare(m, T=2.0, grid=5, with_ssa=True, replicates=40, seed=1, doubling=False)
    # mean protein density tracks the slow-time curve, not the fast-time one
    assert np.abs(rep.ssa_mean[-1, 0] - rep.y_qm[-1, 0]) < 0.1


def test_modes_on_synthetic_bimodal_density():
    centres = np.linspace(0, 8, 161)
    prob = np.exp(-((centres - 1) ** 2) / 0.1) + np.exp(-((centres - 6) ** 2) / 0.1)
    prob /= prob.sum()
    modes, mass = _modes(centres, prob)
    assert np.allclose(modes, [1, 6], atol=0.06)
    assert np.allclose(mass, [0.5, 0.5], atol=0.01)


def test_histogram_unimodal_for_gene():
    m = prepare(load_model("gene").with_params(init=[50, 0, 0], N=50, eps=0.1))
    h = slow_stationary_histogram(m, "X3", slow_horizon=100.0, replicates=4, seed=0)
    assert len(h.modes) == 1
    ystar = (-1 + np.sqrt(5)) / 2  # root of 1/(1+y) = y
    assert h.modes[0] == pytest.approx(ystar, abs=0.1)
    assert h.prob.sum() == pytest.approx(1.0)


def test_partition_of_report_names():
    rep = commute_compare(load_model("gene").with_params(init=[20, 0, 0], N=20), doubling=False)
    assert rep.slow_vars == make_partition(prepare(load_model("gene"))).slow_names
