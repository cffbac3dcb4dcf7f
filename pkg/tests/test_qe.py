import json
import threading
import warnings

import numpy as np
import pytest

import oracles
from mpmkit import ModelError, load_model, parse_model
from mpmkit.meanfield import integrate, limit_rates
from mpmkit.model import dump_model, fixture_path
from mpmkit.pipeline import prepare
from mpmkit.qe import (
    NewtonError,
    UnstableRootError,
    UntaggedModelError,
    check_fast_uniqueness,
    check_rate_gap,
    make_partition,
    qe_reduce_mpm,
    tikhonov_reduce,
)
from mpmkit.ssa import run_ensemble
from mpmkit.stoich import NotReducibleError


def gene(N=100, **params):
    return prepare(load_model("gene").with_params(init=[N, 0, 0], N=N, **params))


def test_gene_partition():
    p = make_partition(gene())
    assert p.slow_names == ("X3",) and p.fast_names == ("X2",)
    assert p.m == 1
    assert p.mu.ravel().tolist() == [1, -1]
    CT = np.array(p.basis.C.T.rows, dtype=object)
    for j in p.fast:
        assert np.all(CT @ np.array(p.model.transitions[j].update, dtype=object) == 0)


def test_toggle_partition():
    p = make_partition(load_model("toggle"))
    assert p.slow_names == ("X3",) and p.fast_names == ("X1", "X2")
    assert p.slow == (4, 5) and p.fast == (0, 1, 2, 3)


def test_untagged_and_unreducible():
    with pytest.raises(UntaggedModelError):
        make_partition(load_model("flip"))
    doc = json.loads(fixture_path("toggle").read_text())
    doc["transitions"][4]["scale"] = "fast"
    doc["transitions"][5]["scale"] = "fast"
    doc["transitions"][0]["scale"] = "slow"
    doc["transitions"].append({"label": "x3_kick", "update": [0, 0, 1], "rate": "1", "scale": "fast"})
    with pytest.raises(NotReducibleError):
        make_partition(parse_model(json.dumps(doc)))


def test_rate_gap_with_separation():
    m = gene(eps=1e-3)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = check_rate_gap(m, make_partition(m))
    assert rep.violations == [] and rep.warning is None
    assert 100 <= rep.gap_ratio <= 1e5


def test_rate_gap_without_separation_warns():
    m = gene(eps=1.0)
    with pytest.warns(RuntimeWarning, match="gap"):
        rep = check_rate_gap(m, make_partition(m))
    assert rep.warning


def test_vanishing_fast_transition_is_not_a_violation():
    m = gene(eps=1e-3)
    # Z = 0 switches repression off while unbinding stays busy
    rep = check_rate_gap(m, make_partition(m), probe_states=[[0, 50], [0, 10]])
    assert rep.violations == []
    assert rep.per_transition_min["repress"] == 0.0


def test_tikhonov_gene_closed_forms():
    m = gene(k_b=2.0, k_u=0.5, k_p=1.5, k_d=0.7)
    ode = tikhonov_reduce(limit_rates(m), make_partition(m))
    for y in np.linspace(0, 20, 11):
        z = ode.phi([y])[0]
        assert z == pytest.approx(0.5 / (0.5 + 2.0 * y), rel=1e-9)
        assert ode.drift([y])[0] == pytest.approx(1.5 * 0.5 / (0.5 + 2.0 * y) - 0.7 * y, abs=1e-9)
    # H in the fixture orientation: k_u (1 - z) - k_b y z
    assert ode.H([1.0], [0.3])[0] == pytest.approx(0.5 * 0.7 - 2.0 * 0.3)
    assert ode.G([1.0], [0.3])[0] == pytest.approx(1.5 * 0.3 - 0.7)


def test_reduced_solution_residual_and_reference():
    m = gene()
    ode = tikhonov_reduce(limit_rates(m), make_partition(m))
    taus = np.linspace(0, 5, 51)
    sol = ode.solve([0.0], 5.0, grid=taus)
    assert ode.max_residual <= ode.newton_tol
    assert np.abs(sol.x[:, 0] - oracles.gene_reduced_ode(taus)).max() <= 1e-8


def test_linear_fast_layer_one_newton_step():
    doc = {
        "name": "linear relaxation",
        "vars": ["Y", "Z"],
        "domain": [[0, None], [0, None]],
        "params": {"N": 10, "eps": 0.01},
        "init": [10, 0],
        "transitions": [
            {"label": "track", "update": [0, 1], "rate": "Y", "scale": "fast"},
            {"label": "decay", "update": [0, -1], "rate": "Z", "scale": "fast"},
            {"label": "slow_loss", "update": [-1, 0], "rate": "Y", "scale": "slow"},
        ],
    }
    m = parse_model(json.dumps(doc))
    ode = tikhonov_reduce(limit_rates(m), make_partition(m))
    assert ode.phi([0.8])[0] == pytest.approx(0.8, abs=1e-12)
    assert ode.drift([0.8])[0] == pytest.approx(-0.8, abs=1e-12)


def test_unstable_root_for_printed_orientation():
    m = prepare(load_model("gene_reversed"))
    ode = tikhonov_reduce(limit_rates(m), make_partition(m))
    with pytest.raises((UnstableRootError, NewtonError)):
        ode.solve([0.0], 1.0)


def test_uniqueness_verdicts():
    m = gene()
    p = make_partition(m)
    rep = check_fast_uniqueness(limit_rates(m), p, np.linspace(0, 20, 50))
    assert rep.verdict == "unique" and rep.witnesses == []
    t = load_model("toggle")
    rep = check_fast_uniqueness(limit_rates(t), make_partition(t), [0.5, 3.0])
    assert rep.verdict == "non-unique"
    for e in rep.entries:
        assert len(e.stable) == 2 and len(e.unstable) == 1


@pytest.mark.parametrize("N", [2, 10, 50])
def test_exact_backend_mean_against_dense_oracle(N):
    red = qe_reduce_mpm(gene(N), backend="exact_cme")
    for Y in range(N + 1):
        got = red.fast_distribution([Y]).mean("X2")
        assert got == pytest.approx(oracles.gene_fast_mean(N, Y), abs=1e-10)


def test_gene_averaged_rates():
    N = 4
    red = qe_reduce_mpm(gene(N), backend="exact_cme")
    rates = red.rates([2])
    assert rates[0] == pytest.approx(8 / 3, abs=1e-12)
    assert rates[1] == pytest.approx(2.0, abs=1e-12)  # degradation k_d Y


def test_closed_form_matches_exact():
    N = 30
    m = gene(N, k_b=2.0, k_u=0.5)
    exprs = {"produce": "k_p * N * k_u / (k_u + k_b * X3 / N)", "degrade": "k_d * X3"}
    closed = qe_reduce_mpm(m, backend="closed_form", expressions=exprs)
    exact = qe_reduce_mpm(m, backend="exact_cme")
    for Y in range(0, 60, 3):
        assert np.allclose(closed.rates([Y]), exact.rates([Y]), rtol=0, atol=1e-10)


def test_closed_form_needs_every_label():
    with pytest.raises(ValueError):
        qe_reduce_mpm(gene(10), backend="closed_form", expressions={"produce": "1"})


def test_nested_within_three_standard_errors():
    N = 20
    m = gene(N)
    exact = qe_reduce_mpm(m, backend="exact_cme")
    nested = qe_reduce_mpm(m, backend="nested_ssa", seed=3)
    for Y in (0, 7, 25):
        est = nested.averaged([Y])
        want = exact.rates([Y])
        for k in range(2):
            se = est.std_err[k]
            assert abs(est.rates[k] - want[k]) <= 3 * se + 1e-12


def test_toggle_averaged_rate_independent_of_slow_state():
    m = load_model("toggle").with_params(init=[4, 0, 0], N=4)
    red = qe_reduce_mpm(m, backend="exact_cme", trunc={"X1": 60, "X2": 60})
    produce = [red.rates([Y])[0] for Y in (0, 3, 9)]
    assert np.ptp(produce) <= 1e-12
    assert red.computations == 3
    # the fast law does not depend on X3: a single stationary solve serves every Y
    assert red._fast_memo.computations == 1


def test_memo_is_single_flight():
    red = qe_reduce_mpm(gene(10), backend="exact_cme")
    barrier = threading.Barrier(8)

    def work():
        barrier.wait()
        red.rates([4])

    threads = [threading.Thread(target=work) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert red.computations == 1


def test_drift_and_reduced_model():
    N = 50
    m = gene(N)
    red = qe_reduce_mpm(m, backend="exact_cme")
    y = 0.4
    assert red.drift([y])[0] == pytest.approx(1 / (1 + y) - y, abs=1e-10)
    rm = red.to_model({"X3": 150})
    assert rm.vars == ("X3",) and all(t.scale == "unscaled" for t in rm.transitions)
    again = parse_model(dump_model(rm))
    assert np.allclose(again.base_rates(np.array([[7]])), rm.base_rates(np.array([[7]])))
    ens = run_ensemble(rm, 1.0, 5, 3, seed=0)
    assert ens.mean.shape == (3, 1)


def test_tabulation_needs_cap():
    red = qe_reduce_mpm(gene(10), backend="exact_cme")
    with pytest.raises(ModelError, match="cap"):
        red.to_model()


def test_negative_averaged_rate_rejected():
    m = gene(10)
    red = qe_reduce_mpm(m, backend="closed_form", expressions={"produce": "X3 - 5", "degrade": "k_d * X3"})
    with pytest.raises(ModelError, match="invalid"):
        red.rates([1])


def test_reduced_ode_integrates_like_meanfield():
    m = gene()
    red = qe_reduce_mpm(m, backend="closed_form",
                        expressions={"produce": "k_p * N * k_u / (k_u + k_b * X3 / N)", "degrade": "k_d * X3"})
    sol = integrate(red.drift, [0.0], 5.0, grid=6)
    assert np.allclose(sol.x[:, 0], oracles.gene_reduced_ode(np.linspace(0, 5, 6)), atol=1e-8)
