import csv
import json

import numpy as np
import pytest

from mpmkit.cli import main
from mpmkit.model import parse_model


def header(path):
    with open(path) as fh:
        return next(csv.reader(fh))


def rows(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def test_invariants(tmp_path, capsys):
    out = tmp_path / "inv.json"
    assert main(["invariants", "gene", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["codim"] == 1 and doc["p_invariants"] == [[1, 1, 0]]
    assert doc["fast"]["p_invariants"] == [[0, 1]]


def test_simulate_writes_moments_and_histogram(tmp_path):
    out = tmp_path / "sim.csv"
    fig = tmp_path / "sim.png"
    code = main(["simulate", "flip", "--t-end", "2", "--replicates", "20", "--grid-points", "5",
                 "--seed", "4", "--out", str(out), "--figure", str(fig)])
    assert code == 0
    assert header(out) == ["t", "mean_S", "var_S"]
    assert rows(out).shape[0] == 5
    assert fig.exists()
    hists = list(tmp_path.glob("hist_*.csv"))
    assert hists and header(hists[0]) == ["value", "probability"]


def test_simulate_is_reproducible(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        main(["simulate", "flip", "--t-end", "3", "--replicates", "10", "--seed", "9", "--out", str(p)])
    assert a.read_bytes() == b.read_bytes()


def test_cme_stationary(tmp_path):
    out = tmp_path / "pi.csv"
    assert main(["cme", "flip", "--param", "a=1", "--param", "b=3", "--stationary", "--out", str(out)]) == 0
    assert header(out)[-1] == "probability"
    assert rows(out)[:, -1].sum() == pytest.approx(1.0)


def test_cme_transient_with_cap(tmp_path):
    out = tmp_path / "pt.csv"
    assert main(["cme", "birth", "--trunc", "X=40", "--t", "1.0", "--nonzero", "--out", str(out)]) == 0
    assert rows(out)[:, -1].sum() == pytest.approx(1.0, abs=1e-9)


def test_meanfield_and_equilibria(tmp_path):
    out = tmp_path / "mf.csv"
    assert main(["meanfield", "gene", "--param", "eps=1", "--t-end", "5", "--grid-points", "11",
                 "--out", str(out)]) == 0
    assert header(out) == ["t", "X1", "X2", "X3"]
    eq = tmp_path / "eq.json"
    assert main(["equilibria", "toggle", "--fast", "1", "--box", "0:20", "--out", str(eq)]) == 0
    doc = json.loads(eq.read_text())
    kinds = sorted(e["stability"] for e in doc["equilibria"])
    assert kinds == ["stable", "stable", "unstable"]


def test_qe_reduced_model_round_trips(tmp_path):
    out = tmp_path / "red.json"
    assert main(["qe", "gene", "--param", "N=10", "--cap", "X3=30", "--out", str(out)]) == 0
    m = parse_model(out.read_text())
    assert m.vars == ("X3",)


def test_qe_needs_cap_for_tables(tmp_path):
    assert main(["qe", "gene", "--param", "N=10", "--out", str(tmp_path / "x.json")]) == 2


def test_qe_ode(tmp_path):
    out = tmp_path / "slow.csv"
    assert main(["qe-ode", "gene", "--t-end", "3", "--grid-points", "4", "--out", str(out)]) == 0
    assert header(out) == ["tau", "X3"]


def test_commute(tmp_path):
    out, table, fig = tmp_path / "rep.json", tmp_path / "curves.csv", tmp_path / "cmp.png"
    code = main(["commute", "gene", "--param", "N=20", "--t-end", "2", "--grid-points", "11",
                 "--out", str(out), "--csv", str(table), "--figure", str(fig)])
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["verdict"] == "commutes"
    assert header(table) == ["tau", "y_qm_X3", "y_mq_X3"]
    assert fig.exists()


def test_bad_model_exits_with_two(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["invariants", str(bad)]) == 2
