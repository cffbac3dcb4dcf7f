import numpy as np
import pytest
import scipy.linalg

import oracles
from mpmkit import ModelError, load_model
from mpmkit.cme import (
    AmbiguityError,
    StateSpaceIndex,
    StateSpaceOverflow,
    build_generator,
    point_mass,
    stationary_distribution,
    transient_solve,
)
from mpmkit.pipeline import prepare
from mpmkit.qe import ReducedMpm, make_partition


def flip(a=1.0, b=1.0):
    return load_model("flip").with_params(a=a, b=b)


def gene_fast(N, Y):
    m = prepare(load_model("gene").with_params(init=[N, 0, 0], N=N))
    return ReducedMpm(make_partition(m), "exact_cme").fast_model([Y])


def test_flip_generator():
    g = build_generator(flip(2.0, 3.0))
    assert g.Q.toarray().tolist() == [[-2.0, 2.0], [3.0, -3.0]]


def test_gene_fast_generator_is_tridiagonal():
    N, Y = 2, 3
    g = build_generator(gene_fast(N, Y))
    Z = g.index.states()[:, 0]
    assert Z.tolist() == [0, 1, 2]
    assert np.allclose(g.Q.toarray(), oracles.gene_fast_generator(N, Y))


def test_row_sums_and_signs():
    g = build_generator(load_model("toggle"), {"X1": 25, "X2": 25, "X3": 15})
    Q = g.Q.toarray()
    assert np.allclose(Q.sum(axis=1), 0, atol=1e-12)
    off = Q - np.diag(np.diag(Q))
    assert np.all(off >= 0)


def test_index_bijection():
    idx = StateSpaceIndex(("a", "b"), (1, 0), (3, 4))
    states = idx.states()
    assert idx.size == 15 == len(states)
    assert np.array_equal(idx.index_of(states), np.arange(15))
    assert idx.index_of([[0, 0], [4, 0]]).tolist() == [-1, -1]
    assert idx.state(7) == tuple(states[7])


def test_truncation_must_contain_init():
    m = load_model("gene").with_params(init=[10, 0, 5], N=10)
    with pytest.raises(ModelError):
        build_generator(m, {"X3": 3})


def test_unbounded_needs_cap():
    with pytest.raises(ModelError, match="unbounded"):
        build_generator(load_model("birth"))


def test_overflow_names_size():
    with pytest.raises(StateSpaceOverflow) as info:
        build_generator(load_model("toggle"), {"X1": 99, "X2": 99, "X3": 99}, limit=10_000)
    assert info.value.size == 100**3


def test_flip_stationary():
    d = stationary_distribution(build_generator(flip(1.0, 3.0)))
    assert d.p.tolist() == pytest.approx([0.75, 0.25], abs=1e-14)


def test_gene_fast_stationary_examples():
    d = stationary_distribution(build_generator(gene_fast(2, 2)))
    assert d.mean("X2") == pytest.approx(1.0, abs=1e-12)
    d4 = stationary_distribution(build_generator(gene_fast(4, 2)))
    assert d4.mean("X2") == pytest.approx(8 / 3, abs=1e-12)


def test_two_absorbing_ends_are_ambiguous():
    # the printed orientation makes both Z = 0 and Z = N absorbing
    m = prepare(load_model("gene_reversed").with_params(init=[5, 5, 0], N=10))
    fm = ReducedMpm(make_partition(m), "exact_cme").fast_model([3])
    with pytest.raises(AmbiguityError) as info:
        stationary_distribution(build_generator(fm), start=[5])
    assert info.value.n_classes == 2


def test_large_sparse_path_matches_dense_oracle():
    # 1000 states exceed the dense shortcut
    N = 999
    fm = gene_fast(N, 400)
    d = stationary_distribution(build_generator(fm))
    ref = oracles.stationary_dense(oracles.gene_fast_generator(N, 400))
    assert np.abs(d.p - ref).max() < 1e-10
    assert np.abs(d.p @ build_generator(fm).Q).max() <= 1e-10


def test_transient_identity_and_equilibration():
    g = build_generator(flip())
    p0 = point_mass(g.index, [0])
    assert np.array_equal(transient_solve(g, p0, 0.0).p, p0.p)
    late = transient_solve(g, p0, 50.0)
    assert np.abs(late.p - 0.5).max() <= 1e-8


def test_transient_matches_expm():
    m = load_model("toggle")
    g = build_generator(m, {"X1": 25, "X2": 25, "X3": 1})
    p0 = point_mass(g.index, m.init)
    t = 0.7
    got = transient_solve(g, p0, t)
    ref = p0.p @ scipy.linalg.expm(g.Q.toarray() * t)
    assert 0.5 * np.abs(got.p - ref).sum() <= 1e-9
    assert got.p.sum() == pytest.approx(1.0, abs=1e-10)
    assert np.all(got.p >= 0)


def test_stationary_is_fixed_point():
    m = load_model("toggle").with_params(init=[3, 3, 0], N=4)
    g = build_generator(m, {"X1": 20, "X2": 20, "X3": 12})
    pi = stationary_distribution(g)
    t = 10 / np.abs(g.Q).max()
    later = transient_solve(g, pi, t)
    assert np.abs(later.p - pi.p).sum() <= 1e-8


def test_distribution_helpers():
    g = build_generator(gene_fast(10, 5))
    d = stationary_distribution(g)
    values, probs = d.marginal("X2")
    assert values.tolist() == list(range(11))
    assert probs.sum() == pytest.approx(1.0)
    assert d.total_variation(d) == 0
    assert set(d.boundary_mass()) == {"X2"}
