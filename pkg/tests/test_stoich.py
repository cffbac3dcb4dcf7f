from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mpmkit import load_model
from mpmkit.ssa import RngSpec, simulate
from mpmkit.stoich import (
    NotReducibleError,
    RatMatrix,
    apply_linear_image,
    complete_basis,
    p_invariants,
    rank_codim,
    stoich_matrix,
    stoich_reduce,
)

# the fixture orients repression as active -> repressed, so columns 3 and 4
# are the negatives of the printed matrix; ranks and invariants coincide
GENE_S = [[0, 0, 1, -1], [0, 0, -1, 1], [1, -1, 0, 0]]


def test_gene_stoichiometry():
    m = load_model("gene")
    assert stoich_matrix(m).tolist() == GENE_S
    assert stoich_matrix(load_model("gene_reversed")).tolist() == [[0, 0, -1, 1], [0, 0, 1, -1], [1, -1, 0, 0]]
    assert stoich_matrix(m, [0]).tolist() == [[0], [0], [1]]


def test_gene_fast_block_on_reduced_vars():
    red, _ = stoich_reduce(load_model("gene"))
    Sf = stoich_matrix(red, [2, 3])
    assert Sf.tolist() == [[-1, 1], [0, 0]]
    assert rank_codim(Sf) == (1, 1)
    assert p_invariants(Sf) == [(0, 1)]
    printed = stoich_matrix(stoich_reduce(load_model("gene_reversed"))[0], [2, 3])
    assert printed.tolist() == [[1, -1], [0, 0]]
    assert p_invariants(printed) == [(0, 1)]


def test_rank_codim_and_invariants():
    assert rank_codim(GENE_S) == (2, 1)
    assert p_invariants(GENE_S) == [(1, 1, 0)]
    assert rank_codim(np.zeros((3, 2), dtype=int)) == (0, 3)
    assert p_invariants(np.eye(3, dtype=int)) == []


def test_toggle_has_no_invariants():
    S = stoich_matrix(load_model("toggle"))
    assert rank_codim(S) == (3, 0)


def test_complete_basis_examples():
    b = complete_basis(RatMatrix.from_columns([(1, 1, 0)], 3), 3)
    assert b.K == RatMatrix.from_columns([(0, 1, 0), (0, 0, 1)], 3)
    b2 = complete_basis(RatMatrix.from_columns([(0, 1)], 2), 2)
    assert b2.K == RatMatrix.from_columns([(1, 0)], 2)
    b3 = complete_basis(RatMatrix.identity(2), 2)
    assert b3.K.shape[1] == 0


def test_complete_basis_dependent_columns():
    with pytest.raises(ValueError):
        complete_basis(RatMatrix.from_columns([(1, 1, 0), (2, 2, 0)], 3), 3)


def test_stoich_reduce_gene():
    red, y0 = stoich_reduce(load_model("gene"))
    assert red.vars == ("X2", "X3")
    assert y0 == (Fraction(100),)
    assert red.updates.tolist() == [[0, 1], [0, -1], [-1, 0], [1, 0]]
    unbind = red.transitions[3]
    assert red.base_rates(np.array([[30, 0]]))[0, 3] == pytest.approx(1.0 * (100 - 30))
    assert "Y1" in unbind.rate_text


def test_not_reducible():
    with pytest.raises(NotReducibleError):
        stoich_reduce(load_model("toggle"))


def test_linear_image_with_gene_basis():
    m = load_model("gene")
    A = complete_basis(RatMatrix.from_columns([(1, 1, 0)], 3), 3).A
    img = apply_linear_image(m, A)
    assert img.updates[2, 0] == 0 and img.updates[3, 0] == 0
    assert img.init == (100, 0, 0)


def test_permutation_image_swaps():
    m = load_model("gene")
    P = RatMatrix([[0, 1, 0], [1, 0, 0], [0, 0, 1]])
    img = apply_linear_image(m, P, names=["B", "A", "C"])
    assert img.updates[:, [1, 0, 2]].tolist() == m.updates.tolist()
    x = np.array([[40, 60, 7]])
    assert np.allclose(img.base_rates(x[:, [1, 0, 2]]), m.base_rates(x))


def test_image_round_trip_restores_model():
    m = load_model("gene")
    A = complete_basis(RatMatrix.from_columns([(1, 1, 0)], 3), 3).A
    back = apply_linear_image(apply_linear_image(m, A), A.inverse(), names=m.vars)
    assert back.updates.tolist() == m.updates.tolist()
    rng = np.random.default_rng(4)
    x1 = rng.integers(0, 101, 100)
    states = np.stack([x1, 100 - x1, rng.integers(0, 300, 100)], axis=1)
    assert np.allclose(back.base_rates(states), m.base_rates(states), rtol=1e-13)


def test_invariant_conserved_along_ssa_path():
    m = load_model("gene")
    traj = simulate(m, 5 / m.eps, RngSpec(11))
    assert traj.n_events > 1000
    assert np.all(traj.states[:, 0] + traj.states[:, 1] == 100)


small_matrices = st.integers(1, 4).flatmap(
    lambda n: st.integers(1, 5).flatmap(
        lambda r: st.lists(st.lists(st.integers(-2, 2), min_size=r, max_size=r), min_size=n, max_size=n)
    )
)


@settings(max_examples=150, deadline=None)
@given(small_matrices)
def test_invariants_against_sympy(S):
    S = np.array(S, dtype=int)
    n = S.shape[0]
    rank, codim = rank_codim(S)
    assert rank == oracles.matrix_rank(S)
    assert rank + codim == n
    cs = p_invariants(S)
    assert len(cs) == codim
    for c in cs:
        assert np.all(np.array(c) @ S == 0)
        nz = [v for v in c if v]
        assert nz[0] > 0 and np.gcd.reduce(np.abs(nz)) == 1
    # same span as the independent null space
    if cs:
        ref = oracles.left_null_space(S)
        both = np.array(cs + ref)
        assert oracles.matrix_rank(both) == codim
