"""Exact stoichiometric linear algebra and linear images of models.

All null spaces, ranks and inverses are computed over the rationals with
:class:`fractions.Fraction`, so nothing here depends on a floating point
tolerance.  Conversion to floats happens only when rates are built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import expr as ex
from .model import Model, ModelError, TabulatedRate, Transition

__all__ = [
    "RatMatrix",
    "Basis",
    "NotReducibleError",
    "stoich_matrix",
    "rank_codim",
    "p_invariants",
    "complete_basis",
    "apply_linear_image",
    "stoich_reduce",
    "image_model",
]


class NotReducibleError(ValueError):
    """The stoichiometry has full row rank, so there is nothing to eliminate."""


def _frac(v) -> Fraction:
    if isinstance(v, Fraction):
        return v
    if isinstance(v, (int, np.integer)):
        return Fraction(int(v))
    return Fraction(v)


class RatMatrix:
    """Small immutable matrix of exact rationals."""

    __slots__ = ("rows", "shape")

    def __init__(self, rows: Iterable[Iterable]):
        self.rows = tuple(tuple(_frac(v) for v in row) for row in rows)
        ncols = len(self.rows[0]) if self.rows else 0
        if any(len(row) != ncols for row in self.rows):
            raise ValueError("ragged matrix")
        self.shape = (len(self.rows), ncols)

    @classmethod
    def from_columns(cls, cols: Sequence[Sequence], nrows: int | None = None) -> "RatMatrix":
        cols = [tuple(c) for c in cols]
        if not cols:
            return cls([[] for _ in range(nrows or 0)])
        return cls(zip(*cols))

    @classmethod
    def identity(cls, n: int) -> "RatMatrix":
        return cls([[1 if i == j else 0 for j in range(n)] for i in range(n)])

    @property
    def T(self) -> "RatMatrix":
        if self.shape[0] == 0:
            return RatMatrix([])
        return RatMatrix(zip(*self.rows)) if self.shape[1] else RatMatrix([])

    def columns(self) -> list[tuple[Fraction, ...]]:
        return [tuple(row[j] for row in self.rows) for j in range(self.shape[1])]

    def __matmul__(self, other):
        if isinstance(other, RatMatrix):
            cols = other.columns()
            return RatMatrix([[sum((a * b for a, b in zip(row, col)), Fraction(0)) for col in cols] for row in self.rows])
        vec = [_frac(v) for v in other]
        return tuple(sum((a * b for a, b in zip(row, vec)), Fraction(0)) for row in self.rows)

    def __eq__(self, other):
        return isinstance(other, RatMatrix) and self.rows == other.rows

    def __hash__(self):
        return hash(self.rows)

    def __repr__(self):
        return f"RatMatrix({[[str(v) for v in row] for row in self.rows]})"

    def hstack(self, other: "RatMatrix") -> "RatMatrix":
        return RatMatrix(a + b for a, b in zip(self.rows, other.rows))

    def rank(self) -> int:
        return len(_rref(self.rows)[1])

    def inverse(self) -> "RatMatrix":
        n, m = self.shape
        if n != m:
            raise ValueError("inverse of non-square matrix")
        aug = [list(row) + [Fraction(int(i == j)) for j in range(n)] for i, row in enumerate(self.rows)]
        red, pivots = _rref(aug)
        if pivots[:n] != list(range(n)) or len(pivots) < n or any(p >= n for p in pivots[:n]):
            raise ValueError("matrix is singular")
        return RatMatrix(row[n:] for row in red)

    def is_integer(self) -> bool:
        return all(v.denominator == 1 for row in self.rows for v in row)

    def to_float(self) -> np.ndarray:
        return np.array([[float(v) for v in row] for row in self.rows], dtype=float).reshape(self.shape)

    def to_int(self) -> np.ndarray:
        if not self.is_integer():
            raise ValueError("matrix has non-integer entries")
        return np.array([[int(v) for v in row] for row in self.rows], dtype=np.int64).reshape(self.shape)


def _rref(rows) -> tuple[list[list[Fraction]], list[int]]:
    """Reduced row echelon form over Q; returns (matrix, pivot columns)."""
    a = [[_frac(v) for v in row] for row in rows]
    if not a:
        return a, []
    nrows, ncols = len(a), len(a[0])
    pivots: list[int] = []
    r = 0
    for c in range(ncols):
        if r == nrows:
            break
        p = next((i for i in range(r, nrows) if a[i][c] != 0), None)
        if p is None:
            continue
        a[r], a[p] = a[p], a[r]
        inv = 1 / a[r][c]
        a[r] = [v * inv for v in a[r]]
        for i in range(nrows):
            if i != r and a[i][c] != 0:
                f = a[i][c]
                a[i] = [vi - f * vr for vi, vr in zip(a[i], a[r])]
        pivots.append(c)
        r += 1
    return a, pivots


def _null_space(rows, ncols: int) -> list[list[Fraction]]:
    """Basis of {x : rows @ x = 0}, one vector per free column, in column order."""
    red, pivots = _rref(rows) if rows else ([], [])
    free = [c for c in range(ncols) if c not in pivots]
    basis = []
    for f in free:
        v = [Fraction(0)] * ncols
        v[f] = Fraction(1)
        for row, p in zip(red, pivots):
            v[p] = -row[f]
        basis.append(v)
    return basis


def _primitive(v: Sequence[Fraction]) -> tuple[int, ...]:
    """Scale to integers with gcd 1 and a positive first nonzero entry."""
    lcm = 1
    for x in v:
        lcm = lcm * x.denominator // math.gcd(lcm, x.denominator)
    ints = [int(x * lcm) for x in v]
    g = 0
    for x in ints:
        g = math.gcd(g, abs(x))
    g = g or 1
    ints = [x // g for x in ints]
    first = next((x for x in ints if x != 0), 0)
    if first < 0:
        ints = [-x for x in ints]
    return tuple(ints)


@dataclass(frozen=True)
class Basis:
    """Columns of C span the conserved directions; K completes them to a basis."""

    C: RatMatrix
    K: RatMatrix

    @property
    def A(self) -> RatMatrix:
        return self.C.hstack(self.K)


# ---------------------------------------------------------------------------
# operations


def stoich_matrix(m: Model, subset: Iterable[int] | None = None, rows: Iterable[int] | None = None) -> np.ndarray:
    """n x |subset| integer matrix of update vectors, in model order.

    ``rows`` optionally restricts to a subset of variables.
    """
    subset = list(range(m.r)) if subset is None else sorted(subset)
    if not subset:
        raise ValueError("empty transition subset")
    for j in subset:
        if not 0 <= j < m.r:
            raise IndexError(f"transition index {j} out of range")
    S = m.updates[subset].T.copy()
    if rows is not None:
        S = S[list(rows)]
    return S


def rank_codim(S) -> tuple[int, int]:
    S = np.atleast_2d(np.asarray(S))
    n = S.shape[0]
    rank = len(_rref(S.tolist())[1]) if S.size else 0
    return rank, n - rank


def p_invariants(S) -> list[tuple[int, ...]]:
    """Integer basis of the left null space {c : c^T S = 0}."""
    S = np.atleast_2d(np.asarray(S))
    n = S.shape[0]
    if S.size == 0:
        return [_primitive([Fraction(int(i == j)) for j in range(n)]) for i in range(n)]
    return [_primitive(v) for v in _null_space(S.T.tolist(), n)]


def complete_basis(C, n: int) -> Basis:
    """Complete the columns of ``C`` with unit vectors to a basis of Q^n.

    The unit vectors used are those of the non-pivot coordinates of the
    reduced echelon form of ``C^T``, in increasing order, so each conserved
    quantity eliminates the lowest-indexed variable it involves.
    """
    if not isinstance(C, RatMatrix):
        cols = [tuple(c) for c in C]
        C = RatMatrix.from_columns(cols, n) if cols else RatMatrix([[] for _ in range(n)])
    if C.shape[0] != n:
        raise ValueError(f"C has {C.shape[0]} rows, expected {n}")
    m = C.shape[1]
    if m:
        _, pivots = _rref(C.T.rows)
        if len(pivots) != m:
            raise ValueError("columns of C are linearly dependent")
    else:
        pivots = []
    free = [i for i in range(n) if i not in pivots]
    K = RatMatrix.from_columns([[int(i == f) for i in range(n)] for f in free], n) if free else RatMatrix([[] for _ in range(n)])
    basis = Basis(C, K)
    if m + len(free) != n or basis.A.rank() != n:
        raise AssertionError("basis completion failed")
    return basis


# ---------------------------------------------------------------------------
# linear images


def _fresh(name: str, taken: set[str]) -> str:
    cand = name
    k = 1
    while cand in taken:
        k += 1
        cand = f"{name}_{k}"
    taken.add(cand)
    return cand


def _unit_index(col: Sequence[Fraction]) -> int | None:
    nz = [i for i, v in enumerate(col) if v != 0]
    if len(nz) == 1 and col[nz[0]] == 1:
        return nz[0]
    return None


def _interval_bound(values, coef, lo_i, hi_i):
    """Range of coef * x for x in [lo_i, hi_i] (None = infinite)."""
    if coef == 0:
        return Fraction(0), Fraction(0)
    a, b = lo_i, hi_i
    if coef > 0:
        return (None if a is None else coef * a), (None if b is None else coef * b)
    return (None if b is None else coef * b), (None if a is None else coef * a)


def image_model(
    m: Model,
    A: RatMatrix,
    keep: Sequence[int] | None = None,
    fixed_values: Mapping[int, float] | None = None,
    transitions: Sequence[int] | None = None,
    names: Sequence[str] | None = None,
    fixed_names: Mapping[int, str] | None = None,
    name: str | None = None,
    init: Sequence[int] | None = None,
) -> Model:
    """Model in coordinates ``y = A^T x``.

    Coordinates listed in ``keep`` become variables; the others are held at
    ``fixed_values`` and enter the rates as parameters.  Only ``transitions``
    are kept, and each must leave the fixed coordinates unchanged.
    """
    n = m.n
    if A.shape != (n, n):
        raise ValueError(f"A must be {n}x{n}")
    try:
        B = A.T.inverse()  # x = B y
    except ValueError as exc:
        raise ValueError("linear image matrix is singular") from exc
    keep = list(range(n)) if keep is None else list(keep)
    fixed = [j for j in range(n) if j not in keep]
    fixed_values = dict(fixed_values or {})
    if set(fixed) != set(fixed_values):
        raise ValueError("every eliminated coordinate needs a fixed value")
    transitions = list(range(m.r)) if transitions is None else list(transitions)
    cols = A.columns()

    taken = set(m.params)
    coord_names: dict[int, str] = {}
    for pos, j in enumerate(keep):
        if names is not None:
            coord_names[j] = _fresh(names[pos], taken)
        else:
            u = _unit_index(cols[j])
            coord_names[j] = _fresh(m.vars[u] if u is not None else f"Y{j + 1}", taken)
    for j in fixed:
        label = (fixed_names or {}).get(j, f"Y{j + 1}")
        coord_names[j] = _fresh(label, taken | set(coord_names.values()))

    # original variables in terms of new coordinates
    subs = {}
    for i, v in enumerate(m.vars):
        subs[v] = ex.linear_combination((B.rows[i][j], coord_names[j]) for j in range(n))

    new_trans = []
    for k in transitions:
        t = m.transitions[k]
        if isinstance(t.rate, TabulatedRate):
            raise ModelError("tabulated rates cannot be transformed")
        mu = A.T @ t.update
        for j in fixed:
            if mu[j] != 0:
                raise ValueError(f"transition {t.label!r} changes eliminated coordinate {coord_names[j]}")
        if any(mu[j].denominator != 1 for j in keep):
            raise ValueError(f"transition {t.label!r} has non-integer image update {[str(mu[j]) for j in keep]}")
        new_trans.append(Transition(t.label, tuple(int(mu[j]) for j in keep), ex.substitute(t.rate, subs), t.scale))

    # domain: interval hull of the image box, tightened by variables that
    # depend on a single kept coordinate
    lo_x, hi_x = m.lower, m.upper
    domain = []
    for j in keep:
        lo_acc, hi_acc = Fraction(0), Fraction(0)
        for i in range(n):
            lo_t, hi_t = _interval_bound(None, cols[j][i], lo_x[i], hi_x[i])
            lo_acc = None if (lo_acc is None or lo_t is None) else lo_acc + lo_t
            hi_acc = None if (hi_acc is None or hi_t is None) else hi_acc + hi_t
        for i in range(n):
            kept_nz = [jj for jj in keep if B.rows[i][jj] != 0]
            if kept_nz != [j]:
                continue
            b = B.rows[i][j]
            offset = sum((B.rows[i][jj] * Fraction(fixed_values[jj]) for jj in fixed), Fraction(0))
            # lo_i <= offset + b*y <= hi_i
            bounds = []
            for xb in (lo_x[i], hi_x[i]):
                bounds.append(None if xb is None else (xb - offset) / b)
            ylo, yhi = (bounds[0], bounds[1]) if b > 0 else (bounds[1], bounds[0])
            if ylo is not None:
                lo_acc = ylo if lo_acc is None else max(lo_acc, ylo)
            if yhi is not None:
                hi_acc = yhi if hi_acc is None else min(hi_acc, yhi)
        lo_int = None if lo_acc is None else math.ceil(lo_acc - Fraction(1, 10**9))
        hi_int = None if hi_acc is None else math.floor(hi_acc + Fraction(1, 10**9))
        domain.append((lo_int, hi_int))

    params = dict(m.params)
    for j in fixed:
        params[coord_names[j]] = float(fixed_values[j])
    extensive = tuple(m.extensive) + tuple(coord_names[j] for j in fixed)

    if init is None:
        y0 = A.T @ m.init
        bad = [j for j in keep if y0[j].denominator != 1]
        if bad:
            raise ValueError("initial state maps to non-integer coordinates")
        init = [int(y0[j]) for j in keep]
    init = list(init)
    for pos, (lo, hi) in enumerate(domain):
        if lo is not None and init[pos] < lo:
            init[pos] = lo
        if hi is not None and init[pos] > hi:
            init[pos] = hi

    return Model(
        name=name or m.name,
        vars=tuple(coord_names[j] for j in keep),
        domain=tuple(domain),
        transitions=tuple(new_trans),
        params=params,
        init=tuple(init),
        extensive=extensive,
    )


def apply_linear_image(m: Model, A, names: Sequence[str] | None = None) -> Model:
    """The L-image of ``m`` for the invertible map ``y = A^T x``.

    Updates map to ``A^T nu`` (which must be integral) and rates to
    ``W'(y) = W(A^{-T} y)``.
    """
    if not isinstance(A, RatMatrix):
        A = RatMatrix(A)
    y0 = A.T @ m.init
    if any(v.denominator != 1 for v in y0):
        raise ValueError("initial state maps to non-integer coordinates")
    return image_model(m, A, names=names)


def stoich_reduce(m: Model) -> tuple[Model, tuple[Fraction, ...]]:
    """Eliminate the p-invariants of ``m``.

    Returns the reduced model over ``Z = K^T X`` and the invariant values
    ``Y0 = C^T X0``, which enter the reduced rates as (extensive) parameters.
    """
    S = stoich_matrix(m)
    cs = p_invariants(S)
    if not cs:
        raise NotReducibleError(f"stoichiometry of {m.name!r} has codimension 0")
    basis = complete_basis(RatMatrix.from_columns(cs, m.n), m.n)
    A = basis.A
    mdim = len(cs)
    y0 = basis.C.T @ m.init
    fixed_values = {j: y0[j] for j in range(mdim)}
    reduced = image_model(
        m,
        A,
        keep=list(range(mdim, m.n)),
        fixed_values=fixed_values,
        name=f"{m.name} (stoichiometry reduced)",
    )
    return reduced, tuple(y0)
