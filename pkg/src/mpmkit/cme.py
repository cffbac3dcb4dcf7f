"""Chemical master equation on a finite box of states.

Transitions that would leave the truncation box are dropped (reflecting
truncation), so probability is conserved and the result is exact whenever
the domain is already finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu
from scipy.stats import poisson

from .model import Model, ModelError

__all__ = [
    "StateSpaceIndex",
    "Generator",
    "Distribution",
    "StateSpaceOverflow",
    "AmbiguityError",
    "build_generator",
    "stationary_distribution",
    "transient_solve",
    "point_mass",
]

DEFAULT_LIMIT = 1_000_000


class StateSpaceOverflow(MemoryError):
    def __init__(self, size: int, limit: int):
        self.size = size
        self.limit = limit
        super().__init__(f"truncated state space has {size} states, limit is {limit}")


class AmbiguityError(RuntimeError):
    """More than one closed communicating class is reachable."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        super().__init__(f"{n_classes} closed communicating classes reachable; stationary law is not unique")


class StateSpaceIndex:
    """Bijection between the states of a box and ``0..size-1`` (C order)."""

    def __init__(self, vars: Sequence[str], lo: Sequence[int], hi: Sequence[int]):
        self.vars = tuple(vars)
        self.lo = np.asarray(lo, dtype=np.int64)
        self.hi = np.asarray(hi, dtype=np.int64)
        if np.any(self.hi < self.lo):
            raise ModelError("empty truncation box")
        self.shape = tuple(int(v) for v in self.hi - self.lo + 1)
        self.size = int(np.prod(self.shape, dtype=object))
        self.strides = np.array([int(np.prod(self.shape[i + 1 :], dtype=np.int64)) for i in range(len(self.shape))], dtype=np.int64)

    @property
    def n(self) -> int:
        return len(self.vars)

    def states(self) -> np.ndarray:
        grids = np.indices(self.shape).reshape(self.n, -1).T
        return grids + self.lo

    def index_of(self, states) -> np.ndarray:
        """Indices of the rows of ``states``; -1 for states outside the box."""
        states = np.atleast_2d(np.asarray(states, dtype=np.int64))
        rel = states - self.lo
        inside = np.all((rel >= 0) & (states <= self.hi), axis=1)
        idx = rel @ self.strides
        return np.where(inside, idx, -1)

    def state(self, i: int) -> tuple[int, ...]:
        return tuple(int(v) for v in np.unravel_index(i, self.shape) + self.lo)


@dataclass(frozen=True)
class Generator:
    index: StateSpaceIndex
    Q: sp.csr_matrix
    model: Model

    @property
    def size(self) -> int:
        return self.index.size

    @property
    def uniformization_rate(self) -> float:
        return float(-self.Q.diagonal().min()) if self.size else 0.0


@dataclass(frozen=True)
class Distribution:
    index: StateSpaceIndex
    p: np.ndarray

    def marginal(self, var: str) -> tuple[np.ndarray, np.ndarray]:
        i = self.index.vars.index(var)
        axes = tuple(k for k in range(self.index.n) if k != i)
        probs = self.p.reshape(self.index.shape).sum(axis=axes)
        values = np.arange(self.index.lo[i], self.index.hi[i] + 1)
        return values, probs

    def mean(self, var: str | None = None):
        if var is None:
            return self.p @ self.index.states()
        values, probs = self.marginal(var)
        return float(values @ probs)

    def expect(self, values: np.ndarray) -> float:
        """Expectation of a function given by its values on the state list."""
        return float(np.dot(self.p, values))

    def boundary_mass(self) -> dict[str, float]:
        """Probability on the upper face of each variable's box.

        A large value for a variable whose domain was truncated signals
        that the cap is too small.
        """
        out = {}
        for v in self.index.vars:
            values, probs = self.marginal(v)
            out[v] = float(probs[-1])
        return out

    def total_variation(self, other: "Distribution | np.ndarray") -> float:
        q = other.p if isinstance(other, Distribution) else np.asarray(other)
        return 0.5 * float(np.abs(self.p - q).sum())


def _box(m: Model, trunc: Mapping[str, int] | None) -> tuple[list[int], list[int]]:
    trunc = dict(trunc or {})
    unknown = set(trunc) - set(m.vars)
    if unknown:
        raise ModelError(f"truncation names unknown variables {sorted(unknown)}")
    lo, hi = [], []
    for i, v in enumerate(m.vars):
        l, h = m.lower[i], m.upper[i]
        if v in trunc:
            h = trunc[v] if h is None else min(h, trunc[v])
        if l is None or h is None:
            raise ModelError(f"variable {v} is unbounded; give a truncation cap")
        lo.append(l)
        hi.append(h)
    return lo, hi


def build_generator(
    m: Model,
    trunc: Mapping[str, int] | None = None,
    limit: int = DEFAULT_LIMIT,
    check_init: bool = True,
) -> Generator:
    """Sparse generator Q of ``m`` restricted to the truncation box.

    ``trunc`` maps variable names to upper caps; every unbounded variable
    needs one.
    """
    lo, hi = _box(m, trunc)
    index = StateSpaceIndex(m.vars, lo, hi)
    if index.size > limit:
        raise StateSpaceOverflow(index.size, limit)
    if check_init and index.index_of(m.init)[0] < 0:
        raise ModelError(f"initial state {m.init} lies outside the truncation box")
    states = index.states()
    rates = m.effective_rates(states)
    rows, cols, vals = [], [], []
    src = np.arange(index.size)
    for j in range(m.r):
        if not m.updates[j].any():
            continue
        dst = index.index_of(states + m.updates[j])
        keep = (dst >= 0) & (rates[:, j] > 0)
        rows.append(src[keep])
        cols.append(dst[keep])
        vals.append(rates[keep, j])
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    off = sp.csr_matrix((vals, (rows, cols)), shape=(index.size, index.size))
    off.sum_duplicates()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    Q = (off + sp.diags(diag)).tocsr()
    return Generator(index=index, Q=Q, model=m)


def point_mass(index: StateSpaceIndex, state: Sequence[int]) -> Distribution:
    i = index.index_of(state)[0]
    if i < 0:
        raise ModelError(f"state {tuple(state)} outside the truncation box")
    p = np.zeros(index.size)
    p[i] = 1.0
    return Distribution(index, p)


def _closed_class(g: Generator, start: int) -> np.ndarray:
    adj = g.Q.copy()
    adj.setdiag(0)
    adj.eliminate_zeros()
    ncomp, labels = csgraph.connected_components(adj, directed=True, connection="strong")
    reach = csgraph.breadth_first_order(adj, start, directed=True, return_predecessors=False)
    # a class is closed when no edge leaves it
    coo = adj.tocoo()
    leaving = np.zeros(ncomp, dtype=bool)
    cross = labels[coo.row] != labels[coo.col]
    leaving[labels[coo.row[cross]]] = True
    closed = sorted({int(c) for c in labels[reach] if not leaving[c]})
    if len(closed) != 1:
        raise AmbiguityError(len(closed))
    return np.nonzero(labels == closed[0])[0]


def _pinned_solve(At: sp.csr_matrix, k: int, tol: float) -> np.ndarray | None:
    """Balance equations with ``pi[k] = 1`` and equation ``k`` dropped.

    This is the normalization-row system solved up to scale, and it keeps
    the matrix free of a dense row.
    """
    size = At.shape[0]
    rest = np.r_[0:k, k + 1 : size]
    A = At[rest][:, rest].tocsc()
    b = -np.asarray(At[rest][:, [k]].todense()).ravel()
    try:
        lu = splu(A)
    except RuntimeError:
        return None
    pi = np.empty(size)
    pi[k] = 1.0
    pi[rest] = lu.solve(b)
    for _ in range(4):
        r = At @ pi
        if np.abs(r).max() <= tol * 0.1 * np.abs(pi).max():
            break
        pi[rest] -= lu.solve(r[rest])
    if not np.all(np.isfinite(pi)):
        return None
    return pi


def _dense_solve(Qc: sp.spmatrix) -> np.ndarray | None:
    # small classes: normalization row in place of the last balance equation
    A = Qc.T.toarray()
    A[-1] = 1.0
    b = np.zeros(A.shape[0])
    b[-1] = 1.0
    try:
        pi = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return None
    pi -= np.linalg.solve(A, A @ pi - b)
    return pi if np.all(np.isfinite(pi)) else None


DENSE_LIMIT = 400


def stationary_distribution(g: Generator, start: Sequence[int] | None = None, tol: float = 1e-10) -> Distribution:
    """Solve ``pi Q = 0``, ``sum(pi) = 1`` on the closed class reachable from ``start``.

    ``start`` defaults to the model's initial state.  One balance equation
    is redundant and is traded for the normalization; a few steps of
    iterative refinement bring the residual ``max|pi Q|`` below ``tol``.
    """
    start = g.model.init if start is None else start
    s = g.index.index_of(start)[0]
    if s < 0:
        raise ModelError(f"start state {tuple(start)} outside the truncation box")
    members = _closed_class(g, s)
    p = np.zeros(g.size)
    if len(members) == 1:
        p[members[0]] = 1.0
        return Distribution(g.index, p)
    Qc = g.Q[members][:, members].tocsc()
    pi = _dense_solve(Qc) if len(members) <= DENSE_LIMIT else None
    if pi is not None and np.abs(Qc.T @ pi).max() <= tol:
        pi = np.maximum(pi, 0.0)
        p[members] = pi / pi.sum()
        return Distribution(g.index, p)
    At = Qc.T.tocsr()
    # start from the slowest-exiting state, then re-pin at the mode if the
    # first choice turned out to carry negligible mass
    k = int(np.argmin(-Qc.diagonal()))
    pi = _pinned_solve(At, k, tol)
    if pi is None or pi[k] < 1e-8 * pi.max():
        k2 = int(np.argmax(pi)) if pi is not None else int(np.argmax(-Qc.diagonal()))
        pi2 = _pinned_solve(At, k2, tol)
        pi = pi2 if pi2 is not None else pi
    if pi is None:
        raise ArithmeticError("stationary solve failed: singular balance equations")
    pi /= pi.sum()
    pi = np.maximum(pi, 0.0)
    pi /= pi.sum()
    resid = np.abs(Qc.T @ pi).max()
    if resid > tol:
        raise ArithmeticError(f"stationary residual {resid:.3g} exceeds {tol:g}")
    p[members] = pi
    return Distribution(g.index, p)


def transient_solve(g: Generator, p0, t: float, tol: float = 1e-10) -> Distribution:
    """``p0 exp(Q t)`` by uniformization.

    The Poisson series is cut on both sides so that the discarded weight is
    at most ``tol``, which bounds the total-variation error by ``tol``.
    ``p0`` may be a :class:`Distribution`, a probability vector or a state.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    if isinstance(p0, Distribution):
        v = p0.p.astype(float).copy()
    else:
        arr = np.asarray(p0)
        if arr.ndim == 1 and arr.shape[0] == g.index.n and arr.dtype.kind in "iu" and g.size != g.index.n:
            v = point_mass(g.index, arr).p
        else:
            v = arr.astype(float).copy()
    if v.shape != (g.size,):
        raise ValueError(f"initial distribution has shape {v.shape}, expected ({g.size},)")
    lam = g.uniformization_rate
    if t == 0 or lam == 0:
        return Distribution(g.index, v)
    lam *= 1.02  # strictly positive self-loop everywhere: aperiodic P
    mu = lam * t
    left = int(poisson.ppf(tol / 2, mu)) if mu > 25 else 0
    right = int(poisson.isf(tol / 2, mu)) + 1
    ks = np.arange(left, right + 1)
    w = poisson.pmf(ks, mu)
    PT = (sp.identity(g.size, format="csr") + g.Q / lam).T.tocsr()
    out = np.zeros_like(v)
    for _ in range(left):
        v = PT @ v
    for wk in w:
        out += wk * v
        v = PT @ v
    out /= w.sum()
    out[(out < 0) & (out >= -1e-12)] = 0.0
    out = np.maximum(out, 0.0)
    out /= out.sum()
    return Distribution(g.index, out)
