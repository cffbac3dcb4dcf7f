"""Independent reference computations for the test suite.

Nothing here calls the package's solvers.  Generators are built by hand
from the model definitions, linear systems are solved densely, ODEs go
through scipy's implicit integrators and exact null spaces come from sympy.
"""

from __future__ import annotations

import numpy as np
import sympy
from scipy.integrate import solve_ivp
from scipy.optimize import brentq
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import expm_multiply


# -- dense stationary laws ----------------------------------------------------


def stationary_dense(Q: np.ndarray) -> np.ndarray:
    """pi with pi Q = 0 and sum(pi) = 1, by least squares on the stacked system."""
    n = Q.shape[0]
    A = np.vstack([Q.T, np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    return pi


def gene_fast_generator(N: int, Y: float, k_u: float = 1.0, k_b: float = 1.0) -> np.ndarray:
    """Active-gene count Z in 0..N at frozen protein count Y.

    Unbinding adds an active gene at rate k_u (N - Z); repression removes
    one at rate k_b Y Z / N.
    """
    Q = np.zeros((N + 1, N + 1))
    for z in range(N + 1):
        if z < N:
            Q[z, z + 1] = k_u * (N - z)
        if z > 0:
            Q[z, z - 1] = k_b * Y * z / N
        Q[z, z] = -Q[z].sum()
    return Q


def gene_fast_mean(N: int, Y: float, k_u: float = 1.0, k_b: float = 1.0) -> float:
    if Y == 0:
        # no repression: every gene ends up active
        return float(N)
    pi = stationary_dense(gene_fast_generator(N, Y, k_u, k_b))
    return float(np.arange(N + 1) @ pi)


def gene_mean_formula(N: int, Y: float, k_u: float = 1.0, k_b: float = 1.0) -> float:
    return N * k_u / (k_u + k_b * Y / N)


# -- gene CMEs for the time-scale check ----------------------------------------


def gene_full_generator(N, eps, cap, k_p=1.0, k_d=1.0, k_b=1.0, k_u=1.0):
    """States (Z, Y) = (active genes, protein) with Y <= cap; moves past the cap are dropped."""
    size = (N + 1) * (cap + 1)
    idx = lambda z, y: z * (cap + 1) + y
    rows, cols, vals = [], [], []

    def add(a, b, r):
        if r > 0:
            rows.append(a)
            cols.append(b)
            vals.append(r)

    for z in range(N + 1):
        for y in range(cap + 1):
            i = idx(z, y)
            if y < cap:
                add(i, idx(z, y + 1), eps * k_p * z)
            if y > 0:
                add(i, idx(z, y - 1), eps * k_d * y)
            if z > 0:
                add(i, idx(z - 1, y), k_b * z * y / N)
            if z < N:
                add(i, idx(z + 1, y), k_u * (N - z))
    Q = csr_matrix((vals, (rows, cols)), shape=(size, size))
    Q = Q - csr_matrix((np.asarray(Q.sum(axis=1)).ravel(), (np.arange(size), np.arange(size))), shape=(size, size))
    return Q, idx


def gene_reduced_generator(N, cap, k_p=1.0, k_d=1.0, k_b=1.0, k_u=1.0):
    """Birth-death chain in the protein count with averaged production."""
    Q = np.zeros((cap + 1, cap + 1))
    for y in range(cap + 1):
        if y < cap:
            Q[y, y + 1] = k_p * N * k_u / (k_u + k_b * y / N)
        if y > 0:
            Q[y, y - 1] = k_d * y
        Q[y, y] = -Q[y].sum()
    return csr_matrix(Q)


def transient(Q, p0: np.ndarray, t: float) -> np.ndarray:
    return expm_multiply(Q.T * t, p0)


# -- ODE references --------------------------------------------------------------


def gene_full_ode(eps, taus, k_p=1.0, k_d=1.0, k_b=1.0, k_u=1.0):
    """Protein density of the full mean-field ODE at slow times ``taus`` (start: all genes repressed)."""

    def rhs(_t, v):
        z, y = v
        return [k_u * (1 - z) - k_b * y * z, eps * (k_p * z - k_d * y)]

    t = np.asarray(taus) / eps
    sol = solve_ivp(rhs, (0, t[-1]), [0.0, 0.0], method="Radau", t_eval=t, rtol=1e-12, atol=1e-14)
    return sol.y[1]


def gene_reduced_ode(taus, y0=0.0, k_p=1.0, k_d=1.0, k_b=1.0, k_u=1.0):
    rhs = lambda _t, y: [k_p * k_u / (k_u + k_b * y[0]) - k_d * y[0]]
    sol = solve_ivp(rhs, (0, taus[-1]), [y0], method="Radau", t_eval=taus, rtol=1e-12, atol=1e-14)
    return sol.y[0]


def gene_full_ode_dense(T, eps=1.0, x0=(1.0, 0.0, 0.0), k_p=1.0, k_d=1.0, k_b=1.0, k_u=1.0):
    """All three densities of the full gene ODE on ordinary time, as a callable."""

    def rhs(_t, x):
        x1, x2, x3 = x
        flux = k_b * x2 * x3 - k_u * x1
        return [flux, -flux, eps * (k_p * x2 - k_d * x3)]

    sol = solve_ivp(rhs, (0, T), list(x0), method="Radau", dense_output=True, rtol=1e-12, atol=1e-14)
    return sol.sol


# -- toggle fixed points ---------------------------------------------------------


def toggle_fixed_points(alpha=10.0, beta=1.4):
    """Low, middle and high roots of x = alpha / (1 + (alpha / (1 + x^beta))^beta)."""
    g = lambda x: x - alpha / (1 + (alpha / (1 + x**beta)) ** beta)
    xs = np.linspace(1e-6, alpha, 20001)
    vals = g(xs)
    roots = [brentq(g, a, b, xtol=1e-14) for a, b, fa, fb in zip(xs[:-1], xs[1:], vals[:-1], vals[1:]) if fa * fb < 0]
    return sorted(roots)


# -- exact null spaces -------------------------------------------------------------


def left_null_space(S) -> list[tuple[int, ...]]:
    """Integer basis of {c : c^T S = 0}, gcd 1, first nonzero entry positive."""
    M = sympy.Matrix(np.asarray(S).tolist())
    out = []
    for v in M.T.nullspace():
        den = sympy.ilcm(1, *[sympy.fraction(e)[1] for e in v])
        ints = [int(e * den) for e in v]
        g = int(np.gcd.reduce([abs(i) for i in ints if i]))
        ints = [i // g for i in ints]
        first = next(i for i in ints if i)
        out.append(tuple(i if first > 0 else -i for i in ints))
    return out


def matrix_rank(S) -> int:
    return sympy.Matrix(np.asarray(S).tolist()).rank()
