"""Mean-field limit: normalized rates, drift, ODE integration and equilibria."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import RK45
from scipy.stats import qmc

from .model import Model, ModelError, TabulatedRate

__all__ = [
    "DriftField",
    "OdeSolution",
    "Equilibrium",
    "EquilibriumSet",
    "NotDensityDependentError",
    "StiffnessError",
    "limit_rates",
    "integrate",
    "find_equilibria",
    "jacobian",
    "classify",
]

N_REF = 1e6
TOL_EIG = 1e-8


class NotDensityDependentError(ModelError):
    def __init__(self, label: str, detail: str):
        self.label = label
        super().__init__(f"transition {label!r} is not density dependent: {detail}")


class StiffnessError(RuntimeError):
    pass


class DriftField:
    """Drift ``F(x) = sum_j nu_j s_j w_j(x)`` of a normalized model.

    ``w_j(x) = W0_j(N_ref x) / N_ref`` are the limit rates and ``s_j`` is
    ``eps`` for slow transitions, 1 otherwise.  ``eps`` defaults to the
    model's value but can be overridden per call.
    """

    def __init__(self, model: Model, n_ref: float = N_REF):
        self.model = model
        self.n_ref = float(n_ref)
        self.n = model.n
        self.vars = model.vars
        self.updates = model.updates.astype(float)
        self.slow = np.array([t.scale == "slow" for t in model.transitions])
        self._params = _scaled_params(model, self.n_ref)

    def base(self, x) -> np.ndarray:
        """Limit base rates w0, shape (r,) for one point or (S, r) for rows."""
        x = np.asarray(x, dtype=float)
        out = self.model.base_rates(np.atleast_2d(x) * self.n_ref, self._params) / self.n_ref
        return out[0] if x.ndim == 1 else out

    def scales(self, eps: float | None = None) -> np.ndarray:
        eps = self.model.eps if eps is None else eps
        return np.where(self.slow, eps, 1.0)

    def rates(self, x, eps: float | None = None) -> np.ndarray:
        return self.base(x) * self.scales(eps)

    def __call__(self, x, eps: float | None = None) -> np.ndarray:
        return self.rates(x, eps) @ self.updates

    def with_eps(self, eps: float) -> Callable[[np.ndarray], np.ndarray]:
        return lambda x: self(x, eps)


def _scaled_params(m: Model, n_ref: float) -> dict[str, float]:
    params = dict(m.params)
    for k in m.extensive:
        params[k] = m.params[k] * n_ref / m.N
    params["N"] = n_ref
    return params


def _probe_box(m: Model) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([0.0 if v is None else v / m.N for v in m.lower])
    hi = np.array([max(2.0, 2.0 * x0 / m.N) if v is None else v / m.N for v, x0 in zip(m.upper, m.init)])
    return lo, hi


def limit_rates(m: Model, n_ref: float = N_REF, probes: int = 20, seed: int = 0) -> DriftField:
    """Normalized limit rates, checked for density dependence.

    At ``probes`` seeded random points of the normalized domain the rates at
    ``n_ref`` and ``2 n_ref`` must agree within ``1e-6 (1 + |w|)``.
    """
    for t in m.transitions:
        if isinstance(t.rate, TabulatedRate):
            raise NotDensityDependentError(t.label, "tabulated rates have no size scaling")
    f = DriftField(m, n_ref)
    f2 = DriftField(m, 2 * n_ref)
    lo, hi = _probe_box(m)
    rng = np.random.default_rng(seed)
    pts = lo + (hi - lo) * rng.random((probes, m.n))
    w1, w2 = f.base(pts), f2.base(pts)
    for j, t in enumerate(m.transitions):
        a, b = w1[:, j], w2[:, j]
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise NotDensityDependentError(t.label, "non-finite normalized rate at a probe point")
        bad = np.abs(b - a) > 1e-6 * (1 + np.abs(a))
        if bad.any():
            k = int(np.argmax(bad))
            raise NotDensityDependentError(
                t.label, f"W(Nx)/N changes from {a[k]:.6g} to {b[k]:.6g} when N doubles at x={pts[k].round(4).tolist()}"
            )
    return f


# ---------------------------------------------------------------------------
# integration


@dataclass
class OdeSolution:
    t: np.ndarray
    x: np.ndarray  # (len(t), n)
    steps: int
    rejected: int
    tol: float

    @property
    def final(self) -> np.ndarray:
        return self.x[-1]


def integrate(
    f: Callable[[np.ndarray], np.ndarray],
    x0: Sequence[float],
    T: float,
    tol: float = 1e-10,
    grid: int | Sequence[float] = 201,
    on_step: Callable[[float, np.ndarray], None] | None = None,
    max_steps: int = 2_000_000,
) -> OdeSolution:
    """Integrate ``dx/dt = f(x)`` on ``[0, T]`` with Dormand-Prince 5(4).

    Steps are accepted when the embedded error estimate is within
    ``tol * (1 + |x|)`` (RMS over components).  ``grid`` is a point count or
    explicit times; values there come from the method's dense output.
    ``on_step(t, x)`` runs after every accepted step.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    x0 = np.asarray(x0, dtype=float)
    grid = np.linspace(0.0, T, int(grid)) if np.isscalar(grid) else np.asarray(grid, dtype=float)
    out = np.empty((len(grid), x0.size))
    k = 0
    while k < len(grid) and grid[k] <= 0.0:
        out[k] = x0
        k += 1
    if T <= 0:
        out[k:] = x0
        return OdeSolution(grid, out, 0, 0, tol)

    def rhs(_t, y):
        return np.asarray(f(y), dtype=float)

    solver = RK45(rhs, 0.0, x0, T, rtol=tol, atol=tol)
    steps = 0
    while solver.status == "running":
        msg = solver.step()
        if solver.status == "failed":
            raise StiffnessError(
                f"step size underflow at t={solver.t:.6g} ({msg}); the problem looks stiff, "
                "consider the quasi-equilibrium reduction instead"
            )
        steps += 1
        if not np.all(np.isfinite(solver.y)):
            raise FloatingPointError(f"non-finite state at t={solver.t:.6g}")
        if on_step is not None:
            on_step(solver.t, solver.y)
        if k < len(grid) and grid[k] <= solver.t:
            dense = solver.dense_output()
            while k < len(grid) and grid[k] <= solver.t:
                out[k] = dense(grid[k])
                k += 1
        if steps >= max_steps:
            raise StiffnessError(f"more than {max_steps} steps before t={T:g}; the problem looks stiff")
    out[k:] = solver.y
    # every attempt costs 6 evaluations (first-same-as-last); 2 go to the initial step choice
    rejected = max(0, (solver.nfev - 2) // 6 - steps)
    return OdeSolution(grid, out, steps, rejected, tol)


# ---------------------------------------------------------------------------
# equilibria


def jacobian(f: Callable[[np.ndarray], np.ndarray], x, rel_step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian with step ``rel_step * (1 + |x_i|)``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    J = np.empty((np.asarray(f(x)).size, n))
    for i in range(n):
        h = rel_step * (1 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * h)
    return J


def classify(eigenvalues: np.ndarray, tol_eig: float = TOL_EIG) -> str:
    re = np.real(eigenvalues)
    if np.all(re < -tol_eig):
        return "stable"
    if np.any(re > tol_eig):
        return "unstable"
    return "marginal"


@dataclass
class Equilibrium:
    x: np.ndarray
    residual: float
    stability: str
    eigenvalues: np.ndarray = field(repr=False)


class EquilibriumSet(list):
    """List of equilibria with a diagnostic message."""

    def __init__(self, items=(), diagnostic: str = "", converged_starts: int = 0):
        super().__init__(items)
        self.diagnostic = diagnostic
        self.converged_starts = converged_starts

    def by_stability(self, kind: str) -> list[Equilibrium]:
        return [e for e in self if e.stability == kind]


def _newton(f, x, tol, lo, hi, max_iter=100):
    fx = np.asarray(f(x), dtype=float)
    norm = np.max(np.abs(fx))
    span = hi - lo
    for _ in range(max_iter):
        if norm <= tol:
            return x, norm, True
        J = jacobian(f, x)
        try:
            dx = np.linalg.solve(J, -fx)
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(J, -fx, rcond=None)[0]
        lam = 1.0
        while lam > 1e-8:
            xn = x + lam * dx
            fn = np.asarray(f(xn), dtype=float)
            nn = np.max(np.abs(fn))
            if np.isfinite(nn) and nn < (1 - 1e-4 * lam) * norm:
                break
            lam *= 0.5
        else:
            return x, norm, False
        x, fx, norm = xn, fn, nn
        # wandering far outside the box: give up on this start
        if np.any(x < lo - 10 * span) or np.any(x > hi + 10 * span):
            return x, norm, False
    return x, norm, norm <= tol


def find_equilibria(
    f: Callable[[np.ndarray], np.ndarray],
    box: Sequence[tuple[float, float]],
    starts: int = 64,
    tol: float = 1e-10,
    tol_eig: float = TOL_EIG,
) -> EquilibriumSet:
    """Roots of ``f`` in ``box`` by damped Newton from Sobol start points.

    Converged points closer than ``10 * tol`` are merged; points outside the
    box (beyond a relative slack of 1e-9) are discarded.
    """
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    lo, hi = box[:, 0], box[:, 1]
    if np.any(hi < lo):
        raise ValueError("empty box")
    d = len(box)
    pts = qmc.Sobol(d, scramble=False).random(starts) if starts > 1 else np.full((1, d), 0.5)
    pts = lo + (hi - lo) * pts
    found: list[Equilibrium] = []
    converged = 0
    slack = 1e-9 * (1 + np.abs(box).max())
    for p in pts:
        x, res, ok = _newton(f, p.copy(), tol, lo, hi)
        if not ok:
            continue
        converged += 1
        if np.any(x < lo - slack) or np.any(x > hi + slack):
            continue
        if any(np.linalg.norm(x - e.x) <= 10 * tol for e in found):
            continue
        ev = np.linalg.eigvals(jacobian(f, x))
        found.append(Equilibrium(x=x, residual=float(res), stability=classify(ev, tol_eig), eigenvalues=ev))
    found.sort(key=lambda e: tuple(e.x))
    diag = "" if found else f"no start out of {starts} converged to a root inside the box"
    return EquilibriumSet(found, diag, converged)
