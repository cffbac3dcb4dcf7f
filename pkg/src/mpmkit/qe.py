"""Quasi-equilibrium reduction of fast/slow models.

Deterministic branch: the slow drift ``G(y, z)`` is evaluated on the stable
root ``z = phi(y)`` of the fast drift ``H(y, z)``.  Stochastic branch: slow
transitions keep their updates and get rates averaged over the stationary
law of the fast subsystem at frozen slow state.
"""

from __future__ import annotations

import math
import threading
import warnings
import zlib
from dataclasses import dataclass
from functools import cached_property
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from . import cme
from . import expr as ex
from .meanfield import (
    TOL_EIG,
    DriftField,
    OdeSolution,
    find_equilibria,
    integrate,
    jacobian,
)
from .model import Model, ModelError, TabulatedRate, Transition
from .ssa import RngSpec, estimate_stationary
from .stoich import Basis, NotReducibleError, RatMatrix, complete_basis, image_model, p_invariants, stoich_matrix

__all__ = [
    "Partition",
    "GapReport",
    "ReducedOde",
    "ReducedMpm",
    "UniquenessReport",
    "UntaggedModelError",
    "NewtonError",
    "UnstableRootError",
    "make_partition",
    "check_rate_gap",
    "tikhonov_reduce",
    "qe_reduce_mpm",
    "check_fast_uniqueness",
    "fast_layer",
    "BACKENDS",
]

BACKENDS = ("closed_form", "exact_cme", "nested_ssa")
DEFAULT_FAST_CAP = 20.0  # density bound used for unbounded fast variables


class UntaggedModelError(ModelError):
    pass


class NewtonError(ArithmeticError):
    def __init__(self, y, detail: str):
        self.y = np.asarray(y)
        super().__init__(f"fast root not found at y={np.round(self.y, 10).tolist()}: {detail}")


class UnstableRootError(ArithmeticError):
    def __init__(self, y, eigenvalues):
        self.y = np.asarray(y)
        self.eigenvalues = np.asarray(eigenvalues)
        super().__init__(
            f"fast root at y={np.round(self.y, 10).tolist()} is not attracting: "
            f"eigenvalues of dH/dz have real parts {np.round(np.real(self.eigenvalues), 10).tolist()}"
        )


def _unit_index(col) -> int | None:
    nz = [i for i, v in enumerate(col) if v != 0]
    return nz[0] if len(nz) == 1 and col[nz[0]] == 1 else None


@dataclass(frozen=True)
class Partition:
    """Fast/slow split of a model and its slow/fast coordinates.

    Coordinates are ``y = C^T x`` (slow, conserved by fast transitions) and
    ``z = K^T x`` (fast).
    """

    model: Model
    slow: tuple[int, ...]
    fast: tuple[int, ...]
    basis: Basis
    slow_names: tuple[str, ...]
    fast_names: tuple[str, ...]
    mu: np.ndarray  # (s, m) slow updates C^T nu_i
    sigma: np.ndarray  # (r, n-m) fast-coordinate updates K^T nu_i

    @property
    def m(self) -> int:
        return self.basis.C.shape[1]

    @property
    def A(self) -> RatMatrix:
        return self.basis.A

    @cached_property
    def inverse_map(self) -> np.ndarray:
        """Float matrix B with ``x = B @ concat(y, z)``."""
        return self.A.T.inverse().to_float()

    @cached_property
    def _C(self) -> np.ndarray:
        return self.basis.C.to_float()

    @cached_property
    def _K(self) -> np.ndarray:
        return self.basis.K.to_float()

    def to_slow(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self._C

    def to_fast(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self._K

    def from_yz(self, y, z) -> np.ndarray:
        yz = np.concatenate([np.atleast_1d(y), np.atleast_1d(z)], axis=-1) if np.ndim(y) <= 1 else np.hstack([y, z])
        return yz @ self.inverse_map.T

    def slow_domain(self) -> list[tuple[int | None, int | None]]:
        """Interval hull of the slow coordinates over the model's domain box."""
        out = []
        for col in self.basis.C.columns():
            lo, hi = Fraction(0), Fraction(0)
            for c, l, h in zip(col, self.model.lower, self.model.upper):
                if c == 0:
                    continue
                a, b = (l, h) if c > 0 else (h, l)
                lo = None if (lo is None or a is None) else lo + c * a
                hi = None if (hi is None or b is None) else hi + c * b
            out.append((None if lo is None else math.ceil(lo), None if hi is None else math.floor(hi)))
        return out

    def fast_box(self, default_cap: float = DEFAULT_FAST_CAP) -> list[tuple[float, float]]:
        """Density box for the fast coordinates (unbounded sides capped)."""
        N = self.model.N
        out = []
        for col in self.basis.K.columns():
            lo, hi = 0.0, 0.0
            for c, l, h in zip(col, self.model.lower, self.model.upper):
                if c == 0:
                    continue
                a, b = (l, h) if c > 0 else (h, l)
                lo += float(c) * (a / N if a is not None else (-default_cap if c > 0 else default_cap))
                hi += float(c) * (b / N if b is not None else (default_cap if c > 0 else -default_cap))
            out.append((lo, hi))
        return out


def make_partition(m: Model) -> Partition:
    """Split by scale tags and build slow/fast coordinates from the fast stoichiometry."""
    slow = tuple(j for j, t in enumerate(m.transitions) if t.scale == "slow")
    fast = tuple(j for j, t in enumerate(m.transitions) if t.scale == "fast")
    if not slow and not fast:
        raise UntaggedModelError(f"model {m.name!r} has no slow/fast tags")
    if not slow or not fast:
        raise UntaggedModelError(f"model {m.name!r} needs both slow and fast transitions")
    cs = p_invariants(stoich_matrix(m, fast))
    if not cs:
        raise NotReducibleError("fast updates span the whole space; nothing is conserved on the fast scale")
    basis = complete_basis(RatMatrix.from_columns(cs, m.n), m.n)
    CT, KT = basis.C.T, basis.K.T
    for j in fast:
        if any(v != 0 for v in CT @ m.transitions[j].update):
            raise AssertionError("fast transition changes a slow coordinate")
    mu = np.array([[int(v) for v in CT @ m.transitions[i].update] for i in slow], dtype=np.int64)
    sig = []
    for t in m.transitions:
        s = KT @ t.update
        if any(v.denominator != 1 for v in s):
            raise ValueError(f"transition {t.label!r} has a non-integer fast update")
        sig.append([int(v) for v in s])
    sigma = np.array(sig, dtype=np.int64).reshape(m.r, m.n - len(cs))

    def names(M: RatMatrix, prefix: str):
        out = []
        for k, col in enumerate(M.columns()):
            u = _unit_index(col)
            out.append(m.vars[u] if u is not None else f"{prefix}{k + 1}")
        return tuple(out)

    return Partition(
        model=m,
        slow=slow,
        fast=fast,
        basis=basis,
        slow_names=names(basis.C, "Y"),
        fast_names=names(basis.K, "Z"),
        mu=mu,
        sigma=sigma,
    )


# ---------------------------------------------------------------------------
# rate-gap diagnostic


@dataclass
class GapReport:
    probes: int
    max_slow: float
    min_fast: float  # smallest total fast rate over probes
    gap_ratio: float  # median over probes of (total fast rate) / (max slow rate)
    min_ratio: float
    per_transition_min: dict[str, float]
    per_transition_max: dict[str, float]
    violations: list[tuple[int, ...]]
    warning: str | None = None


def _probe_states(m: Model, k: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    cols = []
    for i in range(m.n):
        lo = m.lower[i] if m.lower[i] is not None else 0
        hi = m.upper[i] if m.upper[i] is not None else max(int(2 * m.N), 2 * m.init[i], lo + 1)
        cols.append(rng.integers(lo, hi + 1, size=k))
    return np.stack(cols, axis=1)


def check_rate_gap(m: Model, p: Partition, probe_states=None, probes: int = 100, seed: int = 0) -> GapReport:
    """Compare slow and fast effective rates at sampled in-domain states.

    A probe violates the ordering when its total fast rate does not exceed
    its largest slow rate.  Individual fast transitions may vanish (for
    example at a boundary) without counting as a violation.
    """
    states = _probe_states(m, probes, seed) if probe_states is None else np.atleast_2d(np.asarray(probe_states, dtype=np.int64))
    states = states[m.domain_mask(states)]
    W = m.effective_rates(states)
    slow_max = W[:, list(p.slow)].max(axis=1)
    fast_tot = W[:, list(p.fast)].sum(axis=1)
    active = (slow_max > 0) | (fast_tot > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(slow_max > 0, fast_tot / slow_max, np.inf)
    bad = active & (fast_tot <= slow_max)
    violations = [tuple(int(v) for v in s) for s in states[bad]]
    finite = ratio[active & np.isfinite(ratio)]
    gap = float(np.median(finite)) if finite.size else math.inf
    labels = [t.label for t in m.transitions]
    report = GapReport(
        probes=len(states),
        max_slow=float(slow_max.max()) if len(states) else 0.0,
        min_fast=float(fast_tot.min()) if len(states) else 0.0,
        gap_ratio=gap,
        min_ratio=float(finite.min()) if finite.size else math.inf,
        per_transition_min={labels[j]: float(W[:, j].min()) for j in range(m.r)},
        per_transition_max={labels[j]: float(W[:, j].max()) for j in range(m.r)},
        violations=violations,
    )
    if violations or gap < 10:
        report.warning = (
            f"weak or no time-scale gap: median fast/slow ratio {gap:.3g}, "
            f"{len(violations)} of {len(states)} probes violate the ordering"
        )
        warnings.warn(report.warning, RuntimeWarning, stacklevel=2)
    return report


# ---------------------------------------------------------------------------
# deterministic branch


def fast_layer(f: DriftField, p: Partition, y) -> Callable[[np.ndarray], np.ndarray]:
    """``z -> H(y, z)``, the fast drift at frozen slow density ``y``."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    sig = p.sigma[list(p.fast)].astype(float)
    fast = list(p.fast)

    def H(z):
        x = p.from_yz(y, np.atleast_1d(z))
        return f.base(x)[fast] @ sig

    return H


class ReducedOde:
    """Slow dynamics ``dy/dtau = G(y, phi(y))`` on the slow clock ``tau = eps t``.

    ``phi`` is tracked by warm-started damped Newton; the first root is
    found by relaxing the fast layer from the initial fast state.
    """

    def __init__(self, f: DriftField, p: Partition, newton_tol: float = 1e-10, z0=None):
        self.f = f
        self.p = p
        self.newton_tol = newton_tol
        self.m = p.m
        self._slow = list(p.slow)
        self._fast = list(p.fast)
        self._mu = p.mu.astype(float)
        self._sig = p.sigma[self._fast].astype(float)
        x0 = np.asarray(p.model.init, dtype=float) / p.model.N
        self.z0 = p.to_fast(x0) if z0 is None else np.atleast_1d(np.asarray(z0, dtype=float))
        self._warm: np.ndarray | None = None
        self.max_residual = 0.0
        self.evaluations = 0

    def G(self, y, z) -> np.ndarray:
        x = self.p.from_yz(np.atleast_1d(y), np.atleast_1d(z))
        return self.f.base(x)[self._slow] @ self._mu

    def H(self, y, z) -> np.ndarray:
        x = self.p.from_yz(np.atleast_1d(y), np.atleast_1d(z))
        return self.f.base(x)[self._fast] @ self._sig

    def _converged(self, h, z) -> bool:
        return np.max(np.abs(h)) <= self.newton_tol * max(1.0, float(np.max(np.abs(z))))

    def _newton(self, y, z, max_iter=60):
        Hy = lambda zz: self.H(y, zz)
        h = Hy(z)
        for _ in range(max_iter):
            if self._converged(h, z):
                return z, h
            J = jacobian(Hy, z)
            try:
                dz = np.linalg.solve(J, -h)
            except np.linalg.LinAlgError:
                return None, h
            norm = np.max(np.abs(h))
            lam = 1.0
            while lam > 1e-10:
                zn = z + lam * dz
                hn = Hy(zn)
                if np.all(np.isfinite(hn)) and np.max(np.abs(hn)) < norm:
                    break
                lam *= 0.5
            else:
                # no further decrease: accept if already at roundoff level
                return (z, h) if np.max(np.abs(h)) <= 1e3 * self.newton_tol else (None, h)
            z, h = zn, hn
        return (z, h) if self._converged(h, z) else (None, h)

    def _relax(self, y, z, T=200.0):
        sol = integrate(lambda zz: self.H(y, zz), z, T, tol=1e-9, grid=2)
        return sol.final

    def phi(self, y, warm: bool = True) -> np.ndarray:
        """Stable root of ``H(y, .)``; raises if none is found or it is unstable."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        start = self._warm if (warm and self._warm is not None) else None
        z = None
        if start is not None:
            z, h = self._newton(y, start.copy())
        if z is None:
            z0 = self.z0 if start is None else start
            try:
                z, h = self._newton(y, self._relax(y, z0.copy()))
            except (FloatingPointError, RuntimeError) as exc:
                raise NewtonError(y, f"fast layer relaxation failed ({exc})") from exc
            if z is None:
                raise NewtonError(y, f"Newton did not converge (|H|={np.max(np.abs(h)):.3g})")
        ev = np.linalg.eigvals(jacobian(lambda zz: self.H(y, zz), z))
        if not np.all(np.real(ev) < -TOL_EIG):
            raise UnstableRootError(y, ev)
        self.max_residual = max(self.max_residual, float(np.max(np.abs(h))))
        self.evaluations += 1
        self._warm = z
        return z

    def drift(self, y) -> np.ndarray:
        return self.G(y, self.phi(y))

    def reset(self):
        self._warm = None

    def solve(self, y0, T: float, tol: float = 1e-10, grid: int | Sequence[float] = 201) -> OdeSolution:
        """Integrate the reduced drift over slow time ``[0, T]``."""
        self.reset()
        y0 = np.atleast_1d(np.asarray(y0, dtype=float))
        self.phi(y0)  # fix the branch from the initial fast state

        def check(_t, y):
            z = self.phi(y)
            h = self.H(y, z)
            if not self._converged(h, z):
                raise NewtonError(y, f"residual {np.max(np.abs(h)):.3g} above tolerance")

        return integrate(self.drift, y0, T, tol=tol, grid=grid, on_step=check)


def tikhonov_reduce(f: DriftField, p: Partition, newton_tol: float = 1e-10) -> ReducedOde:
    return ReducedOde(f, p, newton_tol)


# ---------------------------------------------------------------------------
# fast-root uniqueness


@dataclass
class UniquenessEntry:
    y: tuple[float, ...]
    stable: list[tuple[float, ...]]
    unstable: list[tuple[float, ...]]
    marginal: list[tuple[float, ...]]

    @property
    def unique(self) -> bool:
        return len(self.stable) == 1 and not self.unstable and not self.marginal


@dataclass
class UniquenessReport:
    verdict: str  # "unique" or "non-unique"
    entries: list[UniquenessEntry]

    @property
    def witnesses(self) -> list[UniquenessEntry]:
        return [e for e in self.entries if not e.unique]

    def to_dict(self, limit: int = 5) -> dict:
        w = self.witnesses[:limit]
        return {
            "verdict": self.verdict,
            "probed": len(self.entries),
            "witnesses": [
                {"y": list(e.y), "stable": [list(s) for s in e.stable], "unstable": [list(s) for s in e.unstable],
                 "marginal": [list(s) for s in e.marginal]}
                for e in w
            ],
        }


def check_fast_uniqueness(
    f: DriftField,
    p: Partition,
    y_grid,
    box: Sequence[tuple[float, float]] | None = None,
    starts: int = 16,
) -> UniquenessReport:
    """Count equilibria of ``z -> H(y, z)`` in ``box`` at each probed ``y``."""
    box = p.fast_box() if box is None else box
    entries = []
    for y in np.atleast_1d(np.asarray(y_grid, dtype=float)).reshape(-1, p.m):
        eqs = find_equilibria(fast_layer(f, p, y), box, starts=starts)
        pick = lambda kind: [tuple(float(v) for v in np.round(e.x, 10)) for e in eqs.by_stability(kind)]
        entries.append(UniquenessEntry(tuple(float(v) for v in y), pick("stable"), pick("unstable"), pick("marginal")))
    verdict = "unique" if all(e.unique for e in entries) else "non-unique"
    return UniquenessReport(verdict, entries)


# ---------------------------------------------------------------------------
# stochastic branch


class _SingleFlight:
    """Memo table where each key is computed once, even under concurrency."""

    def __init__(self):
        self._lock = threading.Lock()
        self._values: dict = {}
        self._pending: dict = {}
        self.computations = 0

    def get(self, key, compute):
        while True:
            with self._lock:
                if key in self._values:
                    return self._values[key]
                ev = self._pending.get(key)
                if ev is None:
                    ev = threading.Event()
                    self._pending[key] = ev
                    owner = True
                else:
                    owner = False
            if owner:
                try:
                    value = compute()
                    with self._lock:
                        self._values[key] = value
                        self.computations += 1
                    return value
                finally:
                    with self._lock:
                        del self._pending[key]
                    ev.set()
            ev.wait()

    def __len__(self):
        return len(self._values)


@dataclass
class AveragedRates:
    y: tuple[float, ...]
    rates: np.ndarray  # averaged base rates of the slow transitions
    std_err: np.ndarray | None = None  # nested_ssa only
    tail_mass: float | None = None  # exact_cme: boundary mass of truncated fast variables


class ReducedMpm:
    """Slow-variable model with averaged rates ``E[W0_i(Y, Z)]`` over the fast law.

    Rates live on the slow clock ``tau = eps t``.  Values are memoized per
    slow state.
    """

    def __init__(self, p: Partition, backend: str = "exact_cme", **opts):
        if backend not in BACKENDS:
            raise ValueError(f"unknown backend {backend!r}; choose from {BACKENDS}")
        self.p = p
        self.model = p.model
        self.backend = backend
        self.opts = dict(opts)
        self._memo = _SingleFlight()
        self._fast_memo = _SingleFlight()
        self._B = p.inverse_map
        self._slow = list(p.slow)
        self._fast_depends = self._fast_dependence()
        if backend == "closed_form":
            exprs = self.opts.get("expressions")
            if not exprs:
                raise ValueError("closed_form backend needs expressions={label: text}")
            labels = [self.model.transitions[i].label for i in self._slow]
            missing = set(labels) - set(exprs)
            if missing:
                raise ValueError(f"no closed-form rate for {sorted(missing)}")
            self._closed = [ex.parse_rate_expr(exprs[l]) if isinstance(exprs[l], str) else exprs[l] for l in labels]
            known = set(p.slow_names) | set(self.model.params)
            for l, node in zip(labels, self._closed):
                extra = ex.symbols(node) - known
                if extra:
                    raise ModelError(f"closed-form rate for {l!r} uses unknown symbols {sorted(extra)}")

    # -- fast subsystem -----------------------------------------------------

    def _fast_dependence(self) -> tuple[int, ...]:
        """Slow coordinates the fast subsystem (rates or domain) depends on."""
        B = self.p.A.T.inverse()
        m = self.p.m
        deps = set()
        for i in range(self.model.n):
            row = B.rows[i]
            uses = {j for j in range(m) if row[j] != 0}
            var = self.model.vars[i]
            for jf in self.p.fast:
                t = self.model.transitions[jf]
                if isinstance(t.rate, TabulatedRate) or var in ex.symbols(t.rate):
                    deps |= uses
            # a bound on a variable mixing slow and fast coordinates moves with y
            mixes = any(row[j] != 0 for j in range(m, self.model.n))
            if mixes and (self.model.lower[i] is not None or self.model.upper[i] is not None):
                deps |= uses
        return tuple(sorted(deps))

    def fast_model(self, Y) -> Model:
        """Fast subsystem with slow counts frozen at ``Y`` (fast transitions only)."""
        Y = np.atleast_1d(np.asarray(Y, dtype=float))
        m = self.p.m
        fixed = {j: Fraction(float(Y[j])) for j in range(m)}
        x0 = np.asarray(self.model.init, dtype=float)
        z0 = np.rint(self.p.to_fast(x0)).astype(int)
        fm = image_model(
            self.model,
            self.p.A,
            keep=list(range(m, self.model.n)),
            fixed_values=fixed,
            transitions=list(self.p.fast),
            fixed_names={j: self.p.slow_names[j] for j in range(m)},
            name=f"{self.model.name} fast subsystem",
            init=list(z0),
        )
        return fm

    def _fast_key(self, Y):
        return tuple(float(Y[j]) for j in self._fast_depends)

    def _trunc(self, scale: float = 1.0) -> dict[str, int]:
        trunc = self.opts.get("trunc") or {}
        return {k: int(math.ceil(v * scale)) for k, v in trunc.items()}

    def fast_distribution(self, Y) -> cme.Distribution:
        """Exact stationary law of the fast subsystem at slow state ``Y``."""
        Y = np.atleast_1d(np.asarray(Y, dtype=float))

        def compute():
            fm = self.fast_model(Y)
            g = cme.build_generator(fm, self._trunc(), limit=self.opts.get("limit", cme.DEFAULT_LIMIT))
            return cme.stationary_distribution(g)

        return self._fast_memo.get(self._fast_key(Y), compute)

    def _slow_base_rates(self, Y, zstates: np.ndarray) -> np.ndarray:
        """W0 of slow transitions at the full states (Y, z), zeroed off-domain."""
        Y = np.atleast_1d(np.asarray(Y, dtype=float))
        yz = np.hstack([np.broadcast_to(Y, (len(zstates), len(Y))), zstates])
        x = yz @ self._B.T
        W = self.model.base_rates(x)[:, self._slow]
        # boundary zeroing only makes sense at lattice points; off-lattice
        # slow states (drift evaluation) use the smooth rate expression
        lattice = np.all(np.abs(x - np.rint(x)) < 1e-9, axis=1)
        for k, i in enumerate(self._slow):
            xn = x + self.model.updates[i]
            ok = np.ones(len(x), dtype=bool)
            for d, (lo, hi) in enumerate(zip(self.model.lower, self.model.upper)):
                if lo is not None:
                    ok &= xn[:, d] >= lo - 1e-9
                if hi is not None:
                    ok &= xn[:, d] <= hi + 1e-9
            W[lattice & ~ok, k] = 0.0
        return W

    # -- averaged rates -----------------------------------------------------

    def averaged(self, Y) -> AveragedRates:
        Y = np.atleast_1d(np.asarray(Y, dtype=float))
        key = tuple(float(v) for v in Y)
        return self._memo.get(key, lambda: self._compute(Y))

    def rates(self, Y) -> np.ndarray:
        return self.averaged(Y).rates

    def _compute(self, Y) -> AveragedRates:
        key = tuple(float(v) for v in Y)
        if self.backend == "closed_form":
            env = dict(self.model.params)
            env.update(zip(self.p.slow_names, (float(v) for v in Y)))
            vals = np.array([float(ex.evaluate(node, env)) for node in self._closed])
            out = AveragedRates(key, vals)
        elif self.backend == "exact_cme":
            dist = self.fast_distribution(Y)
            states = dist.index.states()
            W = self._slow_base_rates(Y, states)
            vals = dist.p @ W
            trunc = self._trunc()
            tail = sum(v for k, v in dist.boundary_mass().items() if k in trunc) if trunc else 0.0
            out = AveragedRates(key, vals, tail_mass=float(tail))
        else:
            out = self._nested(Y)
        if np.any(out.rates < 0) or not np.all(np.isfinite(out.rates)):
            raise ModelError(f"averaged rates {out.rates.tolist()} invalid at Y={list(key)}")
        return out

    def _nested(self, Y) -> AveragedRates:
        fm = self.fast_model(Y)
        z0 = np.asarray(fm.init)
        rates0 = fm.effective_rates(z0[None, :])[0]
        pos = rates0[rates0 > 0]
        if pos.size == 0:
            # absorbed at the start: the fast law is a point mass
            W = self._slow_base_rates(Y, z0[None, :].astype(float))[0]
            return AveragedRates(tuple(float(v) for v in Y), W, np.zeros_like(W))
        burn = self.opts.get("burn_in") or 20.0 / float(pos.min())
        horizon = self.opts.get("horizon") or burn + 10.0 * burn
        seed = int(self.opts.get("seed", 0))
        stream = zlib.crc32(repr(self._fast_key(Y)).encode())
        est = estimate_stationary(fm, burn, horizon, RngSpec(seed, stream), joint=True, nbatch=self.opts.get("nbatch", 20))
        perm = self.opts.get("symmetry")
        if perm:
            idx = [fm.vars.index(perm.get(v, v)) for v in fm.vars]
        vals, ses = [], []
        for k in range(len(self._slow)):
            def fn(states, k=k):
                w = self._slow_base_rates(Y, states.astype(float))[:, k]
                if perm:
                    w = 0.5 * (w + self._slow_base_rates(Y, states[:, idx].astype(float))[:, k])
                return w
            mval, se = est.average(fn)
            vals.append(mval)
            ses.append(se)
        return AveragedRates(tuple(float(v) for v in Y), np.array(vals), np.array(ses))

    # -- derived objects ----------------------------------------------------

    @property
    def computations(self) -> int:
        return self._memo.computations

    def drift(self, y) -> np.ndarray:
        """Finite-size slow drift in density units: ``sum_i mu_i W~_i(N y) / N``."""
        N = self.model.N
        return self.rates(np.atleast_1d(y) * N) @ self.p.mu / N

    def slow_domain(self, caps: Mapping[str, int] | None = None) -> list[tuple[int, int | None]]:
        caps = dict(caps or {})
        dom = []
        for name, (lo, hi) in zip(self.p.slow_names, self.p.slow_domain()):
            if name in caps:
                hi = caps[name] if hi is None else min(hi, caps[name])
            dom.append((lo, hi))
        return dom

    def to_model(self, caps: Mapping[str, int] | None = None) -> Model:
        """The reduced model over the slow variables.

        Closed-form rates stay symbolic; the other backends are tabulated
        over the slow box, so unbounded slow variables need a cap.
        """
        m = self.model
        dom = self.slow_domain(caps)
        y0 = [int(round(v)) for v in self.p.to_slow(np.asarray(m.init, dtype=float))]
        trans = []
        if self.backend == "closed_form":
            for k, i in enumerate(self._slow):
                t = m.transitions[i]
                trans.append(Transition(t.label, tuple(int(v) for v in self.p.mu[k]), self._closed[k], "unscaled"))
        else:
            for name, (lo, hi) in zip(self.p.slow_names, dom):
                if lo is None or hi is None:
                    raise ModelError(f"slow variable {name} is unbounded; give a cap to tabulate its rates")
            lo = tuple(d[0] for d in dom)
            shape = tuple(d[1] - d[0] + 1 for d in dom)
            grid = np.indices(shape).reshape(len(shape), -1).T + np.asarray(lo)
            table = np.array([self.rates(Y) for Y in grid]).reshape(len(grid), -1)
            for k, i in enumerate(self._slow):
                t = m.transitions[i]
                rate = TabulatedRate(lo, shape, tuple(float(v) for v in table[:, k]))
                trans.append(Transition(t.label, tuple(int(v) for v in self.p.mu[k]), rate, "unscaled"))
        params = dict(m.params)
        return Model(
            name=f"{m.name} (quasi-equilibrium reduced)",
            vars=self.p.slow_names,
            domain=tuple(dom),
            transitions=tuple(trans),
            params=params,
            init=tuple(min(max(v, d[0]), d[1] if d[1] is not None else v) for v, d in zip(y0, dom)),
            extensive=m.extensive,
        )


def qe_reduce_mpm(m: Model, p: Partition | None = None, backend: str = "exact_cme", **opts) -> ReducedMpm:
    """Reduced MPM over the slow variables.

    Backend options: ``trunc`` / ``limit`` (exact_cme); ``burn_in``,
    ``horizon``, ``seed``, ``nbatch``, ``symmetry`` (nested_ssa);
    ``expressions`` (closed_form).
    """
    p = make_partition(m) if p is None else p
    if p.model is not m and p.model != m:
        raise ValueError("partition belongs to a different model")
    return ReducedMpm(p, backend, **opts)
