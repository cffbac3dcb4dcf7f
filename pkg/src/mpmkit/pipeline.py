"""Compose the mean-field and quasi-equilibrium reductions in both orders.

``q_of_m``: mean-field drift first, then the Tikhonov reduction.
``m_of_q``: stochastic QE reduction first, then the finite-size drift of
the reduced model.  Both produce slow densities on the slow clock
``tau = eps t``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.signal import find_peaks

from .meanfield import OdeSolution, integrate, limit_rates
from .model import Model
from .qe import (
    Partition,
    ReducedMpm,
    check_fast_uniqueness,
    make_partition,
    qe_reduce_mpm,
    tikhonov_reduce,
)
from .ssa import RngSpec, _program, estimate_stationary, run_ensemble
from .stoich import p_invariants, stoich_matrix, stoich_reduce

__all__ = [
    "MqResult",
    "CommutationReport",
    "SlowHistogram",
    "prepare",
    "m_of_q",
    "q_of_m",
    "commute_compare",
    "slow_stationary_histogram",
    "resize",
]

DOUBLING_STATE_LIMIT = 300_000


def resize(m: Model, N: float) -> Model:
    """Same model at system size ``N``: extensive parameters and the
    initial state are scaled so that densities are unchanged."""
    scale = N / m.N
    params = {k: m.params[k] * scale for k in m.extensive}
    init = [int(round(v * scale)) for v in m.init]
    return m.with_params(init=init, N=N, **params)


def prepare(m: Model) -> Model:
    """Eliminate global conservation laws, if any."""
    if p_invariants(stoich_matrix(m)):
        return stoich_reduce(m)[0]
    return m


def _y0(p: Partition) -> np.ndarray:
    return p.to_slow(np.asarray(p.model.init, dtype=float) / p.model.N)


def _tau_grid(T: float, grid) -> np.ndarray:
    return np.linspace(0.0, T, int(grid)) if np.isscalar(grid) else np.asarray(grid, dtype=float)


# ---------------------------------------------------------------------------


def q_of_m(m: Model, p: Partition | None = None, T: float = 5.0, grid=201, tol: float = 1e-10,
           newton_tol: float = 1e-10) -> OdeSolution:
    """Tikhonov-reduced mean-field ODE integrated over slow time ``[0, T]``."""
    p = make_partition(m) if p is None else p
    ode = tikhonov_reduce(limit_rates(m), p, newton_tol)
    sol = ode.solve(_y0(p), T, tol=tol, grid=_tau_grid(T, grid))
    sol.max_residual = ode.max_residual
    return sol


@dataclass
class MqResult:
    solution: OdeSolution
    reduced: ReducedMpm
    doubling: dict[str, Any]


def _state_count(m: Model, trunc: Mapping[str, int]) -> float:
    size = 1.0
    for v, lo, hi in zip(m.vars, m.lower, m.upper):
        if hi is None:
            hi = trunc.get(v)
        if hi is None:
            return math.inf
        size *= hi - (lo or 0) + 1
    return size


def m_of_q(
    m: Model,
    p: Partition | None = None,
    backend: str = "exact_cme",
    T: float = 5.0,
    grid=201,
    tol: float = 1e-10,
    doubling: bool = True,
    doubling_tol: float = 1e-6,
    source: Model | None = None,
    **opts,
) -> MqResult:
    """Integrate the finite-size drift ``sum_i mu_i W~_i(N y) / N`` of the
    QE-reduced model.

    With ``doubling`` the drift is recomputed at ``2N`` at a few points of
    the solution; disagreement beyond ``doubling_tol (1 + |F|)`` is recorded
    as a non-convergence warning.  ``source`` is the model ``m`` was
    derived from by :func:`prepare`; the doubled model is rebuilt from it so
    that size-dependent bounds follow ``N``.
    """
    p = make_partition(m) if p is None else p
    red = qe_reduce_mpm(m, p, backend, **opts)
    taus = _tau_grid(T, grid)
    sol = integrate(red.drift, _y0(p), T, tol=tol, grid=taus)
    info: dict[str, Any] = {"checked": False}
    if doubling and backend != "closed_form":
        trunc = {k: 2 * v for k, v in (opts.get("trunc") or {}).items()}
        m2 = prepare(resize(m if source is None else source, 2 * m.N))
        p2 = make_partition(m2)
        opts2 = dict(opts)
        if "trunc" in opts2:
            opts2["trunc"] = trunc
        red2 = qe_reduce_mpm(m2, p2, backend, **opts2)
        fast_model = red2.fast_model(p2.to_slow(np.asarray(m2.init, dtype=float)))
        size = _state_count(fast_model, trunc) if backend == "exact_cme" else 0
        if size > DOUBLING_STATE_LIMIT:
            info["note"] = f"skipped: fast state space at 2N has {int(size)} states"
        else:
            idx = np.unique(np.linspace(0, len(taus) - 1, 5).astype(int))
            diffs = []
            for k in idx:
                a, b = red.drift(sol.x[k]), red2.drift(sol.x[k])
                diffs.append(float(np.max(np.abs(a - b) / (1 + np.abs(a)))))
            worst = max(diffs)
            info = {"checked": True, "N": m.N, "N2": 2 * m.N, "max_rel_diff": worst, "converged": worst <= doubling_tol}
            if worst > doubling_tol:
                info["warning"] = (
                    f"reduced drift changes by {worst:.3g} (relative) when N doubles: "
                    "the N -> infinity limit of the reduced model may not exist or match"
                )
    return MqResult(sol, red, info)


# ---------------------------------------------------------------------------
# stationary histogram of the slow variables


@dataclass
class SlowHistogram:
    var: str
    edges: np.ndarray
    prob: np.ndarray  # probability per bin
    modes: list[float]  # bin centres of local maxima, sorted
    mode_mass: list[float]  # mass of the basin of each mode
    replicates: int
    slow_horizon: float

    def to_dict(self) -> dict:
        return {
            "var": self.var,
            "bin_width": float(self.edges[1] - self.edges[0]),
            "modes": [round(v, 6) for v in self.modes],
            "mode_mass": [round(v, 6) for v in self.mode_mass],
            "replicates": self.replicates,
            "slow_horizon": self.slow_horizon,
        }


def _modes(centres: np.ndarray, prob: np.ndarray, smooth_bins: float = 2.0, prominence: float = 0.05):
    dens = gaussian_filter1d(prob, smooth_bins, mode="constant")
    peaks, _ = find_peaks(np.concatenate([[0.0], dens, [0.0]]), prominence=prominence * dens.max())
    peaks = peaks - 1
    if len(peaks) == 0:
        return [], []
    # basins split at the minimum of the smoothed density between peaks
    cuts = [0]
    for a, b in zip(peaks[:-1], peaks[1:]):
        cuts.append(a + int(np.argmin(dens[a : b + 1])))
    cuts.append(len(prob))
    masses = [float(prob[cuts[i] : cuts[i + 1]].sum()) for i in range(len(peaks))]
    return [float(centres[k]) for k in peaks], masses


def slow_stationary_histogram(
    m: Model,
    var: str,
    slow_horizon: float = 1000.0,
    replicates: int = 50,
    burn_in_fraction: float = 0.25,
    seed: int = 0,
    start=None,
    bin_width: float = 0.05,
) -> SlowHistogram:
    """Pooled time-weighted occupation of ``var / N`` from an ensemble.

    The total ``slow_horizon`` (slow time units) is split evenly over
    ``replicates`` independent runs started from ``start`` (default: the
    model's initial state); each run discards the first
    ``burn_in_fraction`` of its span.  Pooling replicates replaces
    mode-switching when switching is too rare to observe in one run.
    """
    eps, N = m.eps, m.N
    per = slow_horizon / replicates / eps
    burn = burn_in_fraction * per
    i = m.index(var)
    cap = None if m.upper[i] is None else m.upper[i]
    prog = _program(m)  # compiled once for all replicates
    x0 = m.init if start is None else start
    hist_size = int(cap + 1) if cap is not None else int(40 * N) + 1
    acc = np.zeros(hist_size)
    for rep in range(replicates):
        est = estimate_stationary(prog, burn, per, RngSpec(seed, rep), nbatch=2, hist_size=hist_size, x0=x0)
        vals, probs = est.histograms[var]
        np.add.at(acc, vals, probs)
    acc /= acc.sum()
    dens_x = np.arange(hist_size) / N
    nb = int(math.ceil(dens_x[-1] / bin_width)) + 1
    edges = np.arange(nb + 1) * bin_width
    prob, _ = np.histogram(dens_x, bins=edges, weights=acc)
    centres = 0.5 * (edges[:-1] + edges[1:])
    modes, masses = _modes(centres, prob)
    return SlowHistogram(var, edges, prob, modes, masses, replicates, slow_horizon)


# ---------------------------------------------------------------------------


@dataclass
class CommutationReport:
    model: str
    slow_vars: tuple[str, ...]
    tau: np.ndarray
    y_qm: np.ndarray | None
    y_mq: np.ndarray | None
    D: float | None
    tol: float
    uniqueness: dict | None
    verdict: str
    stages: dict[str, Any] = field(default_factory=dict)
    ssa_mean: np.ndarray | None = None
    histogram: SlowHistogram | None = None

    def to_dict(self) -> dict:
        def final(a):
            return None if a is None else [float(v) for v in a[-1]]

        out = {
            "model": self.model,
            "slow_vars": list(self.slow_vars),
            "tau_end": float(self.tau[-1]),
            "grid_points": int(len(self.tau)),
            "D": self.D,
            "tol": self.tol,
            "verdict": self.verdict,
            "y_qm_final": final(self.y_qm),
            "y_mq_final": final(self.y_mq),
            "uniqueness": self.uniqueness,
            "stages": self.stages,
        }
        if self.ssa_mean is not None:
            out["ssa_mean_final"] = final(self.ssa_mean)
        if self.histogram is not None:
            out["stationary_histogram"] = self.histogram.to_dict()
        return out

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def curves(self) -> tuple[list[str], np.ndarray]:
        cols = ["tau"]
        data = [self.tau[:, None]]
        for tag, arr in (("y_qm", self.y_qm), ("y_mq", self.y_mq), ("ssa_mean", self.ssa_mean)):
            if arr is None:
                continue
            cols += [f"{tag}_{v}" for v in self.slow_vars]
            data.append(arr)
        return cols, np.hstack(data)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def commute_compare(
    m: Model,
    T: float = 5.0,
    tol: float = 1e-4,
    backend: str = "exact_cme",
    backend_opts: Mapping[str, Any] | None = None,
    grid: int = 201,
    y_grid=None,
    with_ssa: bool = False,
    replicates: int = 100,
    seed: int = 0,
    histogram: Mapping[str, Any] | None = None,
    doubling: bool = True,
) -> CommutationReport:
    """Run both reduction orders on a shared slow-time grid and compare.

    Verdict: ``commutes`` when ``D <= tol`` and the fast root is unique at
    every probed slow state; ``non_commuting`` when ``D > tol`` and both
    branches ran; ``inconclusive`` otherwise.  ``histogram`` (keyword
    arguments of :func:`slow_stationary_histogram` plus optional
    ``params``) attaches a stationary slow histogram.
    """
    backend_opts = dict(backend_opts or {})
    stages: dict[str, Any] = {}
    mr = prepare(m)
    if mr is not m:
        stages["stoich_reduce"] = {"vars": list(mr.vars), "invariant_params": [k for k in mr.extensive if k not in m.extensive]}
    taus = _tau_grid(T, grid)
    try:
        p = make_partition(mr)
        f = limit_rates(mr)
    except Exception as exc:  # noqa: BLE001 - report, don't crash
        stages["partition"] = {"error": f"{type(exc).__name__}: {exc}"}
        return CommutationReport(m.name, (), taus, None, None, None, tol, None, "inconclusive", stages)

    if y_grid is None:
        hi = []
        for lo_b, hi_b in p.slow_domain():
            hi.append(20.0 if hi_b is None else hi_b / mr.N)
        y_grid = np.linspace(0.0, hi[0], 50) if p.m == 1 else np.array(
            np.meshgrid(*[np.linspace(0, h, 8) for h in hi])).reshape(p.m, -1).T
    uniq = check_fast_uniqueness(f, p, y_grid)
    uniq_dict = uniq.to_dict()

    y_qm = y_mq = None
    try:
        sol = q_of_m(mr, p, T, taus)
        y_qm = sol.x
        stages["q_of_m"] = {"steps": sol.steps, "rejected": sol.rejected, "max_fast_residual": sol.max_residual}
    except Exception as exc:  # noqa: BLE001
        stages["q_of_m"] = {"error": f"{type(exc).__name__}: {exc}"}
    try:
        res = m_of_q(mr, p, backend, T, taus, doubling=doubling, source=m, **backend_opts)
        y_mq = res.solution.x
        st = {"backend": backend, "steps": res.solution.steps, "averaged_rate_evaluations": res.reduced.computations,
              "N": mr.N, "doubling": res.doubling}
        if "warning" in res.doubling:
            warnings.warn(res.doubling["warning"], RuntimeWarning, stacklevel=2)
        stages["m_of_q"] = st
    except Exception as exc:  # noqa: BLE001
        stages["m_of_q"] = {"error": f"{type(exc).__name__}: {exc}"}

    D = None
    if y_qm is not None and y_mq is not None:
        D = float(np.max(np.linalg.norm(y_qm - y_mq, axis=1)))
    if D is None:
        verdict = "inconclusive"
    elif D <= tol:
        verdict = "commutes" if uniq.verdict == "unique" else "inconclusive"
    else:
        verdict = "non_commuting"

    ssa_mean = None
    if with_ssa:
        try:
            ens = run_ensemble(mr, T / mr.eps, replicates, taus / mr.eps, seed=seed)
            ssa_mean = p.to_slow(ens.mean) / mr.N
            stages["ssa"] = {"replicates": replicates, "seed": seed, "N": mr.N, "eps": mr.eps}
        except Exception as exc:  # noqa: BLE001
            stages["ssa"] = {"error": f"{type(exc).__name__}: {exc}"}

    hist = None
    if histogram is not None:
        hopts = dict(histogram)
        params = hopts.pop("params", {}) or {}
        mh = resize(mr, params["N"]) if "N" in params else mr
        rest = {k: v for k, v in params.items() if k != "N"}
        if rest:
            mh = mh.with_params(**rest)
        var = hopts.pop("var", p.slow_names[0])
        try:
            hist = slow_stationary_histogram(mh, var, seed=seed, **hopts)
            stages["histogram"] = {"N": mh.N, "eps": mh.eps}
        except Exception as exc:  # noqa: BLE001
            stages["histogram"] = {"error": f"{type(exc).__name__}: {exc}"}

    return CommutationReport(
        model=m.name,
        slow_vars=p.slow_names,
        tau=taus,
        y_qm=y_qm,
        y_mq=y_mq,
        D=D,
        tol=tol,
        uniqueness=uniq_dict,
        verdict=verdict,
        stages=stages,
        ssa_mean=ssa_mean,
        histogram=hist,
    )
