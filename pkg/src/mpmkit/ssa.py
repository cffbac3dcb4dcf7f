"""Exact stochastic simulation (Gillespie direct method).

Each replicate draws from its own Philox stream keyed by ``(seed, stream)``:
the 128-bit Philox key is ``seed + 2**64 * stream``.  Uniforms are consumed
strictly in pairs (waiting time, then transition choice), so a path depends
only on the key and never on buffering or on how many replicates run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from numba import types

from ._codegen import (
    ABSORBED,
    BAD_RATE,
    BUFFER_FULL,
    MAX_EVENTS,
    NEED_UNIFORMS,
    ModelProgram,
)
from .expr import EvaluationError
from .model import Model, ModelError

__all__ = [
    "RngSpec",
    "Trajectory",
    "Ensemble",
    "StationaryEstimate",
    "StationarityError",
    "SimulationError",
    "simulate",
    "run_ensemble",
    "estimate_stationary",
    "replay",
]

_BLOCK = 1 << 15  # uniforms per refill (even)
_REC_CHUNK = 1 << 16
_NO_LIMIT = np.int64(2**62)


class StationarityError(RuntimeError):
    """The chain was absorbed before the burn-in ended."""


class SimulationError(RuntimeError):
    def __init__(self, message, replicate=None):
        self.replicate = replicate
        if replicate is not None:
            message = f"replicate {replicate}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class RngSpec:
    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= self.seed < 2**64 and 0 <= self.stream < 2**64):
            raise ValueError("seed and stream must be in [0, 2**64)")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.seed + (self.stream << 64)))


@dataclass
class Trajectory:
    """A piecewise-constant sample path on ``[0, t_end]``."""

    times: np.ndarray  # event times, strictly increasing
    events: np.ndarray  # index of the transition fired at each event
    states: np.ndarray  # (E + 1, n); states[0] is the initial state
    t_end: float
    truncated: bool = False  # stopped by max_events
    absorbed: bool = False

    @property
    def initial(self) -> np.ndarray:
        return self.states[0]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def n_events(self) -> int:
        return len(self.times)

    def sample(self, grid: Sequence[float]) -> np.ndarray:
        """States at the grid times (right-continuous)."""
        idx = np.searchsorted(self.times, np.asarray(grid, dtype=float), side="right")
        return self.states[idx]

    def state_at(self, t: float) -> np.ndarray:
        return self.sample([t])[0]


@dataclass
class Ensemble:
    grid: np.ndarray
    mean: np.ndarray  # (G, n)
    var: np.ndarray  # (G, n), population variance over replicates
    replicates: int
    vars: tuple[str, ...]
    samples: np.ndarray = field(repr=False)  # (R, G, n)

    def histogram(self, var: str, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Empirical distribution of ``var`` at grid index ``k``."""
        col = self.samples[:, k, self.vars.index(var)]
        values, counts = np.unique(col, return_counts=True)
        return values, counts / counts.sum()


@dataclass
class StationaryEstimate:
    """Time-weighted occupation statistics of one long run."""

    vars: tuple[str, ...]
    mean: np.ndarray
    std_err: np.ndarray  # batch-means standard error of ``mean``
    histograms: dict[str, tuple[np.ndarray, np.ndarray]]
    overflow: np.ndarray  # occupation fraction beyond the histogram range
    batch_means: np.ndarray  # (nbatch, n)
    joint: dict[int, tuple[np.ndarray, np.ndarray]] | None = None  # batch -> (states, weights)
    n_events: int = 0

    def average(self, fn) -> tuple[float, float]:
        """Stationary mean of ``fn(states) -> values`` and its batch standard error.

        Needs ``joint=True`` at estimation time.
        """
        if self.joint is None:
            raise ValueError("joint occupation was not recorded")
        per_batch = []
        for b in sorted(self.joint):
            states, w = self.joint[b]
            tot = w.sum()
            if tot > 0:
                per_batch.append(float(np.dot(fn(states), w) / tot))
        all_states = np.concatenate([self.joint[b][0] for b in sorted(self.joint)])
        all_w = np.concatenate([self.joint[b][1] for b in sorted(self.joint)])
        mean = float(np.dot(fn(all_states), all_w) / all_w.sum())
        se = float(np.std(per_batch, ddof=1) / np.sqrt(len(per_batch))) if len(per_batch) > 1 else float("nan")
        return mean, se

    def distribution(self) -> tuple[np.ndarray, np.ndarray]:
        """Pooled joint occupation: unique states and their probabilities."""
        if self.joint is None:
            raise ValueError("joint occupation was not recorded")
        states = np.concatenate([self.joint[b][0] for b in sorted(self.joint)])
        w = np.concatenate([self.joint[b][1] for b in sorted(self.joint)])
        uniq, inv = np.unique(states, axis=0, return_inverse=True)
        p = np.bincount(inv.ravel(), weights=w)
        return uniq, p / p.sum()


# ---------------------------------------------------------------------------


def _program(m: Model | ModelProgram) -> ModelProgram:
    return m if isinstance(m, ModelProgram) else ModelProgram(m)


def _empty_joint():
    return numba.typed.Dict.empty(key_type=types.int64, value_type=types.float64)


def _raise_bad_rate(m: Model, x: np.ndarray, k: int):
    # re-evaluate in Python for a precise diagnostic
    m.effective_rates(x[None, :])
    raise EvaluationError(f"rate of {m.transitions[k].label!r} is invalid at state {tuple(int(v) for v in x)}")


def _drive(
    prog: ModelProgram,
    x0,
    t_end: float,
    gen: np.random.Generator,
    *,
    max_events: int | None = None,
    grid=None,
    record: bool = False,
    stat_start: float = np.inf,
    nbatch: int = 1,
    hist_size: int = 1,
    joint: bool = False,
):
    m = prog.model
    n, r = m.n, m.r
    x = np.array(x0, dtype=np.int64)
    if x.shape != (n,):
        raise ModelError(f"initial state has shape {x.shape}, expected ({n},)")
    if not m.in_domain(x):
        raise ModelError(f"initial state {tuple(x)} outside domain")
    grid = np.zeros(0) if grid is None else np.asarray(grid, dtype=float)
    grid_out = np.zeros((len(grid), n), dtype=np.int64)
    rec_t = np.empty(_REC_CHUNK if record else 0)
    rec_j = np.empty(_REC_CHUNK if record else 0, dtype=np.int64)
    chunks_t, chunks_j = [], []
    stat = np.isfinite(stat_start)
    batch_len = (t_end - stat_start) / nbatch if stat else 0.0
    means = np.zeros((max(nbatch, 1), n))
    hist = np.zeros((n, hist_size))
    hist_over = np.zeros(n)
    jd = _empty_joint()
    joint_lost = np.zeros(1)
    key_bits = (62 - 6) // n if joint else 1
    if joint and nbatch > 64:
        raise ValueError("joint occupation supports at most 64 batches")
    a = np.zeros(r)
    mask = np.ones(r, dtype=np.bool_)
    uni = gen.random(_BLOCK)
    ui, nev, gi, nrec, t = 0, 0, 0, 0, 0.0
    limit = _NO_LIMIT if max_events is None else np.int64(max_events)
    while True:
        status, t, ui, nev, gi, nrec, k = prog.kernel(
            x, t, float(t_end), prog.consts, prog.lo, prog.hi, prog.tabs, prog.tab_lo, prog.tab_shape,
            prog.updates, prog.dep, uni, ui, limit, nev,
            grid, gi, grid_out, rec_t, rec_j, nrec,
            float(stat_start) if stat else np.inf, batch_len, max(nbatch, 1), means, hist, hist_over,
            jd, joint_lost, joint, key_bits, a, mask,
        )
        if status == NEED_UNIFORMS:
            uni = gen.random(_BLOCK)
            ui = 0
            continue
        if status == BUFFER_FULL:
            chunks_t.append(rec_t[:nrec].copy())
            chunks_j.append(rec_j[:nrec].copy())
            nrec = 0
            continue
        if status == BAD_RATE:
            _raise_bad_rate(m, x, k)
        break
    if record:
        chunks_t.append(rec_t[:nrec].copy())
        chunks_j.append(rec_j[:nrec].copy())
    return dict(
        status=status,
        t=t,
        x=x,
        n_events=int(nev),
        grid_out=grid_out,
        times=np.concatenate(chunks_t) if record else None,
        events=np.concatenate(chunks_j) if record else None,
        means=means,
        hist=hist,
        hist_over=hist_over,
        joint=jd,
        joint_lost=float(joint_lost[0]),
        key_bits=key_bits,
    )


def simulate(m: Model, T: float, rng: RngSpec, max_events: int | None = None) -> Trajectory:
    """One exact sample path on ``[0, T]``.

    Stops at ``T``, when the total rate vanishes (absorbed), or after
    ``max_events`` events (``truncated``; ``t_end`` is then the last event time).
    """
    if not T > 0:
        raise ValueError("T must be positive")
    prog = _program(m)
    res = _drive(prog, prog.model.init, T, rng.generator(), max_events=max_events, record=True)
    events = res["events"]
    states = np.empty((len(events) + 1, prog.model.n), dtype=np.int64)
    states[0] = prog.model.init
    if len(events):
        states[1:] = prog.model.init + np.cumsum(prog.updates[events], axis=0)
    truncated = res["status"] == MAX_EVENTS
    return Trajectory(
        times=res["times"],
        events=events,
        states=states,
        t_end=float(res["t"]) if truncated else float(T),
        truncated=truncated,
        absorbed=res["status"] == ABSORBED,
    )


def replay(m: Model, traj: Trajectory) -> np.ndarray:
    """Rebuild the state sequence from the initial state and the fired events."""
    out = [np.asarray(traj.initial)]
    for j in traj.events:
        out.append(out[-1] + m.updates[j])
    return np.array(out)


def run_ensemble(
    m: Model,
    T: float,
    R: int,
    grid: int | Sequence[float] = 101,
    seed: int = 0,
    x0: Sequence[int] | None = None,
) -> Ensemble:
    """R independent replicates (streams 0..R-1) sampled on a time grid."""
    if R < 1:
        raise ValueError("R must be >= 1")
    grid = np.linspace(0.0, T, int(grid)) if np.isscalar(grid) else np.asarray(grid, dtype=float)
    if np.any(grid < 0) or np.any(grid > T):
        raise ValueError("grid must lie in [0, T]")
    prog = _program(m)
    x0 = prog.model.init if x0 is None else x0
    samples = np.empty((R, len(grid), prog.model.n), dtype=np.int64)
    for rep in range(R):
        try:
            res = _drive(prog, x0, T, RngSpec(seed, rep).generator(), grid=grid)
        except (ModelError, EvaluationError) as exc:
            raise SimulationError(str(exc), replicate=rep) from exc
        samples[rep] = res["grid_out"]
    return Ensemble(
        grid=grid,
        mean=samples.mean(axis=0),
        var=samples.var(axis=0),
        replicates=R,
        vars=prog.model.vars,
        samples=samples,
    )


def estimate_stationary(
    m: Model,
    burn_in: float | None,
    horizon: float,
    rng: RngSpec,
    *,
    nbatch: int = 20,
    hist_size: int | None = None,
    joint: bool = False,
    x0: Sequence[int] | None = None,
) -> StationaryEstimate:
    """Time-weighted occupation averages over ``[burn_in, horizon]`` of one run.

    ``burn_in`` defaults to 10% of the horizon.  With ``joint=True`` the joint
    occupation measure is kept per batch, which :meth:`StationaryEstimate.average`
    uses for nonlinear observables.
    """
    burn_in = 0.1 * horizon if burn_in is None else burn_in
    if not horizon > burn_in >= 0:
        raise ValueError("need 0 <= burn_in < horizon")
    prog = _program(m)
    model = prog.model
    if hist_size is None:
        caps = [hi for hi in model.upper if hi is not None]
        hist_size = (max(caps) + 1) if len(caps) == model.n else 1 << 14
    x0 = model.init if x0 is None else x0
    res = _drive(
        prog, x0, horizon, rng.generator(),
        stat_start=burn_in, nbatch=nbatch, hist_size=hist_size, joint=joint,
    )
    if res["status"] == ABSORBED and res["t"] <= burn_in:
        raise StationarityError(f"chain absorbed at t={res['t']:.6g}, before burn-in {burn_in:.6g}")
    span = horizon - burn_in
    blen = span / nbatch
    batch_means = res["means"] / blen
    mean = res["means"].sum(axis=0) / span
    se = batch_means.std(axis=0, ddof=1) / np.sqrt(nbatch) if nbatch > 1 else np.full(model.n, np.nan)
    hists = {}
    for i, v in enumerate(model.vars):
        h = res["hist"][i]
        nz = np.nonzero(h)[0]
        hists[v] = (nz.astype(np.int64), h[nz] / span)
    joint_out = None
    if joint:
        bits = res["key_bits"]
        keys = np.fromiter(res["joint"].keys(), dtype=np.int64, count=len(res["joint"]))
        vals = np.fromiter(res["joint"].values(), dtype=float, count=len(res["joint"]))
        order = np.argsort(keys, kind="stable")
        keys, vals = keys[order], vals[order]
        states = np.empty((len(keys), model.n), dtype=np.int64)
        rest = keys.copy()
        for i in reversed(range(model.n)):
            states[:, i] = rest & ((1 << bits) - 1)
            rest >>= bits
        offs = np.array([0 if lo is None else lo for lo in model.lower], dtype=np.int64)
        states += offs
        joint_out = {}
        for b in np.unique(rest):
            sel = rest == b
            joint_out[int(b)] = (states[sel], vals[sel])
    return StationaryEstimate(
        vars=model.vars,
        mean=mean,
        std_err=se,
        histograms=hists,
        overflow=res["hist_over"] / span,
        batch_means=batch_means,
        joint=joint_out,
        n_events=res["n_events"],
    )
