"""Compile a model's propensities into a numba function.

The generated function depends only on model structure (variables, update
vectors, rate trees, scale tags); numeric parameters arrive through a
constant vector so that parameter sweeps reuse one compilation.
Parameter-only subexpressions are folded into that vector up front.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numba
import numpy as np

from . import expr as ex
from .model import Model, TabulatedRate

BIG = np.int64(2**62)


@numba.njit(error_model="numpy")
def _tab_lookup(values, lo, shape, x):
    idx = 0
    for i in range(x.shape[0]):
        rel = x[i] - lo[i]
        if rel < 0 or rel >= shape[i]:
            return np.nan
        idx = idx * shape[i] + rel
    return values[idx]


class _Hoister:
    """Collects constant subtrees; returns source for a rate with c[k] slots."""

    def __init__(self, var_index: dict[str, int], params: tuple[str, ...]):
        self.var_index = var_index
        self.params = set(params)
        self.slots: list[ex.RateExpr] = []
        self.slot_of: dict[ex.RateExpr, int] = {}

    def slot(self, node) -> str:
        if node not in self.slot_of:
            self.slot_of[node] = len(self.slots)
            self.slots.append(node)
        return f"c[{self.slot_of[node]}]"

    def source(self, node) -> str:
        if isinstance(node, ex.Const):
            return repr(float(node.value))
        if isinstance(node, ex.Sym):
            if node.name in self.var_index:
                return f"x{self.var_index[node.name]}"
            return self.slot(node)
        if not (ex.symbols(node) & set(self.var_index)):
            return self.slot(node)
        if isinstance(node, ex.Neg):
            return f"(-{self.source(node.operand)})"
        a, b = self.source(node.left), self.source(node.right)
        if node.op == "^":
            return f"math.pow({a}, {b})"
        return f"({a} {node.op} {b})"


def structure_key(m: Model) -> tuple:
    parts = []
    for t in m.transitions:
        rate = ("table", len(t.rate.shape)) if isinstance(t.rate, TabulatedRate) else ex.to_string(t.rate)
        parts.append((t.update, rate, t.scale))
    return (m.vars, tuple(m.params), tuple(parts))


def _generate(m: Model):
    var_index = {v: i for i, v in enumerate(m.vars)}
    h = _Hoister(var_index, tuple(m.params))
    eps_slot = h.slot(ex.Sym("eps"))
    lines = [
        "def props(x, c, lo, hi, tabs, tab_lo, tab_shape, mask, out):",
    ]
    for i in range(m.n):
        lines.append(f"    x{i} = float(x[{i}])")
    tab_k = 0
    for j, t in enumerate(m.transitions):
        conds = []
        for i, d in enumerate(t.update):
            if d > 0:
                conds.append(f"x[{i}] + {d} <= hi[{i}]")
            elif d < 0:
                conds.append(f"x[{i}] - {-d} >= lo[{i}]")
        if isinstance(t.rate, TabulatedRate):
            body = f"_tab_lookup(tabs[{tab_k}], tab_lo[{tab_k}], tab_shape[{tab_k}], x)"
            tab_k += 1
        else:
            body = h.source(t.rate)
        if t.scale == "slow":
            body = f"{eps_slot} * {body}"
        lines.append(f"    if mask[{j}]:")
        if conds:
            lines.append(f"        if {' and '.join(conds)}:")
            lines.append(f"            out[{j}] = {body}")
            lines.append("        else:")
            lines.append(f"            out[{j}] = 0.0")
        else:
            lines.append(f"        out[{j}] = {body}")
    lines.append("    return 0")
    return "\n".join(lines) + "\n", h.slots


@lru_cache(maxsize=64)
def _compile(key, source: str):
    ns = {"math": math, "np": np, "_tab_lookup": _tab_lookup}
    exec(compile(source, f"<mpmkit props {hash(key) & 0xFFFF:x}>", "exec"), ns)
    props = numba.njit(error_model="numpy")(ns["props"])
    return props, _make_kernel(props)


class ModelProgram:
    """Everything the SSA kernel needs for one model."""

    def __init__(self, m: Model):
        self.model = m
        source, slots = _generate(m)
        self.props, self.kernel = _compile(structure_key(m), source)
        env = dict(m.params)
        self.consts = np.array([float(ex.evaluate(s, env)) for s in slots], dtype=float)
        self.lo = np.array([-BIG if v is None else v for v in m.lower], dtype=np.int64)
        self.hi = np.array([BIG if v is None else v for v in m.upper], dtype=np.int64)
        tables = [t.rate for t in m.transitions if isinstance(t.rate, TabulatedRate)]
        width = max([len(t.values) for t in tables], default=1)
        nd = max(m.n, 1)
        self.tabs = np.full((max(len(tables), 1), width), np.nan)
        self.tab_lo = np.zeros((max(len(tables), 1), nd), dtype=np.int64)
        self.tab_shape = np.ones((max(len(tables), 1), nd), dtype=np.int64)
        for k, t in enumerate(tables):
            self.tabs[k, : len(t.values)] = t.values
            self.tab_lo[k] = t.lo
            self.tab_shape[k] = t.shape
        self.updates = m.updates.copy()
        self.dep = self._dependencies(m)

    @staticmethod
    def _dependencies(m: Model) -> np.ndarray:
        """dep[j, k]: rate k must be recomputed after transition j fires."""
        reads = []
        for t in m.transitions:
            if isinstance(t.rate, TabulatedRate):
                vs = set(range(m.n))
            else:
                vs = {m.index(s) for s in ex.symbols(t.rate) if s in m.vars}
            vs |= {i for i, d in enumerate(t.update) if d != 0}
            reads.append(vs)
        dep = np.zeros((m.r, m.r), dtype=np.bool_)
        for j, t in enumerate(m.transitions):
            changed = {i for i, d in enumerate(t.update) if d != 0}
            for k in range(m.r):
                dep[j, k] = bool(changed & reads[k])
        return dep


# status codes returned by the kernel
DONE, ABSORBED, NEED_UNIFORMS, BUFFER_FULL, MAX_EVENTS, BAD_RATE = range(6)


def _make_kernel(props):
    @numba.njit(error_model="numpy")
    def kernel(
        x, t, t_end, c, lo, hi, tabs, tab_lo, tab_shape, upd, dep,
        uni, ui, max_events, nev,
        grid, gi, grid_out,
        rec_t, rec_j, nrec,
        stat_start, batch_len, nbatch, means, hist, hist_over, joint, joint_lost, use_joint, key_bits,
        a, mask,
    ):
        r = upd.shape[0]
        n = x.shape[0]
        G = grid.shape[0]
        H = hist.shape[1]
        while True:
            props(x, c, lo, hi, tabs, tab_lo, tab_shape, mask, a)
            for k in range(r):
                mask[k] = False
            a0 = 0.0
            for k in range(r):
                ak = a[k]
                if not (ak >= 0.0) or ak == np.inf:
                    for kk in range(r):
                        mask[kk] = True
                    return BAD_RATE, t, ui, nev, gi, nrec, k
                a0 += ak
            stop = False
            if a0 <= 0.0:
                t_next = t_end
                stop = True
            else:
                if ui + 2 > uni.shape[0]:
                    for kk in range(r):
                        mask[kk] = True
                    return NEED_UNIFORMS, t, ui, nev, gi, nrec, -1
                dt = -math.log(1.0 - uni[ui]) / a0
                u2 = uni[ui + 1]
                ui += 2
                t_next = t + dt
                if t_next >= t_end:
                    t_next = t_end
                    stop = True
            # grid points inside [t, t_next) see the current state
            while gi < G and (grid[gi] < t_next or (stop and grid[gi] <= t_end)):
                for i in range(n):
                    grid_out[gi, i] = x[i]
                gi += 1
            # time-weighted occupation over [max(t, stat_start), t_next]
            if batch_len > 0.0 and t_next > stat_start:
                s = t if t > stat_start else stat_start
                while s < t_next:
                    b = int((s - stat_start) / batch_len)
                    if b >= nbatch - 1:
                        b = nbatch - 1
                        e = t_next
                    else:
                        e = stat_start + (b + 1) * batch_len
                        if e > t_next:
                            e = t_next
                        if e <= s:
                            e = t_next
                    w = e - s
                    for i in range(n):
                        means[b, i] += w * x[i]
                        v = x[i]
                        if v >= 0 and v < H:
                            hist[i, v] += w
                        else:
                            hist_over[i] += w
                    if use_joint:
                        key = np.int64(b)
                        ok = True
                        for i in range(n):
                            v = x[i] - lo[i] if lo[i] > -BIG else x[i]
                            if v < 0 or v >= (np.int64(1) << key_bits):
                                ok = False
                            key = (key << key_bits) | v
                        if ok:
                            joint[key] = joint.get(key, 0.0) + w
                        else:
                            joint_lost[0] += w
                    s = e
            if stop:
                for kk in range(r):
                    mask[kk] = True
                if a0 <= 0.0:
                    return ABSORBED, t, ui, nev, gi, nrec, -1
                return DONE, t_end, ui, nev, gi, nrec, -1
            # choose the transition
            target = u2 * a0
            acc = 0.0
            j = -1
            for k in range(r):
                if a[k] > 0.0:
                    j = k
                    acc += a[k]
                    if target < acc:
                        break
            for i in range(n):
                x[i] += upd[j, i]
            for k in range(r):
                mask[k] = dep[j, k]
            t = t_next
            nev += 1
            if rec_t.shape[0] > 0:
                rec_t[nrec] = t
                rec_j[nrec] = j
                nrec += 1
                if nrec == rec_t.shape[0]:
                    return BUFFER_FULL, t, ui, nev, gi, nrec, -1
            if nev >= max_events:
                for kk in range(r):
                    mask[kk] = True
                return MAX_EVENTS, t, ui, nev, gi, nrec, -1

    return kernel
