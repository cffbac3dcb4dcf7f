"""Command line interface: ``mpm <command> <model.json> [options]``.

A model argument is a path to a JSON model or the name of a bundled
fixture (``gene``, ``toggle``, ...).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import cme, meanfield, pipeline, qe, ssa, stoich
from .model import Model, ModelError, dump_model, load_model

_BACKENDS = {"exact": "exact_cme", "nested": "nested_ssa", "closed": "closed_form"}


def _pairs(items, kind=float) -> dict:
    out = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {item!r}")
        out[key.strip()] = kind(val)
    return out


def _load(args) -> Model:
    m = load_model(args.model)
    params = _pairs(args.param)
    if "N" in params:
        m = pipeline.resize(m, params.pop("N"))
    return m.with_params(**params) if params else m


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return int(v)
    return repr(float(v))


def _emit_json(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------


def cmd_invariants(args) -> int:
    m = _load(args)
    S = stoich.stoich_matrix(m)
    rank, codim = stoich.rank_codim(S)
    doc = {
        "vars": list(m.vars),
        "S": S.tolist(),
        "rank": rank,
        "codim": codim,
        "p_invariants": [list(c) for c in stoich.p_invariants(S)],
    }
    fast = [j for j, t in enumerate(m.transitions) if t.scale == "fast"]
    if fast:
        red = pipeline.prepare(m)
        Sf = stoich.stoich_matrix(red, fast)
        rf, cf = stoich.rank_codim(Sf)
        doc["fast"] = {
            "vars": list(red.vars),
            "transitions": [red.transitions[j].label for j in fast],
            "S": Sf.tolist(),
            "rank": rf,
            "codim": cf,
            "p_invariants": [list(c) for c in stoich.p_invariants(Sf)],
        }
    _emit_json(doc, args.out)
    return 0


def cmd_simulate(args) -> int:
    m = _load(args)
    out = Path(args.out)
    if args.stationary:
        burn = args.burn_in if args.burn_in is not None else 0.1 * args.t_end
        rows = []
        pooled: dict[str, dict[int, float]] = {v: {} for v in m.vars}
        for rep in range(args.replicates):
            est = ssa.estimate_stationary(m, burn, args.t_end, ssa.RngSpec(args.seed, rep))
            rows.append([rep, *est.mean, *est.std_err])
            for v in m.vars:
                for a, b in zip(*est.histograms[v]):
                    pooled[v][int(a)] = pooled[v].get(int(a), 0.0) + b
        _write_csv(out, ["replicate", *[f"mean_{v}" for v in m.vars], *[f"se_{v}" for v in m.vars]], rows)
        for v, acc in pooled.items():
            total = sum(acc.values())
            _write_csv(out.parent / f"hist_{v}.csv", ["value", "probability"],
                       [(k, acc[k] / total) for k in sorted(acc)])
        return 0
    ens = ssa.run_ensemble(m, args.t_end, args.replicates, args.grid_points, seed=args.seed)
    header = ["t", *[f"mean_{v}" for v in m.vars], *[f"var_{v}" for v in m.vars]]
    _write_csv(out, header, np.hstack([ens.grid[:, None], ens.mean, ens.var]))
    for v in m.vars:
        vals, probs = ens.histogram(v, len(ens.grid) - 1)
        _write_csv(out.parent / f"hist_{v}.csv", ["value", "probability"], zip(vals, probs))
    if args.figure:
        from .plotting import plot_ensemble

        plot_ensemble(ens, args.figure)
    return 0


def cmd_cme(args) -> int:
    m = _load(args)
    trunc = _pairs(args.trunc, int)
    g = cme.build_generator(m, trunc, limit=args.limit)
    if args.stationary:
        dist = cme.stationary_distribution(g)
    else:
        dist = cme.transient_solve(g, m.init, args.t)
    states = g.index.states()
    keep = dist.p > 0 if args.nonzero else np.ones(g.size, dtype=bool)
    _write_csv(args.out, [*m.vars, "probability"], (list(s) + [p] for s, p in zip(states[keep], dist.p[keep])))
    edge = {k: v for k, v in dist.boundary_mass().items() if k in trunc}
    if edge:
        print(json.dumps({"truncation_boundary_mass": edge}, sort_keys=True), file=sys.stderr)
    return 0


def cmd_meanfield(args) -> int:
    m = _load(args)
    f = meanfield.limit_rates(m)
    x0 = np.asarray(m.init, dtype=float) / m.N
    sol = meanfield.integrate(f, x0, args.t_end, tol=args.tol, grid=args.grid_points)
    _write_csv(args.out, ["t", *m.vars], np.hstack([sol.t[:, None], sol.x]))
    if args.figure:
        from .plotting import plot_ode

        plot_ode(sol.t, sol.x, m.vars, args.figure)
    return 0


def _parse_box(text: str | None, n: int):
    if text is None:
        return None
    parts = [p for p in text.split(",") if p]
    if len(parts) == 1 and n > 1:
        parts = parts * n
    if len(parts) != n:
        raise ModelError(f"--box needs {n} intervals lo:hi, got {len(parts)}")
    box = []
    for p in parts:
        lo, _, hi = p.partition(":")
        box.append((float(lo), float(hi)))
    return box


def cmd_equilibria(args) -> int:
    m = _load(args)
    if args.fast is not None:
        mr = pipeline.prepare(m)
        p = qe.make_partition(mr)
        f = meanfield.limit_rates(mr)
        y = np.array([float(v) for v in args.fast.split(",")])
        fun = qe.fast_layer(f, p, y)
        box = _parse_box(args.box, len(p.fast_names)) or p.fast_box()
        names = list(p.fast_names)
    else:
        fun = meanfield.limit_rates(m)
        lo, hi = meanfield._probe_box(m)
        box = _parse_box(args.box, m.n) or list(zip(lo, hi))
        names = list(m.vars)
    eqs = meanfield.find_equilibria(fun, box, starts=args.starts, tol=args.tol)
    doc = {
        "vars": names,
        "box": [list(b) for b in box],
        "starts": args.starts,
        "converged_starts": eqs.converged_starts,
        "diagnostic": eqs.diagnostic,
        "equilibria": [
            {"x": [float(v) for v in e.x], "stability": e.stability, "residual": e.residual,
             "eigenvalues_real": [float(v) for v in np.real(e.eigenvalues)]}
            for e in eqs
        ],
    }
    _emit_json(doc, args.out)
    return 0


def _backend_opts(args, backend: str) -> dict:
    opts: dict = {}
    if backend == "exact_cme" and args.trunc:
        opts["trunc"] = _pairs(args.trunc, int)
    if backend == "nested_ssa":
        opts["seed"] = args.seed
        if args.inner_burn_in:
            opts["burn_in"] = args.inner_burn_in
        if args.inner_horizon:
            opts["horizon"] = args.inner_horizon
    if backend == "closed_form":
        opts["expressions"] = _pairs(args.expr, str)
    return opts


def cmd_qe(args) -> int:
    m = pipeline.prepare(_load(args))
    backend = _BACKENDS[args.backend]
    red = qe.qe_reduce_mpm(m, None, backend, **_backend_opts(args, backend))
    reduced = red.to_model(_pairs(args.cap, int))
    Path(args.out).write_text(dump_model(reduced) + "\n")
    return 0


def cmd_qe_ode(args) -> int:
    m = pipeline.prepare(_load(args))
    sol = pipeline.q_of_m(m, None, args.t_end, args.grid_points, tol=args.tol)
    p = qe.make_partition(m)
    _write_csv(args.out, ["tau", *p.slow_names], np.hstack([sol.t[:, None], sol.x]))
    if args.figure:
        from .plotting import plot_ode

        plot_ode(sol.t, sol.x, p.slow_names, args.figure, xlabel="slow time")
    return 0


def cmd_commute(args) -> int:
    m = _load(args)
    backend = _BACKENDS[args.backend]
    hist = None
    if args.histogram_horizon:
        hist = {"slow_horizon": args.histogram_horizon, "replicates": args.histogram_replicates,
                "params": _pairs(args.histogram_param)}
        if args.histogram_start:
            hist["start"] = [int(v) for v in args.histogram_start.split(",")]
    rep = pipeline.commute_compare(
        m,
        T=args.t_end,
        tol=args.tol,
        backend=backend,
        backend_opts=_backend_opts(args, backend),
        grid=args.grid_points,
        with_ssa=args.with_ssa,
        replicates=args.replicates,
        seed=args.seed,
        histogram=hist,
    )
    Path(args.out).write_text(rep.to_json())
    if args.csv:
        cols, data = rep.curves()
        _write_csv(args.csv, cols, data)
    if args.figure:
        from .plotting import plot_commutation, plot_histogram

        plot_commutation(rep, args.figure)
        if rep.histogram is not None:
            fig = Path(args.figure)
            plot_histogram(rep.histogram, fig.with_name(fig.stem + "_histogram" + fig.suffix))
    print(f"D = {rep.D}  verdict = {rep.verdict}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpm", description="Markov population model toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("model", help="model JSON file or bundled fixture name")
        sp.add_argument("--param", action="append", metavar="NAME=VALUE", help="override a parameter (repeatable)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("invariants", cmd_invariants, "stoichiometry matrix, rank and p-invariants")
    sp.add_argument("--out")

    sp = add("simulate", cmd_simulate, "SSA ensemble statistics")
    sp.add_argument("--t-end", type=float, required=True)
    sp.add_argument("--replicates", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--grid-points", type=int, default=101)
    sp.add_argument("--stationary", action="store_true", help="time-averaged statistics over [burn-in, t-end]")
    sp.add_argument("--burn-in", type=float, help="default: 10%% of t-end")
    sp.add_argument("--out", required=True)
    sp.add_argument("--figure")

    sp = add("cme", cmd_cme, "master equation on a truncated box")
    sp.add_argument("--trunc", action="append", metavar="VAR=CAP")
    mode = sp.add_mutually_exclusive_group(required=True)
    mode.add_argument("--stationary", action="store_true")
    mode.add_argument("--t", type=float)
    sp.add_argument("--limit", type=int, default=cme.DEFAULT_LIMIT)
    sp.add_argument("--nonzero", action="store_true", help="omit zero-probability states")
    sp.add_argument("--out", required=True)

    sp = add("meanfield", cmd_meanfield, "integrate the mean-field ODE")
    sp.add_argument("--t-end", type=float, required=True)
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.add_argument("--grid-points", type=int, default=201)
    sp.add_argument("--out", required=True)
    sp.add_argument("--figure")

    sp = add("equilibria", cmd_equilibria, "equilibria of the mean-field drift")
    sp.add_argument("--box", help="lo:hi per variable, comma separated (one interval is reused)")
    sp.add_argument("--starts", type=int, default=64)
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.add_argument("--fast", metavar="Y", help="fast layer at slow density Y (comma separated)")
    sp.add_argument("--out")

    for name, fn, help in (("qe", cmd_qe, "quasi-equilibrium reduced model as JSON"),
                           ("commute", cmd_commute, "compare both reduction orders")):
        sp = add(name, fn, help)
        sp.add_argument("--backend", choices=sorted(_BACKENDS), default="exact")
        sp.add_argument("--trunc", action="append", metavar="VAR=CAP", help="fast-variable caps (exact backend)")
        sp.add_argument("--expr", action="append", metavar="LABEL=RATE", help="closed-form averaged rate")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--inner-burn-in", type=float)
        sp.add_argument("--inner-horizon", type=float)
        sp.add_argument("--out", required=True)
    sub.choices["qe"].add_argument("--cap", action="append", metavar="VAR=CAP", help="slow-variable caps for tables")
    sp = sub.choices["commute"]
    sp.add_argument("--t-end", type=float, default=5.0)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--grid-points", type=int, default=201)
    sp.add_argument("--with-ssa", action="store_true")
    sp.add_argument("--replicates", type=int, default=100)
    sp.add_argument("--csv")
    sp.add_argument("--figure")
    sp.add_argument("--histogram-horizon", type=float, help="attach a stationary histogram over this many slow units")
    sp.add_argument("--histogram-replicates", type=int, default=50)
    sp.add_argument("--histogram-param", action="append", metavar="NAME=VALUE")
    sp.add_argument("--histogram-start", help="start state for the histogram runs, comma separated")

    sp = add("qe-ode", cmd_qe_ode, "integrate the Tikhonov-reduced ODE")
    sp.add_argument("--t-end", type=float, required=True)
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.add_argument("--grid-points", type=int, default=201)
    sp.add_argument("--out", required=True)
    sp.add_argument("--figure")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except (ModelError, ValueError, ArithmeticError, MemoryError, OSError) as exc:
        print(f"mpm {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
