"""Markov population models as data: JSON schema, validation and rate evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence, Union

import numpy as np

from . import expr as ex
from .expr import EvaluationError, ExprSyntaxError, RateExpr, parse_rate_expr

__all__ = [
    "ModelError",
    "Transition",
    "TabulatedRate",
    "Model",
    "parse_model",
    "load_model",
    "dump_model",
    "model_to_dict",
    "eval_rate",
    "fixture_path",
]

SCALES = ("slow", "fast", "unscaled")


class ModelError(ValueError):
    """Invalid model definition or a rate that evaluates negative."""


@dataclass(frozen=True)
class TabulatedRate:
    """Rate given by a table over a box of integer states.

    ``values`` is flattened in C order over ``shape``; the box starts at
    ``lo``.  Looking up a state outside the box is an error.
    """

    lo: tuple[int, ...]
    shape: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.shape):
            raise ModelError("table lo/shape length mismatch")
        if len(self.values) != int(np.prod(self.shape)):
            raise ModelError(
                f"table has {len(self.values)} values, shape {self.shape} needs {int(np.prod(self.shape))}"
            )

    @cached_property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float).reshape(self.shape)

    def lookup(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.int64))
        rel = states - np.asarray(self.lo)
        if np.any(rel < 0) or np.any(rel >= np.asarray(self.shape)):
            bad = states[np.any((rel < 0) | (rel >= np.asarray(self.shape)), axis=1)][0]
            raise EvaluationError(f"state {tuple(int(v) for v in bad)} outside rate table")
        return self.array[tuple(rel.T)]


Rate = Union[RateExpr, TabulatedRate]


@dataclass(frozen=True)
class Transition:
    label: str
    update: tuple[int, ...]
    rate: Rate
    scale: str = "unscaled"

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ModelError(f"transition {self.label!r}: scale must be one of {SCALES}")
        object.__setattr__(self, "update", tuple(int(v) for v in self.update))

    @property
    def rate_text(self) -> str:
        if isinstance(self.rate, TabulatedRate):
            return "table"
        return ex.to_string(self.rate)


Bound = Union[int, str, None]


def _resolve_bound(b: Bound, params: Mapping[str, float], what: str) -> int | None:
    if b is None:
        return None
    if isinstance(b, (int, np.integer)):
        return int(b)
    if isinstance(b, float):
        if b != int(b):
            raise ModelError(f"{what}: bound {b} is not an integer")
        return int(b)
    try:
        value = ex.evaluate(parse_rate_expr(b), params)
    except (ExprSyntaxError, KeyError, EvaluationError) as exc:
        raise ModelError(f"{what}: cannot evaluate bound {b!r}: {exc}") from exc
    if abs(value - round(value)) > 1e-9:
        raise ModelError(f"{what}: bound {b!r} evaluates to non-integer {value}")
    return int(round(value))


@dataclass(frozen=True)
class Model:
    """An MPM ``(X, M, T, X0)`` plus parameters.

    ``domain`` holds per-variable ``(lo, hi)`` bounds, each an int, ``None``
    (unbounded) or a parameter expression such as ``"N"``.  Parameters named
    in ``extensive`` are counts that scale linearly with the system size
    ``N`` when taking the mean-field limit.
    """

    name: str
    vars: tuple[str, ...]
    domain: tuple[tuple[Bound, Bound], ...]
    transitions: tuple[Transition, ...]
    params: Mapping[str, float]
    init: tuple[int, ...]
    extensive: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "vars", tuple(self.vars))
        object.__setattr__(self, "domain", tuple(tuple(b) for b in self.domain))
        object.__setattr__(self, "transitions", tuple(self.transitions))
        object.__setattr__(self, "params", MappingProxyType({k: float(v) for k, v in self.params.items()}))
        object.__setattr__(self, "init", tuple(int(v) for v in self.init))
        object.__setattr__(self, "extensive", tuple(self.extensive))
        self._validate()

    # -- validation ---------------------------------------------------------

    def _validate(self):
        n = len(self.vars)
        if n < 1:
            raise ModelError("model needs at least one variable")
        if len(set(self.vars)) != n:
            raise ModelError("duplicate variable names")
        if not self.transitions:
            raise ModelError("model needs at least one transition")
        clash = set(self.vars) & set(self.params)
        if clash:
            raise ModelError(f"names used both as variable and parameter: {sorted(clash)}")
        for key in ("N", "eps"):
            if key not in self.params:
                raise ModelError(f"missing required parameter {key!r}")
        if self.params["N"] < 1:
            raise ModelError("N must be >= 1")
        if not self.params["eps"] > 0:
            raise ModelError("eps must be > 0")
        for name in self.extensive:
            if name not in self.params:
                raise ModelError(f"extensive parameter {name!r} is not a parameter")
        if len(self.domain) != n:
            raise ModelError(f"domain has {len(self.domain)} entries for {n} variables")
        if len(self.init) != n:
            raise ModelError(f"init has length {len(self.init)}, expected {n}")
        labels = [t.label for t in self.transitions]
        if len(set(labels)) != len(labels):
            raise ModelError("duplicate transition labels")
        known = set(self.vars) | set(self.params)
        for t in self.transitions:
            if len(t.update) != n:
                raise ModelError(
                    f"transition {t.label!r}: update has length {len(t.update)}, expected {n} (vars {list(self.vars)})"
                )
            if isinstance(t.rate, TabulatedRate):
                if len(t.rate.lo) != n:
                    raise ModelError(f"transition {t.label!r}: table dimension mismatch")
                continue
            unknown = ex.symbols(t.rate) - known
            if unknown:
                raise ModelError(f"transition {t.label!r}: unknown symbol(s) {sorted(unknown)} in rate")
        lo, hi = self.lower, self.upper
        for i, v in enumerate(self.vars):
            if lo[i] is not None and hi[i] is not None and lo[i] > hi[i]:
                raise ModelError(f"empty domain for {v}")
        if not self.in_domain(self.init):
            raise ModelError(f"init {self.init} outside domain")

    # -- derived data -------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.vars)

    @property
    def r(self) -> int:
        return len(self.transitions)

    @property
    def N(self) -> float:
        return self.params["N"]

    @property
    def eps(self) -> float:
        return self.params["eps"]

    @cached_property
    def lower(self) -> tuple[int | None, ...]:
        return tuple(_resolve_bound(b[0], self.params, f"domain[{i}]") for i, b in enumerate(self.domain))

    @cached_property
    def upper(self) -> tuple[int | None, ...]:
        return tuple(_resolve_bound(b[1], self.params, f"domain[{i}]") for i, b in enumerate(self.domain))

    @cached_property
    def updates(self) -> np.ndarray:
        """r x n integer array of update vectors."""
        return np.array([t.update for t in self.transitions], dtype=np.int64).reshape(self.r, self.n)

    def index(self, var: str) -> int:
        return self.vars.index(var)

    def scale_factor(self, t: Transition) -> float:
        return self.eps if t.scale == "slow" else 1.0

    def in_domain(self, state) -> bool:
        for v, lo, hi in zip(state, self.lower, self.upper):
            if lo is not None and v < lo:
                return False
            if hi is not None and v > hi:
                return False
        return True

    def domain_mask(self, states: np.ndarray) -> np.ndarray:
        """Boolean mask of rows of ``states`` inside the domain."""
        states = np.atleast_2d(states)
        ok = np.ones(states.shape[0], dtype=bool)
        for i, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            if lo is not None:
                ok &= states[:, i] >= lo
            if hi is not None:
                ok &= states[:, i] <= hi
        return ok

    def with_params(self, init: Sequence[int] | None = None, **params) -> "Model":
        """Copy with some parameters changed (and optionally a new initial state)."""
        unknown = set(params) - set(self.params)
        if unknown:
            raise ModelError(f"unknown parameters {sorted(unknown)}")
        merged = dict(self.params)
        merged.update(params)
        init = self.init if init is None else tuple(int(v) for v in init)
        return replace(self, params=merged, init=init)

    def with_init(self, init: Sequence[int]) -> "Model":
        return replace(self, init=tuple(int(v) for v in init))

    # -- rate evaluation ----------------------------------------------------

    @cached_property
    def _vector_rates(self):
        fns = []
        for t in self.transitions:
            if isinstance(t.rate, TabulatedRate):
                fns.append(None)
            else:
                fns.append(ex.compile_expr(t.rate, self.vars + tuple(self.params)))
        return fns

    def base_rates(self, states: np.ndarray, params: Mapping[str, float] | None = None) -> np.ndarray:
        """Base rates W0 (no eps factor, no boundary zeroing), shape (S, r).

        ``states`` may be real valued; it is used by the mean-field code.
        """
        states = np.atleast_2d(np.asarray(states))
        params = self.params if params is None else params
        cols = [states[:, i].astype(float) for i in range(self.n)]
        pvals = [params[k] for k in self.params]
        out = np.empty((states.shape[0], self.r))
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            for j, (t, fn) in enumerate(zip(self.transitions, self._vector_rates)):
                if fn is None:
                    out[:, j] = t.rate.lookup(states)
                else:
                    out[:, j] = fn(*cols, *pvals)
        return out

    def effective_rates(self, states: np.ndarray) -> np.ndarray:
        """Effective rates at integer states, shape (S, r).

        Slow transitions carry the factor eps, and a rate is zero whenever its
        update would leave the domain.  Raises :class:`ModelError` on negative
        rates and :class:`EvaluationError` on non-finite ones.
        """
        states = np.atleast_2d(np.asarray(states, dtype=np.int64))
        raw = self.base_rates(states)
        for j, t in enumerate(self.transitions):
            ok = self.domain_mask(states + self.updates[j])
            raw[~ok, j] = 0.0
            raw[:, j] *= self.scale_factor(t)
        bad = ~np.isfinite(raw)
        if bad.any():
            s, j = np.argwhere(bad)[0]
            raise EvaluationError(
                f"rate of {self.transitions[j].label!r} is not finite at state {tuple(int(v) for v in states[s])}"
            )
        neg = raw < 0
        if neg.any():
            s, j = np.argwhere(neg)[0]
            raise ModelError(
                f"rate of {self.transitions[j].label!r} is negative ({raw[s, j]}) at state {tuple(int(v) for v in states[s])}"
            )
        return raw


def eval_rate(t: Transition | int, state: Sequence[int], m: Model) -> float:
    """Effective (eps-scaled) rate of one transition at one in-domain state."""
    if isinstance(t, int):
        t = m.transitions[t]
    state = tuple(int(v) for v in state)
    if len(state) != m.n:
        raise ModelError(f"state has length {len(state)}, expected {m.n}")
    if not m.in_domain(state):
        raise ModelError(f"state {state} outside domain")
    target = tuple(s + d for s, d in zip(state, t.update))
    if not m.in_domain(target):
        return 0.0
    if isinstance(t.rate, TabulatedRate):
        w0 = float(t.rate.lookup(np.asarray(state))[0])
    else:
        env = dict(m.params)
        env.update(zip(m.vars, (float(v) for v in state)))
        w0 = float(ex.evaluate(t.rate, env))
    if not math.isfinite(w0):
        raise EvaluationError(f"rate of {t.label!r} is not finite at state {state}")
    w = m.scale_factor(t) * w0
    if w < 0:
        raise ModelError(f"rate of {t.label!r} is negative ({w}) at state {state}")
    return w


# ---------------------------------------------------------------------------
# JSON


def _bound_from_json(v, where):
    if v is None:
        return None
    if isinstance(v, bool):
        raise ModelError(f"{where}: boolean is not a bound")
    if isinstance(v, int):
        return v
    if isinstance(v, float) and v == int(v):
        return int(v)
    if isinstance(v, str):
        return v
    raise ModelError(f"{where}: invalid bound {v!r}")


def _from_dict(doc: Mapping) -> Model:
    required = ("name", "vars", "domain", "params", "init", "transitions")
    for key in required:
        if key not in doc:
            raise ModelError(f"missing key {key!r}")
    n = len(doc["vars"])
    domain = []
    for i, b in enumerate(doc["domain"]):
        if not isinstance(b, (list, tuple)) or len(b) != 2:
            raise ModelError(f"domain[{i}] must be [lo, hi]")
        lo = _bound_from_json(b[0], f"domain[{i}][0]")
        if lo is None or (isinstance(lo, int) and lo < 0):
            raise ModelError(f"domain[{i}]: lower bound must be an integer >= 0")
        domain.append((lo, _bound_from_json(b[1], f"domain[{i}][1]")))
    transitions = []
    for k, td in enumerate(doc["transitions"]):
        for key in ("label", "update", "rate"):
            if key not in td:
                raise ModelError(f"transitions[{k}]: missing key {key!r}")
        if len(td["update"]) != n:
            raise ModelError(
                f"transitions[{k}] ({td['label']}): update has length {len(td['update'])}, expected {n}"
            )
        if "table" in td:
            tab = td["table"]
            rate: Rate = TabulatedRate(tuple(tab["lo"]), tuple(tab["shape"]), tuple(float(v) for v in tab["values"]))
        else:
            rate = parse_rate_expr(td["rate"])
        transitions.append(Transition(td["label"], tuple(td["update"]), rate, td.get("scale", "unscaled")))
    return Model(
        name=doc["name"],
        vars=tuple(doc["vars"]),
        domain=tuple(domain),
        transitions=tuple(transitions),
        params=doc["params"],
        init=tuple(doc["init"]),
        extensive=tuple(doc.get("extensive", ())),
    )


def parse_model(text: str) -> Model:
    """Parse and validate a JSON model document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelError("model document must be a JSON object")
    return _from_dict(doc)


def fixture_path(name: str) -> Path:
    """Path of a bundled model (``gene``, ``toggle``, ...)."""
    name = name if name.endswith(".json") else name + ".json"
    return Path(__file__).with_name("models") / name


def load_model(path: str | Path) -> Model:
    """Load a model file; bare names of bundled fixtures are accepted too."""
    path = Path(path)
    if not path.exists():
        bundled = fixture_path(path.name)
        if path.parent == Path(".") and bundled.exists():
            path = bundled
    return parse_model(path.read_text(encoding="utf-8"))


def model_to_dict(m: Model) -> dict:
    doc: dict = {
        "name": m.name,
        "vars": list(m.vars),
        "domain": [[lo, hi] for lo, hi in m.domain],
        "params": {k: (int(v) if float(v).is_integer() and abs(v) < 1e15 else v) for k, v in m.params.items()},
        "init": list(m.init),
        "transitions": [],
    }
    for t in m.transitions:
        td = {"label": t.label, "update": list(t.update), "rate": t.rate_text, "scale": t.scale}
        if isinstance(t.rate, TabulatedRate):
            td["table"] = {"lo": list(t.rate.lo), "shape": list(t.rate.shape), "values": list(t.rate.values)}
        doc["transitions"].append(td)
    if m.extensive:
        doc["extensive"] = list(m.extensive)
    return doc


def dump_model(m: Model) -> str:
    return json.dumps(model_to_dict(m), indent=2)
