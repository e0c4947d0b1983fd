"""Optimal control problem specifications, validation and lowering.

Three problem flavours are supported:

* :class:`ExplicitProblem`: ``q' = F(t, q, u)``,
* :class:`ImplicitProblem`: ``Psi(t, q, v, u) = 0`` with ``v`` standing for ``q'``,
* :class:`LagrangianControlProblem`: a Lagrangian ``L(t, q, v)`` driven by
  control forces ``F_i(t, q, v, u)``.

Both explicit and Lagrangian problems lower to the implicit form.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .symexpr import (
    DomainError,
    Expr,
    ExprError,
    Sym,
    Var,
    VarTable,
    diff,
    free_symbols,
    lambdify,
    make_rng,
    parse,
    sample_point,
    sub,
    total_derivative,
)

TIME = "t"
IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_RESERVED = re.compile(r"(t|p|E|lam\d+|(v|w|vb|p|A|B|C|D)_.*)\Z")


class ProblemFileError(ValueError):
    """Malformed problem document."""


class RegularityError(ValueError):
    """The Lagrangian Hessian is singular at sample points."""


def velocity_name(state: str) -> str:
    return f"v_{state}"


def acceleration_name(state: str) -> str:
    return f"w_{state}"


def bar_velocity_name(state: str) -> str:
    return f"vb_{state}"


@dataclass(frozen=True)
class Param:
    name: str
    value: float | None = None
    lo: float = -1.0
    hi: float = 1.0
    nonzero: bool = False

    def var(self) -> Var:
        return Var(self.name, "parameter", self.lo, self.hi, self.nonzero)


@dataclass(frozen=True)
class Boundary:
    """Boundary data.  ``init`` seeds non-state coordinates for IVP runs and
    supplies initial guesses for shooting."""

    t0: float = 0.0
    T: float | None = None
    q0: Mapping[str, float] = field(default_factory=dict)
    qT: Mapping[str, float] = field(default_factory=dict)
    init: Mapping[str, float] = field(default_factory=dict)


def _time_var():
    return Var(TIME, "time")


@dataclass(frozen=True)
class ExplicitProblem:
    states: tuple[str, ...]
    controls: tuple[str, ...]
    dynamics: Mapping[str, Expr]
    cost: Expr
    params: tuple[Param, ...] = ()
    boundary: Boundary | None = None

    kind = "explicit"

    def table(self) -> VarTable:
        return VarTable(
            [_time_var()]
            + [Var(s, "state") for s in self.states]
            + [Var(u, "control") for u in self.controls]
            + [p.var() for p in self.params]
        )


@dataclass(frozen=True)
class ImplicitProblem:
    states: tuple[str, ...]
    velocities: Mapping[str, str]
    controls: tuple[str, ...]
    constraints: tuple[Expr, ...]
    cost: Expr
    params: tuple[Param, ...] = ()
    boundary: Boundary | None = None
    constraint_names: tuple[str, ...] = ()

    kind = "implicit"

    def __post_init__(self):
        if not self.constraint_names:
            names = tuple(f"psi{i + 1}" for i in range(len(self.constraints)))
            object.__setattr__(self, "constraint_names", names)

    def table(self) -> VarTable:
        return VarTable(
            [_time_var()]
            + [Var(s, "state") for s in self.states]
            + [Var(self.velocities[s], "velocity") for s in self.states]
            + [Var(u, "control") for u in self.controls]
            + [p.var() for p in self.params],
            {s: self.velocities[s] for s in self.states},
        )


@dataclass(frozen=True)
class LagrangianControlProblem:
    states: tuple[str, ...]
    controls: tuple[str, ...]
    lagrangian: Expr
    forces: Mapping[str, Expr]
    cost: Expr
    params: tuple[Param, ...] = ()
    boundary: Boundary | None = None

    kind = "controlled_lagrangian"

    def table(self) -> VarTable:
        qs = list(self.states)
        return VarTable(
            [_time_var()]
            + [Var(s, "state") for s in qs]
            + [Var(velocity_name(s), "velocity") for s in qs]
            + [Var(acceleration_name(s), "auxiliary") for s in qs]
            + [Var(u, "control") for u in self.controls]
            + [p.var() for p in self.params],
            {**{s: velocity_name(s) for s in qs}, **{velocity_name(s): acceleration_name(s) for s in qs}},
        )


ProblemSpec = ExplicitProblem | ImplicitProblem | LagrangianControlProblem


def param_values(problem: ProblemSpec) -> dict[str, float]:
    missing = [p.name for p in problem.params if p.value is None]
    if missing:
        raise ProblemFileError(f"parameters without a value: {', '.join(missing)}")
    return {p.name: float(p.value) for p in problem.params}


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        lines = ["valid" if self.ok else "invalid"]
        lines += [f"violation: {v}" for v in self.violations]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def _check_names(problem, report: ValidationReport) -> bool:
    names = list(problem.states) + list(problem.controls) + [p.name for p in problem.params]
    seen = set()
    ok = True
    for n in names:
        if not IDENT.match(n):
            report.violations.append(f"invalid identifier '{n}'")
            ok = False
        elif n in seen:
            report.violations.append(f"name collision: '{n}' declared twice")
            ok = False
        elif _RESERVED.match(n) and not (n.startswith("v_") and n[2:] in problem.states):
            report.violations.append(f"name collision: '{n}' is reserved for generated variables")
            ok = False
        seen.add(n)
    if not problem.states:
        report.violations.append("at least one state is required")
        ok = False
    if not problem.controls:
        report.violations.append("at least one control is required")
        ok = False
    for p in problem.params:
        if not p.lo < p.hi:
            report.violations.append(f"parameter '{p.name}' has an empty range")
        elif p.nonzero and p.lo == 0.0 and p.hi == 0.0:
            report.violations.append(f"parameter '{p.name}' cannot be nonzero")
    return ok


def _check_vars(label: str, e: Expr, allowed: set[str], report: ValidationReport):
    bad = sorted(free_symbols(e) - allowed)
    if bad:
        report.violations.append(f"{label} references disallowed variables: {', '.join(bad)}")


def _sample_jacobian_ranks(exprs, wrt, table, trials, rng):
    names = sorted(set().union(*(free_symbols(e) for e in exprs)) | set(wrt))
    jac = lambdify([diff(e, x) for e in exprs for x in wrt], names)
    ranks = []
    for _ in range(trials):
        pt = sample_point(names, table, rng)
        try:
            vals = jac([pt[n] for n in names])
        except DomainError:
            continue
        m = np.array(vals).reshape(len(exprs), len(wrt))
        sv = np.linalg.svd(m, compute_uv=False)
        ranks.append(int(np.sum(sv > 1e-8 * sv[0])) if sv.size and sv[0] > 0 else 0)
    return ranks


def validate(problem: ProblemSpec, trials: int = 32, seed: int | None = None) -> ValidationReport:
    """Check variable-kind discipline, constraint rank and Lagrangian regularity."""
    report = ValidationReport()
    if not _check_names(problem, report):
        return report
    rng = make_rng(seed)
    table = problem.table()
    params = {p.name for p in problem.params}
    qs, us = set(problem.states), set(problem.controls)
    base = {TIME} | params
    if isinstance(problem, ExplicitProblem):
        if set(problem.dynamics) != qs:
            report.violations.append("dynamics must give exactly one right-hand side per state")
        for s, f in problem.dynamics.items():
            _check_vars(f"dynamics of {s}", f, base | qs | us, report)
        _check_vars("cost", problem.cost, base | qs | us, report)
    elif isinstance(problem, ImplicitProblem):
        vs = {problem.velocities[s] for s in problem.states}
        if not problem.constraints:
            report.violations.append("at least one constraint is required")
            return report
        for name, c in zip(problem.constraint_names, problem.constraints):
            _check_vars(f"constraint {name}", c, base | qs | vs | us, report)
        _check_vars("cost", problem.cost, base | qs | vs | us, report)
        if report.ok:
            wrt = list(problem.states) + [problem.velocities[s] for s in problem.states] + list(problem.controls)
            s = len(problem.constraints)
            ranks = _sample_jacobian_ranks(list(problem.constraints), wrt, table, trials, rng)
            full = sum(r == s for r in ranks)
            if not ranks or full < 0.9 * len(ranks):
                report.violations.append(
                    f"constraint differentials dependent: rank {s} at {full}/{len(ranks)} sample points"
                )
            else:
                report.notes.append(f"s = {s}, rank {s} at {full}/{len(ranks)} sample points")
    else:
        vs = {velocity_name(s) for s in problem.states}
        if set(problem.forces) != qs:
            report.violations.append("forces must give exactly one component per state")
        _check_vars("lagrangian", problem.lagrangian, base | qs | vs, report)
        for s, f in problem.forces.items():
            _check_vars(f"force on {s}", f, base | qs | vs | us, report)
        _check_vars("cost", problem.cost, base | qs | vs | us, report)
        if report.ok:
            try:
                _check_lagrangian_regular(problem, table, trials, rng)
            except RegularityError as exc:
                report.violations.append(str(exc))
    return report


def _hessian_v(problem: LagrangianControlProblem):
    vs = [velocity_name(s) for s in problem.states]
    return [[diff(diff(problem.lagrangian, a), b) for b in vs] for a in vs]


def _check_lagrangian_regular(problem, table, trials, rng, tol=1e-8):
    W = _hessian_v(problem)
    flat = [w for row in W for w in row]
    names = sorted(set(table.names) - {acceleration_name(s) for s in problem.states})
    f = lambdify(flat, names)
    n = len(problem.states)
    checked = 0
    for _ in range(trials):
        pt = sample_point(names, table, rng)
        try:
            m = np.array(f([pt[k] for k in names])).reshape(n, n)
        except DomainError:
            continue
        checked += 1
        if np.linalg.svd(m, compute_uv=False).min() <= tol:
            raise RegularityError("regularity violation: Hessian of L in the velocities is singular")
    if checked == 0:
        raise RegularityError("regularity undecidable: every sample point hit a domain error")


# ---------------------------------------------------------------------------
# lowering


def lower_explicit(problem: ExplicitProblem) -> ImplicitProblem:
    """``q' = F`` becomes ``Psi^i = v^i - F^i = 0``."""
    vel = {s: velocity_name(s) for s in problem.states}
    cons = tuple(sub(Sym(vel[s]), problem.dynamics[s]) for s in problem.states)
    return ImplicitProblem(
        states=tuple(problem.states),
        velocities=vel,
        controls=tuple(problem.controls),
        constraints=cons,
        cost=problem.cost,
        params=problem.params,
        boundary=problem.boundary,
    )


def lower_lagrangian(problem: LagrangianControlProblem, check: bool = True) -> ImplicitProblem:
    """Second-order implicit form of a controlled Lagrangian system.

    The new state is ``(q, v)`` with velocities ``(vb, w)``.  Constraints are
    the forced Euler-Lagrange equations ``phi_i = d/dt(dL/dv^i) - dL/dq^i - F_i``
    (total derivative along ``q' = vb``, ``v' = w``) and ``phibar^i = v^i - vb^i``.
    """
    if check:
        _check_lagrangian_regular(problem, problem.table(), 32, make_rng())
    qs = list(problem.states)
    vs = [velocity_name(s) for s in qs]
    new_states = tuple(qs + vs)
    vel = {**{s: bar_velocity_name(s) for s in qs}, **{velocity_name(s): acceleration_name(s) for s in qs}}
    lowered = ImplicitProblem(
        states=new_states,
        velocities=vel,
        controls=tuple(problem.controls),
        constraints=(),
        cost=problem.cost,
        params=problem.params,
        boundary=problem.boundary,
        constraint_names=("_",),
    )
    table = lowered.table()
    L = problem.lagrangian
    phis = []
    for s in qs:
        momentum = diff(L, velocity_name(s))
        phis.append(sub(sub(total_derivative(momentum, table), diff(L, s)), problem.forces[s]))
    bars = [sub(Sym(velocity_name(s)), Sym(bar_velocity_name(s))) for s in qs]
    names = tuple([f"phi_{s}" for s in qs] + [f"phibar_{s}" for s in qs])
    return ImplicitProblem(
        states=new_states,
        velocities=vel,
        controls=tuple(problem.controls),
        constraints=tuple(phis + bars),
        cost=problem.cost,
        params=problem.params,
        boundary=problem.boundary,
        constraint_names=names,
    )


def as_implicit(problem: ProblemSpec) -> ImplicitProblem:
    if isinstance(problem, ImplicitProblem):
        return problem
    if isinstance(problem, ExplicitProblem):
        return lower_explicit(problem)
    return lower_lagrangian(problem)


# ---------------------------------------------------------------------------
# cost


def simpson_uniform(values, h: float) -> float:
    """Composite Simpson rule; with an odd number of intervals the last one
    is integrated by the trapezoid rule."""
    y = np.asarray(values, dtype=float)
    n = len(y) - 1
    if n < 1:
        return 0.0
    if n == 1:
        return 0.5 * h * (y[0] + y[1])
    m = n if n % 2 == 0 else n - 1
    total = h / 3.0 * (y[0] + y[m] + 4.0 * y[1:m:2].sum() + 2.0 * y[2:m - 1:2].sum())
    if m != n:
        total += 0.5 * h * (y[m] + y[n])
    return float(total)


def evaluate_cost(problem: ProblemSpec, traj) -> float:
    """Integral of the running cost along a uniformly sampled trajectory."""
    t = np.asarray(traj.t)
    if len(t) > 2:
        steps = np.diff(t)
        if np.max(np.abs(steps - steps[0])) > 1e-9 * max(1.0, abs(t[-1])):
            raise ValueError("trajectory grid is not uniform")
    names = sorted(free_symbols(problem.cost))
    consts = {p.name: p.value for p in problem.params if p.value is not None}
    cols = [n for n in names if n not in consts]
    f = lambdify([problem.cost], cols, consts)
    data = [t if n == TIME else np.asarray(traj.column(n)) for n in cols]
    vals = [f([d[k] for d in data])[0] for k in range(len(t))]
    h = float(t[1] - t[0]) if len(t) > 1 else 0.0
    return simpson_uniform(vals, h)


# ---------------------------------------------------------------------------
# problem files


def _number(x, what):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ProblemFileError(f"{what} must be a number")
    if not math.isfinite(x):
        raise ProblemFileError(f"{what} must be finite")
    return float(x)


def _names(doc, key, required=True):
    v = doc.get(key, [] if not required else None)
    if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
        raise ProblemFileError(f"'{key}' must be an array of identifier strings")
    return tuple(v)


def _params(doc) -> tuple[Param, ...]:
    raw = doc.get("params", {})
    if not isinstance(raw, dict):
        raise ProblemFileError("'params' must be an object")
    out = []
    for name, spec in raw.items():
        if not isinstance(spec, dict):
            raise ProblemFileError(f"parameter '{name}' must be an object")
        value = spec.get("value")
        value = None if value is None else _number(value, f"value of {name}")
        rng = spec.get("range")
        if rng is None:
            lo, hi = (value - 0.5, value + 0.5) if value is not None else (-1.0, 1.0)
        else:
            if not isinstance(rng, list) or len(rng) != 2:
                raise ProblemFileError(f"range of {name} must be [lo, hi]")
            lo, hi = (_number(r, f"range of {name}") for r in rng)
        out.append(Param(name, value, lo, hi, bool(spec.get("nonzero", False))))
    return tuple(out)


def _boundary(doc) -> Boundary | None:
    raw = doc.get("boundary")
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ProblemFileError("'boundary' must be an object")

    def block(key):
        b = raw.get(key, {})
        if not isinstance(b, dict):
            raise ProblemFileError(f"boundary.{key} must be an object")
        return {k: _number(v, f"boundary.{key}.{k}") for k, v in b.items()}

    T = raw.get("T")
    return Boundary(
        t0=_number(raw.get("t0", 0.0), "boundary.t0"),
        T=None if T is None else _number(T, "boundary.T"),
        q0=block("q0"),
        qT=block("qT"),
        init=block("init"),
    )


def _expr(text, table, what):
    if not isinstance(text, str):
        raise ProblemFileError(f"{what} must be an expression string")
    try:
        return parse(text, table)
    except ExprError as exc:
        raise ProblemFileError(f"{what}: {exc}") from None


def load_problem(source) -> ProblemSpec:
    """Read a problem from a JSON path, JSON text or an already decoded dict."""
    if isinstance(source, dict):
        doc = source
    else:
        if isinstance(source, str) and source.lstrip().startswith("{"):
            text = source
        else:
            try:
                text = Path(source).read_text()
            except OSError as exc:
                raise ProblemFileError(f"cannot read problem file: {exc}") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ProblemFileError(f"malformed JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ProblemFileError("problem document must be a JSON object")
    kind = doc.get("kind")
    states = _names(doc, "states")
    controls = _names(doc, "controls")
    params = _params(doc)
    boundary = _boundary(doc)
    # identifiers known to the parser; duplicates are reported by validate()
    base = [TIME, *states, *controls, *(p.name for p in params)]
    if kind == "explicit":
        dyn = doc.get("dynamics")
        if not isinstance(dyn, dict):
            raise ProblemFileError("'dynamics' must map state names to expressions")
        for s in dyn:
            if s not in states:
                raise ProblemFileError(f"dynamics given for unknown state '{s}'")
        return ExplicitProblem(
            states, controls,
            {s: _expr(dyn[s], base, f"dynamics of {s}") for s in dyn},
            _expr(doc.get("cost"), base, "cost"), params, boundary,
        )
    if kind == "implicit":
        known = base + [velocity_name(s) for s in states]
        cons = doc.get("constraints")
        if not isinstance(cons, list):
            raise ProblemFileError("'constraints' must be an array of expressions")
        return ImplicitProblem(
            states, {s: velocity_name(s) for s in states}, controls,
            tuple(_expr(c, known, f"constraint {i + 1}") for i, c in enumerate(cons)),
            _expr(doc.get("cost"), known, "cost"), params, boundary,
        )
    if kind == "controlled_lagrangian":
        known = base + [velocity_name(s) for s in states]
        forces = doc.get("forces")
        if not isinstance(forces, dict):
            raise ProblemFileError("'forces' must map state names to expressions")
        for s in forces:
            if s not in states:
                raise ProblemFileError(f"force given for unknown state '{s}'")
        return LagrangianControlProblem(
            states, controls,
            _expr(doc.get("lagrangian"), known, "lagrangian"),
            {s: _expr(forces[s], known, f"force on {s}") for s in forces},
            _expr(doc.get("cost"), known, "cost"), params, boundary,
        )
    raise ProblemFileError(f"unknown problem kind {kind!r}")
