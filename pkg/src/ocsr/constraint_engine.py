"""Constraint algorithm: repeated tangency of the unknown vector field to the
constraint set until no new constraints appear."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .pontryagin import (
    DerivationError,
    PontryaginSystem,
    VectorFieldAnsatz,
    adjoint_equations,
)
from .symexpr import (
    Const,
    DomainError,
    Expr,
    UndecidableError,
    VarTable,
    diff,
    div,
    free_symbols,
    lambdify,
    make_rng,
    neg,
    sample_point,
    size,
    substitute,
    to_str,
    zero_status,
)

COORDINATE_KINDS = ("state", "velocity", "control", "momentum-pi", "momentum-p")
# preferred coordinate to eliminate when a constraint is affine in several
_ELIM_RANK = {"velocity": 0, "control": 1, "momentum-p": 2, "momentum-pi": 3, "state": 4}


class NonAffineError(Exception):
    pass


class InconsistentSystemError(Exception):
    pass


class SingularPivotError(Exception):
    """A pivot vanishes on part of the manifold: needs a case split."""


class ChainError(Exception):
    pass


def tangency(field: VectorFieldAnsatz | Mapping[str, Expr], c: Expr) -> Expr:
    """``Z(c)`` for a (partially determined) vector field."""
    if not isinstance(field, VectorFieldAnsatz):
        field = VectorFieldAnsatz(dict(field), ())
    return field.apply(c)


def _coeff_class(e: Expr, table: VarTable) -> int:
    """0 numeric, 1 nonzero parameters, 2 other parameters, 3 coordinate-dependent."""
    if isinstance(e, Const):
        return 0
    names = free_symbols(e)
    if any(table.kind(n) != "parameter" for n in names):
        return 3
    return 1 if all(table[n].nonzero for n in names) else 2


def _is_constant(e: Expr, table: VarTable) -> bool:
    return all(table.kind(n) == "parameter" for n in free_symbols(e))


@dataclass
class LinearSolution:
    solved: dict[str, Expr]
    residuals: list[tuple[int, Expr]]
    pivots: list[tuple[str, Expr]]
    undetermined: list[str]


def solve_linear(equations: Sequence[Expr], unknowns: Sequence[str], table: VarTable,
                 rng: np.random.Generator | None = None, trials: int = 16, tol: float = 1e-9,
                 status=None) -> LinearSolution:
    """Symbolic Gaussian elimination of equations affine in ``unknowns``.

    Pivots are chosen globally: numeric first, then parameter-only, then the
    smallest tree.  A pivot must be nonzero at every sample point (``status``
    may reduce on a manifold first).  Equations left with no unknowns are
    returned as residuals, indexed into the input.
    """
    rng = make_rng() if rng is None else rng
    memo: dict[Expr, str] = {}

    def st(e):
        if e not in memo:
            memo[e] = status(e) if status else zero_status(e, table, rng, trials, tol)
        return memo[e]

    unknowns = list(unknowns)
    uset = set(unknowns)
    eqs = list(equations)
    for i, e in enumerate(eqs):
        for x in sorted(free_symbols(e) & uset):
            c = diff(e, x)
            for y in sorted(free_symbols(c) & uset):
                if st(diff(c, y)) != "zero":
                    raise NonAffineError(f"equation {i} is not affine in {x}, {y}")

    solved: dict[str, Expr] = {}
    pivots: list[tuple[str, Expr]] = []
    active = list(range(len(eqs)))
    while True:
        best = None
        indefinite = None
        for i in active:
            for j, x in enumerate(unknowns):
                if x in solved or x not in free_symbols(eqs[i]):
                    continue
                c = diff(eqs[i], x)
                s = st(c)
                if s == "zero":
                    continue
                if s == "indefinite":
                    indefinite = indefinite or (i, x, c)
                    continue
                key = (_coeff_class(c, table), size(c), i, j)
                if best is None or key < best[0]:
                    best = (key, i, x, c)
        if best is None:
            if indefinite is not None:
                i, x, c = indefinite
                raise SingularPivotError(
                    f"coefficient of {x} in equation {i} vanishes on part of the domain: {to_str(c)}")
            break
        _, i, x, c = best
        value = neg(div(substitute(eqs[i], {x: 0.0}), c))
        pivots.append((x, c))
        active.remove(i)
        for k in active:
            if x in free_symbols(eqs[k]):
                eqs[k] = substitute(eqs[k], {x: value})
        for k in solved:
            if x in free_symbols(solved[k]):
                solved[k] = substitute(solved[k], {x: value})
        solved[x] = value

    residuals = []
    for i in active:
        e = substitute(eqs[i], {x: 0.0 for x in unknowns})
        if st(e) == "zero":
            continue
        if _is_constant(e, table):
            raise InconsistentSystemError(f"equation {i} reduces to a nonzero constant: {to_str(e)}")
        residuals.append((i, e))
    undetermined = [x for x in unknowns if x not in solved]
    return LinearSolution(solved, residuals, pivots, undetermined)


# ---------------------------------------------------------------------------
# constraint manifold


class Manifold:
    """Triangular elimination map: each admitted constraint removes one
    coordinate, expressed in the remaining (free) ones."""

    def __init__(self, table: VarTable, coordinates: Sequence[str], rng: np.random.Generator,
                 trials: int = 16, tol: float = 1e-9):
        self.table = table
        self.coordinates = list(coordinates)
        self.rng = rng
        self.trials = trials
        self.tol = tol
        self.eliminated: dict[str, Expr] = {}
        self.pivots: list[tuple[str, Expr]] = []

    @property
    def free(self) -> list[str]:
        return [x for x in self.coordinates if x not in self.eliminated]

    def reduce(self, e: Expr) -> Expr:
        if not self.eliminated or not (free_symbols(e) & self.eliminated.keys()):
            return e
        return substitute(e, self.eliminated)

    def status(self, e: Expr) -> str:
        return zero_status(self.reduce(e), self.table, self.rng, self.trials, self.tol)

    def admit(self, c: Expr) -> str:
        """Eliminate one coordinate using the reduced constraint ``c``."""
        best = None
        for x in sorted(free_symbols(c) & set(self.free)):
            coef = diff(c, x)
            if self.status(diff(coef, x)) != "zero":
                continue
            if self.status(coef) != "nonzero":
                continue
            cls = _coeff_class(coef, self.table)
            key = (cls == 3, cls, _ELIM_RANK[self.table.kind(x)], size(coef), self.coordinates.index(x))
            if best is None or key < best[0]:
                best = (key, x, coef)
        if best is None:
            raise NonAffineError(f"constraint {to_str(c)} is not affine with a nonvanishing coefficient "
                                 "in any free coordinate")
        _, x, coef = best
        value = neg(div(substitute(c, {x: 0.0}), coef))
        for k in self.eliminated:
            if x in free_symbols(self.eliminated[k]):
                self.eliminated[k] = substitute(self.eliminated[k], {x: value})
        self.eliminated[x] = value
        self.pivots.append((x, coef))
        return x


# ---------------------------------------------------------------------------
# chain


@dataclass
class Constraint:
    name: str
    expr: Expr
    origin: str
    eliminates: str


@dataclass
class Generation:
    index: int
    constraints: list[Constraint] = field(default_factory=list)
    solved: dict[str, Expr] = field(default_factory=dict)


@dataclass
class ConstraintChain:
    generations: list[Generation]
    status: str
    solved: dict[str, Expr]
    undetermined: list[str]
    eliminated: dict[str, Expr]
    free: list[str]
    message: str = ""
    certified: bool | None = None
    jacobian_ranks: list[int] = field(default_factory=list)

    @property
    def constraints(self) -> list[Constraint]:
        return [c for g in self.generations for c in g.constraints]

    @property
    def tangency_generations(self) -> int:
        """Rounds of tangency performed, including the final round that closes the chain."""
        return len(self.generations) - 1


@dataclass
class DeterminedField:
    system: PontryaginSystem
    coefficients: dict[str, Expr]
    eliminated: dict[str, Expr]
    free: list[str]
    constraints: list[Constraint]
    multipliers: dict[str, Expr]
    stationarity: list[tuple[str, Expr]]

    @property
    def dependent(self) -> list[str]:
        return list(self.eliminated)


def run_chain(sys: PontryaginSystem, max_gen: int | None = None, rng: np.random.Generator | None = None,
              trials: int = 16, tol: float = 1e-9) -> tuple[ConstraintChain, DeterminedField | None]:
    rng = make_rng() if rng is None else rng
    table = sys.table
    coords = sys.coordinates
    if max_gen is None:
        max_gen = 2 * len(coords)
    adj = adjoint_equations(sys, rng, trials, tol)
    field_ = sys.ansatz.assign(adj.assignments)
    unknowns = list(field_.unknowns) + list(sys.multipliers)
    man = Manifold(table, coords, rng, trials, tol)
    solved: dict[str, Expr] = {}
    gens = [Generation(0)]
    pivots: list[tuple[str, Expr]] = []
    status = "determined"
    message = ""

    def admit(name, e, origin, gen):
        r = man.reduce(e)
        s = man.status(r)
        if s == "zero":
            return
        if _is_constant(r, table):
            raise InconsistentSystemError(f"{name} reduces to a nonzero constant: {to_str(r)}")
        x = man.admit(r)
        gen.constraints.append(Constraint(name, r, origin, x))

    def solve(eqs, wrt):
        return solve_linear([man.reduce(e) for e in eqs], wrt, table, rng, trials, tol, status=man.status)

    try:
        for name, c in sys.primary:
            admit(name, c, "primary", gens[0])
        if sys.kind == "explicit":
            for name, phi in sys.stationarity:
                admit(name, phi, "stationarity", gens[0])
        else:
            eqs = [(n, e, "momentum-definition") for n, e in adj.momentum_definitions]
            eqs += [(n, e, "stationarity") for n, e in sys.stationarity]
            sol = solve([e for _, e, _ in eqs], list(sys.multipliers))
            solved.update(sol.solved)
            gens[0].solved = dict(sol.solved)
            pivots += sol.pivots
            for i, r in sol.residuals:
                admit(eqs[i][0], r, eqs[i][2], gens[0])
        frontier = gens[0].constraints
        k = 0
        while True:
            if k >= max_gen:
                status = "exhausted"
                message = f"no fixed point within {max_gen} generations"
                break
            k += 1
            names = [f"Z({c.name})" for c in frontier]
            eqs = [substitute(field_.apply(c.expr), solved) for c in frontier]
            remaining = [u for u in unknowns if u not in solved]
            sol = solve(eqs, remaining)
            pivots += sol.pivots
            for u in solved:
                solved[u] = substitute(solved[u], sol.solved)
            solved.update(sol.solved)
            gen = Generation(k, solved=dict(sol.solved))
            gens.append(gen)
            for i, r in sol.residuals:
                admit(names[i], r, "tangency", gen)
            if not gen.constraints:
                break
            frontier = gen.constraints
    except InconsistentSystemError as exc:
        status = "inconsistent"
        message = str(exc)

    solved = {u: man.reduce(v) for u, v in solved.items()}
    undetermined = [u for u in unknowns if u not in solved]
    chain = ConstraintChain(gens, status, solved, undetermined, dict(man.eliminated), man.free, message)
    if status != "determined":
        return chain, None

    for x, coef in pivots + man.pivots:
        if man.status(coef) != "nonzero":
            raise SingularPivotError(f"pivot for {x} vanishes on the final manifold: {to_str(coef)}")

    final = field_.assign(solved)
    chain.certified = all(man.status(final.apply(c.expr)) == "zero" for c in chain.constraints)
    chain.jacobian_ranks = _jacobian_ranks(chain, man, coords, table, rng)
    if undetermined:
        chain.message = "undetermined: " + ", ".join(undetermined)
        return chain, None
    coefficients = {x: man.reduce(final.slots[x]) for x in coords}
    stat = [(n, man.reduce(substitute(e, solved))) for n, e in sys.stationarity]
    mults = {lam: solved[lam] for lam in sys.multipliers}
    return chain, DeterminedField(sys, coefficients, dict(man.eliminated), man.free,
                                  chain.constraints, mults, stat)


def _jacobian_ranks(chain, man, coords, table, rng, points: int = 8) -> list[int]:
    cons = [c.expr for c in chain.constraints]
    if not cons:
        return []
    jac = [diff(c, x) for c in cons for x in coords]
    names = sorted(set().union(*(free_symbols(j) for j in jac)) | set(coords) | {"t"})
    names = [n for n in names if n in table]
    reduce_f = lambdify([man.reduce(j) for j in jac], names)
    ranks = []
    for _ in range(points * 5):
        if len(ranks) >= points:
            break
        pt = sample_point(names, table, rng)
        try:
            m = np.array(reduce_f([pt[n] for n in names])).reshape(len(cons), len(coords))
        except DomainError:
            continue
        ranks.append(int(np.linalg.matrix_rank(m, tol=1e-8 * max(1.0, np.abs(m).max()))))
    return ranks


# ---------------------------------------------------------------------------
# reports


def chain_report(chain: ConstraintChain, field_: DeterminedField | None = None) -> str:
    lines = []
    for g in chain.generations:
        lines.append(f"GENERATION {g.index}:")
        for c in g.constraints:
            lines.append(f"  {c.name} [{c.origin}]: {to_str(c.expr)} = 0    (eliminates {c.eliminates})")
        if not g.constraints:
            lines.append("  (none)")
        if g.solved:
            lines.append("  fixes: " + ", ".join(g.solved))
    lines.append(f"STATUS: {chain.status}")
    if chain.message:
        lines.append(f"  {chain.message}")
    lines.append("SOLVED:")
    for u, v in chain.solved.items():
        lines.append(f"  {u} = {to_str(v)}")
    if chain.undetermined:
        lines.append("UNDETERMINED: " + ", ".join(chain.undetermined))
    lines.append("ELIMINATED:")
    for x, v in chain.eliminated.items():
        lines.append(f"  {x} = {to_str(v)}")
    lines.append("FREE: " + ", ".join(chain.free))
    if chain.certified is not None:
        lines.append(f"TANGENCY CERTIFICATE: {'pass' if chain.certified else 'FAIL'}")
    if chain.jacobian_ranks:
        lines.append(f"CONSTRAINT JACOBIAN RANKS: {sorted(set(chain.jacobian_ranks))}")
    text = "\n".join(lines) + "\n"
    if field_ is not None:
        text += final_field_report(field_)
    return text


def final_field_report(field_: DeterminedField) -> str:
    lines = ["FIELD:", "  d/dt t = 1"]
    for x, e in field_.coefficients.items():
        lines.append(f"  d/dt {x} = {to_str(e)}")
    lines.append("ON:")
    lines += [f"  {c.name}: {to_str(c.expr)} = 0" for c in field_.constraints]
    if field_.multipliers:
        lines.append("MULTIPLIERS:")
        lines += [f"  {k} = {to_str(v)}" for k, v in field_.multipliers.items()]
    return "\n".join(lines) + "\n"


def chain_json(chain: ConstraintChain, field_: DeterminedField | None = None) -> str:
    doc = {
        "status": chain.status,
        "message": chain.message,
        "generations": [
            {
                "index": g.index,
                "constraints": [
                    {"name": c.name, "origin": c.origin, "expr": to_str(c.expr), "eliminates": c.eliminates}
                    for c in g.constraints
                ],
                "solved": {u: to_str(v) for u, v in g.solved.items()},
            }
            for g in chain.generations
        ],
        "solved": {u: to_str(v) for u, v in chain.solved.items()},
        "undetermined": chain.undetermined,
        "eliminated": {x: to_str(v) for x, v in chain.eliminated.items()},
        "free": chain.free,
        "certified": chain.certified,
        "field": None if field_ is None else {x: to_str(e) for x, e in field_.coefficients.items()},
    }
    return json.dumps(doc, indent=2) + "\n"


__all__ = [
    "ChainError",
    "Constraint",
    "ConstraintChain",
    "DerivationError",
    "DeterminedField",
    "Generation",
    "InconsistentSystemError",
    "LinearSolution",
    "Manifold",
    "NonAffineError",
    "SingularPivotError",
    "UndecidableError",
    "chain_json",
    "chain_report",
    "final_field_report",
    "run_chain",
    "solve_linear",
    "tangency",
]
