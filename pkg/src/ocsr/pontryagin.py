"""Pontryagin Hamiltonian, stationarity conditions, adjoint equations and the
regularity test for explicit and implicit problems (normal case, p0 = -1)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .problem import (
    TIME,
    ExplicitProblem,
    ImplicitProblem,
    LagrangianControlProblem,
    ProblemSpec,
    as_implicit,
)
from .symexpr import (
    ZERO,
    DomainError,
    Expr,
    Sym,
    UndecidableError,
    Var,
    VarTable,
    add,
    diff,
    free_symbols,
    is_zero,
    lambdify,
    make_rng,
    mul,
    sample_point,
    sub,
    substitute,
    to_str,
)

ENERGY_MOMENTUM = "p"


class DerivationError(Exception):
    """The derived equations are inconsistent with the problem data."""


def momentum_name(state: str) -> str:
    return f"p_{state}"


def multiplier_name(k: int) -> str:
    return f"lam{k}"


@dataclass(frozen=True)
class VectorFieldAnsatz:
    """``Z = d/dt + sum_x slots[x] d/dx``; a slot holding one of ``unknowns``
    is still to be determined."""

    slots: Mapping[str, Expr]
    unknowns: tuple[str, ...]

    def resolved(self, coord: str) -> bool:
        return not (free_symbols(self.slots[coord]) & set(self.unknowns))

    def assign(self, values: Mapping[str, Expr]) -> "VectorFieldAnsatz":
        return VectorFieldAnsatz(
            {k: substitute(v, values) for k, v in self.slots.items()},
            tuple(u for u in self.unknowns if u not in values),
        )

    def apply(self, c: Expr) -> Expr:
        """Lie derivative ``Z(c)``; the time slot is fixed to 1."""
        out = diff(c, TIME)
        for x in sorted(free_symbols(c)):
            if x in self.slots:
                out = add(out, mul(self.slots[x], diff(c, x)))
        return out


@dataclass
class PontryaginSystem:
    kind: str
    problem: ExplicitProblem | ImplicitProblem
    table: VarTable
    hamiltonian: Expr
    primary: list[tuple[str, Expr]]
    stationarity: list[tuple[str, Expr]]
    multipliers: tuple[str, ...]
    ansatz: VectorFieldAnsatz
    groups: dict[str, list[str]] = field(default_factory=dict)

    @property
    def coordinates(self) -> list[str]:
        """Non-time coordinates in CSV order."""
        g = self.groups
        return g["states"] + g["velocities"] + g["controls"] + g["energy"] + g["momenta"]

    @property
    def cost(self) -> Expr:
        return self.problem.cost


def _unknown(name):
    return Var(name, "auxiliary")


def build_explicit(problem: ExplicitProblem) -> PontryaginSystem:
    """H = p + p_i F^i - cost, with the single primary constraint H = 0."""
    qs, us = list(problem.states), list(problem.controls)
    ps = [momentum_name(s) for s in qs]
    H = Sym(ENERGY_MOMENTUM)
    for s, pi in zip(qs, ps):
        H = add(H, mul(Sym(pi), problem.dynamics[s]))
    H = sub(H, problem.cost)
    slots = {s: Sym(f"A_{s}") for s in qs}
    slots.update({u: Sym(f"B_{u}") for u in us})
    slots.update({pi: Sym(f"C_{s}") for s, pi in zip(qs, ps)})
    slots[ENERGY_MOMENTUM] = Sym("E")
    unknowns = tuple(v.name for v in slots.values())
    table = problem.table().extended(
        [Var(ENERGY_MOMENTUM, "momentum-p")] + [Var(pi, "momentum-pi") for pi in ps] + [_unknown(n) for n in unknowns]
    )
    return PontryaginSystem(
        kind="explicit",
        problem=problem,
        table=table,
        hamiltonian=H,
        primary=[("H", H)],
        stationarity=[(f"phi_{u}", diff(H, u)) for u in us],
        multipliers=(),
        ansatz=VectorFieldAnsatz(slots, unknowns),
        groups={"states": qs, "velocities": [], "controls": us, "energy": [ENERGY_MOMENTUM], "momenta": ps},
    )


def build_implicit(problem: ImplicitProblem) -> PontryaginSystem:
    """H = p + p_i v^i - cost; primary constraints Psi^alpha = 0 and H = 0."""
    qs, us = list(problem.states), list(problem.controls)
    vs = [problem.velocities[s] for s in qs]
    ps = [momentum_name(s) for s in qs]
    lams = tuple(multiplier_name(k + 1) for k in range(len(problem.constraints)))
    H = Sym(ENERGY_MOMENTUM)
    for v, pi in zip(vs, ps):
        H = add(H, mul(Sym(pi), Sym(v)))
    H = sub(H, problem.cost)
    slots = {s: Sym(f"A_{s}") for s in qs}
    slots.update({u: Sym(f"B_{u}") for u in us})
    slots.update({v: Sym(f"C_{s}") for s, v in zip(qs, vs)})
    slots.update({pi: Sym(f"D_{s}") for s, pi in zip(qs, ps)})
    slots[ENERGY_MOMENTUM] = Sym("E")
    unknowns = tuple(v.name for v in slots.values())
    table = problem.table().extended(
        [Var(ENERGY_MOMENTUM, "momentum-p")]
        + [Var(pi, "momentum-pi") for pi in ps]
        + [Var(lam, "multiplier") for lam in lams]
        + [_unknown(n) for n in unknowns]
    )
    stat = []
    for u in us:
        e = diff(problem.cost, u)
        for lam, psi in zip(lams, problem.constraints):
            e = sub(e, mul(Sym(lam), diff(psi, u)))
        stat.append((f"phi_{u}", e))
    return PontryaginSystem(
        kind="implicit",
        problem=problem,
        table=table,
        hamiltonian=H,
        primary=list(zip(problem.constraint_names, problem.constraints)) + [("H", H)],
        stationarity=stat,
        multipliers=lams,
        ansatz=VectorFieldAnsatz(slots, unknowns),
        groups={"states": qs, "velocities": vs, "controls": us, "energy": [ENERGY_MOMENTUM], "momenta": ps},
    )


def build(problem: ProblemSpec) -> PontryaginSystem:
    if isinstance(problem, ExplicitProblem):
        return build_explicit(problem)
    if isinstance(problem, LagrangianControlProblem):
        return build_implicit(as_implicit(problem))
    return build_implicit(problem)


def stationarity(sys: PontryaginSystem) -> list[tuple[str, Expr]]:
    """Weak maximum condition: ``dH/du`` (explicit) or
    ``dcost/du - lam_alpha dPsi^alpha/du`` (implicit)."""
    return list(sys.stationarity)


# ---------------------------------------------------------------------------
# adjoint equations


@dataclass
class AdjointEquations:
    assignments: dict[str, Expr]
    momentum_definitions: list[tuple[str, Expr]]
    identity_residual: Expr


def _lam_sum(lams, psis, x):
    out = ZERO
    for lam, psi in zip(lams, psis):
        out = add(out, mul(Sym(lam), diff(psi, x)))
    return out


def adjoint_equations(sys: PontryaginSystem, rng: np.random.Generator | None = None,
                      trials: int = 16, tol: float = 1e-9) -> AdjointEquations:
    """Slots fixed directly by the presymplectic equation.

    Explicit: ``A = F``, ``C_i = -dH/dq^i``, ``E = -dH/dt``.
    Implicit (energy multiplier 1): ``A = v``, ``D_i = dcost/dq^i - lam dPsi/dq^i``,
    ``E = dcost/dt - lam dPsi/dt`` and momentum definitions
    ``p_i - dcost/dv^i + lam dPsi/dv^i = 0``.

    The time component ``Z(H)`` must then vanish modulo the other equations;
    this is checked and a :class:`DerivationError` raised otherwise.
    """
    rng = make_rng() if rng is None else rng
    prob = sys.problem
    g = sys.groups
    H = sys.hamiltonian
    if sys.kind == "explicit":
        assign = {f"A_{s}": prob.dynamics[s] for s in g["states"]}
        assign.update({f"C_{s}": sub(ZERO, diff(H, s)) for s in g["states"]})
        assign["E"] = sub(ZERO, diff(H, TIME))
        moms = []
        resid = sys.ansatz.assign(assign).apply(H)
        for (_, phi), u in zip(sys.stationarity, g["controls"]):
            resid = sub(resid, mul(Sym(f"B_{u}"), phi))
    else:
        lams, psis = sys.multipliers, prob.constraints
        cost = prob.cost
        assign = {f"A_{s}": Sym(v) for s, v in zip(g["states"], g["velocities"])}
        assign.update({f"D_{s}": sub(diff(cost, s), _lam_sum(lams, psis, s)) for s in g["states"]})
        assign["E"] = sub(diff(cost, TIME), _lam_sum(lams, psis, TIME))
        moms = []
        for s, v, pi in zip(g["states"], g["velocities"], g["momenta"]):
            moms.append((f"mom_{s}", add(sub(Sym(pi), diff(cost, v)), _lam_sum(lams, psis, v))))
        z = sys.ansatz.assign(assign)
        resid = z.apply(H)
        for lam, psi in zip(lams, psis):
            resid = add(resid, mul(Sym(lam), z.apply(psi)))
        for (_, m), s in zip(moms, g["states"]):
            resid = sub(resid, mul(Sym(f"C_{s}"), m))
        for (_, st), u in zip(sys.stationarity, g["controls"]):
            resid = add(resid, mul(Sym(f"B_{u}"), st))
    try:
        ok = is_zero(resid, sys.table, rng, trials, tol)
    except UndecidableError as exc:
        raise DerivationError(f"time-component identity undecidable: {exc}") from None
    if not ok:
        raise DerivationError("time component of the presymplectic equation is not an identity")
    return AdjointEquations(assign, moms, resid)


# ---------------------------------------------------------------------------
# regularity


@dataclass
class RegularityCertificate:
    regular: bool
    m: int
    ranks: list[int]
    hessian: list[list[Expr]]
    eliminated: dict[str, Expr]
    degenerate: bool

    @property
    def verdict(self) -> str:
        return "regular" if self.regular else "singular"


def regularity(sys: PontryaginSystem, trials: int = 32, rtol: float = 1e-8,
               rng: np.random.Generator | None = None) -> RegularityCertificate:
    """Numeric rank of ``(d phi_a / d u^b)`` at random points.

    For implicit systems the multipliers fixed by the momentum definitions are
    eliminated first; any multiplier left over is sampled like a coordinate.
    """
    from .constraint_engine import solve_linear

    rng = make_rng() if rng is None else rng
    us = sys.groups["controls"]
    phis = [e for _, e in sys.stationarity]
    eliminated: dict[str, Expr] = {}
    if sys.kind == "implicit" and sys.multipliers:
        adj = adjoint_equations(sys, rng)
        sol = solve_linear([m for _, m in adj.momentum_definitions], list(sys.multipliers), sys.table, rng)
        eliminated = sol.solved
        phis = [substitute(e, eliminated) for e in phis]
    hess = [[diff(phi, b) for b in us] for phi in phis]
    degenerate = all(is_zero(phi, sys.table, rng) for phi in phis)
    names = sorted(set().union(*(free_symbols(h) for row in hess for h in row)))
    f = lambdify([h for row in hess for h in row], names)
    m = len(us)
    ranks = []
    attempts = 0
    while len(ranks) < trials and attempts < 20 * trials:
        attempts += 1
        pt = sample_point(names, sys.table, rng)
        try:
            mat = np.array(f([pt[n] for n in names])).reshape(m, m)
        except DomainError:
            continue
        sv = np.linalg.svd(mat, compute_uv=False)
        ranks.append(int(np.sum(sv > rtol * sv[0])) if sv[0] > 0 else 0)
    if not ranks:
        raise UndecidableError("regularity: every sample point hit a domain error")
    return RegularityCertificate(all(r == m for r in ranks), m, ranks, hess, eliminated, degenerate)


# ---------------------------------------------------------------------------
# report


def derive_report(sys: PontryaginSystem, rng: np.random.Generator | None = None,
                  trials: int = 16, tol: float = 1e-9) -> dict[str, str]:
    """Plain-text sections: hamiltonian, stationarity, adjoint, regularity."""
    rng = make_rng() if rng is None else rng
    adj = adjoint_equations(sys, rng, trials, tol)
    out = {}
    out["hamiltonian"] = "\n".join([
        "HAMILTONIAN (p0 = -1):",
        f"  H = {to_str(sys.hamiltonian)}",
        "PRIMARY CONSTRAINTS:",
        *[f"  {name}: {to_str(e)} = 0" for name, e in sys.primary],
    ]) + "\n"
    lines = ["STATIONARITY:"]
    lines += [f"  {name}: {to_str(e)} = 0" for name, e in sys.stationarity]
    out["stationarity"] = "\n".join(lines) + "\n"
    lines = ["ADJOINT:"]
    if sys.kind == "implicit":
        lines.append("  energy multiplier = 1")
    for coord, slot in sys.ansatz.slots.items():
        name = slot.name
        if name in adj.assignments:
            lines.append(f"  d/dt {coord} = {name} = {to_str(adj.assignments[name])}")
        else:
            lines.append(f"  d/dt {coord} = {name} (undetermined)")
    if adj.momentum_definitions:
        lines.append("MOMENTUM DEFINITIONS:")
        lines += [f"  {name}: {to_str(e)} = 0" for name, e in adj.momentum_definitions]
    lines.append("TIME COMPONENT: identity verified")
    out["adjoint"] = "\n".join(lines) + "\n"
    cert = regularity(sys, rng=rng)
    lines = [cert.verdict, f"controls: {cert.m}", f"rank profile: {sorted(set(cert.ranks))} over {len(cert.ranks)} points"]
    if cert.degenerate:
        lines.append("warning: stationarity conditions vanish identically")
    for name, e in cert.eliminated.items():
        lines.append(f"eliminated {name} = {to_str(e)}")
    lines.append("HESSIAN:")
    lines += ["  [" + ", ".join(to_str(h) for h in row) + "]" for row in cert.hessian]
    out["regularity"] = "\n".join(lines) + "\n"
    return out
