import time

import pytest

from helpers import chain_for, problem
from ocsr.constraint_engine import (
    InconsistentSystemError,
    NonAffineError,
    SingularPivotError,
    chain_json,
    chain_report,
    final_field_report,
    run_chain,
    solve_linear,
    tangency,
)
from ocsr.problem import ImplicitProblem, load_problem, lower_explicit
from ocsr.pontryagin import build, build_implicit, regularity
from ocsr.symexpr import Sym, Var, VarTable, is_zero, make_rng, parse, proportional, substitute

# closed-form results for the descriptor example, in this package's sign convention
# (psi1 = v_q2 - q1 - b1*u gives lam1 = -p_q2, lam2 = -p_q3)
C1 = "(1/(a1*b3))*((a2*b3 - a1*b1)*q1 - b2*a2*q2 + (a2*b1*b3 + a3*b3^2 + r)*u + b2*a1*v_q1)"
LAM3 = "(r*u - b1*p_q2 - b2*p_q3)/b3"
B = "-(q2 + b2*u)/b3"
GENERATIONS = ["p_q1", "a1*q1 - p_q2", "a1*v_q1 - a2*q2 + p_q3"]


def explicit(dynamics, cost, states=("q1",), controls=("u",)):
    return load_problem({"kind": "explicit", "states": list(states), "controls": list(controls),
                         "dynamics": dynamics, "cost": cost})


def test_tangency_examples():
    sys = build(problem("descriptor"))
    tab = sys.table
    assert tangency(sys.ansatz, Sym("p_q1")) == Sym("D_q1")
    z = sys.ansatz.assign({"D_q1": parse("a1*q1 + lam1", tab)})
    got = substitute(tangency(z, Sym("p_q1")), {"lam1": parse("-p_q2", tab)})
    assert is_zero(got - parse("a1*q1 - p_q2", tab), tab)
    got = tangency(sys.ansatz, parse("a1*v_q1 - a2*q2 + p_q3", tab))
    assert is_zero(got - parse("a1*C_q1 - a2*A_q2 + D_q3", tab), tab)


def test_tangency_accepts_plain_mapping():
    e = parse("t*x^2", ["t", "x"])
    got = tangency({"x": Sym("y")}, e)
    assert is_zero(got - parse("x^2 + 2*t*x*y", ["t", "x", "y"]))


def descriptor_table():
    return build(problem("descriptor")).table


def test_solve_linear_multiplier():
    tab = descriptor_table()
    eq = parse("r*u - b1*p_q2 - b2*p_q3 - b3*lam3", tab)
    sol = solve_linear([eq], ["lam3"], tab)
    assert is_zero(sol.solved["lam3"] - parse(LAM3, tab), tab)
    assert sol.residuals == [] and sol.undetermined == []


def test_solve_linear_control_rate():
    tab = descriptor_table()
    eq = parse("q2 + b2*u + b3*B_u", tab)
    sol = solve_linear([eq], ["B_u"], tab)
    assert is_zero(sol.solved["B_u"] - parse(B, tab), tab)


def test_solve_linear_trivial_and_residual():
    tab = VarTable([Var("x", "auxiliary"), Var("q", "state")])
    sol = solve_linear([parse("0*x", tab)], ["x"], tab)
    assert sol.solved == {} and sol.residuals == [] and sol.undetermined == ["x"]
    sol = solve_linear([parse("x - q", tab), parse("x - 2*q", tab)], ["x"], tab)
    assert len(sol.residuals) == 1
    [(i, r)] = sol.residuals
    assert proportional(r, Sym("q"), tab) is not None


def test_solve_linear_errors():
    tab = VarTable([Var("x", "auxiliary"), Var("y", "auxiliary"), Var("q", "state")])
    with pytest.raises(NonAffineError):
        solve_linear([parse("x*y - 1", tab)], ["x", "y"], tab)
    with pytest.raises(InconsistentSystemError):
        solve_linear([parse("x - 1", tab), parse("x - 2", tab)], ["x"], tab)
    with pytest.raises(SingularPivotError):
        solve_linear([parse("(sqrt(q^2) - q)*x - 1", tab)], ["x"], tab, trials=32)


def test_solve_linear_back_substitution():
    tab = VarTable([Var("x", "auxiliary"), Var("y", "auxiliary"), Var("q", "state")])
    sol = solve_linear([parse("x + y - q", tab), parse("x - y", tab)], ["x", "y"], tab)
    assert is_zero(sol.solved["x"] - parse("q/2", tab), tab)
    assert is_zero(sol.solved["y"] - parse("q/2", tab), tab)


def test_lq_chain():
    chain, fld = chain_for(problem("lq"))
    assert chain.status == "determined"
    assert chain.tangency_generations == 1
    assert [c.name for c in chain.generations[0].constraints] == ["H", "phi_u"]
    tab = fld.system.table
    assert is_zero(chain.solved["B_u"] - Sym("q1"), tab)
    assert is_zero(fld.coefficients["q1"] - Sym("p_q1"), tab)
    assert is_zero(fld.coefficients["p_q1"] - Sym("q1"), tab)
    assert chain.free == ["q1", "p_q1"]
    assert chain.certified


def test_descriptor_chain_matches_closed_form():
    chain, fld = chain_for(problem("descriptor"))
    tab = fld.system.table
    assert chain.status == "determined" and chain.certified
    assert chain.tangency_generations == 3
    gen0 = [c.name for c in chain.generations[0].constraints]
    assert gen0 == ["psi1", "psi2", "psi3", "H", "mom_q1"]
    derived = [chain.generations[0].constraints[-1]] + [g.constraints[0] for g in chain.generations[1:3]]
    for c, ref in zip(derived, GENERATIONS):
        assert proportional(c.expr, parse(ref, tab), tab) is not None
    assert chain.generations[3].constraints == []
    assert "C_q1" in chain.generations[3].solved
    assert is_zero(chain.solved["C_q1"] - parse(C1, tab), tab)
    assert is_zero(chain.solved["B_u"] - parse(B, tab), tab)
    # lam3 is stored on the manifold, where p_q2 and p_q3 are eliminated
    assert is_zero(chain.solved["lam3"] - substitute(parse(LAM3, tab), chain.eliminated), tab)
    assert chain.free == ["q1", "q2", "v_q1", "u"]
    assert set(chain.jacobian_ranks) == {7}


def test_descriptor_chain_runtime():
    t0 = time.perf_counter()
    chain_for(problem("descriptor"))
    assert time.perf_counter() - t0 < 5.0


def test_min_accel_chain():
    chain, fld = chain_for(problem("min_accel"))
    tab = fld.system.table
    assert chain.status == "determined"
    assert chain.free == ["q", "v_q", "p_q", "p_v_q"]
    # fourth derivative of q vanishes: q' = v, v' = p_v, p_v' = -p_q, p_q' = 0
    assert is_zero(fld.coefficients["v_q"] - Sym("p_v_q"), tab)
    assert is_zero(fld.coefficients["p_v_q"] + Sym("p_q"), tab)
    assert is_zero(fld.coefficients["p_q"], tab)
    assert is_zero(fld.eliminated["u"] - Sym("p_v_q"), tab)


def test_inconsistent_chain():
    # v = 1 together with q = 0 cannot be tangent
    tab = VarTable([Var("q", "state"), Var("v_q", "velocity")])
    p = ImplicitProblem(("q",), {"q": "v_q"}, (), (parse("v_q - 1", tab), parse("q", tab)), parse("0", tab))
    chain, fld = run_chain(build_implicit(p))
    assert chain.status == "inconsistent" and fld is None
    assert "nonzero constant" in chain.message


def test_exhausted_chain():
    chain, fld = chain_for(problem("descriptor"), max_gen=1)
    assert chain.status == "exhausted" and fld is None
    assert len(chain.generations) == 2


def test_undetermined_control_rate():
    chain, fld = chain_for(explicit({"q1": "0"}, "0"))
    assert chain.status == "determined"
    assert chain.undetermined == ["B_u"] and fld is None


def test_singular_problem_may_still_close():
    # linear in u: singular Hessian, but repeated tangency pins u down
    p = explicit({"q1": "u"}, "q1^2")
    assert not regularity(build(p)).regular
    chain, fld = chain_for(p)
    assert chain.status == "determined" and fld is not None


def test_non_affine_constraint_raises():
    p = load_problem({"kind": "implicit", "states": ["q"], "controls": ["u"],
                      "constraints": ["v_q^3 + u^3 + q^3"], "cost": "u^2"})
    with pytest.raises(NonAffineError):
        chain_for(p)


def test_no_duplicate_constraints():
    chain, fld = chain_for(problem("descriptor"))
    tab = fld.system.table
    cons = chain.constraints
    for i, a in enumerate(cons):
        for b in cons[:i]:
            assert proportional(a.expr, b.expr, tab) is None


def test_reports_are_deterministic():
    a = chain_for(problem("descriptor"), rng=make_rng(11))
    b = chain_for(problem("descriptor"), rng=make_rng(11))
    assert chain_report(*a) == chain_report(*b)
    assert chain_json(*a) == chain_json(*b)


def test_report_blocks():
    chain, fld = chain_for(problem("descriptor"))
    text = chain_report(chain, fld)
    for k in range(4):
        assert f"GENERATION {k}:" in text
    assert "SOLVED:" in text and "C_q1 = " in text
    assert "lam3 = " in final_field_report(fld)


def test_explicit_and_lowered_chains_agree_on_lq():
    p = problem("lq")
    _, fx = chain_for(p)
    _, fi = chain_for(lower_explicit(p))
    tab = fi.system.table
    for x in ["q1", "u", "p_q1", "p"]:
        a = substitute(fx.coefficients[x], fx.eliminated)
        b = substitute(fi.coefficients[x], fx.eliminated)
        assert is_zero(a - b, tab)
