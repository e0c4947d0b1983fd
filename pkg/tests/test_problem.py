import json
from types import SimpleNamespace

import numpy as np
import pytest

from helpers import PROBLEMS, problem
from ocsr.problem import (
    ExplicitProblem,
    ImplicitProblem,
    LagrangianControlProblem,
    ProblemFileError,
    RegularityError,
    evaluate_cost,
    load_problem,
    lower_explicit,
    lower_lagrangian,
    param_values,
    simpson_uniform,
    validate,
)
from ocsr.symexpr import evaluate, is_zero, make_rng, parse


def explicit(dynamics, cost, states=("q1",), controls=("u",), **extra):
    doc = {"kind": "explicit", "states": list(states), "controls": list(controls),
           "dynamics": dynamics, "cost": cost, **extra}
    return load_problem(doc)


def grid_traj(t, **cols):
    return SimpleNamespace(t=np.asarray(t), column=lambda n: np.asarray(cols[n]))


def test_shipped_problems_validate():
    for name in ["lq", "descriptor", "min_accel"]:
        report = validate(problem(name))
        assert report.ok, report.violations


def test_descriptor_rank_note():
    report = validate(problem("descriptor"))
    assert any("s = 3, rank 3" in n for n in report.notes)


def test_name_collision():
    p = explicit({"q1": "u"}, "u^2", states=("q1", "q1"))
    report = validate(p)
    assert any("name collision" in v for v in report.violations)
    p = explicit({"p": "u"}, "u^2", states=("p",))
    assert any("name collision" in v for v in validate(p).violations)


def test_dependent_constraints_rejected():
    doc = {"kind": "implicit", "states": ["q"], "controls": ["u"],
           "constraints": ["v_q - u", "v_q - u"], "cost": "u^2"}
    report = validate(load_problem(doc))
    assert any("dependent" in v for v in report.violations)


def test_kind_discipline():
    doc = {"kind": "explicit", "states": ["q"], "controls": ["u"], "dynamics": {"q": "u"}, "cost": "u^2 + q"}
    assert validate(load_problem(doc)).ok
    with pytest.raises(ProblemFileError):
        load_problem({**doc, "cost": "v_q^2"})
    missing = {**doc, "dynamics": {}}
    assert not validate(load_problem(missing)).ok


def test_load_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ProblemFileError, match="malformed JSON"):
        load_problem(bad)
    with pytest.raises(ProblemFileError):
        load_problem(tmp_path / "missing.json")
    with pytest.raises(ProblemFileError, match="unknown problem kind"):
        load_problem({"kind": "weird", "states": ["q"], "controls": ["u"]})
    with pytest.raises(ProblemFileError):
        load_problem({"kind": "explicit", "states": ["q"], "controls": ["u"], "dynamics": {"q": "u +"}, "cost": "u"})


def test_load_from_text_and_path():
    text = (PROBLEMS / "lq.json").read_text()
    a = load_problem(text)
    b = load_problem(str(PROBLEMS / "lq.json"))
    assert a == b
    assert a.boundary.q0 == {"q1": 1.0} and a.boundary.T == 1.0


def test_param_values_required():
    doc = json.loads((PROBLEMS / "descriptor.json").read_text())
    doc["params"]["r"]["value"] = None
    p = load_problem(doc)
    with pytest.raises(ValueError):
        param_values(p)
    assert validate(p).ok


def test_lower_explicit():
    p = explicit({"q1": "u"}, "0.5*u^2")
    low = lower_explicit(p)
    tab = low.table()
    assert is_zero(low.constraints[0] - parse("v_q1 - u", tab), tab)
    p = explicit({"q1": "q2", "q2": "u"}, "u^2", states=("q1", "q2"))
    low = lower_explicit(p)
    tab = low.table()
    assert is_zero(low.constraints[0] - parse("v_q1 - q2", tab), tab)
    assert is_zero(low.constraints[1] - parse("v_q2 - u", tab), tab)
    assert validate(low).ok


def test_descriptor_written_explicitly_lowers_to_descriptor_constraints():
    p = problem("descriptor")
    tab = p.table()
    expected = ["v_q2 - q1 - b1*u", "v_q3 - q2 - b2*u", "q3 + b3*u"]
    for c, e in zip(p.constraints, expected):
        assert is_zero(c - parse(e, tab), tab)


def lagrangian(L, force="u", cost="0.5*u^2"):
    return load_problem({"kind": "controlled_lagrangian", "states": ["q"], "controls": ["u"],
                         "lagrangian": L, "forces": {"q": force}, "cost": cost})


def test_lower_lagrangian_free_particle():
    low = lower_lagrangian(lagrangian("0.5*v_q^2"))
    tab = low.table()
    assert low.constraint_names == ("phi_q", "phibar_q")
    assert is_zero(low.constraints[0] - parse("w_q - u", tab), tab)
    assert is_zero(low.constraints[1] - parse("v_q - vb_q", tab), tab)
    assert low.velocities == {"q": "vb_q", "v_q": "w_q"}


def test_lower_lagrangian_oscillator():
    low = lower_lagrangian(lagrangian("0.5*v_q^2 - 0.5*q^2"))
    tab = low.table()
    assert is_zero(low.constraints[0] - parse("w_q + q - u", tab), tab)


def test_lower_lagrangian_reproduces_euler_lagrange_along_curve():
    # L = 0.5*(1 + q^2)*v^2 - cos(q), force u*v; curve q = sin(2t), u = t
    low = lower_lagrangian(lagrangian("0.5*(1 + q^2)*v_q^2 - cos(q)", force="u*v_q"))
    phi = low.constraints[0]

    def L_v(q, v):
        return (1 + q * q) * v

    for t in np.linspace(0.1, 0.9, 5):
        q, v, w = np.sin(2 * t), 2 * np.cos(2 * t), -4 * np.sin(2 * t)
        h = 1e-5
        dLv = (L_v(np.sin(2 * (t + h)), 2 * np.cos(2 * (t + h))) - L_v(np.sin(2 * (t - h)), 2 * np.cos(2 * (t - h)))) / (2 * h)
        residual = dLv - (q * v * v + np.sin(q)) - t * v
        val = evaluate(phi, {"q": q, "v_q": v, "vb_q": v, "w_q": w, "u": t, "t": t})
        assert val == pytest.approx(residual, abs=1e-8)


def test_singular_lagrangian_rejected():
    p = lagrangian("q*v_q")
    assert not validate(p).ok
    with pytest.raises(RegularityError):
        lower_lagrangian(p)


def test_simpson():
    assert simpson_uniform(np.ones(11), 0.2) == pytest.approx(2.0)
    t = np.linspace(0, 1, 11)
    assert simpson_uniform(t, 0.1) == pytest.approx(0.5, abs=1e-10)
    t = np.linspace(0, 1, 10)  # odd interval count: trapezoid on the last one
    assert simpson_uniform(t, t[1]) == pytest.approx(0.5, abs=1e-10)
    assert simpson_uniform([1.0], 0.1) == 0.0


def test_evaluate_cost():
    one = explicit({"q1": "u"}, "1")
    t = np.linspace(0, 2, 21)
    assert evaluate_cost(one, grid_traj(t, q1=t, u=t)) == pytest.approx(2.0)
    lin = explicit({"q1": "u"}, "t")
    t = np.linspace(0, 1, 101)
    assert evaluate_cost(lin, grid_traj(t, q1=t, u=t)) == pytest.approx(0.5, abs=1e-10)
    with pytest.raises(ValueError):
        evaluate_cost(lin, grid_traj(t ** 2, q1=t, u=t))


def test_evaluate_cost_lq_optimal():
    lq = problem("lq")
    t = np.linspace(0, 1, 1001)
    q = np.sinh(1 - t) / np.sinh(1)
    u = -np.cosh(1 - t) / np.sinh(1)
    assert evaluate_cost(lq, grid_traj(t, q1=q, u=u)) == pytest.approx(0.5 / np.tanh(1), abs=1e-6)


def test_validate_idempotent():
    p = problem("descriptor")
    a, b = validate(p, seed=3), validate(p, seed=3)
    assert a.violations == b.violations and a.notes == b.notes


def test_problem_types():
    assert isinstance(problem("lq"), ExplicitProblem)
    assert isinstance(problem("descriptor"), ImplicitProblem)
    assert isinstance(problem("min_accel"), LagrangianControlProblem)
