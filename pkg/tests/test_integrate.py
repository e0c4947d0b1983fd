import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import numeric, problem
from ocsr.integrate import (
    IntegrationError,
    ProjectionError,
    diagnostics,
    flow,
    initial_point,
    project,
    shoot,
    shooting_unknowns,
    write_csv,
)
from ocsr.problem import Boundary, load_problem


def free_particle(**boundary):
    doc = {"kind": "explicit", "states": ["q1"], "controls": ["u"], "dynamics": {"q1": "u"}, "cost": "0.5*u^2"}
    if boundary:
        doc["boundary"] = boundary
    return load_problem(doc)


def test_project_lq():
    nf = numeric(problem("lq"))
    x = project(nf, nf.point({"q1": 1.0, "p_q1": 0.3, "u": 0.0}))
    pt = dict(zip(nf.coords, x))
    assert pt["u"] == pytest.approx(0.3, abs=1e-12)
    assert pt["q1"] == 1.0 and pt["p_q1"] == 0.3
    assert abs(nf.hamiltonian(0.0, x)) < 1e-10


def test_project_descriptor():
    p = problem("descriptor")
    nf = numeric(p)
    q1, q2, v1, u = 0.3, -0.2, 0.5, 0.1
    x = project(nf, nf.point({"q1": q1, "q2": q2, "v_q1": v1, "u": u}))
    pt = dict(zip(nf.coords, x))
    assert pt["p_q1"] == pytest.approx(0.0, abs=1e-12)
    assert pt["p_q2"] == pytest.approx(q1, abs=1e-12)
    assert pt["p_q3"] == pytest.approx(q2 - v1, abs=1e-12)
    assert pt["q3"] == pytest.approx(-u, abs=1e-12)
    assert abs(nf.hamiltonian(0.0, x)) < 1e-10
    for name in ["q1", "q2", "v_q1", "u"]:
        assert pt[name] == dict(q1=q1, q2=q2, v_q1=v1, u=u)[name]


class _Infeasible:
    # one dependent coordinate, constraint x^2 + 1 = 0
    k = 1
    dep_idx = np.array([0])

    def constraints(self, t, x):
        return np.array([x[0] ** 2 + 1.0])

    def jacobian(self, t, x):
        return np.array([[2.0 * x[0] if x[0] != 0 else 1e-3]])


def test_project_infeasible_diverges():
    with pytest.raises(ProjectionError):
        project(_Infeasible(), np.array([0.5]))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(min_value=-1, max_value=1), min_size=4, max_size=4))
def test_project_idempotent(vals):
    nf = numeric(problem("descriptor"))
    x = project(nf, nf.point(dict(zip(["q1", "q2", "v_q1", "u"], vals))))
    y = project(nf, x)
    assert np.max(np.abs(x - y)) < 1e-12


def test_flow_lq_transversal_solution():
    p = problem("lq")
    nf = numeric(p)
    x0 = initial_point(nf, p.boundary, {"p_q1": -np.tanh(1.0)})
    traj = flow(nf, x0, 1.0, 1e-3)
    assert np.max(np.abs(traj.column("q1") - np.cosh(1 - traj.t) / np.cosh(1))) < 1e-6
    assert np.max(traj.H) < 1e-7 * 2


def test_flow_free_particle():
    p = free_particle()
    nf = numeric(p)
    x0 = project(nf, nf.point({"q1": 0.5, "p_q1": 0.25}))
    traj = flow(nf, x0, 2.0, 0.01)
    assert np.allclose(traj.column("q1"), 0.5 + 0.25 * traj.t, atol=1e-12)
    assert np.allclose(traj.column("p_q1"), 0.25, atol=1e-14)


def test_flow_rejects_inconsistent_start():
    nf = numeric(problem("lq"))
    with pytest.raises(IntegrationError):
        flow(nf, nf.point({"q1": 1.0, "u": 5.0}), 1.0, 0.1)
    with pytest.raises(ValueError):
        flow(nf, project(nf, nf.point({"q1": 1.0})), 1.0, 0.3)


def test_flow_descriptor_conserves_invariants():
    p = problem("descriptor")
    nf = numeric(p)
    traj = flow(nf, initial_point(nf, p.boundary), 2.0, 1e-2)
    d = diagnostics(traj, p)
    assert d.max_H < 1e-7 * 3
    assert d.max_constraint < 1e-9
    assert np.all(np.diff(traj.t) > 0)


def test_shoot_lq():
    p = problem("lq")
    nf = numeric(p)
    assert shooting_unknowns(nf, p.boundary) == ["p_q1"]
    traj = shoot(nf, p.boundary, 1e-3)
    assert np.max(np.abs(traj.column("q1") - np.sinh(1 - traj.t) / np.sinh(1))) < 1e-6
    assert traj.info["solution"]["p_q1"] == pytest.approx(-np.cosh(1) / np.sinh(1), abs=1e-6)
    assert diagnostics(traj, p).cost == pytest.approx(0.5 / np.tanh(1), abs=1e-6)


def test_shoot_min_accel():
    p = problem("min_accel")
    nf = numeric(p)
    traj = shoot(nf, p.boundary, 1e-3)
    t = traj.t
    assert np.max(np.abs(traj.column("q") - (3 * t ** 2 - 2 * t ** 3))) < 1e-6
    assert traj.info["unknowns"] == ["p_q", "p_v_q"]


def test_shoot_trivial_boundary():
    p = free_particle(T=1, q0={"q1": 0.0}, qT={"q1": 0.0})
    nf = numeric(p)
    traj = shoot(nf, p.boundary, 0.01)
    assert traj.info["iterations"] == 0
    assert np.all(traj.X == 0.0)
    d = diagnostics(traj, p)
    assert d.max_H == 0.0 and d.max_constraint == 0.0 and d.max_stationarity == 0.0 and d.cost == 0.0


def test_shoot_requires_square_system():
    p = problem("lq")
    nf = numeric(p)
    b = Boundary(0.0, 1.0, {"q1": 1.0}, {"q1": 0.0, "u": 0.0}, {})
    with pytest.raises(ValueError, match="not square"):
        shoot(nf, b, 1e-2)
    with pytest.raises(ValueError):
        shoot(nf, Boundary(0.0, 1.0, {"q1": 1.0}, {}, {}), 1e-2)


def test_shoot_singular_jacobian():
    # q' = 0: terminal state does not depend on the costate
    p = load_problem({"kind": "explicit", "states": ["q1"], "controls": ["u"], "dynamics": {"q1": "0*u + 0"},
                      "cost": "0.5*u^2", "boundary": {"T": 1, "q0": {"q1": 0}, "qT": {"q1": 1}}})
    nf = numeric(p)
    with pytest.raises(IntegrationError, match="singular"):
        shoot(nf, p.boundary, 0.1)


def test_csv_layout(tmp_path):
    p = problem("descriptor")
    nf = numeric(p)
    traj = flow(nf, initial_point(nf, p.boundary), 0.1, 1e-2)
    path = tmp_path / "traj.csv"
    write_csv(path, traj)
    lines = path.read_text().splitlines()
    assert lines[0] == ("t,q1,q2,q3,v_q1,v_q2,v_q3,u,p,p_q1,p_q2,p_q3,H_residual,constraint_residual")
    assert len(lines) == 12
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert np.array_equal(data[:, 1:12], traj.X)
