"""Numerical extremals: projection onto the final constraint manifold, RK4
flow with per-step projection, and single shooting."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .constraint_engine import DeterminedField
from .problem import TIME, Boundary, ProblemSpec, evaluate_cost
from .symexpr import DomainError, diff, lambdify, substitute

log = logging.getLogger(__name__)

PROJECT_TOL = 1e-10
PROJECT_ITERS = 50
DRIFT_LIMIT = 1e-6
START_TOL = 1e-8
SHOOT_TOL = 1e-8
SHOOT_ITERS = 50
FD_STEP = 1e-6


class IntegrationError(Exception):
    """Numerical failure: divergence, rank deficiency, drift or domain error."""


class ProjectionError(IntegrationError):
    pass


class ShootingError(IntegrationError):
    pass


class NumericField:
    """Compiled form of a determined field with parameter values inlined."""

    def __init__(self, fld: DeterminedField, params: Mapping[str, float]):
        sys = fld.system
        self.field = fld
        self.coords = list(sys.coordinates)
        self.index = {x: i for i, x in enumerate(self.coords)}
        self.dependent = list(fld.eliminated)
        self.free = list(fld.free)
        self.dep_idx = np.array([self.index[x] for x in self.dependent], dtype=int)
        args = [TIME] + self.coords
        params = dict(params)
        cons = [c.expr for c in fld.constraints]
        self.constraint_names = [c.name for c in fld.constraints]
        self._rate = lambdify([fld.coefficients[x] for x in self.coords], args, params)
        self._cons = lambdify(cons, args, params)
        self._jac = lambdify([diff(c, x) for c in cons for x in self.dependent], args, params)
        self._H = lambdify([sys.hamiltonian], args, params)
        stat = [substitute(e, fld.multipliers) for _, e in sys.stationarity]
        self._stat = lambdify(stat, args, params)
        self.k = len(cons)

    def _args(self, t, x):
        return [float(t)] + x.tolist()

    def rate(self, t, x) -> np.ndarray:
        return np.array(self._rate(self._args(t, x)))

    def constraints(self, t, x) -> np.ndarray:
        return np.array(self._cons(self._args(t, x)))

    def jacobian(self, t, x) -> np.ndarray:
        return np.array(self._jac(self._args(t, x))).reshape(self.k, self.k)

    def hamiltonian(self, t, x) -> float:
        return self._H(self._args(t, x))[0]

    def stationarity(self, t, x) -> np.ndarray:
        return np.array(self._stat(self._args(t, x)))

    def point(self, values: Mapping[str, float]) -> np.ndarray:
        x = np.zeros(len(self.coords))
        for name, v in values.items():
            if name in self.index:
                x[self.index[name]] = v
        return x


def _max_abs(v) -> float:
    return float(np.max(np.abs(v))) if len(v) else 0.0


def project(nf: NumericField, guess: np.ndarray, t: float = 0.0, tol: float = PROJECT_TOL,
            max_iter: int = PROJECT_ITERS) -> np.ndarray:
    """Damped Newton on the final constraints, moving only dependent coordinates."""
    x = np.array(guess, dtype=float)
    if nf.k == 0:
        return x
    try:
        r = nf.constraints(t, x)
        for _ in range(max_iter):
            norm = _max_abs(r)
            if norm < tol:
                return x
            J = nf.jacobian(t, x)
            sv = np.linalg.svd(J, compute_uv=False)
            if sv[-1] <= 1e-12 * max(sv[0], 1e-300):
                raise ProjectionError("constraint Jacobian w.r.t. dependent coordinates is rank deficient")
            dx = np.linalg.solve(J, r)
            alpha = 1.0
            while True:
                trial = x.copy()
                trial[nf.dep_idx] -= alpha * dx
                try:
                    rt = nf.constraints(t, trial)
                except DomainError:
                    rt = None
                if rt is not None and _max_abs(rt) < norm:
                    break
                alpha *= 0.5
                if alpha < 1e-6:
                    # stagnation at rounding level is convergence for large coordinates
                    if norm < tol * (1.0 + _max_abs(x)) ** 2:
                        return x
                    raise ProjectionError("damped Newton made no progress")
            x, r = trial, rt
    except DomainError as exc:
        raise ProjectionError(f"domain error during projection: {exc}") from None
    if _max_abs(r) < tol:
        return x
    raise ProjectionError(f"projection did not converge in {max_iter} iterations (residual {_max_abs(r):.3e})")


@dataclass
class Extremal:
    names: list[str]
    t: np.ndarray
    X: np.ndarray
    H: np.ndarray
    constraint: np.ndarray
    stationarity: np.ndarray
    drift: np.ndarray
    info: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        if name == TIME:
            return self.t
        return self.X[:, self.names.index(name)]

    def at(self, k: int) -> dict[str, float]:
        return dict(zip(self.names, self.X[k]))


def _rk4_step(nf, t, x, h):
    k1 = nf.rate(t, x)
    k2 = nf.rate(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = nf.rate(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = nf.rate(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _grid(T, h):
    if not (h > 0 and T > 0):
        raise ValueError("step and horizon must be positive")
    n = int(round(T / h))
    if n < 1 or abs(n * h - T) > 1e-9 * T:
        raise ValueError(f"horizon {T} is not a multiple of the step {h}")
    return n


def flow(nf: NumericField, start: np.ndarray, T: float, h: float, t0: float = 0.0,
         newton_tol: float = PROJECT_TOL) -> Extremal:
    """Fixed-step RK4 with projection after every step."""
    n = _grid(T, h)
    x = np.array(start, dtype=float)
    try:
        res0 = _max_abs(nf.constraints(t0, x)) if nf.k else 0.0
    except DomainError as exc:
        raise IntegrationError(f"domain error at the start point: {exc}") from None
    if res0 > START_TOL:
        raise IntegrationError(f"start point violates the constraints (residual {res0:.3e})")
    X = np.empty((n + 1, len(x)))
    H = np.empty(n + 1)
    C = np.empty(n + 1)
    S = np.empty(n + 1)
    D = np.zeros(n + 1)
    ts = t0 + h * np.arange(n + 1)

    def record(k, x, drift):
        X[k] = x
        H[k] = abs(nf.hamiltonian(ts[k], x))
        C[k] = _max_abs(nf.constraints(ts[k], x)) if nf.k else 0.0
        S[k] = _max_abs(nf.stationarity(ts[k], x))
        D[k] = drift

    try:
        record(0, x, 0.0)
        for k in range(n):
            x = _rk4_step(nf, ts[k], x, h)
            if not np.all(np.isfinite(x)):
                raise IntegrationError(f"trajectory blew up at t = {ts[k + 1]:.6g}")
            drift = _max_abs(nf.constraints(ts[k + 1], x)) if nf.k else 0.0
            x = project(nf, x, ts[k + 1], newton_tol)
            record(k + 1, x, drift)
            if C[k + 1] > DRIFT_LIMIT:
                raise IntegrationError(f"constraint drift {C[k + 1]:.3e} after projection at t = {ts[k + 1]:.6g}")
    except DomainError as exc:
        raise IntegrationError(f"domain error during flow: {exc}") from None
    return Extremal(list(nf.coords), ts, X, H, C, S, D)


def initial_point(nf: NumericField, boundary: Boundary, overrides: Mapping[str, float] | None = None,
                  newton_tol: float = PROJECT_TOL) -> np.ndarray:
    """Seed from ``init`` then ``q0`` then ``overrides`` and project."""
    values = dict(boundary.init)
    values.update(boundary.q0)
    values.update(overrides or {})
    return project(nf, nf.point(values), boundary.t0, newton_tol)


def shooting_unknowns(nf: NumericField, boundary: Boundary) -> list[str]:
    """Free coordinates whose initial value is not prescribed by q0."""
    return [x for x in nf.free if x not in boundary.q0]


def shoot(nf: NumericField, boundary: Boundary, h: float, T: float | None = None,
          tol: float = SHOOT_TOL, max_iter: int = SHOOT_ITERS, newton_tol: float = PROJECT_TOL) -> Extremal:
    """Single shooting on (free initial values) -> (terminal mismatch)."""
    T = boundary.T if T is None else T
    if T is None:
        raise ValueError("shooting needs a horizon T")
    if not boundary.qT:
        raise ValueError("shooting needs terminal values qT")
    for name in list(boundary.q0) + list(boundary.qT):
        if name not in nf.index:
            raise ValueError(f"boundary value for unknown coordinate '{name}'")
    unknowns = shooting_unknowns(nf, boundary)
    start_checks = [x for x in boundary.q0 if x in nf.dependent]
    m = len(boundary.qT) + len(start_checks)
    if len(unknowns) != m:
        raise ValueError(f"shooting system is not square: {len(unknowns)} unknowns {unknowns} "
                         f"for {m} conditions")
    log.info("shooting unknowns: %s", ", ".join(unknowns))
    end_idx = [nf.index[x] for x in boundary.qT]
    end_val = np.array(list(boundary.qT.values()))
    chk_idx = [nf.index[x] for x in start_checks]
    chk_val = np.array([boundary.q0[x] for x in start_checks])

    def run(z):
        x0 = initial_point(nf, boundary, dict(zip(unknowns, z)), newton_tol)
        traj = flow(nf, x0, T, h, boundary.t0, newton_tol)
        F = np.concatenate([traj.X[-1, end_idx] - end_val, x0[chk_idx] - chk_val])
        return F, traj

    z = np.array([boundary.init.get(x, 0.0) for x in unknowns], dtype=float)
    F, traj = run(z)
    it = 0
    while _max_abs(F) >= tol:
        if it >= max_iter:
            raise ShootingError(f"shooting did not converge in {max_iter} iterations "
                                f"(residual {_max_abs(F):.3e})")
        it += 1
        J = np.empty((m, m))
        for j in range(m):
            dz = FD_STEP * max(1.0, abs(z[j]))
            zp = z.copy()
            zp[j] += dz
            J[:, j] = (run(zp)[0] - F) / dz
        sv = np.linalg.svd(J, compute_uv=False)
        if sv[-1] <= 1e-12 * max(sv[0], 1e-300):
            raise ShootingError("shooting Jacobian is singular")
        step = np.linalg.solve(J, F)
        alpha = 1.0
        norm = np.linalg.norm(F)
        while True:
            try:
                Ft, tt = run(z - alpha * step)
                if np.linalg.norm(Ft) < norm:
                    break
            except IntegrationError:
                pass
            alpha *= 0.5
            if alpha < 1e-8:
                raise ShootingError("shooting line search failed")
        z, F, traj = z - alpha * step, Ft, tt
    traj.info.update(iterations=it, unknowns=unknowns, solution=dict(zip(unknowns, z.tolist())),
                     boundary_residual=_max_abs(F))
    return traj


@dataclass
class Summary:
    max_H: float
    max_constraint: float
    max_stationarity: float
    max_drift: float
    cost: float | None

    def lines(self) -> list[str]:
        out = [
            f"max_H_residual: {self.max_H:.6e}",
            f"max_constraint_residual: {self.max_constraint:.6e}",
            f"max_stationarity_residual: {self.max_stationarity:.6e}",
            f"max_pre_projection_drift: {self.max_drift:.6e}",
        ]
        if self.cost is not None:
            out.append(f"cost: {self.cost:.17g}")
        return out


def diagnostics(traj: Extremal, problem: ProblemSpec | None = None) -> Summary:
    cost = evaluate_cost(problem, traj) if problem is not None else None
    return Summary(float(np.max(traj.H)), float(np.max(traj.constraint)), float(np.max(traj.stationarity)),
                   float(np.max(traj.drift)), cost)


def csv_columns(nf: NumericField) -> list[str]:
    return [TIME] + nf.coords + ["H_residual", "constraint_residual"]


def write_csv(path, traj: Extremal):
    header = ",".join([TIME] + traj.names + ["H_residual", "constraint_residual"])
    data = np.column_stack([traj.t, traj.X, traj.H, traj.constraint])
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")
