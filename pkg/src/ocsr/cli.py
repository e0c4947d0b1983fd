"""Command-line front end: ``ocsr <derive|chain|integrate|shoot> --input FILE --out DIR``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from .constraint_engine import (
    InconsistentSystemError,
    NonAffineError,
    SingularPivotError,
    chain_json,
    chain_report,
    run_chain,
)
from .integrate import (
    IntegrationError,
    NumericField,
    diagnostics,
    flow,
    initial_point,
    shoot,
    shooting_unknowns,
    write_csv,
)
from .pontryagin import DerivationError, build, derive_report
from .problem import ProblemFileError, RegularityError, load_problem, param_values, validate
from .symexpr import DEFAULT_SEED, ExprError, make_rng

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DERIVATION = 3
EXIT_NUMERIC = 4

COMMANDS = ("derive", "chain", "integrate", "shoot")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    command: str
    input: Path
    out: Path
    seed: int = DEFAULT_SEED
    h: float = 1e-3
    T: float | None = None
    max_gen: int | None = None
    trials: int = 16
    tol: float = 1e-9
    newton_tol: float = 1e-10
    shoot_tol: float = 1e-8

    def __post_init__(self):
        for name in ("h", "tol", "newton_tol", "shoot_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"--{name.replace('_', '-')} must be positive")
        if self.T is not None and not self.T > 0:
            raise ValueError("--T must be positive")
        if self.trials < 1:
            raise ValueError("--trials must be >= 1")
        if self.max_gen is not None and self.max_gen < 1:
            raise ValueError("--max-gen must be >= 1")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ocsr", description="Weak Pontryagin extremals via the unified formalism.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--input", required=True, type=Path, help="problem file (JSON)")
    ap.add_argument("--out", required=True, type=Path, help="output directory")
    ap.add_argument("--seed", type=int, default=DEFAULT_SEED)
    ap.add_argument("--h", type=float, default=1e-3, help="RK4 step")
    ap.add_argument("--T", type=float, default=None, help="horizon (defaults to boundary.T)")
    ap.add_argument("--max-gen", type=int, default=None)
    ap.add_argument("--trials", type=int, default=16, help="sample points per zero test")
    ap.add_argument("--tol", type=float, default=1e-9, help="zero-test tolerance")
    ap.add_argument("--newton-tol", type=float, default=1e-10, help="projection tolerance")
    ap.add_argument("--shoot-tol", type=float, default=1e-8, help="shooting boundary tolerance")
    return ap


def parse_config(argv) -> RunConfig:
    a = _parser().parse_args(argv)
    return RunConfig(a.command, a.input, a.out, a.seed, a.h, a.T, a.max_gen, a.trials, a.tol,
                     a.newton_tol, a.shoot_tol)


def _load(config: RunConfig):
    try:
        problem = load_problem(config.input)
    except ProblemFileError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    report = validate(problem, seed=config.seed)
    if not report.ok:
        raise CliError(EXIT_INPUT, "invalid problem:\n  " + "\n  ".join(report.violations))
    return problem


def _write(out: Path, name: str, text: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def cmd_derive(config: RunConfig) -> int:
    problem = _load(config)
    rng = make_rng(config.seed)
    system = build(problem)
    report = derive_report(system, rng, config.trials, config.tol)
    for key in ("hamiltonian", "stationarity", "adjoint", "regularity"):
        _write(config.out, f"{key}.txt", report[key])
    return EXIT_OK


def _chain(config: RunConfig, problem):
    rng = make_rng(config.seed)
    system = build(problem)
    return run_chain(system, config.max_gen, rng, config.trials, config.tol)


def cmd_chain(config: RunConfig) -> int:
    problem = _load(config)
    chain, fld = _chain(config, problem)
    _write(config.out, "chain.txt", chain_report(chain, fld))
    _write(config.out, "chain.json", chain_json(chain, fld))
    if chain.status != "determined":
        print(f"warning: chain status {chain.status}: {chain.message}", file=sys.stderr)
    elif fld is None:
        print(f"warning: {chain.message}", file=sys.stderr)
    return EXIT_OK


def _numeric_field(config: RunConfig, problem) -> NumericField:
    try:
        params = param_values(problem)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    if problem.boundary is None:
        raise CliError(EXIT_INPUT, "problem has no boundary block")
    chain, fld = _chain(config, problem)
    if fld is None:
        raise CliError(EXIT_DERIVATION, f"vector field not determined (status {chain.status}; {chain.message})")
    return NumericField(fld, params)


def _finish(config: RunConfig, problem, traj, extra: list[str]):
    config.out.mkdir(parents=True, exist_ok=True)
    write_csv(config.out / "trajectory.csv", traj)
    summary = diagnostics(traj, problem)
    lines = extra + summary.lines() + [f"steps: {len(traj.t) - 1}", f"h: {config.h!r}"]
    _write(config.out, "diagnostics.txt", "\n".join(lines) + "\n")


def cmd_integrate(config: RunConfig) -> int:
    problem = _load(config)
    nf = _numeric_field(config, problem)
    bnd = problem.boundary
    T = config.T if config.T is not None else bnd.T
    if T is None:
        raise CliError(EXIT_INPUT, "no horizon: give --T or boundary.T")
    x0 = initial_point(nf, bnd, newton_tol=config.newton_tol)
    traj = flow(nf, x0, T, config.h, bnd.t0, config.newton_tol)
    _finish(config, problem, traj, [f"dependent: {', '.join(nf.dependent)}"])
    return EXIT_OK


def cmd_shoot(config: RunConfig) -> int:
    problem = _load(config)
    bnd = problem.boundary
    if bnd is None or not bnd.qT:
        raise CliError(EXIT_INPUT, "shooting needs a boundary block with q0 and qT")
    nf = _numeric_field(config, problem)
    if config.T is None and bnd.T is None:
        raise CliError(EXIT_INPUT, "no horizon: give --T or boundary.T")
    unknowns = shooting_unknowns(nf, bnd)
    print(f"shooting unknowns: {', '.join(unknowns)}", file=sys.stderr)
    traj = shoot(nf, bnd, config.h, config.T, config.shoot_tol, newton_tol=config.newton_tol)
    info = traj.info
    extra = [
        f"shooting_unknowns: {', '.join(unknowns)}",
        *[f"initial {k}: {v:.17g}" for k, v in info["solution"].items()],
        f"iterations: {info['iterations']}",
        f"boundary_residual: {info['boundary_residual']:.6e}",
    ]
    _finish(config, problem, traj, extra)
    return EXIT_OK


HANDLERS = {"derive": cmd_derive, "chain": cmd_chain, "integrate": cmd_integrate, "shoot": cmd_shoot}


def run(config: RunConfig) -> int:
    try:
        return HANDLERS[config.command](config)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ProblemFileError, RegularityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DerivationError, NonAffineError, SingularPivotError, InconsistentSystemError, ExprError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DERIVATION
    except IntegrationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        config = parse_config(argv)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
