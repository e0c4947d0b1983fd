"""Shared fixtures-by-function for the test suite."""
from pathlib import Path

import numpy as np

from ocsr.constraint_engine import run_chain
from ocsr.integrate import NumericField
from ocsr.problem import load_problem, param_values
from ocsr.pontryagin import build
from ocsr.symexpr import Const, Sym, add, call, div, mul, neg, power, sub

PROBLEMS = Path(__file__).resolve().parent.parent / "problems"


def problem(name):
    return load_problem(PROBLEMS / f"{name}.json")


def chain_for(prob, **kw):
    return run_chain(build(prob), **kw)


def numeric(prob):
    chain, fld = chain_for(prob)
    assert fld is not None, chain.message
    return NumericField(fld, param_values(prob))


def random_expr(rng: np.random.Generator, names, depth=3):
    """Random smooth expression over ``names``, finite on [-1, 1]^n."""
    if depth == 0 or rng.random() < 0.2:
        if rng.random() < 0.3:
            return Const(float(np.round(rng.uniform(-3, 3), 2)))
        return Sym(names[rng.integers(len(names))])
    a = random_expr(rng, names, depth - 1)
    b = random_expr(rng, names, depth - 1)
    k = rng.integers(10)
    if k == 0:
        return add(a, b)
    if k == 1:
        return sub(a, b)
    if k in (2, 3):
        return mul(a, b)
    if k == 4:
        return div(a, add(Const(2.0), call("cos", b)))
    if k == 5:
        return power(a, Const(float(rng.integers(2, 4))))
    if k == 6:
        return neg(a)
    if k == 7:
        return call(["sin", "cos"][rng.integers(2)], a)
    if k == 8:
        return call("exp", call("sin", a))
    return call("sqrt", add(Const(1.0), power(a, Const(2.0))))
