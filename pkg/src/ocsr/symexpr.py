"""Small symbolic engine for scalar expressions.

Expressions are immutable trees of binary arithmetic nodes, unary negation and
a handful of elementary functions.  Variables are referenced by name; their
kinds (state, control, parameter, ...) live in a :class:`VarTable`.

Simplification is deliberately shallow.  Equality of two expressions is decided
numerically with :func:`is_zero`, which samples random points.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_SEED = 0x5EED
DEFAULT_TRIALS = 16
DEFAULT_TOL = 1e-9

KINDS = (
    "time",
    "state",
    "velocity",
    "control",
    "momentum-p",
    "momentum-pi",
    "multiplier",
    "parameter",
    "auxiliary",
)

FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt")


class ExprError(Exception):
    pass


class ParseError(ExprError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownIdentifierError(ParseError):
    def __init__(self, name, offset):
        ExprError.__init__(self, f"unknown identifier '{name}' at offset {offset}")
        self.offset = offset
        self.name = name


class UnassignedVariableError(ExprError):
    def __init__(self, name):
        super().__init__(f"variable '{name}' has no assigned value")
        self.name = name


class DomainError(ExprError, ArithmeticError):
    pass


class UndecidableError(ExprError):
    pass


class MissingProlongationError(ExprError):
    def __init__(self, name):
        super().__init__(f"variable '{name}' has no prolongation")
        self.name = name


# ---------------------------------------------------------------------------
# variables


@dataclass(frozen=True)
class Var:
    name: str
    kind: str
    lo: float = -1.0
    hi: float = 1.0
    nonzero: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown variable kind {self.kind!r}")


class VarTable:
    """Ordered registry of variables plus the prolongation map x -> x'."""

    def __init__(self, variables: Iterable[Var] = (), prolongation: Mapping[str, str] | None = None):
        self._vars: dict[str, Var] = {}
        for v in variables:
            if v.name in self._vars:
                raise ValueError(f"name collision: '{v.name}' registered twice")
            self._vars[v.name] = v
        prol = dict(prolongation or {})
        for src, dst in prol.items():
            if src not in self._vars or dst not in self._vars:
                raise ValueError(f"prolongation {src}->{dst} refers to unregistered variables")
            if self._vars[src].kind == "time":
                raise ValueError("time has no prolongation")
        if len(set(prol.values())) != len(prol):
            raise ValueError("prolongation map must be injective")
        self._prolong = prol

    def extended(self, variables: Iterable[Var] = (), prolongation: Mapping[str, str] | None = None) -> "VarTable":
        merged = dict(self._prolong)
        merged.update(prolongation or {})
        return VarTable(list(self._vars.values()) + list(variables), merged)

    def __contains__(self, name):
        return name in self._vars

    def __getitem__(self, name) -> Var:
        return self._vars[name]

    def __iter__(self):
        return iter(self._vars.values())

    def __len__(self):
        return len(self._vars)

    @property
    def names(self) -> list[str]:
        return list(self._vars)

    def kind(self, name: str) -> str:
        return self._vars[name].kind

    def of_kind(self, *kinds: str) -> list[str]:
        return [v.name for v in self._vars.values() if v.kind in kinds]

    def prolong(self, name: str) -> str | None:
        return self._prolong.get(name)

    @property
    def prolongation(self) -> dict[str, str]:
        return dict(self._prolong)


# ---------------------------------------------------------------------------
# expression nodes


class Expr:
    __slots__ = ("_h",)

    def __setattr__(self, key, value):
        raise AttributeError("expressions are immutable")

    def _init(self, **fields):
        for k, v in fields.items():
            object.__setattr__(self, k, v)
        object.__setattr__(self, "_h", hash((type(self).__name__,) + self._key()))

    def _key(self) -> tuple:
        raise NotImplementedError

    def __hash__(self):
        return self._h

    def __eq__(self, other):
        if self is other:
            return True
        if type(self) is not type(other) or self._h != other._h:
            return False
        return self._key() == other._key()

    def __ne__(self, other):
        return not self == other

    def __repr__(self):
        return f"Expr({to_str(self)!r})"

    def __str__(self):
        return to_str(self)

    def children(self) -> tuple["Expr", ...]:
        return ()

    # arithmetic sugar goes through the folding constructors
    def __add__(self, o):
        return add(self, as_expr(o))

    def __radd__(self, o):
        return add(as_expr(o), self)

    def __sub__(self, o):
        return sub(self, as_expr(o))

    def __rsub__(self, o):
        return sub(as_expr(o), self)

    def __mul__(self, o):
        return mul(self, as_expr(o))

    def __rmul__(self, o):
        return mul(as_expr(o), self)

    def __truediv__(self, o):
        return div(self, as_expr(o))

    def __rtruediv__(self, o):
        return div(as_expr(o), self)

    def __pow__(self, o):
        return power(self, as_expr(o))

    def __neg__(self):
        return neg(self)


class Const(Expr):
    __slots__ = ("value",)

    def __init__(self, value):
        value = float(value)
        if not math.isfinite(value):
            raise DomainError(f"non-finite constant {value}")
        self._init(value=value)

    def _key(self):
        return (self.value,)


class Sym(Expr):
    __slots__ = ("name",)

    def __init__(self, name: str):
        self._init(name=name)

    def _key(self):
        return (self.name,)


class Neg(Expr):
    __slots__ = ("arg",)

    def __init__(self, arg: Expr):
        self._init(arg=arg)

    def _key(self):
        return (self.arg,)

    def children(self):
        return (self.arg,)


class _Binary(Expr):
    __slots__ = ("left", "right")
    op = "?"

    def __init__(self, left: Expr, right: Expr):
        self._init(left=left, right=right)

    def _key(self):
        return (self.left, self.right)

    def children(self):
        return (self.left, self.right)


class Add(_Binary):
    __slots__ = ()
    op = "+"


class Sub(_Binary):
    __slots__ = ()
    op = "-"


class Mul(_Binary):
    __slots__ = ()
    op = "*"


class Div(_Binary):
    __slots__ = ()
    op = "/"


class Pow(_Binary):
    __slots__ = ()
    op = "^"


class Call(Expr):
    __slots__ = ("fname", "arg")

    def __init__(self, fname: str, arg: Expr):
        if fname not in FUNCTIONS:
            raise ValueError(f"unsupported function {fname!r}")
        self._init(fname=fname, arg=arg)

    def _key(self):
        return (self.fname, self.arg)

    def children(self):
        return (self.arg,)


ZERO = Const(0.0)
ONE = Const(1.0)


def as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, str):
        return Sym(x)
    return Const(x)


def _is_const(e, value=None):
    return isinstance(e, Const) and (value is None or e.value == value)


# ---------------------------------------------------------------------------
# numeric primitives shared by the tree evaluator and generated code


def _pow(a: float, b: float) -> float:
    if b == int(b) and abs(b) < 1 << 31:
        if a == 0.0 and b < 0:
            raise DomainError("0 raised to a negative power")
        return a ** int(b)
    if a < 0:
        raise DomainError("negative base with non-integer exponent")
    if a == 0.0 and b < 0:
        raise DomainError("0 raised to a negative power")
    return math.pow(a, b)


def _div(a: float, b: float) -> float:
    if b == 0.0:
        raise DomainError("division by zero")
    return a / b


def _log(a: float) -> float:
    if a <= 0.0:
        raise DomainError("log of non-positive value")
    return math.log(a)


def _sqrt(a: float) -> float:
    if a < 0.0:
        raise DomainError("sqrt of negative value")
    return math.sqrt(a)


_FUNC_IMPL: dict[str, Callable[[float], float]] = {
    "sin": math.sin,
    "cos": math.cos,
    "tan": math.tan,
    "exp": math.exp,
    "log": _log,
    "sqrt": _sqrt,
}


def _apply_binary(op: str, a: float, b: float) -> float:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return _div(a, b)
    return _pow(a, b)


def _checked(fn, *args):
    try:
        r = fn(*args)
    except (OverflowError, ZeroDivisionError, ValueError) as exc:
        raise DomainError(str(exc)) from None
    if not math.isfinite(r):
        raise DomainError("non-finite intermediate value")
    return r


# ---------------------------------------------------------------------------
# folding constructors


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def add(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if isinstance(b, Neg):
        return sub(a, b.arg)
    return Add(a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    if a == b:
        return ZERO
    if isinstance(b, Neg):
        return add(a, b.arg)
    return Sub(a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a, -1.0):
        return neg(b)
    if _is_const(b, -1.0):
        return neg(a)
    if isinstance(a, Neg) and isinstance(b, Neg):
        return mul(a.arg, b.arg)
    if isinstance(a, Const) and isinstance(b, Mul) and isinstance(b.left, Const):
        return mul(Const(a.value * b.left.value), b.right)
    if isinstance(a, Neg):
        return neg(mul(a.arg, b))
    if isinstance(b, Neg):
        return neg(mul(a, b.arg))
    return Mul(a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0.0):
        raise DomainError("division by the zero constant")
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value / b.value)
    if _is_const(a, 0.0):
        return ZERO
    if _is_const(b, 1.0):
        return a
    if _is_const(b, -1.0):
        return neg(a)
    if isinstance(a, Neg):
        return neg(div(a.arg, b))
    if isinstance(b, Neg):
        return neg(div(a, b.arg))
    return Div(a, b)


def power(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0.0):
        return ONE
    if _is_const(b, 1.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        try:
            return Const(_checked(_pow, a.value, b.value))
        except DomainError:
            pass
    return Pow(a, b)


def call(fname: str, a: Expr) -> Expr:
    if isinstance(a, Const):
        try:
            return Const(_checked(_FUNC_IMPL[fname], a.value))
        except DomainError:
            pass
    return Call(fname, a)


_REBUILD = {Add: add, Sub: sub, Mul: mul, Div: div, Pow: power}


def _rebuild(e: Expr, kids: Sequence[Expr]) -> Expr:
    if isinstance(e, Neg):
        return neg(kids[0])
    if isinstance(e, Call):
        return call(e.fname, kids[0])
    return _REBUILD[type(e)](kids[0], kids[1])


def _map_tree(e: Expr, leaf: Callable[[Expr], Expr]) -> Expr:
    memo: dict[int, Expr] = {}

    def go(x):
        r = memo.get(id(x))
        if r is not None:
            return r
        if isinstance(x, (Const, Sym)):
            r = leaf(x)
        else:
            r = _rebuild(x, [go(c) for c in x.children()])
        memo[id(x)] = r
        return r

    return go(e)


def simplify(e: Expr) -> Expr:
    """Rebuild bottom-up through the folding constructors."""
    return _map_tree(e, lambda x: x)


def substitute(e: Expr, mapping: Mapping[str, Expr | float]) -> Expr:
    if not mapping:
        return e
    m = {k: as_expr(v) for k, v in mapping.items()}
    return _map_tree(e, lambda x: m.get(x.name, x) if isinstance(x, Sym) else x)


def free_symbols(e: Expr) -> frozenset[str]:
    seen: set[int] = set()
    out: set[str] = set()
    stack = [e]
    while stack:
        x = stack.pop()
        if id(x) in seen:
            continue
        seen.add(id(x))
        if isinstance(x, Sym):
            out.add(x.name)
        stack.extend(x.children())
    return frozenset(out)


def size(e: Expr) -> int:
    """Number of distinct nodes."""
    seen: set[int] = set()
    stack = [e]
    while stack:
        x = stack.pop()
        if id(x) in seen:
            continue
        seen.add(id(x))
        stack.extend(x.children())
    return len(seen)


# ---------------------------------------------------------------------------
# differentiation


def diff(e: Expr, x: str | Var | Sym) -> Expr:
    """Exact partial derivative of ``e`` with respect to the variable ``x``."""
    name = x.name if isinstance(x, (Var, Sym)) else x
    memo: dict[int, Expr] = {}

    def d(n: Expr) -> Expr:
        r = memo.get(id(n))
        if r is not None:
            return r
        if isinstance(n, Const):
            r = ZERO
        elif isinstance(n, Sym):
            r = ONE if n.name == name else ZERO
        elif isinstance(n, Neg):
            r = neg(d(n.arg))
        elif isinstance(n, Add):
            r = add(d(n.left), d(n.right))
        elif isinstance(n, Sub):
            r = sub(d(n.left), d(n.right))
        elif isinstance(n, Mul):
            r = add(mul(d(n.left), n.right), mul(n.left, d(n.right)))
        elif isinstance(n, Div):
            dl, dr = d(n.left), d(n.right)
            r = sub(div(dl, n.right), div(mul(n.left, dr), power(n.right, Const(2))))
        elif isinstance(n, Pow):
            r = _diff_pow(n, d(n.left), d(n.right))
        else:
            r = mul(_dfunc(n.fname, n.arg), d(n.arg))
        memo[id(n)] = r
        return r

    return d(e)


def _diff_pow(n: Pow, db: Expr, de: Expr) -> Expr:
    b, ex = n.left, n.right
    if _is_const(de, 0.0):
        if _is_const(db, 0.0):
            return ZERO
        return mul(mul(ex, power(b, sub(ex, ONE))), db)
    # general case: b^e * (e' log b + e b'/b)
    return mul(n, add(mul(de, call("log", b)), div(mul(ex, db), b)))


def _dfunc(fname: str, a: Expr) -> Expr:
    if fname == "sin":
        return call("cos", a)
    if fname == "cos":
        return neg(call("sin", a))
    if fname == "tan":
        return add(ONE, power(call("tan", a), Const(2)))
    if fname == "exp":
        return call("exp", a)
    if fname == "log":
        return div(ONE, a)
    return div(Const(0.5), call("sqrt", a))


def total_derivative(e: Expr, table: VarTable) -> Expr:
    """Coordinate total time derivative d/dt e = de/dt + sum_x x' de/dx.

    Parameters are constants.  A variable whose partial derivative is not
    structurally zero must have a prolongation in ``table``.
    """
    time = table.of_kind("time")
    out = diff(e, time[0]) if time else ZERO
    for name in sorted(free_symbols(e)):
        if name in table and table.kind(name) in ("time", "parameter"):
            continue
        de = diff(e, name)
        if _is_const(de, 0.0):
            continue
        image = table.prolong(name) if name in table else None
        if image is None:
            raise MissingProlongationError(name)
        out = add(out, mul(Sym(image), de))
    return out


# ---------------------------------------------------------------------------
# evaluation


def evaluate(e: Expr, point: Mapping[str, float]) -> float:
    """IEEE evaluation; domain violations raise :class:`DomainError`."""
    return _eval(e, point, with_scale=False)[0]


def evaluate_with_scale(e: Expr, point: Mapping[str, float]) -> tuple[float, float]:
    """Value plus a magnitude estimate of the terms that produced it.

    The magnitude bounds cancellation: ``x - x`` has value 0 and scale ``2|x|``.
    """
    return _eval(e, point, with_scale=True)


def _eval(e: Expr, point, with_scale: bool):
    memo: dict[int, tuple[float, float]] = {}

    def ev(n: Expr):
        r = memo.get(id(n))
        if r is not None:
            return r
        if isinstance(n, Const):
            r = (n.value, abs(n.value))
        elif isinstance(n, Sym):
            try:
                v = float(point[n.name])
            except KeyError:
                raise UnassignedVariableError(n.name) from None
            r = (v, abs(v))
        elif isinstance(n, Neg):
            a = ev(n.arg)
            r = (-a[0], a[1])
        elif isinstance(n, Call):
            a = ev(n.arg)
            v = _checked(_FUNC_IMPL[n.fname], a[0])
            r = (v, abs(v) + a[1])
        else:
            a, b = ev(n.left), ev(n.right)
            v = _checked(_apply_binary, n.op, a[0], b[0])
            if not with_scale:
                r = (v, 0.0)
            elif n.op in "+-":
                r = (v, a[1] + b[1])
            elif n.op == "*":
                r = (v, a[1] * b[1])
            elif n.op == "/":
                r = (v, a[1] / abs(b[0]))
            else:
                try:
                    s = a[1] ** abs(b[0]) if a[1] > 0 else 0.0
                except OverflowError:
                    s = abs(v)
                r = (v, max(abs(v), s))
        memo[id(n)] = r
        return r

    return ev(e)


def lambdify(exprs: Sequence[Expr], argnames: Sequence[str], constants: Mapping[str, float] | None = None):
    """Compile expressions to a function ``f(values) -> list[float]``.

    ``values`` is indexed like ``argnames``.  Names in ``constants`` are
    inlined.  Common subexpressions are shared.  Domain violations raise
    :class:`DomainError`.
    """
    constants = dict(constants or {})
    index = {n: i for i, n in enumerate(argnames)}
    lines: list[str] = []
    names: dict[Expr, str] = {}

    def emit(n: Expr) -> str:
        got = names.get(n)
        if got is not None:
            return got
        if isinstance(n, Const):
            return repr(n.value)
        if isinstance(n, Sym):
            if n.name in constants:
                return repr(float(constants[n.name]))
            if n.name not in index:
                raise UnassignedVariableError(n.name)
            code = f"x[{index[n.name]}]"
        elif isinstance(n, Neg):
            code = f"-({emit(n.arg)})"
        elif isinstance(n, Call):
            code = f"_f_{n.fname}({emit(n.arg)})"
        elif isinstance(n, Pow):
            b, ex = emit(n.left), emit(n.right)
            if isinstance(n.right, Const) and n.right.value == int(n.right.value) and n.right.value > 0:
                code = f"({b}) ** {int(n.right.value)}"
            else:
                code = f"_pow({b}, {ex})"
        elif isinstance(n, Div):
            code = f"({emit(n.left)}) / ({emit(n.right)})"
        else:
            code = f"({emit(n.left)}) {n.op} ({emit(n.right)})"
        var = f"_t{len(names)}"
        lines.append(f"    {var} = {code}")
        names[n] = var
        return var

    outs = [emit(e) for e in exprs]
    src = "def _compiled(x):\n" + "\n".join(lines) + ("\n" if lines else "") + f"    return [{', '.join(outs)}]\n"
    ns = {"_pow": _pow, **{f"_f_{k}": v for k, v in _FUNC_IMPL.items()}}
    exec(compile(src, "<ocsr-lambdify>", "exec"), ns)
    raw = ns["_compiled"]

    def f(values):
        try:
            out = raw(values)
        except (OverflowError, ZeroDivisionError, ValueError) as exc:
            raise DomainError(str(exc)) from None
        for v in out:
            if not math.isfinite(v):
                raise DomainError("non-finite value")
        return out

    f.source = src
    return f


# ---------------------------------------------------------------------------
# probabilistic zero testing


def make_rng(seed: int | None = None) -> np.random.Generator:
    return np.random.default_rng(DEFAULT_SEED if seed is None else seed)


def sample_point(names: Iterable[str], table: VarTable | None, rng: np.random.Generator,
                 fixed: Mapping[str, float] | None = None) -> dict[str, float]:
    """Uniform draw per variable: [-1, 1] by default, declared range for parameters."""
    pt: dict[str, float] = {}
    for name in sorted(names):
        if fixed and name in fixed:
            pt[name] = float(fixed[name])
            continue
        var = table[name] if table is not None and name in table else None
        lo, hi = (var.lo, var.hi) if var is not None and var.kind == "parameter" else (-1.0, 1.0)
        x = rng.uniform(lo, hi)
        if var is not None and var.nonzero:
            eps = 1e-3 * max(hi - lo, 1e-12)
            while abs(x) < eps:
                x = rng.uniform(lo, hi)
        pt[name] = float(x)
    return pt


def _samples(e: Expr, table, rng, trials, fixed):
    """Yield (value, scale) at ``trials`` admissible random points."""
    names = free_symbols(e)
    got = 0
    attempts = 0
    while got < trials and attempts < 20 * trials:
        attempts += 1
        pt = sample_point(names, table, rng, fixed)
        try:
            val, scale = evaluate_with_scale(e, pt)
        except DomainError:
            continue
        got += 1
        yield val, scale
    if got == 0:
        raise UndecidableError(f"every sample point hit a domain error for {to_str(e)}")


def zero_status(e: Expr, table: VarTable | None = None, rng: np.random.Generator | None = None,
                trials: int = DEFAULT_TRIALS, tol: float = DEFAULT_TOL,
                fixed: Mapping[str, float] | None = None) -> str:
    """Classify ``e`` as 'zero', 'nonzero' (no sampled zeros) or 'indefinite'."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if isinstance(e, Const):
        return "zero" if e.value == 0.0 else "nonzero"
    rng = make_rng() if rng is None else rng
    zeros = nonzeros = 0
    for val, scale in _samples(e, table, rng, trials, fixed):
        if abs(val) <= tol * (1.0 + abs(scale)):
            zeros += 1
        else:
            nonzeros += 1
    if nonzeros == 0:
        return "zero"
    if zeros == 0:
        return "nonzero"
    return "indefinite"


def is_zero(e: Expr, table: VarTable | None = None, rng: np.random.Generator | None = None,
            trials: int = DEFAULT_TRIALS, tol: float = DEFAULT_TOL,
            fixed: Mapping[str, float] | None = None) -> bool:
    """Probabilistic identity test.

    True iff ``|e| <= tol * (1 + scale)`` at every one of ``trials`` random
    points (points raising domain errors are skipped).  For polynomials of
    bounded degree a false "zero" verdict has probability zero; a nonzero
    expression that vanishes only on a measure-zero set is never reported as
    zero unless a sample lands on it.
    """
    return zero_status(e, table, rng, trials, tol, fixed) == "zero"


def proportional(e1: Expr, e2: Expr, table: VarTable | None = None, rng: np.random.Generator | None = None,
                 trials: int = DEFAULT_TRIALS, tol: float = 1e-8,
                 fixed: Mapping[str, float] | None = None) -> float | None:
    """Return c with e1 == c * e2 at all sample points, or None."""
    rng = make_rng() if rng is None else rng
    names = free_symbols(e1) | free_symbols(e2)
    ratios = []
    attempts = 0
    while len(ratios) < trials and attempts < 20 * trials:
        attempts += 1
        pt = sample_point(names, table, rng, fixed)
        try:
            a = evaluate(e1, pt)
            b = evaluate(e2, pt)
        except DomainError:
            continue
        if abs(b) < 1e-12:
            continue
        ratios.append(a / b)
    if not ratios:
        return None
    c = ratios[0]
    if all(abs(r - c) <= tol * (1.0 + abs(c)) for r in ratios) and c != 0.0:
        return c
    return None


# ---------------------------------------------------------------------------
# printing and parsing

_PREC_SUM, _PREC_TERM, _PREC_UNARY, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _fmt_number(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def _prec(e: Expr) -> int:
    if isinstance(e, (Add, Sub)):
        return _PREC_SUM
    if isinstance(e, (Mul, Div)):
        return _PREC_TERM
    if isinstance(e, Neg):
        return _PREC_UNARY
    if isinstance(e, Const) and e.value < 0:
        return _PREC_UNARY
    if isinstance(e, Pow):
        return _PREC_POW
    return _PREC_ATOM


def to_str(e: Expr) -> str:
    """Print in the input grammar; ``parse(to_str(e))`` rebuilds ``e`` exactly."""
    memo: dict[int, str] = {}

    def wrap(x: Expr, need: int) -> str:
        s = p(x)
        return f"({s})" if _prec(x) < need else s

    def p(x: Expr) -> str:
        r = memo.get(id(x))
        if r is not None:
            return r
        if isinstance(x, Const):
            r = _fmt_number(x.value)
        elif isinstance(x, Sym):
            r = x.name
        elif isinstance(x, Neg):
            a = x.arg
            # "-2" would reparse as a negative literal
            if isinstance(a, Const) or _prec(a) < _PREC_POW:
                r = f"-({p(a)})"
            else:
                r = f"-{p(a)}"
        elif isinstance(x, Call):
            r = f"{x.fname}({p(x.arg)})"
        elif isinstance(x, (Add, Sub)):
            r = f"{wrap(x.left, _PREC_SUM)} {x.op} {wrap(x.right, _PREC_TERM)}"
        elif isinstance(x, (Mul, Div)):
            r = f"{wrap(x.left, _PREC_TERM)}{x.op}{wrap(x.right, _PREC_UNARY)}"
        else:
            r = f"{wrap(x.left, _PREC_ATOM)}^{wrap(x.right, _PREC_UNARY)}"
        memo[id(x)] = r
        return r

    return p(e)


_TOKEN = re.compile(
    r"(?P<ws>[ \t\r\n\f\v]+)"
    r"|(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<id>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()])"
)


def _tokenize(text: str):
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup != "ws":
            toks.append((m.lastgroup, m.group(), pos))
        pos = m.end()
    toks.append(("end", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str, known):
        self.toks = _tokenize(text)
        self.i = 0
        self.known = known

    def peek(self):
        return self.toks[self.i]

    def take(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, value):
        t = self.take()
        if t[1] != value:
            raise ParseError(f"expected {value!r}", t[2])
        return t

    def parse(self) -> Expr:
        e = self.expr()
        t = self.peek()
        if t[0] != "end":
            raise ParseError(f"unexpected token {t[1]!r}", t[2])
        return e

    def expr(self):
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            r = self.term()
            e = Add(e, r) if op == "+" else Sub(e, r)
        return e

    def term(self):
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            r = self.unary()
            e = Mul(e, r) if op == "*" else Div(e, r)
        return e

    def unary(self):
        t = self.peek()
        if t[0] == "op" and t[1] == "-":
            self.take()
            nxt = self.peek()
            if nxt[0] == "num":
                # a literal directly after unary minus is a negative constant,
                # unless it is the base of a power: -2^2 == -(2^2)
                save = self.i
                self.take()
                if self.peek()[1] != "^":
                    return Const(-float(nxt[1]))
                self.i = save
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return Pow(base, self.unary())
        return base

    def atom(self):
        t = self.take()
        kind, val, off = t
        if kind == "num":
            return Const(float(val))
        if kind == "id":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                if val not in FUNCTIONS:
                    raise UnknownIdentifierError(val, off)
                self.take()
                arg = self.expr()
                self.expect(")")
                return Call(val, arg)
            if self.known is not None and val not in self.known:
                raise UnknownIdentifierError(val, off)
            return Sym(val)
        if kind == "op" and val == "(":
            e = self.expr()
            self.expect(")")
            return e
        if kind == "end":
            raise ParseError("unexpected end of input", off)
        raise ParseError(f"unexpected token {val!r}", off)


def parse(text: str, table: VarTable | Iterable[str] | None = None) -> Expr:
    """Parse ``text`` into an unsimplified AST.

    Identifiers must be registered in ``table`` (a VarTable or a collection
    of names); ``None`` accepts any identifier.
    """
    if isinstance(table, VarTable):
        known = set(table.names)
    elif table is None:
        known = None
    else:
        known = set(table)
    return _Parser(text, known).parse()
