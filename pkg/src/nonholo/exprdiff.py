"""Tiny scalar expression language with forward-mode derivatives.

Potentials, constraint coefficients and deformation functions enter the
library as strings like ``"-y"`` or ``"v_x*v_y/(1+y^2)"``.  This module
parses them into immutable ASTs and evaluates values, gradients and
Hessians by running the same tree walk on dual numbers.

Grammar (EBNF, also reproduced in the README):

    expr    = term { ("+" | "-") term } ;
    term    = unary { ("*" | "/") unary } ;
    unary   = "-" unary | power ;
    power   = atom [ "^" unary ] ;
    atom    = NUMBER | NAME | NAME "(" expr ")" | "(" expr ")" ;

``+ - * /`` are left-associative, ``^`` is right-associative and binds
tighter than unary minus (so ``-y^2`` is ``-(y^2)`` and ``y^-2`` is
``y^(-2)``).  Recognised functions: sin cos tan exp log tanh sqrt cot.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Expression",
    "Num",
    "Var",
    "Neg",
    "Add",
    "Sub",
    "Mul",
    "Div",
    "Pow",
    "Call",
    "ExprSyntaxError",
    "EvalError",
    "parse",
    "evaluate",
    "gradient",
    "hessian",
    "free_variables",
    "to_string",
    "FUNCTION_NAMES",
]


class ExprSyntaxError(ValueError):
    """Raised on malformed input; carries the byte offset and what was expected."""

    def __init__(self, offset: int, expected: tuple[str, ...], found: str):
        self.offset = offset
        self.expected = expected
        super().__init__(
            f"syntax error at byte {offset}: expected {' or '.join(expected)}, found {found}"
        )


class EvalError(ValueError):
    """Unbound variable or a domain error (log of non-positive number, division by zero, ...)."""


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expression"


@dataclass(frozen=True)
class Add:
    left: "Expression"
    right: "Expression"


@dataclass(frozen=True)
class Sub:
    left: "Expression"
    right: "Expression"


@dataclass(frozen=True)
class Mul:
    left: "Expression"
    right: "Expression"


@dataclass(frozen=True)
class Div:
    left: "Expression"
    right: "Expression"


@dataclass(frozen=True)
class Pow:
    base: "Expression"
    exponent: "Expression"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expression"


Expression = Num | Var | Neg | Add | Sub | Mul | Div | Pow | Call

# value, first and second derivative of each primitive, plus a domain guard.
def _cot(x: float) -> float:
    s = math.sin(x)
    if s == 0.0:
        raise EvalError(f"cot undefined at {x!r} (sin is zero)")
    return math.cos(x) / s


FUNCTION_NAMES = ("sin", "cos", "tan", "exp", "log", "tanh", "sqrt", "cot")

_FUNCS: dict[str, tuple] = {
    "sin": (math.sin, math.cos, lambda x: -math.sin(x)),
    "cos": (math.cos, lambda x: -math.sin(x), lambda x: -math.cos(x)),
    "tan": (
        math.tan,
        lambda x: 1.0 + math.tan(x) ** 2,
        lambda x: 2.0 * math.tan(x) * (1.0 + math.tan(x) ** 2),
    ),
    "exp": (math.exp, math.exp, math.exp),
    "log": (math.log, lambda x: 1.0 / x, lambda x: -1.0 / (x * x)),
    "tanh": (
        math.tanh,
        lambda x: 1.0 - math.tanh(x) ** 2,
        lambda x: -2.0 * math.tanh(x) * (1.0 - math.tanh(x) ** 2),
    ),
    "sqrt": (
        math.sqrt,
        lambda x: 0.5 / math.sqrt(x),
        lambda x: -0.25 / (x * math.sqrt(x)),
    ),
    "cot": (
        _cot,
        lambda x: -(1.0 + _cot(x) ** 2),
        lambda x: 2.0 * _cot(x) * (1.0 + _cot(x) ** 2),
    ),
}

_NUMBER_RE = re.compile(r"(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")
_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def _peek(self) -> str:
        self._skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def _fail(self, expected: tuple[str, ...]):
        found = repr(self.text[self.pos]) if self.pos < len(self.text) else "end of input"
        raise ExprSyntaxError(self.pos, expected, found)

    def _eat(self, ch: str) -> bool:
        if self._peek() == ch:
            self.pos += 1
            return True
        return False

    def parse(self) -> Expression:
        node = self.expr()
        self._skip_ws()
        if self.pos != len(self.text):
            self._fail(("operator", "end of input"))
        return node

    def expr(self) -> Expression:
        node = self.term()
        while True:
            if self._eat("+"):
                node = Add(node, self.term())
            elif self._eat("-"):
                node = Sub(node, self.term())
            else:
                return node

    def term(self) -> Expression:
        node = self.unary()
        while True:
            if self._eat("*"):
                node = Mul(node, self.unary())
            elif self._eat("/"):
                node = Div(node, self.unary())
            else:
                return node

    def unary(self) -> Expression:
        if self._eat("-"):
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expression:
        node = self.atom()
        if self._eat("^"):
            return Pow(node, self.unary())
        return node

    def atom(self) -> Expression:
        self._skip_ws()
        if self.pos >= len(self.text):
            self._fail(("number", "name", "'('"))
        m = _NUMBER_RE.match(self.text, self.pos)
        if m:
            self.pos = m.end()
            return Num(float(m.group()))
        m = _NAME_RE.match(self.text, self.pos)
        if m:
            self.pos = m.end()
            name = m.group()
            if self._peek() == "(":
                if name not in _FUNCS:
                    raise ExprSyntaxError(m.start(), tuple(FUNCTION_NAMES), repr(name))
                self.pos += 1
                arg = self.expr()
                if not self._eat(")"):
                    self._fail(("')'",))
                return Call(name, arg)
            return Var(name)
        if self._eat("("):
            node = self.expr()
            if not self._eat(")"):
                self._fail(("')'",))
            return node
        self._fail(("number", "name", "'('"))


def parse(text: str) -> Expression:
    if not text or text.isspace():
        raise ExprSyntaxError(0, ("number", "name", "'('"), "empty input")
    return _Parser(text).parse()


class _Dual:
    """Scalar with a tangent vector, and optionally a symmetric second-order block."""

    __slots__ = ("val", "grad", "hess")

    def __init__(self, val: float, grad: np.ndarray, hess: np.ndarray | None = None):
        self.val = val
        self.grad = grad
        self.hess = hess

    # Plain floats are treated as constants (zero tangent).
    def __add__(self, other):
        if isinstance(other, _Dual):
            h = None if self.hess is None else self.hess + other.hess
            return _Dual(self.val + other.val, self.grad + other.grad, h)
        return _Dual(self.val + other, self.grad, self.hess)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, _Dual):
            h = None if self.hess is None else self.hess - other.hess
            return _Dual(self.val - other.val, self.grad - other.grad, h)
        return _Dual(self.val - other, self.grad, self.hess)

    def __rsub__(self, other):
        h = None if self.hess is None else -self.hess
        return _Dual(other - self.val, -self.grad, h)

    def __neg__(self):
        h = None if self.hess is None else -self.hess
        return _Dual(-self.val, -self.grad, h)

    def __mul__(self, other):
        if isinstance(other, _Dual):
            g = self.grad * other.val + self.val * other.grad
            h = None
            if self.hess is not None:
                cross = np.outer(self.grad, other.grad)
                h = self.hess * other.val + self.val * other.hess + cross + cross.T
            return _Dual(self.val * other.val, g, h)
        h = None if self.hess is None else self.hess * other
        return _Dual(self.val * other, self.grad * other, h)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, _Dual):
            if other.val == 0.0:
                raise EvalError("division by zero")
            val = self.val / other.val
            g = (self.grad - val * other.grad) / other.val
            h = None
            if self.hess is not None:
                cross = np.outer(g, other.grad)
                h = (self.hess - cross - cross.T - val * other.hess) / other.val
            return _Dual(val, g, h)
        if other == 0.0:
            raise EvalError("division by zero")
        h = None if self.hess is None else self.hess / other
        return _Dual(self.val / other, self.grad / other, h)

    def __rtruediv__(self, other):
        if self.val == 0.0:
            raise EvalError("division by zero")
        return _const_like(other, self) / self

    def apply(self, f, df, d2f):
        fval = f(self.val)
        d = df(self.val)
        g = d * self.grad
        h = None
        if self.hess is not None:
            h = d * self.hess + d2f(self.val) * np.outer(self.grad, self.grad)
        return _Dual(fval, g, h)


def _const_like(value: float, template: _Dual) -> _Dual:
    g = np.zeros_like(template.grad)
    h = None if template.hess is None else np.zeros_like(template.hess)
    return _Dual(float(value), g, h)


def _eval_node(node: Expression, env: dict):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise EvalError(f"unbound variable {node.name!r}") from None
    if isinstance(node, Neg):
        return -_eval_node(node.operand, env)
    if isinstance(node, Add):
        return _eval_node(node.left, env) + _eval_node(node.right, env)
    if isinstance(node, Sub):
        return _eval_node(node.left, env) - _eval_node(node.right, env)
    if isinstance(node, Mul):
        return _eval_node(node.left, env) * _eval_node(node.right, env)
    if isinstance(node, Div):
        num = _eval_node(node.left, env)
        den = _eval_node(node.right, env)
        if isinstance(den, float) and den == 0.0:
            raise EvalError("division by zero")
        return num / den
    if isinstance(node, Pow):
        return _eval_pow(node, env)
    if isinstance(node, Call):
        arg = _eval_node(node.arg, env)
        f, df, d2f = _FUNCS[node.func]
        try:
            if isinstance(arg, _Dual):
                _check_fn_domain(node.func, arg.val, derivative=True)
                return arg.apply(f, df, d2f)
            _check_fn_domain(node.func, arg, derivative=False)
            return f(arg)
        except OverflowError:
            raise EvalError(f"overflow in {node.func}") from None
    raise TypeError(f"not an expression node: {node!r}")


def _check_fn_domain(func: str, x: float, derivative: bool) -> None:
    if func == "log" and x <= 0.0:
        raise EvalError(f"log of non-positive value {x!r}")
    if func == "sqrt":
        if x < 0.0:
            raise EvalError(f"sqrt of negative value {x!r}")
        if derivative and x == 0.0:
            raise EvalError("sqrt not differentiable at 0")
    if func == "cot" and math.sin(x) == 0.0:
        raise EvalError(f"cot undefined at {x!r} (sin is zero)")
    if func in ("tan", "cot") and not math.isfinite(x):
        raise EvalError(f"{func} of non-finite value")


def _literal_int_exponent(node: Expression):
    """Integer value of an exponent written as a (possibly negated) literal."""
    sign = 1
    while isinstance(node, Neg):
        sign = -sign
        node = node.operand
    if isinstance(node, Num) and float(node.value).is_integer():
        return sign * int(node.value)
    return None


def _eval_pow(node: Pow, env: dict):
    base = _eval_node(node.base, env)
    # Integer exponents up to 8 go through repeated multiplication so that
    # polynomial data stays exact and negative bases are legal.
    n = _literal_int_exponent(node.exponent)
    if n is not None and abs(n) <= 8:
        if n == 0:
            return 1.0
        acc = base
        for _ in range(abs(n) - 1):
            acc = acc * base
        if n < 0:
            if (acc.val if isinstance(acc, _Dual) else acc) == 0.0:
                raise EvalError("division by zero")
            return 1.0 / acc
        return acc
    expo = _eval_node(node.exponent, env)
    base_val = base.val if isinstance(base, _Dual) else base
    if base_val <= 0.0:
        raise EvalError(f"power with non-positive base {base_val!r} requires an integer exponent")
    try:
        lg = base.apply(*_FUNCS["log"]) if isinstance(base, _Dual) else math.log(base)
        prod = lg * expo
        if isinstance(prod, _Dual):
            return prod.apply(*_FUNCS["exp"])
        return math.exp(prod)
    except OverflowError:
        raise EvalError("overflow in power evaluation") from None


def _check_finite(value: float) -> float:
    if not math.isfinite(value):
        raise EvalError(f"evaluation produced a non-finite value ({value!r})")
    return value


def evaluate(expr: Expression, ctx: dict) -> float:
    """Evaluate `expr` with every free variable bound in `ctx` (name -> float)."""
    out = _eval_node(expr, {k: float(v) for k, v in ctx.items()})
    return _check_finite(float(out))


def _seeded_env(ctx: dict, wrt: list[str], order: int) -> dict:
    k = len(wrt)
    env = {name: float(val) for name, val in ctx.items()}
    for name in wrt:
        if name not in env:
            raise EvalError(f"unbound variable {name!r}")
    for i, name in enumerate(wrt):
        grad = np.zeros(k)
        grad[i] = 1.0
        hess = np.zeros((k, k)) if order == 2 else None
        env[name] = _Dual(env[name], grad, hess)
    return env


def gradient(expr: Expression, wrt: list[str], ctx: dict) -> np.ndarray:
    """First derivatives of `expr` with respect to the listed names, at `ctx`."""
    out = _eval_node(expr, _seeded_env(ctx, list(wrt), order=1))
    if not isinstance(out, _Dual):
        out = _Dual(float(out), np.zeros(len(wrt)))
    _check_finite(out.val)
    if not np.all(np.isfinite(out.grad)):
        raise EvalError("gradient produced a non-finite value")
    return out.grad.copy()


def hessian(expr: Expression, wrt: list[str], ctx: dict) -> np.ndarray:
    """Second-derivative matrix of `expr`; symmetric by construction."""
    k = len(wrt)
    out = _eval_node(expr, _seeded_env(ctx, list(wrt), order=2))
    if not isinstance(out, _Dual):
        return np.zeros((k, k))
    _check_finite(out.val)
    hess = out.hess if out.hess is not None else np.zeros((k, k))
    if not np.all(np.isfinite(hess)):
        raise EvalError("hessian produced a non-finite value")
    return hess.copy()


def free_variables(expr: Expression) -> set[str]:
    if isinstance(expr, Var):
        return {expr.name}
    if isinstance(expr, Num):
        return set()
    if isinstance(expr, Neg):
        return free_variables(expr.operand)
    if isinstance(expr, Call):
        return free_variables(expr.arg)
    if isinstance(expr, Pow):
        return free_variables(expr.base) | free_variables(expr.exponent)
    return free_variables(expr.left) | free_variables(expr.right)


_PREC = {Add: 1, Sub: 1, Mul: 2, Div: 2, Neg: 3, Pow: 4, Num: 5, Var: 5, Call: 5}


def _prec(node: Expression) -> int:
    return _PREC[type(node)]


def to_string(expr: Expression) -> str:
    """Render with the fewest parentheses that still round-trip the tree."""
    if isinstance(expr, Num):
        v = expr.value
        if float(v).is_integer() and abs(v) < 1e16:
            return str(int(v))
        return repr(v)
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Call):
        return f"{expr.func}({to_string(expr.arg)})"
    if isinstance(expr, Neg):
        inner = to_string(expr.operand)
        if _prec(expr.operand) < _PREC[Neg]:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(expr, Pow):
        left = to_string(expr.base)
        if _prec(expr.base) <= _PREC[Pow]:
            left = f"({left})"
        right = to_string(expr.exponent)
        if _prec(expr.exponent) < _PREC[Neg]:
            right = f"({right})"
        return f"{left}^{right}"
    op = {Add: "+", Sub: "-", Mul: "*", Div: "/"}[type(expr)]
    mine = _prec(expr)
    left = to_string(expr.left)
    if _prec(expr.left) < mine:
        left = f"({left})"
    right = to_string(expr.right)
    if _prec(expr.right) <= mine:
        right = f"({right})"
    return f"{left}{op}{right}"
