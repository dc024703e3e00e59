"""Scalar expression language for user-supplied dynamics and rewards.

Grammar (lowest to highest precedence)::

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := "-" unary | power
    power   := primary ("^" unary)?          # right-associative
    primary := NUMBER | IDENT | IDENT "(" args ")" | "(" expr ")"

Identifiers are ``t``, ``x1..xm``, ``u1..uk`` and the constant ``pi``.
Functions: sin, cos, exp, ln, sqrt, abs, sgn (one argument) and pow, min,
max (two arguments).

Expressions compile to closures. Two evaluators share the compiled tree:
plain floats, and forward-mode dual numbers carrying partials with respect
to the state, which is how automatic Jacobians are produced.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ArityError,
    DomainError,
    DslSyntaxError,
    NonFiniteValue,
    UnknownIdentifier,
)

__all__ = [
    "Const",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "Expr",
    "Dual",
    "parse",
    "to_source",
    "evaluate",
    "grad_x",
]


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    kind: str  # "t", "x" or "u"
    index: int = 0  # 1-based for x and u, 0 for t


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


Node = Const | Var | Neg | BinOp | Call

UNARY_FUNCS = ("sin", "cos", "exp", "ln", "sqrt", "abs", "sgn")
BINARY_FUNCS = ("pow", "min", "max")
ARITY = {**{n: 1 for n in UNARY_FUNCS}, **{n: 2 for n in BINARY_FUNCS}}


# ---------------------------------------------------------------------------
# Tokenizer / parser

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),])"
    r")"
)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(source: str) -> list[_Tok]:
    toks = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(source, pos)
        if m is None or m.lastgroup is None:
            raise DslSyntaxError(pos, f"unexpected character {source[pos]!r}")
        kind = m.lastgroup
        start = m.start(kind)
        toks.append(_Tok(kind, m.group(kind), start))
        pos = m.end()
    toks.append(_Tok("eof", "", n))
    return toks


class _Parser:
    def __init__(self, source: str, dims: tuple[int, int], state_name: str = "x"):
        self.toks = _tokenize(source)
        self.i = 0
        self.m, self.k = dims
        self.state_name = state_name

    @property
    def cur(self) -> _Tok:
        return self.toks[self.i]

    def _advance(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def _expect(self, text: str) -> _Tok:
        tok = self.cur
        if tok.kind != "op" or tok.text != text:
            found = "end of input" if tok.kind == "eof" else repr(tok.text)
            raise DslSyntaxError(tok.pos, f"expected {text!r}, found {found}")
        return self._advance()

    def parse(self) -> Node:
        node = self.expr()
        if self.cur.kind != "eof":
            raise DslSyntaxError(self.cur.pos, f"unexpected token {self.cur.text!r}")
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.cur.kind == "op" and self.cur.text in "+-":
            op = self._advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.cur.kind == "op" and self.cur.text in "*/":
            op = self._advance().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.cur.kind == "op" and self.cur.text == "-":
            self._advance()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Node:
        base = self.primary()
        if self.cur.kind == "op" and self.cur.text == "^":
            self._advance()
            return BinOp("^", base, self.unary())
        return base

    def primary(self) -> Node:
        tok = self.cur
        if tok.kind == "num":
            self._advance()
            return Const(float(tok.text))
        if tok.kind == "ident":
            self._advance()
            if self.cur.kind == "op" and self.cur.text == "(":
                return self._call(tok)
            return self._identifier(tok)
        if tok.kind == "op" and tok.text == "(":
            self._advance()
            node = self.expr()
            self._expect(")")
            return node
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        raise DslSyntaxError(tok.pos, f"expected an operand, found {found}")

    def _identifier(self, tok: _Tok) -> Node:
        name = tok.text
        if name == "t":
            return Var("t")
        if name == "pi":
            return Const(math.pi)
        m = re.fullmatch(r"([a-z]+)([1-9]\d*)", name)
        if m and m.group(1) in (self.state_name, "u"):
            kind = "x" if m.group(1) == self.state_name else "u"
            idx = int(m.group(2))
            limit = self.m if kind == "x" else self.k
            if idx <= limit:
                return Var(kind, idx)
        if name in ARITY:
            raise ArityError(tok.pos, f"function {name!r} used without arguments")
        raise UnknownIdentifier(tok.pos, f"unknown identifier {name!r}")

    def _call(self, tok: _Tok) -> Node:
        name = tok.text
        if name not in ARITY:
            raise UnknownIdentifier(tok.pos, f"unknown function {name!r}")
        self._expect("(")
        args = [self.expr()]
        while self.cur.kind == "op" and self.cur.text == ",":
            self._advance()
            args.append(self.expr())
        self._expect(")")
        if len(args) != ARITY[name]:
            raise ArityError(
                tok.pos, f"{name} takes {ARITY[name]} argument(s), got {len(args)}"
            )
        return Call(name, tuple(args))


def to_source(node: Node, state_name: str = "x") -> str:
    """Print an AST so that ``parse`` reproduces it exactly."""
    if isinstance(node, Const):
        return repr(float(node.value))
    if isinstance(node, Var):
        if node.kind == "t":
            return "t"
        return f"{state_name if node.kind == 'x' else 'u'}{node.index}"
    if isinstance(node, Neg):
        return f"(-({to_source(node.arg, state_name)}))"
    if isinstance(node, BinOp):
        return f"({to_source(node.left, state_name)} {node.op} {to_source(node.right, state_name)})"
    if isinstance(node, Call):
        return f"{node.name}({', '.join(to_source(a, state_name) for a in node.args)})"
    raise TypeError(f"not an AST node: {node!r}")


# ---------------------------------------------------------------------------
# Dual numbers


class Dual:
    """Value plus a vector of partial derivatives."""

    __slots__ = ("value", "partials")

    def __init__(self, value: float, partials: np.ndarray):
        self.value = value
        self.partials = partials

    def __repr__(self) -> str:
        return f"Dual({self.value!r}, {self.partials!r})"


class _Flag:
    __slots__ = ("nonsmooth",)

    def __init__(self):
        self.nonsmooth = False


def _check(v: float) -> float:
    if not math.isfinite(v):
        raise NonFiniteValue(f"non-finite intermediate value {v!r}")
    return v


class _FloatOps:
    """Plain IEEE-754 evaluation with domain checks."""

    @staticmethod
    def const(c, _m):
        return c

    @staticmethod
    def add(a, b):
        return _check(a + b)

    @staticmethod
    def sub(a, b):
        return _check(a - b)

    @staticmethod
    def mul(a, b):
        return _check(a * b)

    @staticmethod
    def div(a, b):
        if b == 0.0:
            raise NonFiniteValue("division by zero")
        return _check(a / b)

    @staticmethod
    def neg(a):
        return -a

    @staticmethod
    def pow(a, b):
        if a < 0.0 and b != math.floor(b):
            raise DomainError(f"negative base {a!r} with non-integer exponent {b!r}")
        if a == 0.0 and b < 0.0:
            raise NonFiniteValue("zero raised to a negative power")
        try:
            return _check(math.pow(a, b))
        except OverflowError as exc:
            raise NonFiniteValue(str(exc)) from None

    @staticmethod
    def call(name, args, flag):
        a = args[0]
        if name == "sin":
            return math.sin(a)
        if name == "cos":
            return math.cos(a)
        if name == "exp":
            try:
                return math.exp(a)
            except OverflowError as exc:
                raise NonFiniteValue(str(exc)) from None
        if name == "ln":
            if a < 0.0:
                raise DomainError(f"ln of negative value {a!r}")
            if a == 0.0:
                raise NonFiniteValue("ln(0)")
            return math.log(a)
        if name == "sqrt":
            if a < 0.0:
                raise DomainError(f"sqrt of negative value {a!r}")
            return math.sqrt(a)
        if name == "abs":
            return abs(a)
        if name == "sgn":
            return float((a > 0) - (a < 0))
        if name == "pow":
            return _FloatOps.pow(a, args[1])
        if name == "min":
            return min(a, args[1])
        if name == "max":
            return max(a, args[1])
        raise UnknownIdentifier(0, name)


class _DualOps:
    """Forward-mode propagation. Non-smooth points use right-hand partials."""

    @staticmethod
    def const(c, m):
        return Dual(c, np.zeros(m))

    @staticmethod
    def add(a, b):
        return Dual(_check(a.value + b.value), a.partials + b.partials)

    @staticmethod
    def sub(a, b):
        return Dual(_check(a.value - b.value), a.partials - b.partials)

    @staticmethod
    def mul(a, b):
        return Dual(
            _check(a.value * b.value), a.partials * b.value + b.partials * a.value
        )

    @staticmethod
    def div(a, b):
        if b.value == 0.0:
            raise NonFiniteValue("division by zero")
        v = _check(a.value / b.value)
        return Dual(v, (a.partials - v * b.partials) / b.value)

    @staticmethod
    def neg(a):
        return Dual(-a.value, -a.partials)

    @staticmethod
    def pow(a, b):
        v = _FloatOps.pow(a.value, b.value)
        parts = np.zeros_like(a.partials)
        if np.any(a.partials):
            if b.value == 0.0:
                pass
            elif a.value == 0.0 and b.value < 1.0:
                raise NonFiniteValue("infinite derivative of power at zero")
            else:
                parts = parts + b.value * _FloatOps.pow(a.value, b.value - 1.0) * a.partials
        if np.any(b.partials):
            if a.value <= 0.0:
                if a.value < 0.0:
                    raise DomainError("variable exponent with negative base")
            else:
                parts = parts + v * math.log(a.value) * b.partials
        _check_vec(parts)
        return Dual(v, parts)

    @staticmethod
    def call(name, args, flag):
        a = args[0]
        if name in ("pow", "min", "max"):
            b = args[1]
            if name == "pow":
                return _DualOps.pow(a, b)
            if a.value == b.value:
                flag.nonsmooth = True
                op = np.minimum if name == "min" else np.maximum
                return Dual(a.value, op(a.partials, b.partials))
            pick = (a.value < b.value) == (name == "min")
            return a if pick else b
        v = _FloatOps.call(name, [a.value], flag)
        if name == "sin":
            d = math.cos(a.value)
        elif name == "cos":
            d = -math.sin(a.value)
        elif name == "exp":
            d = v
        elif name == "ln":
            d = 1.0 / a.value
        elif name == "sqrt":
            if a.value == 0.0:
                if np.any(a.partials):
                    raise NonFiniteValue("infinite derivative of sqrt at zero")
                d = 0.0
            else:
                d = 0.5 / v
        elif name == "abs":
            if a.value == 0.0:
                flag.nonsmooth = True
                return Dual(0.0, np.abs(a.partials))
            d = 1.0 if a.value > 0 else -1.0
        elif name == "sgn":
            if a.value == 0.0:
                flag.nonsmooth = True
            d = 0.0
        else:  # pragma: no cover - parser rejects unknown names
            raise UnknownIdentifier(0, name)
        parts = d * a.partials
        _check_vec(parts)
        return Dual(v, parts)


def _check_vec(v: np.ndarray) -> None:
    if not np.all(np.isfinite(v)):
        raise NonFiniteValue("non-finite derivative")


def _compile(node: Node, ops) -> Callable:
    """Turn an AST into ``fn(t, x, u, m, flag)`` using the given op table."""
    if isinstance(node, Const):
        c = float(node.value)
        return lambda t, x, u, m, flag: ops.const(c, m)
    if isinstance(node, Var):
        if node.kind == "t":
            return lambda t, x, u, m, flag: t
        j = node.index - 1
        if node.kind == "x":
            return lambda t, x, u, m, flag: x[j]
        return lambda t, x, u, m, flag: u[j]
    if isinstance(node, Neg):
        f = _compile(node.arg, ops)
        neg = ops.neg
        return lambda t, x, u, m, flag: neg(f(t, x, u, m, flag))
    if isinstance(node, BinOp):
        fl = _compile(node.left, ops)
        fr = _compile(node.right, ops)
        fn = {"+": ops.add, "-": ops.sub, "*": ops.mul, "/": ops.div, "^": ops.pow}[
            node.op
        ]
        return lambda t, x, u, m, flag: fn(fl(t, x, u, m, flag), fr(t, x, u, m, flag))
    if isinstance(node, Call):
        fargs = [_compile(a, ops) for a in node.args]
        name = node.name
        call = ops.call
        return lambda t, x, u, m, flag: call(
            name, [f(t, x, u, m, flag) for f in fargs], flag
        )
    raise TypeError(f"not an AST node: {node!r}")


@dataclass(frozen=True)
class Expr:
    """A parsed expression bound to declared state/control dimensions."""

    root: Node
    dims: tuple[int, int]
    source: str = field(default="", compare=False)
    state_name: str = field(default="x", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_feval", _compile(self.root, _FloatOps))
        object.__setattr__(self, "_deval", _compile(self.root, _DualOps))

    def __call__(self, t: float, x: Sequence[float], u: Sequence[float]) -> float:
        return self._feval(float(t), x, u, 0, None)

    def value_and_grad(self, t, x, u) -> tuple[float, np.ndarray, bool]:
        m = self.dims[0]
        xd = [Dual(float(x[i]), _unit(m, i)) for i in range(m)]
        flag = _Flag()
        zero = np.zeros(m)
        t_d = Dual(float(t), zero)
        u_d = [Dual(float(v), zero) for v in u]
        res = self._deval(t_d, xd, u_d, m, flag)
        if not isinstance(res, Dual):  # pragma: no cover - all leaves are Dual
            res = Dual(float(res), zero)
        return res.value, res.partials.copy(), flag.nonsmooth

    def __str__(self) -> str:
        return to_source(self.root, self.state_name)


def _unit(m: int, i: int) -> np.ndarray:
    e = np.zeros(m)
    e[i] = 1.0
    return e


def parse(source: str, dims: tuple[int, int], state_name: str = "x") -> Expr:
    """Parse ``source`` for a problem with ``dims = (m, k)``.

    ``state_name`` renames the state variables, e.g. ``"z"`` for the
    ``z1..zn`` of a closed boundary-value system.
    """
    if not source or not source.strip():
        raise DslSyntaxError(0, "empty expression")
    root = _Parser(source, dims, state_name).parse()
    return Expr(root, tuple(dims), source, state_name)


def _unpack_env(e: Expr, env: dict):
    m, k = e.dims
    t = float(env.get("t", 0.0))
    x = [float(v) for v in np.atleast_1d(env.get("x", []))]
    u = [float(v) for v in np.atleast_1d(env.get("u", []))]
    if len(x) != m or len(u) != k:
        raise ValueError(
            f"environment has dims ({len(x)}, {len(u)}), expression expects ({m}, {k})"
        )
    return t, x, u


def evaluate(e: Expr, env: dict) -> float:
    """Evaluate at ``env = {"t": t, "x": [...], "u": [...]}``."""
    return e(*_unpack_env(e, env))


def grad_x(e: Expr, env: dict, return_flag: bool = False):
    """Gradient with respect to the state by one forward dual pass.

    At kinks of abs/min/max the right-hand partial along each coordinate is
    returned; with ``return_flag=True`` the result is ``(grad, nonsmooth)``.
    """
    _, g, flag = e.value_and_grad(*_unpack_env(e, env))
    return (g, flag) if return_flag else g
