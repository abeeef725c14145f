"""Expression language and forward-mode jets.

Expressions are parsed once into a small immutable AST and evaluated on
truncated Taylor jets (value, gradient, Hessian, third derivatives) over the
declared coordinates. Jets carry an arbitrary leading shape so a single call
can evaluate a field at a batch of points, or hold a matrix of fields.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import ArityError, DomainError, ExprSyntaxError, UnknownIdentifier

FUNCTIONS = {
    "sin": 1, "cos": 1, "tan": 1, "exp": 1, "log": 1, "sqrt": 1,
    "sinh": 1, "cosh": 1, "tanh": 1, "pow": 2,
}
CONSTANTS = {"pi": math.pi, "e": math.e}


# ---------------------------------------------------------------- AST

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class Bin:
    op: str  # one of + - * / ^
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


Node = Union[Num, Var, Neg, Bin, Call]


def num(value: float) -> Node:
    """Constant node; negative values become Neg(Num) so literals stay nonnegative."""
    value = float(value)
    if value < 0 or (value == 0 and math.copysign(1.0, value) < 0):
        return Neg(Num(-value))
    return Num(value)


def node_source(node: Node, variables: Sequence[str]) -> str:
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return variables[node.index]
    if isinstance(node, Neg):
        return f"(-{node_source(node.arg, variables)})"
    if isinstance(node, Bin):
        return f"({node_source(node.left, variables)} {node.op} {node_source(node.right, variables)})"
    args = ", ".join(node_source(a, variables) for a in node.args)
    return f"{node.name}({args})"


@dataclass(frozen=True)
class Expression:
    ast: Node
    variables: tuple
    source: str

    def __str__(self) -> str:
        return self.source

    def to_source(self) -> str:
        return node_source(self.ast, self.variables)

    @property
    def dim(self) -> int:
        return len(self.variables)


# ---------------------------------------------------------------- parsing

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


@dataclass
class _Tok:
    kind: str  # num, ident, op, end
    text: str
    pos: int


def _tokenize(source: str, params: Mapping[str, object], offset: int = 0, depth: int = 0) -> list[_Tok]:
    toks: list[_Tok] = []
    i = 0
    n = len(source)
    while i < n:
        if source[i].isspace():
            i += 1
            continue
        m = _TOKEN_RE.match(source, i)
        if m is None or m.end() == i:
            raise ExprSyntaxError(offset + i, "a number, identifier, operator or parenthesis", source)
        pos = offset + m.start(m.lastgroup)
        text = m.group(m.lastgroup)
        kind = m.lastgroup
        if kind == "ident" and text in params:
            toks.extend(_param_tokens(text, params[text], pos, params, depth))
        else:
            toks.append(_Tok(kind, text, pos))
        i = m.end()
    return toks


def _param_tokens(name: str, value, pos: int, params, depth: int) -> list[_Tok]:
    if isinstance(value, str):
        if depth > 8:
            raise ExprSyntaxError(pos, f"non-recursive definition of parameter {name!r}")
        inner = _tokenize(value, params, 0, depth + 1)
        for t in inner:
            t.pos = pos
        return [_Tok("op", "(", pos), *inner, _Tok("op", ")", pos)]
    v = float(value)
    if not math.isfinite(v):
        raise ExprSyntaxError(pos, f"a finite value for parameter {name!r}")
    if v < 0:
        return [_Tok("op", "(", pos), _Tok("op", "-", pos), _Tok("num", repr(-v), pos), _Tok("op", ")", pos)]
    return [_Tok("num", repr(v), pos)]


class _Parser:
    def __init__(self, toks: list[_Tok], variables: Sequence[str], source: str):
        self.toks = toks + [_Tok("end", "", len(source))]
        self.i = 0
        self.varmap = {name: k for k, name in enumerate(variables)}
        self.source = source

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> None:
        t = self.peek()
        if t.kind != "op" or t.text != text:
            raise ExprSyntaxError(t.pos, repr(text), self.source)
        self.i += 1

    def expr(self) -> Node:
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.take().text
            node = Bin(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.peek().kind == "op" and self.peek().text in "*/":
            op = self.take().text
            node = Bin(op, node, self.factor())
        return node

    def factor(self) -> Node:
        # unary minus applies to the whole power: -x^2 == -(x^2)
        t = self.peek()
        if t.kind == "op" and t.text == "-":
            self.take()
            return Neg(self.factor())
        base = self.atom()
        if self.peek().kind == "op" and self.peek().text == "^":
            self.take()
            return Bin("^", base, self.factor())
        return base

    def atom(self) -> Node:
        t = self.take()
        if t.kind == "num":
            return Num(float(t.text))
        if t.kind == "ident":
            nxt = self.peek()
            if nxt.kind == "op" and nxt.text == "(":
                if t.text not in FUNCTIONS:
                    raise UnknownIdentifier(t.text, t.pos)
                self.take()
                args = [self.expr()]
                while self.peek().kind == "op" and self.peek().text == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != FUNCTIONS[t.text]:
                    raise ArityError(t.text, len(args), FUNCTIONS[t.text])
                return Call(t.text, tuple(args))
            if t.text in self.varmap:
                return Var(self.varmap[t.text])
            if t.text in CONSTANTS:
                return Num(CONSTANTS[t.text])
            if t.text in FUNCTIONS:
                raise ExprSyntaxError(nxt.pos, "'(' after function name", self.source)
            raise UnknownIdentifier(t.text, t.pos)
        if t.kind == "op" and t.text == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExprSyntaxError(t.pos, "a number, identifier, '-' or '('", self.source)


def parse(source: str, variables: Sequence[str], params: Mapping[str, object] | None = None) -> Expression:
    """Parse `source` over the ordered coordinate names `variables`.

    Named `params` are substituted at the token level before parsing: numbers
    become literals, strings are spliced in as parenthesized subexpressions.
    """
    if not isinstance(source, str) or not source.strip():
        raise ExprSyntaxError(0, "a nonempty expression", str(source))
    variables = tuple(variables)
    if not variables or len(set(variables)) != len(variables):
        raise ValueError("variables must be a nonempty list of distinct names")
    toks = _tokenize(source, params or {})
    p = _Parser(toks, variables, source)
    node = p.expr()
    if p.peek().kind != "end":
        raise ExprSyntaxError(p.peek().pos, "an operator or end of input", source)
    return Expression(node, variables, source)


def from_node(node: Node, variables: Sequence[str]) -> Expression:
    variables = tuple(variables)
    return Expression(node, variables, node_source(node, variables))


def substitute(e: Expression, replacements: Sequence[Node], variables: Sequence[str]) -> Expression:
    """Replace every Var(i) by replacements[i], giving an expression over `variables`."""

    def go(n: Node) -> Node:
        if isinstance(n, Var):
            return replacements[n.index]
        if isinstance(n, Neg):
            return Neg(go(n.arg))
        if isinstance(n, Bin):
            return Bin(n.op, go(n.left), go(n.right))
        if isinstance(n, Call):
            return Call(n.name, tuple(go(a) for a in n.args))
        return n

    return from_node(go(e.ast), variables)


def linear_combination(coeffs: Sequence[float], nodes: Sequence[Node]) -> Node:
    """Sum of c*node over nonzero coefficients, as an AST (0 if all vanish)."""
    out: Node | None = None
    for c, n in zip(coeffs, nodes):
        if c == 0.0:
            continue
        term = n if c == 1.0 else Bin("*", num(c), n)
        out = term if out is None else Bin("+", out, term)
    return out if out is not None else Num(0.0)


def _add(a: Node, b: Node) -> Node:
    if a == Num(0.0):
        return b
    if b == Num(0.0):
        return a
    return Bin("+", a, b)


def _sub(a: Node, b: Node) -> Node:
    if b == Num(0.0):
        return a
    if a == Num(0.0):
        return Neg(b)
    return Bin("-", a, b)


def _mul(a: Node, b: Node) -> Node:
    if a == Num(0.0) or b == Num(0.0):
        return Num(0.0)
    if a == Num(1.0):
        return b
    if b == Num(1.0):
        return a
    return Bin("*", a, b)


def _div(a: Node, b: Node) -> Node:
    if a == Num(0.0):
        return Num(0.0)
    return Bin("/", a, b)


def differentiate(node: Node, index: int) -> Node:
    """Symbolic partial derivative of an AST with respect to Var(index).

    Only zero/one pruning is done; used to build derived fields such as
    drifts from potentials and Lie brackets, never on the jet path.
    """
    d = lambda n: differentiate(n, index)  # noqa: E731
    if isinstance(node, Num):
        return Num(0.0)
    if isinstance(node, Var):
        return Num(1.0 if node.index == index else 0.0)
    if isinstance(node, Neg):
        inner = d(node.arg)
        return Num(0.0) if inner == Num(0.0) else Neg(inner)
    if isinstance(node, Bin):
        a, b = node.left, node.right
        if node.op == "+":
            return _add(d(a), d(b))
        if node.op == "-":
            return _sub(d(a), d(b))
        if node.op == "*":
            return _add(_mul(d(a), b), _mul(a, d(b)))
        if node.op == "/":
            return _sub(_div(d(a), b), _div(_mul(a, d(b)), Bin("^", b, Num(2.0))))
        return _power_derivative(a, b, index)
    u = node.args[0]
    du = d(u)
    if node.name == "pow":
        return _power_derivative(node.args[0], node.args[1], index)
    if du == Num(0.0):
        return Num(0.0)
    outer = {
        "sin": lambda: Call("cos", (u,)),
        "cos": lambda: Neg(Call("sin", (u,))),
        "tan": lambda: Bin("+", Num(1.0), Bin("^", Call("tan", (u,)), Num(2.0))),
        "exp": lambda: Call("exp", (u,)),
        "log": lambda: Bin("/", Num(1.0), u),
        "sqrt": lambda: Bin("/", Num(0.5), Call("sqrt", (u,))),
        "sinh": lambda: Call("cosh", (u,)),
        "cosh": lambda: Call("sinh", (u,)),
        "tanh": lambda: Bin("-", Num(1.0), Bin("^", Call("tanh", (u,)), Num(2.0))),
    }[node.name]()
    return _mul(outer, du)


def _power_derivative(a: Node, b: Node, index: int) -> Node:
    n = _literal_integer(b)
    da = differentiate(a, index)
    if n is not None:
        if n == 0 or da == Num(0.0):
            return Num(0.0)
        return _mul(_mul(num(n), Bin("^", a, num(n - 1))), da)
    db = differentiate(b, index)
    # a^b (b' log a + b a'/a)
    inner = _add(_mul(db, Call("log", (a,))), _div(_mul(b, da), a))
    return _mul(Bin("^", a, b), inner)


# ---------------------------------------------------------------- jets

@lru_cache(maxsize=None)
def _canonical(dim: int, k: int) -> np.ndarray:
    """Flat index of the sorted multi-index for every flat index of a dim^k tensor."""
    grids = np.indices((dim,) * k).reshape(k, -1)
    srt = np.sort(grids, axis=0)
    flat = np.zeros(srt.shape[1], dtype=np.intp)
    for row in srt:
        flat = flat * dim + row
    return flat


def _symmetrize(arr: np.ndarray, k: int) -> np.ndarray:
    """Copy the canonical entry into every permutation slot (bitwise symmetry)."""
    dim = arr.shape[-1]
    lead = arr.shape[:-k]
    flat = arr.reshape(lead + (dim**k,))
    return flat[..., _canonical(dim, k)].reshape(arr.shape)


def _outer(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return u[..., :, None] * v[..., None, :]


class Jet:
    """Truncated Taylor jet of a (possibly array-valued) field.

    value has shape S; d1, d2, d3 have shapes S+(D,), S+(D,D), S+(D,D,D) with
    the derivative axes trailing. Missing orders are None.
    """

    __slots__ = ("value", "d1", "d2", "d3")

    def __init__(self, value, d1=None, d2=None, d3=None):
        self.value = np.asarray(value, dtype=float)
        self.d1 = d1
        self.d2 = d2 if d1 is not None else None
        self.d3 = d3 if self.d2 is not None else None

    @property
    def order(self) -> int:
        if self.d1 is None:
            return 0
        if self.d2 is None:
            return 1
        if self.d3 is None:
            return 2
        return 3

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def parts(self) -> list:
        return [p for p in (self.value, self.d1, self.d2, self.d3) if p is not None]

    def truncate(self, order: int) -> "Jet":
        p = self.parts()[: order + 1] + [None] * 3
        return Jet(p[0], p[1], p[2], p[3])

    @staticmethod
    def constant(c, shape: tuple, dim: int, order: int) -> "Jet":
        shape = tuple(shape)
        parts = [np.full(shape, float(c))]
        for k in range(1, order + 1):
            parts.append(np.zeros(shape + (dim,) * k))
        parts += [None] * (4 - len(parts))
        return Jet(*parts)

    # -- arithmetic
    def __neg__(self) -> "Jet":
        return Jet(*[-p for p in self.parts()] + [None] * (4 - len(self.parts())))

    def __add__(self, other) -> "Jet":
        if not isinstance(other, Jet):
            return Jet(self.value + other, self.d1, self.d2, self.d3)
        m = min(self.order, other.order)
        ps = [a + b for a, b in zip(self.parts()[: m + 1], other.parts()[: m + 1])]
        return Jet(*ps + [None] * (4 - len(ps)))

    __radd__ = __add__

    def __sub__(self, other) -> "Jet":
        return self + (-other)

    def __rsub__(self, other) -> "Jet":
        return (-self) + other

    def __mul__(self, other) -> "Jet":
        if not isinstance(other, Jet):
            c = float(other)
            return Jet(*[c * p for p in self.parts()] + [None] * (4 - len(self.parts())))
        return jet_mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Jet":
        if not isinstance(other, Jet):
            return self * (1.0 / float(other))
        return jet_mul(self, reciprocal(other))

    # -- shape manipulation over the leading (non-derivative) axes
    def _map(self, fn) -> "Jet":
        ps = [fn(p, k) for k, p in enumerate(self.parts())]
        return Jet(*ps + [None] * (4 - len(ps)))

    def sum(self, axis: int) -> "Jet":
        return self._map(lambda p, k: p.sum(axis=axis))

    def take(self, index, axis: int) -> "Jet":
        return self._map(lambda p, k: np.take(p, index, axis=axis))

    def expand(self, axis: int) -> "Jet":
        return self._map(lambda p, k: np.expand_dims(p, axis))

    def transpose(self, perm: Sequence[int]) -> "Jet":
        ns = len(perm)
        return self._map(lambda p, k: np.transpose(p, tuple(perm) + tuple(range(ns, ns + k))))

    def grad(self) -> "Jet":
        """Jet of the gradient field: leading shape gains a trailing D axis, order drops by one."""
        if self.d1 is None:
            raise ValueError("gradient of an order-0 jet")
        return Jet(self.d1, self.d2, self.d3)


def jet_mul(f: Jet, g: Jet) -> Jet:
    m = min(f.order, g.order)
    f0, g0 = f.value, g.value
    v = f0 * g0
    if m == 0:
        return Jet(v)
    f1, g1 = f.d1, g.d1
    d1 = f0[..., None] * g1 + f1 * g0[..., None]
    if m == 1:
        return Jet(v, d1)
    f2, g2 = f.d2, g.d2
    d2 = f0[..., None, None] * g2 + _outer(f1, g1) + _outer(g1, f1) + f2 * g0[..., None, None]
    if m == 2:
        return Jet(v, d1, d2)
    # t_ijk = f_i g_jk + g_i f_jk is symmetric in (j,k); three rotations cover all six terms
    t = f1[..., :, None, None] * g2[..., None, :, :] + g1[..., :, None, None] * f2[..., None, :, :]
    d3 = (
        f0[..., None, None, None] * g.d3
        + f.d3 * g0[..., None, None, None]
        + t
        + np.swapaxes(t, -3, -2)
        + np.moveaxis(t, -3, -1)
    )
    return Jet(v, d1, d2, _symmetrize(d3, 3))


def chain(u: Jet, p0, p1, p2, p3) -> Jet:
    """phi(u) given phi and its first three derivatives evaluated at u.value."""
    m = u.order
    if m == 0:
        return Jet(p0)
    u1 = u.d1
    d1 = p1[..., None] * u1
    if m == 1:
        return Jet(p0, d1)
    u2 = u.d2
    uu = _outer(u1, u1)
    d2 = p2[..., None, None] * uu + p1[..., None, None] * u2
    if m == 2:
        return Jet(p0, d1, d2)
    t = u2[..., :, :, None] * u1[..., None, None, :]
    d3 = (
        p3[..., None, None, None] * (uu[..., :, :, None] * u1[..., None, None, :])
        + p2[..., None, None, None] * (t + np.swapaxes(t, -3, -1) + np.swapaxes(t, -2, -1))
        + p1[..., None, None, None] * u.d3
    )
    return Jet(p0, d1, d2, _symmetrize(d3, 3))


def reciprocal(u: Jet) -> Jet:
    x = u.value
    if np.any(x == 0):
        raise DomainError("division by zero")
    r = 1.0 / x
    return chain(u, r, -r * r, 2 * r**3, -6 * r**4)


# ---------------------------------------------------------------- evaluation

def _literal_integer(node: Node) -> int | None:
    sign = 1
    if isinstance(node, Neg):
        sign, node = -1, node.arg
    if isinstance(node, Num) and float(node.value).is_integer() and abs(node.value) < 2**31:
        return sign * int(node.value)
    return None


def _ipow(x: np.ndarray, k: int) -> np.ndarray:
    return x**k if k >= 0 else 1.0 / x ** (-k)


def _int_power(u: Jet, n: int) -> Jet:
    x = u.value
    if n < 0 and np.any(x == 0):
        raise DomainError("zero raised to a negative power")
    coeffs = []
    c = 1.0
    for j in range(4):
        coeffs.append(np.zeros_like(x) if c == 0 else c * _ipow(x, n - j))
        c *= n - j
    return chain(u, *coeffs)


def _unary(name: str, u: Jet) -> Jet:
    x = u.value
    if name == "sin":
        s, c = np.sin(x), np.cos(x)
        return chain(u, s, c, -s, -c)
    if name == "cos":
        s, c = np.sin(x), np.cos(x)
        return chain(u, c, -s, -c, s)
    if name == "tan":
        t = np.tan(x)
        s = 1 + t * t
        return chain(u, t, s, 2 * t * s, 2 * s * (1 + 3 * t * t))
    if name == "exp":
        v = np.exp(x)
        return chain(u, v, v, v, v)
    if name == "log":
        if np.any(x <= 0):
            raise DomainError("log of a nonpositive value")
        r = 1.0 / x
        return chain(u, np.log(x), r, -r * r, 2 * r**3)
    if name == "sqrt":
        if np.any(x < 0) or (u.order > 0 and np.any(x == 0)):
            raise DomainError("sqrt of a negative value (or derivative at 0)")
        s = np.sqrt(x)
        if u.order == 0:
            return Jet(s)
        r = 1.0 / x
        return chain(u, s, 0.5 * s * r, -0.25 * s * r * r, 0.375 * s * r**3)
    if name == "sinh":
        sh, ch = np.sinh(x), np.cosh(x)
        return chain(u, sh, ch, sh, ch)
    if name == "cosh":
        sh, ch = np.sinh(x), np.cosh(x)
        return chain(u, ch, sh, ch, sh)
    if name == "tanh":
        t = np.tanh(x)
        s = 1 - t * t
        return chain(u, t, s, -2 * t * s, s * (6 * t * t - 2))
    raise UnknownIdentifier(name)


def _power(base: Jet, exponent_node: Node, exponent: Jet) -> Jet:
    n = _literal_integer(exponent_node)
    if n is not None:
        return _int_power(base, n)
    if np.any(base.value <= 0):
        raise DomainError("non-integer power of a nonpositive base")
    return _unary("exp", jet_mul(exponent, _unary("log", base)))


class _Evaluator:
    def __init__(self, e: Expression, point: np.ndarray, order: int):
        self.e = e
        self.point = point
        self.order = order
        self.batch = point.shape[:-1]
        self.dim = point.shape[-1]

    def const(self, c: float) -> Jet:
        return Jet.constant(c, self.batch, self.dim, self.order)

    def fail(self, err: DomainError, node: Node, bad: np.ndarray | None) -> DomainError:
        pt = self.point
        if bad is not None and pt.ndim > 1:
            idx = np.argwhere(bad)
            pt = pt[tuple(idx[0])] if len(idx) else pt.reshape(-1, self.dim)[0]
        elif pt.ndim > 1:
            pt = pt.reshape(-1, self.dim)[0]
        return DomainError(str(err.args[0]).split(" in ")[0], node_source(node, self.e.variables), pt)

    def run(self, node: Node) -> Jet:
        if isinstance(node, Num):
            return self.const(node.value)
        if isinstance(node, Var):
            x = self.point[..., node.index]
            parts = [x.copy()]
            if self.order >= 1:
                d1 = np.zeros(self.batch + (self.dim,))
                d1[..., node.index] = 1.0
                parts.append(d1)
            for k in range(2, self.order + 1):
                parts.append(np.zeros(self.batch + (self.dim,) * k))
            return Jet(*parts + [None] * (4 - len(parts)))
        if isinstance(node, Neg):
            return -self.run(node.arg)
        if isinstance(node, Bin):
            a = self.run(node.left)
            if node.op == "^":
                b = self.run(node.right)
                return self.guard(lambda: _power(a, node.right, b), node, a.value)
            b = self.run(node.right)
            if node.op == "+":
                return a + b
            if node.op == "-":
                return a - b
            if node.op == "*":
                return jet_mul(a, b)
            return self.guard(lambda: jet_mul(a, reciprocal(b)), node, b.value == 0)
        args = [self.run(a) for a in node.args]
        if node.name == "pow":
            return self.guard(lambda: _power(args[0], node.args[1], args[1]), node, args[0].value)
        bad = None
        if node.name == "log":
            bad = args[0].value <= 0
        elif node.name == "sqrt":
            bad = args[0].value < 0
        return self.guard(lambda: _unary(node.name, args[0]), node, bad)

    def guard(self, fn, node: Node, bad):
        try:
            return fn()
        except DomainError as err:
            mask = None
            if isinstance(bad, np.ndarray) and bad.dtype == bool:
                mask = bad
            elif isinstance(bad, np.ndarray):
                mask = bad <= 0
            raise self.fail(err, node, mask) from None


def eval_jet(e: Expression, point, order: int = 0) -> Jet:
    """Value and all partial derivatives up to `order` (<= 3) of `e` at `point`.

    `point` may be a single coordinate vector of length D or an array of shape
    (..., D); the jet's leading shape then matches the batch shape.
    """
    if not 0 <= order <= 3:
        raise ValueError("order must be between 0 and 3")
    pt = np.asarray(point, dtype=float)
    if pt.ndim == 0 or pt.shape[-1] != len(e.variables):
        raise ValueError(f"point must have trailing length {len(e.variables)}")
    return _Evaluator(e, pt, order).run(e.ast)


def evaluate(e: Expression, point) -> np.ndarray:
    return eval_jet(e, point, 0).value
