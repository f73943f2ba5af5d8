"""
Coefficient expression language.

Coupling coefficients a(t, x) and b(t, x) are given as closed arithmetic
expressions so that a system is plain data. The grammar is

    expression := term (("+" | "-") term)*
    term       := unary (("*" | "/") unary)*
    unary      := ("-" | "+") unary | power
    power      := primary ("^" exponent)*
    exponent   := ("-" | "+") exponent | primary
    primary    := number | "t" | "x" | "pi" | func "(" expression ")" | "(" expression ")"
    func       := sin | cos | exp | log | sqrt | abs

Precedence is ``^`` > unary minus > ``*``, ``/`` > ``+``, ``-``; every binary
operator is left associative (``2^3^2`` is ``(2^3)^2``).

Example:
    >>> e = parse("sin(pi*x)^2 + t")
    >>> evaluate(e, 1.0, 0.5)
    2.0
    >>> f = compile_expr(e)          # numpy-vectorized
    >>> f(np.zeros(3), np.array([0.0, 0.5, 1.0]))
"""

import math
import re
from dataclasses import dataclass
from typing import Callable, Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from .core.exceptions import (
    ExpressionDomainError,
    ExpressionSyntaxError,
    UnknownIdentifierError,
)
from .core.logging_config import get_logger

logger = get_logger(__name__)

VARIABLES: FrozenSet[str] = frozenset({"t", "x"})
CONSTANTS: Dict[str, float] = {"pi": math.pi}
FUNCTIONS: FrozenSet[str] = frozenset({"sin", "cos", "exp", "log", "sqrt", "abs"})


# =============================================================================
# AST
# =============================================================================

class Expr:
    """Base class of expression nodes. Nodes are immutable and hashable."""

    precedence = 5

    def __call__(self, t: float, x: float) -> float:
        return evaluate(self, t, x)

    def __str__(self) -> str:
        return to_source(self)


@dataclass(frozen=True)
class Num(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class Const(Expr):
    name: str


@dataclass(frozen=True)
class Neg(Expr):
    operand: Expr
    precedence = 3


@dataclass(frozen=True)
class BinOp(Expr):
    left: Expr
    right: Expr
    symbol = "?"


@dataclass(frozen=True)
class Add(BinOp):
    symbol = "+"
    precedence = 1


@dataclass(frozen=True)
class Sub(BinOp):
    symbol = "-"
    precedence = 1


@dataclass(frozen=True)
class Mul(BinOp):
    symbol = "*"
    precedence = 2


@dataclass(frozen=True)
class Div(BinOp):
    symbol = "/"
    precedence = 2


@dataclass(frozen=True)
class Pow(BinOp):
    symbol = "^"
    precedence = 4


@dataclass(frozen=True)
class Call(Expr):
    func: str
    arg: Expr


BINARY_NODES = {"+": Add, "-": Sub, "*": Mul, "/": Div, "^": Pow}


def number(value: float) -> Expr:
    """Literal node for any real value (negative values become Neg(Num))."""
    value = float(value)
    if value < 0 or (value == 0 and math.copysign(1.0, value) < 0):
        return Neg(Num(-value))
    return Num(value)


# =============================================================================
# Tokenizer
# =============================================================================

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


@dataclass(frozen=True)
class _Token:
    kind: str  # "number", "ident", "op", "end"
    text: str
    offset: int  # byte offset into the UTF-8 source


def _tokenize(src: str) -> List[_Token]:
    tokens: List[_Token] = []
    pos = 0
    byte_pos = 0
    while True:
        match = _TOKEN_RE.match(src, pos)
        if match is None or match.end() == pos:
            rest = src[pos:]
            stripped = rest.lstrip()
            byte_pos += len(rest[: len(rest) - len(stripped)].encode("utf-8"))
            if not stripped:
                tokens.append(_Token("end", "", byte_pos))
                return tokens
            raise ExpressionSyntaxError(
                f"Unexpected character {stripped[0]!r}",
                offset=byte_pos,
                expected=("number", "identifier", "operator", "(", ")"),
            )
        kind = match.lastgroup or "end"
        start = match.start(kind)
        token_offset = byte_pos + len(src[pos:start].encode("utf-8"))
        tokens.append(_Token(kind, match.group(kind), token_offset))
        byte_pos += len(src[pos: match.end()].encode("utf-8"))
        pos = match.end()


# =============================================================================
# Parser
# =============================================================================

_PRIMARY_START = ("number", "identifier", "(")


class _Parser:
    """Recursive descent parser over the token list."""

    def __init__(self, src: str):
        self.tokens = _tokenize(src)
        self.pos = 0

    @property
    def current(self) -> _Token:
        return self.tokens[self.pos]

    def _advance(self) -> _Token:
        token = self.tokens[self.pos]
        if token.kind != "end":
            self.pos += 1
        return token

    def _at_op(self, *symbols: str) -> bool:
        return self.current.kind == "op" and self.current.text in symbols

    def _fail(self, message: str, expected) -> ExpressionSyntaxError:
        token = self.current
        found = "end of input" if token.kind == "end" else repr(token.text)
        return ExpressionSyntaxError(f"{message}, found {found}", offset=token.offset, expected=expected)

    def parse(self) -> Expr:
        node = self.expression()
        if self.current.kind != "end":
            raise self._fail("Unexpected trailing input", ("+", "-", "*", "/", "^", "end of input"))
        return node

    def expression(self) -> Expr:
        node = self.term()
        while self._at_op("+", "-"):
            symbol = self._advance().text
            node = BINARY_NODES[symbol](node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self._at_op("*", "/"):
            symbol = self._advance().text
            node = BINARY_NODES[symbol](node, self.unary())
        return node

    def unary(self) -> Expr:
        if self._at_op("-"):
            self._advance()
            return Neg(self.unary())
        if self._at_op("+"):
            self._advance()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        node = self.primary()
        while self._at_op("^"):
            self._advance()
            node = Pow(node, self.exponent())
        return node

    def exponent(self) -> Expr:
        if self._at_op("-"):
            self._advance()
            return Neg(self.exponent())
        if self._at_op("+"):
            self._advance()
            return self.exponent()
        return self.primary()

    def primary(self) -> Expr:
        token = self.current
        if token.kind == "number":
            self._advance()
            return Num(float(token.text))
        if token.kind == "ident":
            self._advance()
            name = token.text
            if name in VARIABLES:
                return Var(name)
            if name in CONSTANTS:
                return Const(name)
            if name in FUNCTIONS:
                if not self._at_op("("):
                    raise self._fail(f"Function '{name}' needs an argument list", ("(",))
                self._advance()
                arg = self.expression()
                if not self._at_op(")"):
                    raise self._fail("Unclosed function call", (")",))
                self._advance()
                return Call(name, arg)
            raise UnknownIdentifierError(name, token.offset)
        if self._at_op("("):
            self._advance()
            node = self.expression()
            if not self._at_op(")"):
                raise self._fail("Unbalanced parenthesis", (")",))
            self._advance()
            return node
        raise self._fail("Expected an operand", _PRIMARY_START + ("-",))


def parse(src: str) -> Expr:
    """
    Parse an expression string.

    Raises:
        ExpressionSyntaxError: with the byte offset and the expected-token set
        UnknownIdentifierError: naming the identifier
    """
    if isinstance(src, bytes):
        src = src.decode("utf-8")
    return _Parser(src).parse()


# =============================================================================
# Printing
# =============================================================================

def _format_number(value: float) -> str:
    text = repr(float(value))
    return text


def to_source(e: Expr) -> str:
    """Pretty-print with the minimal parenthesization that re-parses to the same tree."""
    if isinstance(e, Num):
        return _format_number(e.value)
    if isinstance(e, (Var, Const)):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({to_source(e.arg)})"
    if isinstance(e, Neg):
        inner = to_source(e.operand)
        if e.operand.precedence < Neg.precedence:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, BinOp):
        left = to_source(e.left)
        right = to_source(e.right)
        if e.left.precedence < e.precedence:
            left = f"({left})"
        if e.right.precedence <= e.precedence:
            right = f"({right})"
        if e.precedence == 1:
            return f"{left} {e.symbol} {right}"
        return f"{left}{e.symbol}{right}"
    raise TypeError(f"Not an expression node: {e!r}")


# =============================================================================
# Tree utilities
# =============================================================================

def substitute(e: Expr, name: str, replacement: Expr) -> Expr:
    """Replace every occurrence of variable ``name`` by ``replacement``."""
    if isinstance(e, Var):
        return replacement if e.name == name else e
    if isinstance(e, (Num, Const)):
        return e
    if isinstance(e, Neg):
        return Neg(substitute(e.operand, name, replacement))
    if isinstance(e, Call):
        return Call(e.func, substitute(e.arg, name, replacement))
    if isinstance(e, BinOp):
        return type(e)(substitute(e.left, name, replacement), substitute(e.right, name, replacement))
    raise TypeError(f"Not an expression node: {e!r}")


def variables(e: Expr) -> FrozenSet[str]:
    """Variables occurring in the expression."""
    if isinstance(e, Var):
        return frozenset({e.name})
    if isinstance(e, (Num, Const)):
        return frozenset()
    if isinstance(e, Neg):
        return variables(e.operand)
    if isinstance(e, Call):
        return variables(e.arg)
    if isinstance(e, BinOp):
        return variables(e.left) | variables(e.right)
    raise TypeError(f"Not an expression node: {e!r}")


def depends_on(e: Expr, name: str) -> bool:
    return name in variables(e)


# =============================================================================
# Scalar evaluation
# =============================================================================

_SCALAR_FUNCS: Dict[str, Callable[[float], float]] = {
    "sin": math.sin,
    "cos": math.cos,
    "exp": math.exp,
    "log": math.log,
    "sqrt": math.sqrt,
    "abs": abs,
}


def evaluate(e: Expr, t: float, x: float) -> float:
    """
    Value of the expression at (t, x).

    Raises:
        ExpressionDomainError: naming the offending subexpression
    """
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        return float(t) if e.name == "t" else float(x)
    if isinstance(e, Const):
        return CONSTANTS[e.name]
    if isinstance(e, Neg):
        return -evaluate(e.operand, t, x)
    try:
        if isinstance(e, Call):
            arg = evaluate(e.arg, t, x)
            if e.func == "log" and arg <= 0:
                raise ValueError("log of non-positive value")
            if e.func == "sqrt" and arg < 0:
                raise ValueError("sqrt of negative value")
            value = _SCALAR_FUNCS[e.func](arg)
        elif isinstance(e, BinOp):
            left = evaluate(e.left, t, x)
            right = evaluate(e.right, t, x)
            if isinstance(e, Add):
                value = left + right
            elif isinstance(e, Sub):
                value = left - right
            elif isinstance(e, Mul):
                value = left * right
            elif isinstance(e, Div):
                if right == 0:
                    raise ZeroDivisionError("division by zero")
                value = left / right
            else:
                value = math.pow(left, right)
        else:
            raise TypeError(f"Not an expression node: {e!r}")
    except (ValueError, ZeroDivisionError, OverflowError) as err:
        raise ExpressionDomainError(to_source(e), t=t, x=x, original_error=err) from err
    if not math.isfinite(value):
        raise ExpressionDomainError(to_source(e), t=t, x=x)
    return value


# =============================================================================
# Vectorized evaluation
# =============================================================================

_ARRAY_FUNCS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
}

_ARRAY_OPS = {
    Add: np.add,
    Sub: np.subtract,
    Mul: np.multiply,
    Div: np.divide,
    Pow: np.power,
}

# nodes whose result is checked for finiteness so errors name the culprit
_CHECKED = (Div, Pow, Call)


def _build(e: Expr) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    if isinstance(e, Num):
        value = e.value
        return lambda t, x: value
    if isinstance(e, Var):
        return (lambda t, x: t) if e.name == "t" else (lambda t, x: x)
    if isinstance(e, Const):
        value = CONSTANTS[e.name]
        return lambda t, x: value
    if isinstance(e, Neg):
        inner = _build(e.operand)
        return lambda t, x: np.negative(inner(t, x))

    source = to_source(e)
    if isinstance(e, Call):
        func = _ARRAY_FUNCS[e.func]
        arg = _build(e.arg)
        if e.func == "log":
            def node(t, x):
                a = np.asarray(arg(t, x), dtype=float)
                if np.any(a <= 0):
                    raise ExpressionDomainError(source)
                return func(a)
            return node
        if e.func == "sqrt":
            def node(t, x):
                a = np.asarray(arg(t, x), dtype=float)
                if np.any(a < 0):
                    raise ExpressionDomainError(source)
                return func(a)
            return node
        compute = lambda t, x: func(arg(t, x))
    else:
        op = _ARRAY_OPS[type(e)]
        left = _build(e.left)
        right = _build(e.right)
        if isinstance(e, Div):
            def compute(t, x):
                r = np.asarray(right(t, x), dtype=float)
                if np.any(r == 0):
                    raise ExpressionDomainError(source)
                return op(left(t, x), r)
        else:
            compute = lambda t, x: op(left(t, x), right(t, x))

    if not isinstance(e, _CHECKED):
        return compute

    def checked(t, x):
        with np.errstate(all="ignore"):
            value = compute(t, x)
        if not np.all(np.isfinite(value)):
            raise ExpressionDomainError(source)
        return value

    return checked


def compile_expr(e: Expr) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """
    Compile to a numpy function ``f(t, x)`` broadcasting its arguments.

    The result always has the broadcast shape of ``t`` and ``x`` and dtype float.
    """
    inner = _build(e)

    def compiled(t, x) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            value = inner(t, x)
        out = np.broadcast_to(np.asarray(value, dtype=float), np.broadcast(t, x).shape).copy()
        if not np.all(np.isfinite(out)):
            raise ExpressionDomainError(to_source(e))
        return out

    return compiled


def sample_smoothness_warning(
    e: Expr,
    t_range: Tuple[float, float],
    samples: int = 65,
    jump_factor: float = 1e3,
    name: Optional[str] = None,
) -> bool:
    """
    Heuristic check for jumps on a sample grid of [t_range] x [0, 1].

    The criteria assume C^1 coefficients; the language cannot enforce it. Returns
    True (and logs a warning) when a first difference is ``jump_factor`` times
    larger than the median difference scale.
    """
    f = compile_expr(e)
    ts = np.linspace(t_range[0], t_range[1], samples)
    xs = np.linspace(0.0, 1.0, samples)
    values = f(ts[:, None], xs[None, :])
    diffs = np.concatenate([np.abs(np.diff(values, axis=0)).ravel(), np.abs(np.diff(values, axis=1)).ravel()])
    scale = float(np.median(diffs)) + 1e-12 * (1.0 + float(np.max(np.abs(values))))
    suspicious = bool(np.max(diffs) > jump_factor * scale)
    if suspicious:
        logger.warning(
            f"Coefficient {name or to_source(e)} looks non-smooth on the sample grid",
            extra_fields={"max_jump": float(np.max(diffs)), "typical": scale},
        )
    return suspicious
