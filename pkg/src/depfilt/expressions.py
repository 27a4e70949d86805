"""Expression language for the plant nonlinearities.

Vector-valued expressions over ``x1..xn``, ``u1..um`` and ``t`` with the
closed function set {sin, cos, tan, exp, ln, tanh, abs} plus arithmetic and
integer powers.  Components are separated by ';' and '#' starts a comment.

Trees are plain tuples::

    ('const', v) | ('var', kind, idx) | ('add'|'sub'|'mul'|'div', a, b)
    | ('neg', a) | ('pow', a, k) | ('fun', name, a)

Symbolic differentiation keeps everything in the same node set (plus an
internal 'sign' function for d|x|), so Jacobians can be compiled to the
same evaluation tape as the expressions themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EvaluationError, ExpressionSyntaxError

FUNCTIONS = ("sin", "cos", "tan", "exp", "ln", "tanh", "abs")
_INTERNAL_FUNCTIONS = FUNCTIONS + ("sign",)

MAX_NODES = 100_000


# ---------------------------------------------------------------------------
# tokenizer


_OPS = set("+-*/^();")


def _tokenize(source: str):
    tokens = []
    line, col = 1, 1
    i = 0
    while i < len(source):
        ch = source[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch == "#":
            while i < len(source) and source[i] != "\n":
                i += 1
            continue
        if ch.isspace():
            i += 1
            col += 1
            continue
        if ch in _OPS:
            tokens.append(("op", ch, line, col))
            i += 1
            col += 1
            continue
        if ch.isdigit() or ch == ".":
            j = i
            while j < len(source) and (source[j].isdigit() or source[j] == "."):
                j += 1
            if j < len(source) and source[j] in "eE":
                k = j + 1
                if k < len(source) and source[k] in "+-":
                    k += 1
                if k < len(source) and source[k].isdigit():
                    j = k
                    while j < len(source) and source[j].isdigit():
                        j += 1
            text = source[i:j]
            try:
                value = float(text)
            except ValueError:
                raise ExpressionSyntaxError(f"bad number literal '{text}'", line, col)
            tokens.append(("num", value, line, col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < len(source) and (source[j].isalnum() or source[j] == "_"):
                j += 1
            tokens.append(("name", source[i:j], line, col))
            col += j - i
            i = j
            continue
        raise ExpressionSyntaxError(f"unexpected character '{ch}'", line, col)
    tokens.append(("end", None, line, col))
    return tokens


# ---------------------------------------------------------------------------
# tree constructors with light simplification


def _const(v):
    return ("const", float(v))


def _is_const(node, value=None):
    if node[0] != "const":
        return False
    return value is None or node[1] == value


def _add(a, b):
    if _is_const(a) and _is_const(b):
        return _const(a[1] + b[1])
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return ("add", a, b)


def _sub(a, b):
    if _is_const(a) and _is_const(b):
        return _const(a[1] - b[1])
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _neg(b)
    return ("sub", a, b)


def _mul(a, b):
    if _is_const(a) and _is_const(b):
        return _const(a[1] * b[1])
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return _const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return ("mul", a, b)


def _div(a, b):
    if _is_const(a, 0.0):
        return _const(0.0)
    if _is_const(b, 1.0):
        return a
    return ("div", a, b)


def _neg(a):
    if _is_const(a):
        return _const(-a[1])
    if a[0] == "neg":
        return a[1]
    return ("neg", a)


def _pow(a, k: int):
    if k == 0:
        return _const(1.0)
    if k == 1:
        return a
    if _is_const(a):
        return _const(a[1] ** k)
    return ("pow", a, int(k))


# ---------------------------------------------------------------------------
# parser (precedence climbing)


class _Parser:
    def __init__(self, tokens, n, m):
        self.tokens = tokens
        self.pos = 0
        self.n = n
        self.m = m

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_op(self, op):
        kind, val, line, col = self.next()
        if kind != "op" or val != op:
            raise ExpressionSyntaxError(f"expected '{op}'", line, col)

    def parse_expression(self, min_bp=0):
        node = self.parse_prefix()
        while True:
            kind, val, line, col = self.peek()
            if kind != "op" or val not in "+-*/^":
                break
            lbp = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 40}[val]
            if lbp < min_bp:
                break
            self.next()
            if val == "^":
                node = _pow(node, self.parse_int_exponent())
            else:
                rhs = self.parse_expression(lbp + 1)
                node = {"+": _add, "-": _sub, "*": _mul, "/": _div}[val](node, rhs)
        return node

    def parse_int_exponent(self):
        kind, val, line, col = self.next()
        sign = 1
        if kind == "op" and val == "-":
            sign = -1
            kind, val, line, col = self.next()
        if kind != "num" or val != int(val):
            raise ExpressionSyntaxError("integer exponent required after '^'", line, col)
        return sign * int(val)

    def parse_prefix(self):
        kind, val, line, col = self.next()
        if kind == "num":
            return _const(val)
        if kind == "op" and val == "-":
            return _neg(self.parse_expression(30))
        if kind == "op" and val == "+":
            return self.parse_expression(30)
        if kind == "op" and val == "(":
            node = self.parse_expression(0)
            self.expect_op(")")
            return node
        if kind == "name":
            return self.parse_name(val, line, col)
        raise ExpressionSyntaxError("expected an operand", line, col)

    def parse_name(self, name, line, col):
        if name in FUNCTIONS:
            kind, val, l2, c2 = self.peek()
            if kind != "op" or val != "(":
                raise ExpressionSyntaxError(f"function '{name}' needs an argument list", l2, c2)
            self.next()
            arg = self.parse_expression(0)
            kind, val, l2, c2 = self.peek()
            if kind == "op" and val == ";":
                raise ExpressionSyntaxError(f"function '{name}' takes one argument", l2, c2)
            self.expect_op(")")
            return ("fun", name, arg)
        if name == "t":
            return ("var", "t", 0)
        if name[0] in "xu" and name[1:].isdigit():
            idx = int(name[1:])
            limit = self.n if name[0] == "x" else self.m
            if not 1 <= idx <= limit:
                raise ExpressionSyntaxError(
                    f"unknown identifier '{name}' (declared {name[0]}-dimension is {limit})",
                    line,
                    col,
                )
            return ("var", name[0], idx - 1)
        raise ExpressionSyntaxError(f"unknown identifier '{name}'", line, col)


def _count_nodes(node) -> int:
    if node[0] in ("const", "var"):
        return 1
    if node[0] in ("neg", "fun"):
        return 1 + _count_nodes(node[-1])
    if node[0] == "pow":
        return 1 + _count_nodes(node[1])
    return 1 + _count_nodes(node[1]) + _count_nodes(node[2])


@dataclass(frozen=True)
class ExprAst:
    """An immutable vector expression over x (dim n), u (dim m) and t."""

    components: tuple
    n: int
    m: int
    _jac_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return len(self.components)

    def jacobian_trees(self):
        """d components / d x as a (dim x n) nested tuple, cached."""
        if "jx" not in self._jac_cache:
            self._jac_cache["jx"] = tuple(
                tuple(diff_x(c, j) for j in range(self.n)) for c in self.components
            )
        return self._jac_cache["jx"]


def parse(source: str, n: int, m: int = 0) -> ExprAst:
    """Parse ';'-separated scalar expressions into a vector AST."""
    tokens = _tokenize(source)
    parser = _Parser(tokens, n, m)
    components = []
    while parser.peek()[0] != "end":
        components.append(parser.parse_expression(0))
        kind, val, line, col = parser.peek()
        if kind == "op" and val == ";":
            parser.next()
        elif kind != "end":
            raise ExpressionSyntaxError("expected ';' or end of input", line, col)
    if not components:
        components = [_const(0.0)]
    total = sum(_count_nodes(c) for c in components)
    if total > MAX_NODES:
        raise ExpressionSyntaxError(f"expression too large ({total} nodes)")
    return ExprAst(components=tuple(components), n=n, m=m)


def zero_expr(dim: int, n: int, m: int = 0) -> ExprAst:
    return ExprAst(components=tuple(_const(0.0) for _ in range(dim)), n=n, m=m)


# ---------------------------------------------------------------------------
# evaluation


def _eval_node(node, x, u, t):
    op = node[0]
    if op == "const":
        return node[1]
    if op == "var":
        if node[1] == "x":
            return x[node[2]]
        if node[1] == "u":
            return u[node[2]]
        return t
    if op == "add":
        return _eval_node(node[1], x, u, t) + _eval_node(node[2], x, u, t)
    if op == "sub":
        return _eval_node(node[1], x, u, t) - _eval_node(node[2], x, u, t)
    if op == "mul":
        return _eval_node(node[1], x, u, t) * _eval_node(node[2], x, u, t)
    if op == "div":
        denom = _eval_node(node[2], x, u, t)
        if denom == 0.0:
            raise EvaluationError("division by zero")
        return _eval_node(node[1], x, u, t) / denom
    if op == "neg":
        return -_eval_node(node[1], x, u, t)
    if op == "pow":
        base = _eval_node(node[1], x, u, t)
        if node[2] < 0 and base == 0.0:
            raise EvaluationError("zero raised to a negative power")
        return base ** node[2]
    name, arg = node[1], node[2]
    v = _eval_node(arg, x, u, t)
    if name == "sin":
        return math.sin(v)
    if name == "cos":
        return math.cos(v)
    if name == "tan":
        return math.tan(v)
    if name == "exp":
        return math.exp(v)
    if name == "ln":
        if v <= 0.0:
            raise EvaluationError("ln of a nonpositive value")
        return math.log(v)
    if name == "tanh":
        return math.tanh(v)
    if name == "abs":
        return abs(v)
    if name == "sign":
        return math.copysign(1.0, v) if v != 0.0 else 0.0
    raise EvaluationError(f"unknown function '{name}'")


def eval_expr(ast: ExprAst, x, u=None, t: float = 0.0) -> np.ndarray:
    """Evaluate all components at a point; raises on domain errors."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.zeros(ast.m) if u is None else np.asarray(u, dtype=float).ravel()
    if x.size != ast.n or u.size != ast.m:
        raise DimensionError(
            f"expected x of dim {ast.n} and u of dim {ast.m}, got {x.size} and {u.size}"
        )
    try:
        out = np.array([_eval_node(c, x, u, t) for c in ast.components])
    except OverflowError as exc:
        raise EvaluationError(str(exc)) from exc
    if not np.all(np.isfinite(out)):
        raise EvaluationError("expression evaluated to a non-finite value")
    return out


# ---------------------------------------------------------------------------
# symbolic differentiation


def diff_x(node, j: int):
    """Exact partial derivative tree with respect to x_{j+1}."""
    op = node[0]
    if op == "const":
        return _const(0.0)
    if op == "var":
        return _const(1.0 if (node[1] == "x" and node[2] == j) else 0.0)
    if op == "add":
        return _add(diff_x(node[1], j), diff_x(node[2], j))
    if op == "sub":
        return _sub(diff_x(node[1], j), diff_x(node[2], j))
    if op == "mul":
        a, b = node[1], node[2]
        return _add(_mul(diff_x(a, j), b), _mul(a, diff_x(b, j)))
    if op == "div":
        a, b = node[1], node[2]
        da, db = diff_x(a, j), diff_x(b, j)
        return _div(_sub(_mul(da, b), _mul(a, db)), _pow(b, 2))
    if op == "neg":
        return _neg(diff_x(node[1], j))
    if op == "pow":
        a, k = node[1], node[2]
        return _mul(_mul(_const(k), _pow(a, k - 1)), diff_x(a, j))
    name, arg = node[1], node[2]
    da = diff_x(arg, j)
    if _is_const(da, 0.0):
        return _const(0.0)
    if name == "sin":
        return _mul(("fun", "cos", arg), da)
    if name == "cos":
        return _neg(_mul(("fun", "sin", arg), da))
    if name == "tan":
        return _div(da, _pow(("fun", "cos", arg), 2))
    if name == "exp":
        return _mul(("fun", "exp", arg), da)
    if name == "ln":
        return _div(da, arg)
    if name == "tanh":
        return _mul(_sub(_const(1.0), _pow(("fun", "tanh", arg), 2)), da)
    if name == "abs":
        return _mul(("fun", "sign", arg), da)
    raise EvaluationError(f"cannot differentiate function '{name}'")


def jacobian_x(ast: ExprAst, x, u=None, t: float = 0.0) -> np.ndarray:
    """Evaluate the exact Jacobian d(components)/dx at a point."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.zeros(ast.m) if u is None else np.asarray(u, dtype=float).ravel()
    if x.size != ast.n or u.size != ast.m:
        raise DimensionError("jacobian point has the wrong dimension")
    trees = ast.jacobian_trees()
    J = np.empty((ast.dim, ast.n))
    for i, row in enumerate(trees):
        for j, tree in enumerate(row):
            J[i, j] = _eval_node(tree, x, u, t)
    if not np.all(np.isfinite(J)):
        raise EvaluationError("jacobian evaluated to a non-finite value")
    return J


# ---------------------------------------------------------------------------
# Lipschitz estimation


@dataclass(frozen=True)
class LipschitzEstimate:
    """Grid lower bound on the Lipschitz constant over a box."""

    gamma_hat: float
    box: tuple
    samples: int


def estimate_lipschitz(ast: ExprAst, box, grid_per_dim: int = 41) -> LipschitzEstimate:
    """Max spectral norm of the x-Jacobian over a uniform grid on ``box``.

    ``box`` is a sequence of (lo, hi) pairs, one per x variable.  The result
    is a lower bound on the true constant over the box; it converges from
    below as the grid refines.
    """
    if grid_per_dim < 2:
        raise ValueError("grid_per_dim must be >= 2")
    box = tuple((float(lo), float(hi)) for lo, hi in box)
    if len(box) != ast.n:
        raise DimensionError(f"box must have {ast.n} (lo, hi) pairs")
    if not all(np.isfinite(lo) and np.isfinite(hi) and lo <= hi for lo, hi in box):
        raise ValueError("box bounds must be finite with lo <= hi")

    axes = [np.linspace(lo, hi, grid_per_dim) for lo, hi in box]
    grids = np.meshgrid(*axes, indexing="ij") if axes else []
    if ast.n == 0:
        return LipschitzEstimate(gamma_hat=0.0, box=box, samples=0)
    pts = np.stack([g.ravel() for g in grids], axis=0)  # (n, N)
    npts = pts.shape[1]

    from ._kernels.tape import compile_tape

    jac_trees = [tree for row in ast.jacobian_trees() for tree in row]
    tape = compile_tape(jac_trees, ast.n, ast.m)
    U = np.zeros((ast.m, npts))
    vals = tape.eval_batch(pts, U, np.zeros(npts))  # (dim*n, N)
    if not np.all(np.isfinite(vals)):
        raise EvaluationError("jacobian evaluated to a non-finite value on the grid")
    jacs = vals.T.reshape(npts, ast.dim, ast.n)
    norms = np.linalg.svd(jacs, compute_uv=False)[:, 0] if ast.dim and ast.n else np.zeros(npts)
    gamma = float(norms.max()) if npts else 0.0
    return LipschitzEstimate(gamma_hat=gamma, box=box, samples=npts)
