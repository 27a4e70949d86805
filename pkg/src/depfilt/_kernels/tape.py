"""Flat evaluation tapes for expression trees.

A tape is a straight-line program over a slot array: input slots hold
``x``, ``u`` and ``t``, every op appends one result slot.  Identical
subtrees are emitted once (tuples hash structurally), which keeps Jacobian
tapes compact.  The same arrays drive three evaluators: the vectorized
numpy one below, the scalar Python one used by the fallback stepper, and
the C loop in the compiled stepper.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

OP_LOADC = 0
OP_ADD = 1
OP_SUB = 2
OP_MUL = 3
OP_DIV = 4
OP_NEG = 5
OP_SIN = 6
OP_COS = 7
OP_TAN = 8
OP_EXP = 9
OP_LN = 10
OP_TANH = 11
OP_ABS = 12
OP_SIGN = 13
OP_POWI = 14

_FUN_OPS = {
    "sin": OP_SIN,
    "cos": OP_COS,
    "tan": OP_TAN,
    "exp": OP_EXP,
    "ln": OP_LN,
    "tanh": OP_TANH,
    "abs": OP_ABS,
    "sign": OP_SIGN,
}

_BIN_OPS = {"add": OP_ADD, "sub": OP_SUB, "mul": OP_MUL, "div": OP_DIV}


@dataclass(frozen=True)
class Tape:
    n_x: int
    n_u: int
    n_slots: int
    code: np.ndarray  # (n_ops,) int32
    arg1: np.ndarray  # (n_ops,) int32: slot index, or const index for LOADC
    arg2: np.ndarray  # (n_ops,) int32: slot index, or exponent for POWI
    consts: np.ndarray  # (n_consts,) float64
    outputs: np.ndarray  # (n_out,) int32 slot indices

    @property
    def n_out(self) -> int:
        return len(self.outputs)

    @property
    def n_inputs(self) -> int:
        return self.n_x + self.n_u + 1

    def eval_batch(self, X, U, T) -> np.ndarray:
        """Evaluate over N points at once: X (n_x, N), U (n_u, N), T (N,)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        T = np.asarray(T, dtype=float).ravel()
        npts = T.size
        work = np.empty((self.n_slots, npts))
        work[: self.n_x] = X
        work[self.n_x : self.n_x + self.n_u] = U
        work[self.n_x + self.n_u] = T
        base = self.n_inputs
        with np.errstate(all="ignore"):
            for i in range(len(self.code)):
                op = self.code[i]
                a, b = self.arg1[i], self.arg2[i]
                dst = base + i
                if op == OP_LOADC:
                    work[dst] = self.consts[a]
                elif op == OP_ADD:
                    np.add(work[a], work[b], out=work[dst])
                elif op == OP_SUB:
                    np.subtract(work[a], work[b], out=work[dst])
                elif op == OP_MUL:
                    np.multiply(work[a], work[b], out=work[dst])
                elif op == OP_DIV:
                    np.divide(work[a], work[b], out=work[dst])
                elif op == OP_NEG:
                    np.negative(work[a], out=work[dst])
                elif op == OP_SIN:
                    np.sin(work[a], out=work[dst])
                elif op == OP_COS:
                    np.cos(work[a], out=work[dst])
                elif op == OP_TAN:
                    np.tan(work[a], out=work[dst])
                elif op == OP_EXP:
                    np.exp(work[a], out=work[dst])
                elif op == OP_LN:
                    np.log(work[a], out=work[dst])
                elif op == OP_TANH:
                    np.tanh(work[a], out=work[dst])
                elif op == OP_ABS:
                    np.abs(work[a], out=work[dst])
                elif op == OP_SIGN:
                    np.sign(work[a], out=work[dst])
                elif op == OP_POWI:
                    np.power(work[a], float(b), out=work[dst])
        return work[self.outputs]

    def eval_scalar(self, x, u, t: float, out=None):
        """Single-point evaluation with Python floats (fast for tiny tapes)."""
        work = [0.0] * self.n_slots
        for j in range(self.n_x):
            work[j] = x[j]
        for j in range(self.n_u):
            work[self.n_x + j] = u[j]
        work[self.n_x + self.n_u] = t
        base = self.n_inputs
        code, arg1, arg2, consts = self._lists
        for i in range(len(code)):
            op = code[i]
            a = arg1[i]
            dst = base + i
            if op == OP_LOADC:
                work[dst] = consts[a]
            elif op == OP_ADD:
                work[dst] = work[a] + work[arg2[i]]
            elif op == OP_SUB:
                work[dst] = work[a] - work[arg2[i]]
            elif op == OP_MUL:
                work[dst] = work[a] * work[arg2[i]]
            elif op == OP_DIV:
                work[dst] = work[a] / work[arg2[i]]
            elif op == OP_NEG:
                work[dst] = -work[a]
            elif op == OP_SIN:
                work[dst] = math.sin(work[a])
            elif op == OP_COS:
                work[dst] = math.cos(work[a])
            elif op == OP_TAN:
                work[dst] = math.tan(work[a])
            elif op == OP_EXP:
                work[dst] = math.exp(work[a])
            elif op == OP_LN:
                work[dst] = math.log(work[a])
            elif op == OP_TANH:
                work[dst] = math.tanh(work[a])
            elif op == OP_ABS:
                work[dst] = abs(work[a])
            elif op == OP_SIGN:
                v = work[a]
                work[dst] = 0.0 if v == 0.0 else math.copysign(1.0, v)
            elif op == OP_POWI:
                work[dst] = work[a] ** arg2[i]
        if out is None:
            out = np.empty(self.n_out)
        for j, slot in enumerate(self._out_list):
            out[j] = work[slot]
        return out

    @property
    def _lists(self):
        cached = getattr(self, "_list_cache", None)
        if cached is None:
            cached = (
                self.code.tolist(),
                self.arg1.tolist(),
                self.arg2.tolist(),
                self.consts.tolist(),
            )
            object.__setattr__(self, "_list_cache", cached)
        return cached

    @property
    def _out_list(self):
        cached = getattr(self, "_out_cache", None)
        if cached is None:
            cached = self.outputs.tolist()
            object.__setattr__(self, "_out_cache", cached)
        return cached


def compile_tape(trees, n_x: int, n_u: int) -> Tape:
    """Compile a list of expression trees into one shared tape."""
    code, arg1, arg2 = [], [], []
    consts = []
    const_index = {}
    slot_of = {}
    n_inputs = n_x + n_u + 1

    def emit(op, a, b):
        code.append(op)
        arg1.append(a)
        arg2.append(b)
        return n_inputs + len(code) - 1

    def visit(node):
        key = node
        if key in slot_of:
            return slot_of[key]
        kind = node[0]
        if kind == "var":
            if node[1] == "x":
                slot = node[2]
            elif node[1] == "u":
                slot = n_x + node[2]
            else:
                slot = n_x + n_u
        elif kind == "const":
            v = node[1]
            if v not in const_index:
                const_index[v] = len(consts)
                consts.append(v)
            slot = emit(OP_LOADC, const_index[v], 0)
        elif kind in _BIN_OPS:
            a = visit(node[1])
            b = visit(node[2])
            slot = emit(_BIN_OPS[kind], a, b)
        elif kind == "neg":
            slot = emit(OP_NEG, visit(node[1]), 0)
        elif kind == "pow":
            slot = emit(OP_POWI, visit(node[1]), node[2])
        elif kind == "fun":
            slot = emit(_FUN_OPS[node[1]], visit(node[2]), 0)
        else:
            raise ValueError(f"unknown node kind '{kind}'")
        slot_of[key] = slot
        return slot

    outputs = [visit(tree) for tree in trees]
    return Tape(
        n_x=n_x,
        n_u=n_u,
        n_slots=n_inputs + len(code),
        code=np.asarray(code, dtype=np.int32),
        arg1=np.asarray(arg1, dtype=np.int32),
        arg2=np.asarray(arg2, dtype=np.int32),
        consts=np.asarray(consts, dtype=np.float64),
        outputs=np.asarray(outputs, dtype=np.int32),
    )


def tape_for_vector(ast) -> Tape:
    """Tape evaluating all components of an ExprAst."""
    return compile_tape(list(ast.components), ast.n, ast.m)


def tape_for_jacobian(ast) -> Tape:
    """Tape evaluating the x-Jacobian row-major: outputs (dim*n,)."""
    trees = [tree for row in ast.jacobian_trees() for tree in row]
    return compile_tape(trees, ast.n, ast.m)
