"""Lowering of LMI problems to standard conic form and the solve/certify API.

PSD blocks are stored through the scaled lower-triangular vectorization
(off-diagonals times sqrt(2)), which makes the vector inner product equal
the trace inner product.  Equality constraints stay equality rows; the
interior-point backend eliminates them by a nullspace basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import interior_point as ipm
from .errors import CertificationUnavailableError, InvalidInputError
from .lmi import LmiProblem, MarginsReport, evaluate_at

SQRT2 = float(np.sqrt(2.0))


def svec_indices(n: int):
    """Row-major lower-triangular index pairs: (0,0), (1,0), (1,1), ..."""
    return [(i, j) for i in range(n) for j in range(i + 1)]


def svec(M: np.ndarray) -> np.ndarray:
    """Scaled vectorization: <svec(A), svec(B)> = trace(A B) for symmetric A, B."""
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    out = np.empty(n * (n + 1) // 2)
    k = 0
    for i in range(n):
        for j in range(i + 1):
            out[k] = M[i, i] if i == j else SQRT2 * M[i, j]
            k += 1
    return out


def smat(v: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`svec`."""
    M = np.zeros((n, n))
    k = 0
    for i in range(n):
        for j in range(i + 1):
            if i == j:
                M[i, i] = v[k]
            else:
                M[i, j] = M[j, i] = v[k] / SQRT2
            k += 1
    return M


@dataclass
class PsdBlock:
    """Affine PSD constraint G0 + sum_i x_i Gi >= 0 in svec storage."""

    name: str
    dim: int
    f0: np.ndarray  # (L,) svec of G0
    fmat: np.ndarray  # (nvar, L) svec of each Gi

    def matrices(self):
        G0 = smat(self.f0, self.dim)
        G = np.stack([smat(row, self.dim) for row in self.fmat]) if self.fmat.shape[0] else np.zeros((0, self.dim, self.dim))
        return G0, G


@dataclass
class ConicProgram:
    nvar: int
    c: np.ndarray
    blocks: list
    aeq: np.ndarray
    beq: np.ndarray
    names: list = field(default_factory=list)


@dataclass
class Solution:
    status: str
    x: np.ndarray | None
    objective: float
    iterations: int
    primal_infeas: float
    dual_infeas: float
    rel_gap: float

    @property
    def optimal(self) -> bool:
        return self.status == ipm.OPTIMAL


@dataclass
class SolveOptions:
    tol: float = 1e-8
    max_iter: int = 200


def lower(problem: LmiProblem) -> ConicProgram:
    """Turn every cone constraint into a PSD block and equalities into rows."""
    nvar = problem.pool.dim
    blocks = []
    eq_rows = []
    eq_rhs = []
    names = []
    for con in problem.constraints:
        d = con.expr.shape[0]
        if con.sense == "=0":
            for i in range(d):
                for j in range(con.expr.shape[1]):
                    row = np.zeros(nvar)
                    for g, coeff in con.expr.lin.items():
                        row[g] = coeff[i, j]
                    if np.any(row) or con.expr.const[i, j] != 0.0:
                        eq_rows.append(row)
                        eq_rhs.append(-con.expr.const[i, j])
            continue
        sign = -1.0 if con.sense in ("<0", "<=0") else 1.0
        shift = con.shift if con.sense in ("<0", ">0") else 0.0
        G0 = sign * con.expr.const - shift * np.eye(d)
        L = d * (d + 1) // 2
        fmat = np.zeros((nvar, L))
        for g in sorted(con.expr.lin):
            fmat[g] = svec(sign * con.expr.lin[g])
        blocks.append(PsdBlock(name=con.name, dim=d, f0=svec(G0), fmat=fmat))
        names.append(con.name)
    aeq = np.array(eq_rows) if eq_rows else np.zeros((0, nvar))
    beq = np.array(eq_rhs) if eq_rhs else np.zeros(0)
    return ConicProgram(
        nvar=nvar, c=problem.objective.copy(), blocks=blocks, aeq=aeq, beq=beq, names=names
    )


def solve(program: ConicProgram, opts: SolveOptions | None = None) -> Solution:
    """Run the interior-point backend; statuses are returned, never raised."""
    opts = opts or SolveOptions()
    dense_blocks = []
    for blk in program.blocks:
        G0, G = blk.matrices()
        dense_blocks.append((G0, G))
    res = ipm.solve_sdp(
        program.c,
        dense_blocks,
        Aeq=program.aeq,
        beq=program.beq,
        tol=opts.tol,
        max_iter=opts.max_iter,
    )
    return Solution(
        status=res.status,
        x=res.x,
        objective=res.objective,
        iterations=res.iterations,
        primal_infeas=res.primal_infeas,
        dual_infeas=res.dual_infeas,
        rel_gap=res.rel_gap,
    )


def solve_lmi(problem: LmiProblem, opts: SolveOptions | None = None) -> Solution:
    return solve(lower(problem), opts)


def certify(problem: LmiProblem, solution: Solution, eq_tol: float = 1e-8) -> MarginsReport:
    """Margins of every constraint at the solution; needs an Optimal status."""
    if not solution.optimal:
        raise CertificationUnavailableError(
            f"cannot certify a solution with status {solution.status}"
        )
    if solution.x is None:
        raise CertificationUnavailableError("solution carries no point")
    return evaluate_at(problem, solution.x, eq_tol=eq_tol)


def program_dump(program: ConicProgram) -> str:
    """Plain-text standard form for cross-checks against external solvers."""
    lines = [f"nvar {program.nvar}"]
    obj = " ".join(f"{i}:{v:.17g}" for i, v in enumerate(program.c) if v != 0.0)
    lines.append(f"objective {obj}")
    for blk in program.blocks:
        lines.append(f"block {blk.name} dim {blk.dim}")
        for k, v in enumerate(blk.f0):
            if v != 0.0:
                lines.append(f"-1 {k} {v:.17g}")
        for i in range(program.nvar):
            for k, v in enumerate(blk.fmat[i]):
                if v != 0.0:
                    lines.append(f"{i} {k} {v:.17g}")
    for r in range(program.aeq.shape[0]):
        terms = " ".join(
            f"{i}:{v:.17g}" for i, v in enumerate(program.aeq[r]) if v != 0.0
        )
        lines.append(f"eq {terms} = {program.beq[r]:.17g}")
    return "\n".join(lines) + "\n"
