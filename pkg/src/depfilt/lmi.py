"""Affine symmetric block-matrix expressions and the synthesis constraint system.

``MatExpr`` is an affine map from a global decision vector to a dense
matrix (constant plus per-scalar coefficient matrices).  The builder
composes the energy-to-peak synthesis constraints:

* ``dissipation``  - certifies Vdot <= mu^2 w'w along the error dynamics
  (Schur form with uncertainty multiplier, nonlinearity block and
  disturbance column); ``zeta = mu^2`` is minimized.
* ``peak_bound``   - certifies e'e <= V (optional; structurally obstructed
  for singular E, see ``synthesis.diagnose_peak_obstruction``).
* ``e3_bound``     - bounds the feedthrough gain ||E3|| < alpha when E3 is
  a decision variable.
* ``p1_invertibility`` - ||I - P1|| < 1, which makes P1 invertible so the
  filter matrices can be recovered as P1^{-1} G1, P1^{-1} G2.
* pencil couplings - E'P = P'E >= 0 for P1, P2 (equality + PSD); removed
  exactly by ``apply_strict_substitution`` (P = X E + Eperp' Y, X > 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidInputError, NonAffineError
from .matrices import orthogonal_complement, rank_of
from .system import DescriptorPlant, FilterStructure

SENSES = ("<0", ">0", "<=0", ">=0", "=0")

#: Relative strictness shift turning open cones into solver-friendly closed ones.
STRICT_SHIFT = 1e-9


# ---------------------------------------------------------------------------
# decision variables


@dataclass(frozen=True)
class DecisionVar:
    name: str
    kind: str  # 'scalar' | 'rect' | 'sym'
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        if self.kind == "scalar":
            return 1
        r, c = self.shape
        return r * (r + 1) // 2 if self.kind == "sym" else r * c

    def entry(self, i: int = 0, j: int = 0) -> int:
        """Global index of entry (i, j); symmetric storage is lower-triangular."""
        if self.kind == "scalar":
            return self.offset
        r, c = self.shape
        if self.kind == "rect":
            return self.offset + i * c + j
        if i < j:
            i, j = j, i
        return self.offset + i * (i + 1) // 2 + j


class VarPool:
    """Ordered registry of decision variables sharing one flat vector."""

    def __init__(self):
        self.vars: list[DecisionVar] = []
        self.by_name: dict[str, DecisionVar] = {}
        self._dim = 0

    def _add(self, var: DecisionVar) -> DecisionVar:
        if var.name in self.by_name:
            raise InvalidInputError(f"duplicate decision variable '{var.name}'")
        self.vars.append(var)
        self.by_name[var.name] = var
        self._dim += var.size
        return var

    def add_scalar(self, name: str) -> DecisionVar:
        return self._add(DecisionVar(name, "scalar", (1, 1), self._dim))

    def add_rect(self, name: str, r: int, c: int) -> DecisionVar:
        return self._add(DecisionVar(name, "rect", (r, c), self._dim))

    def add_sym(self, name: str, n: int) -> DecisionVar:
        return self._add(DecisionVar(name, "sym", (n, n), self._dim))

    @property
    def dim(self) -> int:
        return self._dim

    def extract(self, x: np.ndarray, name: str):
        """Read a variable's value (scalar or matrix) out of a decision vector."""
        var = self.by_name[name]
        if var.kind == "scalar":
            return float(x[var.offset])
        r, c = var.shape
        M = np.empty((r, c))
        for i in range(r):
            for j in range(c):
                M[i, j] = x[var.entry(i, j)]
        return M

    def pack(self, values: dict) -> np.ndarray:
        """Assemble a decision vector from per-variable values (by name)."""
        x = np.zeros(self.dim)
        for var in self.vars:
            if var.name not in values:
                raise InvalidInputError(f"missing value for variable '{var.name}'")
            val = values[var.name]
            if var.kind == "scalar":
                x[var.offset] = float(np.asarray(val, dtype=float).ravel()[0])
                continue
            M = np.asarray(val, dtype=float).reshape(var.shape)
            r, c = var.shape
            for i in range(r):
                for j in range(c):
                    x[var.entry(i, j)] = M[i, j]
        return x


# ---------------------------------------------------------------------------
# affine matrix expressions


class MatExpr:
    """Affine map from the decision vector to a dense (r x c) matrix."""

    __slots__ = ("shape", "const", "lin")

    def __init__(self, shape, const=None, lin=None):
        self.shape = (int(shape[0]), int(shape[1]))
        self.const = np.zeros(self.shape) if const is None else np.asarray(const, dtype=float)
        if self.const.shape != self.shape:
            raise DimensionError("constant term has the wrong shape")
        self.lin: dict[int, np.ndarray] = {} if lin is None else lin

    # -- constructors

    @staticmethod
    def constant(M) -> "MatExpr":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return MatExpr(M.shape, const=M.copy())

    @staticmethod
    def zeros(r: int, c: int) -> "MatExpr":
        return MatExpr((r, c))

    @staticmethod
    def from_var(var: DecisionVar) -> "MatExpr":
        r, c = var.shape
        lin = {}
        for i in range(r):
            for j in range(c):
                g = var.entry(i, j)
                coeff = lin.setdefault(g, np.zeros((r, c)))
                coeff[i, j] += 1.0
        return MatExpr((r, c), lin=lin)

    @staticmethod
    def scalar_times_eye(var: DecisionVar, n: int, coeff: float = 1.0) -> "MatExpr":
        if var.kind != "scalar":
            raise InvalidInputError("scalar_times_eye needs a scalar variable")
        return MatExpr((n, n), lin={var.offset: coeff * np.eye(n)})

    @staticmethod
    def scalar_times_const(var: DecisionVar, M) -> "MatExpr":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if var.kind != "scalar":
            raise InvalidInputError("scalar_times_const needs a scalar variable")
        return MatExpr(M.shape, lin={var.offset: M.copy()})

    def copy(self) -> "MatExpr":
        return MatExpr(self.shape, self.const.copy(), {g: c.copy() for g, c in self.lin.items()})

    # -- affine algebra

    @property
    def is_constant(self) -> bool:
        return not self.lin

    def __add__(self, other):
        other = other if isinstance(other, MatExpr) else MatExpr.constant(other)
        if other.shape != self.shape:
            raise DimensionError(f"cannot add shapes {self.shape} and {other.shape}")
        out = self.copy()
        out.const += other.const
        for g, c in other.lin.items():
            if g in out.lin:
                out.lin[g] = out.lin[g] + c
            else:
                out.lin[g] = c.copy()
        return out

    __radd__ = __add__

    def __neg__(self):
        return MatExpr(self.shape, -self.const, {g: -c for g, c in self.lin.items()})

    def __sub__(self, other):
        other = other if isinstance(other, MatExpr) else MatExpr.constant(other)
        return self + (-other)

    def __rsub__(self, other):
        return MatExpr.constant(other) + (-self)

    def scale(self, a: float) -> "MatExpr":
        a = float(a)
        return MatExpr(self.shape, a * self.const, {g: a * c for g, c in self.lin.items()})

    @property
    def T(self) -> "MatExpr":
        return MatExpr(
            (self.shape[1], self.shape[0]),
            self.const.T.copy(),
            {g: c.T.copy() for g, c in self.lin.items()},
        )

    def lmul(self, K) -> "MatExpr":
        """K @ self for a constant K."""
        K = np.atleast_2d(np.asarray(K, dtype=float))
        if K.shape[1] != self.shape[0]:
            raise DimensionError("lmul shape mismatch")
        return MatExpr(
            (K.shape[0], self.shape[1]),
            K @ self.const,
            {g: K @ c for g, c in self.lin.items()},
        )

    def rmul(self, K) -> "MatExpr":
        """self @ K for a constant K."""
        K = np.atleast_2d(np.asarray(K, dtype=float))
        if K.shape[0] != self.shape[1]:
            raise DimensionError("rmul shape mismatch")
        return MatExpr(
            (self.shape[0], K.shape[1]),
            self.const @ K,
            {g: c @ K for g, c in self.lin.items()},
        )

    def __matmul__(self, other):
        if isinstance(other, MatExpr):
            if self.lin and other.lin:
                raise NonAffineError("product of two decision-variable expressions")
            if other.lin:
                return other.lmul(self.const)
            return self.rmul(other.const)
        return self.rmul(other)

    def __rmatmul__(self, other):
        return self.lmul(other)

    def sym(self) -> "MatExpr":
        """Symmetric part (X + X') / 2."""
        if self.shape[0] != self.shape[1]:
            raise DimensionError("sym needs a square expression")
        return (self + self.T).scale(0.5)

    # -- structure queries

    def is_structurally_symmetric(self, tol: float = 0.0) -> bool:
        if self.shape[0] != self.shape[1]:
            return False
        if np.max(np.abs(self.const - self.const.T), initial=0.0) > tol:
            return False
        return all(
            np.max(np.abs(c - c.T), initial=0.0) <= tol for c in self.lin.values()
        )

    def magnitude_scale(self) -> float:
        """max(1, largest |entry| across constant and coefficients)."""
        s = np.max(np.abs(self.const), initial=0.0)
        for c in self.lin.values():
            s = max(s, np.max(np.abs(c), initial=0.0))
        return max(1.0, float(s))

    # -- evaluation

    def eval(self, x: np.ndarray) -> np.ndarray:
        out = self.const.copy()
        for g in sorted(self.lin):
            out += x[g] * self.lin[g]
        return out

    def triples(self):
        """Deterministic (var_index, row, col, coeff) list; const uses index -1."""
        items = []
        for i in range(self.shape[0]):
            for j in range(self.shape[1]):
                if self.const[i, j] != 0.0:
                    items.append((-1, i, j, float(self.const[i, j])))
        for g in sorted(self.lin):
            c = self.lin[g]
            for i in range(self.shape[0]):
                for j in range(self.shape[1]):
                    if c[i, j] != 0.0:
                        items.append((g, i, j, float(c[i, j])))
        return items


def block_expr(rows) -> "MatExpr":
    """Compose a block matrix of MatExpr / arrays (None means a zero block)."""
    grid = [[e if (e is None or isinstance(e, MatExpr)) else MatExpr.constant(e) for e in row] for row in rows]
    nrow = len(grid)
    ncol = len(grid[0])
    row_h = [None] * nrow
    col_w = [None] * ncol
    for i, row in enumerate(grid):
        if len(row) != ncol:
            raise DimensionError("ragged block rows")
        for j, e in enumerate(row):
            if e is None:
                continue
            if row_h[i] is None:
                row_h[i] = e.shape[0]
            elif row_h[i] != e.shape[0]:
                raise DimensionError(f"block row {i} has inconsistent heights")
            if col_w[j] is None:
                col_w[j] = e.shape[1]
            elif col_w[j] != e.shape[1]:
                raise DimensionError(f"block col {j} has inconsistent widths")
    if any(h is None for h in row_h) or any(w is None for w in col_w):
        raise DimensionError("a block row/column contains only None entries")
    r_off = np.concatenate([[0], np.cumsum(row_h)])
    c_off = np.concatenate([[0], np.cumsum(col_w)])
    out = MatExpr((int(r_off[-1]), int(c_off[-1])))
    for i, row in enumerate(grid):
        for j, e in enumerate(row):
            if e is None:
                continue
            rs, cs = slice(r_off[i], r_off[i + 1]), slice(c_off[j], c_off[j + 1])
            out.const[rs, cs] = e.const
            for g, c in e.lin.items():
                tgt = out.lin.setdefault(g, np.zeros(out.shape))
                tgt[rs, cs] += c
    return out


# ---------------------------------------------------------------------------
# constraints and problems


@dataclass
class LmiConstraint:
    name: str
    expr: MatExpr
    sense: str
    shift: float = 0.0
    tag: str = ""
    blocks: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sense not in SENSES:
            raise InvalidInputError(f"unknown sense '{self.sense}'")
        if self.expr.shape[0] != self.expr.shape[1]:
            raise DimensionError(f"constraint '{self.name}' is not square")
        if self.sense != "=0" and not self.expr.is_structurally_symmetric():
            raise InvalidInputError(f"cone constraint '{self.name}' is not structurally symmetric")


@dataclass
class LmiProblem:
    pool: VarPool
    constraints: list
    objective: np.ndarray
    meta: dict = field(default_factory=dict)

    def constraint(self, name: str) -> LmiConstraint:
        for c in self.constraints:
            if c.name == name:
                return c
        raise KeyError(name)

    def has_constraint(self, name: str) -> bool:
        return any(c.name == name for c in self.constraints)


@dataclass(frozen=True)
class ConstraintMargin:
    name: str
    sense: str
    shift: float
    extreme: float  # max eig for upper senses, min eig for lower, residual for =0
    margin: float  # positive = satisfied with room
    passed: bool


@dataclass(frozen=True)
class MarginsReport:
    entries: tuple

    @property
    def all_passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def min_margin(self) -> float:
        return min((e.margin for e in self.entries), default=float("inf"))

    def entry(self, name: str) -> ConstraintMargin:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def __str__(self) -> str:
        lines = []
        for e in self.entries:
            lines.append(
                f"[{'pass' if e.passed else 'FAIL'}] {e.name:<24} sense {e.sense:>3}"
                f"  extreme {e.extreme: .6e}  margin {e.margin: .6e}"
            )
        return "\n".join(lines)


def evaluate_at(problem: LmiProblem, x: np.ndarray, eq_tol: float = 1e-8) -> MarginsReport:
    """Numeric margins of every constraint at a decision vector."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size != problem.pool.dim:
        raise InvalidInputError(
            f"assignment has {x.size} entries, problem has {problem.pool.dim} variables"
        )
    entries = []
    for con in problem.constraints:
        M = con.expr.eval(x)
        if con.sense == "=0":
            extreme = float(np.max(np.abs(M), initial=0.0))
            margin = eq_tol - extreme
            passed = extreme <= eq_tol
        else:
            w = np.linalg.eigvalsh(0.5 * (M + M.T))
            if con.sense in ("<0", "<=0"):
                extreme = float(w[-1]) if w.size else 0.0
                bound = -con.shift if con.sense == "<0" else 0.0
                margin = bound - extreme
            else:
                extreme = float(w[0]) if w.size else 0.0
                bound = con.shift if con.sense == ">0" else 0.0
                margin = extreme - bound
            passed = margin >= -1e-12
        entries.append(
            ConstraintMargin(
                name=con.name,
                sense=con.sense,
                shift=con.shift,
                extreme=extreme,
                margin=margin,
                passed=passed,
            )
        )
    return MarginsReport(entries=tuple(entries))


def problem_dump(problem: LmiProblem) -> str:
    """Plain-text dump: one line per affine triple, deterministic ordering."""
    lines = [f"variables {problem.pool.dim}"]
    for var in problem.pool.vars:
        lines.append(f"var {var.name} {var.kind} {var.shape[0]} {var.shape[1]} @{var.offset}")
    obj = " ".join(
        f"{i}:{c:.17g}" for i, c in enumerate(problem.objective) if c != 0.0
    )
    lines.append(f"objective {obj}")
    for con in problem.constraints:
        lines.append(
            f"constraint {con.name} sense {con.sense} shape {con.expr.shape[0]} shift {con.shift:.17g}"
        )
        for g, i, j, c in con.expr.triples():
            lines.append(f"{g} {i} {j} {c:.17g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# synthesis constraint system


def _named_slices(sizes, names):
    out = {}
    off = 0
    for size, name in zip(sizes, names):
        out[name] = slice(off, off + size)
        off += size
    return out


def build_synthesis_lmis(
    plant: DescriptorPlant,
    structure: FilterStructure,
    peak_mode: str = "strict",
    dissipation_form: str = "full",
    lam: float = 0.0,
    cf_fixed: np.ndarray | None = None,
    coupling: str = "direct",
    estimator_pin: bool | None = None,
    tracking_cap: float | None = None,
) -> LmiProblem:
    """Emit the full synthesis constraint system over (zeta, eps, alpha, P1, P2, ...).

    ``peak_mode`` is 'strict' (< 0 with shift), 'nonstrict' (<= 0) or 'off'
    (peak-bound block omitted; only the dissipation inequality certifies).
    ``dissipation_form`` 'full' carries the disturbance column and the unit
    diagonal block of the Schur derivation; 'compact' drops them (kept for
    comparison experiments).  ``cf_fixed`` pins C_F to a constant (the
    static-gain preset uses the identity).

    ``coupling`` picks the side of the Lyapunov multiplier in the
    nonlinearity/uncertainty/disturbance columns: 'direct' is the published
    layout (P1 E1, P2 rows; recovery A_F = P1^{-1} G1); 'adjoint' uses the
    transposed multiplier, which is the variant consistent with expanding
    Vdot = 2 xi'P'(...) term by term, at the price of a markedly larger
    optimum.  The constraint families are otherwise identical.

    When the peak-bound block is absent nothing couples C_F to the problem,
    so ``estimator_pin`` (default: on exactly in that case) pins C_F = H and
    A_F = A - B_F C, making the filter a descriptor observer for z = H x;
    the pin is free at the optimum but keeps the realization meaningful.

    ``tracking_cap`` switches to the tie-break stage used with the pin: the
    attenuation level is capped at the given value and the objective becomes
    the dissipation level ``rho`` of the tracking-error subsystem
    delta = x - x_F (same machinery, multiplier shared with P1), which picks
    the best-tracking observer gain off the flat optimum.
    """
    if peak_mode not in ("strict", "nonstrict", "off"):
        raise InvalidInputError(f"unknown peak_mode '{peak_mode}'")
    if dissipation_form not in ("full", "compact"):
        raise InvalidInputError(f"unknown dissipation_form '{dissipation_form}'")
    if coupling not in ("direct", "adjoint"):
        raise InvalidInputError(f"unknown coupling '{coupling}'")
    n, p, q, qw, k = plant.n, plant.p, plant.q, plant.qw, plant.k
    gamma = plant.gamma
    static_gain = structure.preset == "static-gain"
    if static_gain:
        if q != n:
            raise DimensionError("static-gain preset estimates the full state: H must have n rows")
        cf_fixed = np.eye(n)
    if estimator_pin is None:
        estimator_pin = peak_mode == "off" and not static_gain
    if estimator_pin and not static_gain:
        if q != plant.H.shape[0]:
            raise DimensionError("estimator pin requires C_F and H to share shape")
        cf_fixed = plant.H.copy()

    e3_active = structure.e3_decision
    alpha_active = peak_mode != "off" or e3_active
    if lam > 0.0 and not alpha_active:
        raise InvalidInputError(
            "multiobjective weight needs an active alpha (peak-bound block or decision E3)"
        )

    pool = VarPool()
    zeta = pool.add_scalar("zeta")
    eps = pool.add_scalar("eps") if k else None
    alpha = pool.add_scalar("alpha") if alpha_active else None
    P1 = pool.add_rect("P1", n, n)
    P2 = pool.add_rect("P2", n, n)
    G1 = pool.add_rect("G1", n, n)
    G2 = pool.add_rect("G2", n, p)
    CF = None if cf_fixed is not None else pool.add_rect("CF", q, n)
    E3 = pool.add_rect("E3", q, p) if e3_active else None

    P1e = MatExpr.from_var(P1)
    P2e = MatExpr.from_var(P2)
    G1e = MatExpr.from_var(G1)
    G2e = MatExpr.from_var(G2)
    CFe = MatExpr.constant(cf_fixed) if cf_fixed is not None else MatExpr.from_var(CF)

    constraints = []

    # dissipation block: Schur form of Vdot + |Omega|^2 - mu^2 w'w < 0
    lam1 = G1e + G1e.T + MatExpr.constant(gamma**2 * np.eye(n))
    lam2 = P2e.lmul(plant.A.T).sym().scale(2.0) + MatExpr.constant(gamma**2 * np.eye(n))
    if k:
        lam2 = lam2 + MatExpr.scalar_times_const(eps, plant.N.T @ plant.N)
    g2c = G2e.rmul(plant.C)
    state = block_expr([[lam1, g2c], [g2c.T, lam2]])

    # multiplier side in the coupling columns (see docstring)
    P1c = P1e if coupling == "direct" else P1e.T
    P2c = P2e if coupling == "direct" else P2e.T

    e1 = structure.e1
    p1e1 = P1c.rmul(e1)
    if static_gain:
        p1e2 = -G2e  # E2 = -L and P1 L = G2, so P1 E2 = -G2 stays affine
    else:
        p1e2 = P1c.rmul(structure.e2)
    ps1 = block_expr(
        [
            [None, G2e, p1e1, p1e2],
            [P2c, MatExpr.zeros(n, p), MatExpr.zeros(n, n), MatExpr.zeros(n, p)],
        ]
    )
    pbt = block_expr([[G2e.rmul(plant.D)], [P2c.rmul(plant.B)]])
    nl_dim = 2 * n + 2 * p

    if k:
        unc = block_expr([[G2e.rmul(plant.M2)], [P2c.rmul(plant.M1)]])
        eps_blk = MatExpr.scalar_times_eye(eps, k, -1.0)
    if dissipation_form == "full":
        unit_blk = MatExpr.constant(-np.eye(nl_dim))
        zeta_blk = MatExpr.scalar_times_eye(zeta, qw, -1.0)
        if k:
            rows = [
                [state, unc, ps1, pbt],
                [unc.T, eps_blk, None, MatExpr.zeros(k, qw)],
                [ps1.T, MatExpr.zeros(nl_dim, k), unit_blk, None],
                [pbt.T, None, MatExpr.zeros(qw, nl_dim), zeta_blk],
            ]
            sizes = [2 * n, k, nl_dim, qw]
            names = ["state", "uncertainty", "nonlin", "disturbance"]
        else:
            rows = [
                [state, ps1, pbt],
                [ps1.T, unit_blk, None],
                [pbt.T, MatExpr.zeros(qw, nl_dim), zeta_blk],
            ]
            sizes = [2 * n, nl_dim, qw]
            names = ["state", "nonlin", "disturbance"]
    else:
        # compact variant: nonlinearity columns share the zeta block, no
        # disturbance column (kept only for structure-comparison runs)
        unc_pad = (
            block_expr(
                [
                    [MatExpr.zeros(n, k), G2e.rmul(plant.M2)],
                    [MatExpr.zeros(n, k), P2c.rmul(plant.M1)],
                ]
            )
            if k
            else None
        )
        zeta_blk = MatExpr.scalar_times_eye(zeta, nl_dim, -1.0)
        if k:
            eps_blk2 = MatExpr.scalar_times_eye(eps, 2 * k, -1.0)
            rows = [
                [state, unc_pad, ps1],
                [unc_pad.T, eps_blk2, None],
                [ps1.T, MatExpr.zeros(nl_dim, 2 * k), zeta_blk],
            ]
            sizes = [2 * n, 2 * k, nl_dim]
            names = ["state", "uncertainty", "nonlin"]
        else:
            rows = [[state, ps1], [ps1.T, zeta_blk]]
            sizes = [2 * n, nl_dim]
            names = ["state", "nonlin"]

    diss = block_expr(rows)
    blocks = {}
    sl = _named_slices(sizes, names)
    for a, ra in sl.items():
        for b, rb in sl.items():
            blocks[f"{a}|{b}" if a != b else a] = (ra, rb)
    blocks["state/filter"] = (slice(0, n), slice(0, n))
    blocks["state/plant"] = (slice(n, 2 * n), slice(n, 2 * n))
    constraints.append(
        LmiConstraint(
            name="dissipation",
            expr=diss,
            sense="<0",
            shift=STRICT_SHIFT * diss.magnitude_scale(),
            blocks=blocks,
        )
    )

    # peak-bound block: Schur form of 3 C~'C~ + 3 a^2 g^2 I < E~'P
    if peak_mode != "off":
        ep1 = P1e.lmul(plant.E.T).sym()
        ep2 = P2e.lmul(plant.E.T).sym()
        ag = MatExpr.scalar_times_eye(alpha, n, gamma)
        third_q = MatExpr.constant(-np.eye(q) / 3.0)
        third_n = MatExpr.constant(-np.eye(n) / 3.0)
        lam3 = MatExpr.constant(plant.H.T @ plant.H) - ep2
        peak = block_expr(
            [
                [-ep1, CFe.T, ag, -(CFe.T.rmul(plant.H)), None],
                [CFe, third_q, None, None, MatExpr.zeros(q, n)],
                [ag, None, third_n, None, None],
                [-(CFe.T.rmul(plant.H)).T, None, None, lam3, ag],
                [MatExpr.zeros(n, n), MatExpr.zeros(n, q), None, ag, third_n],
            ]
        )
        psl = _named_slices([n, q, n, n, n], ["p1", "cf", "a1", "plant", "a2"])
        constraints.append(
            LmiConstraint(
                name="peak_bound",
                expr=peak,
                sense="<0" if peak_mode == "strict" else "<=0",
                shift=(STRICT_SHIFT * peak.magnitude_scale()) if peak_mode == "strict" else 0.0,
                blocks={name: (s, s) for name, s in psl.items()},
            )
        )

    # feedthrough bound ||E3|| < alpha
    if e3_active:
        E3e = MatExpr.from_var(E3)
        e3b = block_expr(
            [
                [MatExpr.scalar_times_eye(alpha, q), E3e],
                [E3e.T, MatExpr.scalar_times_eye(alpha, p)],
            ]
        )
        constraints.append(
            LmiConstraint(
                name="e3_bound",
                expr=e3b,
                sense=">0",
                shift=STRICT_SHIFT * e3b.magnitude_scale(),
            )
        )

    # ||I - P1|| < 1 makes P1 invertible
    eye_minus_p1t = MatExpr.constant(np.eye(n)) - P1e.T
    inv_blk = block_expr(
        [
            [MatExpr.constant(np.eye(n)), eye_minus_p1t],
            [eye_minus_p1t.T, MatExpr.constant(np.eye(n))],
        ]
    )
    constraints.append(
        LmiConstraint(
            name="p1_invertibility",
            expr=inv_blk,
            sense=">0",
            shift=STRICT_SHIFT * inv_blk.magnitude_scale(),
        )
    )

    # pencil couplings E'P = P'E >= 0 (dropped by the strict substitution).
    # The PSD part is emitted on the range of E': the equalities force
    # E'P v = P'E v = 0 on ker E, so restricting to range(E') is exact and
    # keeps the cone interior nonempty for singular E.
    s_rank = rank_of(plant.E)
    _, _, Vt = np.linalg.svd(plant.E)
    Rcols = Vt[:s_rank].T  # n x s basis of range(E')
    for tagname, Pe in (("P1", P1e), ("P2", P2e)):
        ep = Pe.lmul(plant.E.T)
        constraints.append(
            LmiConstraint(
                name=f"{tagname.lower()}_pencil_symmetry",
                expr=ep - ep.T,
                sense="=0",
                tag="pencil-coupling",
            )
        )
        constraints.append(
            LmiConstraint(
                name=f"{tagname.lower()}_pencil_psd",
                expr=ep.sym().lmul(Rcols.T).rmul(Rcols),
                sense=">=0",
                tag="pencil-coupling",
            )
        )

    if static_gain or estimator_pin:
        # A_F = A - L C with L = B_F pins G1 = P1 A - G2 C
        observer = G1e - P1c.rmul(plant.A) + G2e.rmul(plant.C)
        constraints.append(
            LmiConstraint(name="observer_coupling", expr=observer, sense="=0")
        )

    rho = None
    if tracking_cap is not None:
        if not (static_gain or estimator_pin):
            raise InvalidInputError("tracking_cap needs the observer coupling")
        # tracking-error subsystem E ddot = (A - B_F C) d + dPhi + (B - B_F D) w
        # with the shared multiplier: P1 (A - B_F C) = G1 - gamma^2-part.
        # This block only selects among attenuation-optimal gains.
        rho = pool.add_scalar("rho")
        lam_d = G1e + G1e.T + MatExpr.constant(plant.gamma1**2 * np.eye(n))
        db = P1c.rmul(plant.B) - G2e.rmul(plant.D)
        if k:
            eps_d = pool.add_scalar("eps_d")
            lam_d = lam_d + MatExpr.scalar_times_const(eps_d, plant.N.T @ plant.N)
            unc_d = P1c.rmul(plant.M1) - G2e.rmul(plant.M2)
            rows_d = [
                [lam_d, unc_d, P1c, db],
                [unc_d.T, MatExpr.scalar_times_eye(eps_d, k, -1.0), None, MatExpr.zeros(k, qw)],
                [P1c.T, MatExpr.zeros(n, k), MatExpr.constant(-np.eye(n)), None],
                [db.T, None, MatExpr.zeros(qw, n), MatExpr.scalar_times_eye(rho, qw, -1.0)],
            ]
        else:
            rows_d = [
                [lam_d, P1c, db],
                [P1c.T, MatExpr.constant(-np.eye(n)), None],
                [db.T, MatExpr.zeros(qw, n), MatExpr.scalar_times_eye(rho, qw, -1.0)],
            ]
        track = block_expr(rows_d)
        constraints.append(
            LmiConstraint(
                name="tracking_dissipation",
                expr=track,
                sense="<0",
                shift=STRICT_SHIFT * track.magnitude_scale(),
            )
        )
        cap = MatExpr.constant(np.array([[float(tracking_cap)]])) - MatExpr.scalar_times_eye(zeta, 1)
        constraints.append(LmiConstraint(name="attenuation_cap", expr=cap, sense=">=0"))

    objective = np.zeros(pool.dim)
    if tracking_cap is not None:
        objective[rho.offset] = 1.0
    else:
        objective[zeta.offset] = 1.0
    if lam > 0.0:
        objective[alpha.offset] = float(lam)

    meta = {
        "n": n,
        "p": p,
        "q": q,
        "qw": qw,
        "k": k,
        "gamma": gamma,
        "peak_mode": peak_mode,
        "dissipation_form": dissipation_form,
        "coupling": coupling,
        "estimator_pin": estimator_pin,
        "tracking_cap": tracking_cap,
        "lam": float(lam),
        "cf_fixed": None if cf_fixed is None else np.asarray(cf_fixed, dtype=float),
        "static_gain": static_gain,
        "e3_active": e3_active,
        "substituted": False,
        "E": plant.E.copy(),
    }
    return LmiProblem(pool=pool, constraints=constraints, objective=objective, meta=meta)


def apply_strict_substitution(problem: LmiProblem, E, Eperp=None) -> LmiProblem:
    """Replace P = X E + Eperp' Y (X symmetric > 0) and drop the pencil couplings.

    The substitution satisfies E'P = E'X E = P'E >= 0 identically, which is
    why the equality/PSD couplings can be removed without changing the
    feasible set.
    """
    if problem.meta.get("substituted"):
        raise InvalidInputError("strict substitution already applied")
    E = np.asarray(E, dtype=float)
    n = problem.meta["n"]
    if E.shape != (n, n):
        raise DimensionError("E has the wrong shape for this problem")
    if Eperp is None:
        Eperp = orthogonal_complement(E)
    Eperp = np.atleast_2d(np.asarray(Eperp, dtype=float))
    d = Eperp.shape[0]
    if Eperp.shape[1] != n or d != n - rank_of(E):
        raise DimensionError("Eperp must be (n - rank E) x n")
    if np.max(np.abs(Eperp @ E), initial=0.0) > 1e-8 * max(1.0, float(np.abs(E).max())):
        raise InvalidInputError("Eperp does not annihilate E")

    old_pool = problem.pool
    pool = VarPool()
    mapping: dict[int, list] = {}
    new_by_old_name = {}
    for var in old_pool.vars:
        if var.name in ("P1", "P2"):
            idx = var.name[1]
            X = pool.add_sym(f"X{idx}", n)
            Y = pool.add_rect(f"Y{idx}", d, n) if d else None
            # P[i, j] = sum_a X[i, a] E[a, j] + sum_b Eperp[b, i] Y[b, j]
            for i in range(n):
                for j in range(n):
                    terms = []
                    for a in range(n):
                        if E[a, j] != 0.0:
                            terms.append((X.entry(i, a), float(E[a, j])))
                    for b in range(d):
                        if Eperp[b, i] != 0.0:
                            terms.append((Y.entry(b, j), float(Eperp[b, i])))
                    mapping[var.entry(i, j)] = terms
            new_by_old_name[var.name] = (X, Y)
        else:
            if var.kind == "scalar":
                nv = pool.add_scalar(var.name)
            elif var.kind == "rect":
                nv = pool.add_rect(var.name, *var.shape)
            else:
                nv = pool.add_sym(var.name, var.shape[0])
            new_by_old_name[var.name] = nv
            if var.kind == "sym":
                r = var.shape[0]
                for i in range(r):
                    for j in range(i + 1):
                        mapping[var.entry(i, j)] = [(nv.entry(i, j), 1.0)]
            else:
                r, c = var.shape if var.kind == "rect" else (1, 1)
                for i in range(r):
                    for j in range(c):
                        mapping[var.entry(i, j)] = [(nv.entry(i, j), 1.0)]

    def rewrite(expr: MatExpr) -> MatExpr:
        lin: dict[int, np.ndarray] = {}
        for g, coeff in expr.lin.items():
            for ng, w in mapping[g]:
                if ng in lin:
                    lin[ng] = lin[ng] + w * coeff
                else:
                    lin[ng] = w * coeff
        lin = {g: c for g, c in lin.items() if np.any(c)}
        return MatExpr(expr.shape, expr.const.copy(), lin)

    constraints = []
    for con in problem.constraints:
        if con.tag == "pencil-coupling":
            continue
        constraints.append(
            LmiConstraint(
                name=con.name,
                expr=rewrite(con.expr),
                sense=con.sense,
                shift=con.shift,
                tag=con.tag,
                blocks=dict(con.blocks),
            )
        )
    for idx in ("1", "2"):
        X, _ = new_by_old_name[f"P{idx}"]
        Xe = MatExpr.from_var(X)
        constraints.append(
            LmiConstraint(
                name=f"x{idx}_pd",
                expr=Xe,
                sense=">0",
                shift=STRICT_SHIFT,
            )
        )

    objective = np.zeros(pool.dim)
    for g in np.nonzero(problem.objective)[0]:
        for ng, w in mapping[int(g)]:
            objective[ng] += w * problem.objective[g]

    meta = dict(problem.meta)
    meta["substituted"] = True
    meta["Eperp"] = Eperp.copy()
    return LmiProblem(pool=pool, constraints=constraints, objective=objective, meta=meta)
