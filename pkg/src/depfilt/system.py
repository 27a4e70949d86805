"""Domain model: the uncertain nonlinear descriptor plant and filter structures.

Dimensions follow the error-system convention: states n, inputs m, measured
outputs p, estimated outputs q (rows of H), disturbance width qw, and the
uncertainty factor F(t) in R^{k x l} inferred from M1 (n x k) and N (l x n).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import matrices
from .errors import DimensionError, InvalidInputError
from .expressions import ExprAst, eval_expr, zero_expr


def combined_gamma(gamma1: float, gamma2: float) -> float:
    """Lipschitz constant of the stacked error nonlinearity: sqrt(g1^2 + g2^2)."""
    if gamma1 < 0 or gamma2 < 0:
        raise InvalidInputError("Lipschitz constants must be nonnegative")
    return math.hypot(gamma1, gamma2)


@dataclass(frozen=True)
class DescriptorPlant:
    """E xdot = (A + dA(t)) x + Phi(x,u) + B w,  y = (C + dC(t)) x + Psi(x,u) + D w.

    The uncertainty is norm-bounded: [dA; dC] = [M1; M2] F(t) N with
    F^T F <= I.  ``z = H x`` is the output to be estimated.
    """

    E: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    N: np.ndarray
    H: np.ndarray
    phi: ExprAst
    psi: ExprAst
    gamma1: float
    gamma2: float

    def __post_init__(self):
        E = matrices.as_matrix(self.E, "E")
        n = E.shape[0]
        object.__setattr__(self, "E", E)
        for name in ("A", "B", "C", "D", "M1", "M2", "N", "H"):
            M = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(M)):
                raise InvalidInputError(f"{name} contains NaN/Inf entries")
            object.__setattr__(self, name, M)
        p, qw, k, l, q = self.p, self.qw, self.k, self.l, self.q
        shapes = {
            "E": (n, n),
            "A": (n, n),
            "B": (n, qw),
            "C": (p, n),
            "D": (p, qw),
            "M1": (n, k),
            "M2": (p, k),
            "N": (l, n),
            "H": (q, n),
        }
        for name, shape in shapes.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"{name} must be {shape}, got {got}")
        if self.phi.dim != n or self.phi.n != n:
            raise DimensionError(f"phi must have {n} components over x1..x{n}")
        if self.psi.dim != p or self.psi.n != n:
            raise DimensionError(f"psi must have {p} components over x1..x{n}")
        if self.phi.m != self.psi.m:
            raise DimensionError("phi and psi must declare the same input dimension")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise InvalidInputError("gamma1/gamma2 must be nonnegative")

    @property
    def n(self) -> int:
        return self.E.shape[0]

    @property
    def m(self) -> int:
        return self.phi.m

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def q(self) -> int:
        return self.H.shape[0]

    @property
    def qw(self) -> int:
        return self.B.shape[1]

    @property
    def k(self) -> int:
        return self.M1.shape[1]

    @property
    def l(self) -> int:
        return self.N.shape[0]

    @property
    def gamma(self) -> float:
        return combined_gamma(self.gamma1, self.gamma2)

    @classmethod
    def build(
        cls,
        E,
        A,
        B,
        C,
        D=None,
        M1=None,
        M2=None,
        N=None,
        H=None,
        phi: ExprAst | None = None,
        psi: ExprAst | None = None,
        gamma1: float = 0.0,
        gamma2: float = 0.0,
        m: int = 0,
    ) -> "DescriptorPlant":
        """Assemble a plant, defaulting the optional pieces to zero / identity."""
        E = matrices.as_matrix(E, "E")
        n = E.shape[0]
        B = np.asarray(B, dtype=float).reshape(n, -1)
        qw = B.shape[1]
        C = np.asarray(C, dtype=float).reshape(-1, n)
        p = C.shape[0]
        D = np.zeros((p, qw)) if D is None else np.asarray(D, dtype=float).reshape(p, qw)
        M1 = np.zeros((n, 0)) if M1 is None else np.asarray(M1, dtype=float).reshape(n, -1)
        k = M1.shape[1]
        M2 = np.zeros((p, k)) if M2 is None else np.asarray(M2, dtype=float).reshape(p, k)
        N = np.zeros((k, n)) if N is None else np.asarray(N, dtype=float).reshape(-1, n)
        H = np.eye(n) if H is None else np.asarray(H, dtype=float).reshape(-1, n)
        if phi is None:
            phi = zero_expr(n, n, m)
        if psi is None:
            psi = zero_expr(p, n, phi.m)
        return cls(
            E=E,
            A=np.asarray(A, dtype=float).reshape(n, n),
            B=B,
            C=C,
            D=D,
            M1=M1,
            M2=M2,
            N=N,
            H=H,
            phi=phi,
            psi=psi,
            gamma1=float(gamma1),
            gamma2=float(gamma2),
        )


@dataclass(frozen=True)
class ValidationCheck:
    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple
    rank_e: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def __str__(self) -> str:
        return "\n".join(
            f"[{'pass' if c.passed else 'FAIL'}] {c.name}: {c.detail}" for c in self.checks
        )


def validate(plant: DescriptorPlant, tol: float = matrices.DEFAULT_RTOL) -> ValidationReport:
    """Check the structural assumptions; failures block synthesis."""
    checks = []
    s = matrices.rank_of(plant.E, tol) if np.any(plant.E) else 0
    checks.append(
        ValidationCheck(
            "rank",
            0 < s <= plant.n,
            f"rank(E) = {s} of n = {plant.n}"
            + (" (nonsingular: ordinary state space)" if s == plant.n else ""),
        )
    )
    regular = matrices.pencil_regular(plant.E, plant.A, tol)
    checks.append(
        ValidationCheck(
            "regularity",
            regular,
            "det(sE - A) is not identically zero"
            if regular
            else "det(sE - A) vanishes identically",
        )
    )
    if regular:
        obs = matrices.observable(plant.E, plant.A, plant.C, tol)
        checks.append(
            ValidationCheck(
                "observability",
                obs,
                "rank [sE - A; C] = n at every finite pencil eigenvalue"
                if obs
                else "rank [sE - A; C] drops below n at a pencil eigenvalue",
            )
        )
    else:
        checks.append(ValidationCheck("observability", False, "skipped: pencil is irregular"))

    u_samples = [np.zeros(plant.m)]
    if plant.m:
        rng = np.random.default_rng(7)
        u_samples += [rng.normal(size=plant.m) for _ in range(2)]
    for name, ast in (("phi", plant.phi), ("psi", plant.psi)):
        worst = 0.0
        for u in u_samples:
            vals = eval_expr(ast, np.zeros(plant.n), u, 0.0)
            if vals.size:
                worst = max(worst, float(np.max(np.abs(vals))))
        checks.append(
            ValidationCheck(
                f"{name}-vanishes-at-origin",
                worst <= 1e-12,
                f"max |{name}(0, u)| over samples = {worst:.3e}",
            )
        )
    return ValidationReport(checks=tuple(checks), rank_e=s)


@dataclass(frozen=True)
class FilterStructure:
    """Fixed structural matrices of the general filter.

    ``e2`` is None for the static-gain preset until a realization exists
    (there E2 = -L = -B_F).  ``e3`` is a fixed matrix or None when E3 is a
    decision variable of the synthesis.
    """

    preset: str  # 'dynamic' | 'static-gain' | 'custom'
    e1: np.ndarray
    e2: np.ndarray | None
    e3: np.ndarray | None
    e3_decision: bool = False

    @classmethod
    def dynamic(cls, n: int, p: int, q: int) -> "FilterStructure":
        return cls(
            preset="dynamic",
            e1=np.eye(n),
            e2=np.zeros((n, p)),
            e3=np.zeros((q, p)),
        )

    @classmethod
    def static_gain(cls, n: int, p: int) -> "FilterStructure":
        # E2 = -L is only known once B_F = L has been synthesized
        return cls(preset="static-gain", e1=np.eye(n), e2=None, e3=np.zeros((n, p)))

    @classmethod
    def custom(cls, e1, e2, e3=None, e3_decision: bool = False) -> "FilterStructure":
        return cls(
            preset="custom",
            e1=matrices.as_matrix(e1, "e1"),
            e2=matrices.as_matrix(e2, "e2"),
            e3=None if e3_decision else matrices.as_matrix(e3, "e3"),
            e3_decision=e3_decision,
        )

    def effective_e2(self, realization: "FilterRealization | None" = None) -> np.ndarray:
        if self.e2 is not None:
            return self.e2
        if realization is None:
            raise InvalidInputError("static-gain E2 = -B_F needs a realization")
        return -realization.BF

    def effective_e3(self, realization: "FilterRealization | None" = None) -> np.ndarray:
        if self.e3 is not None:
            return self.e3
        if realization is None or realization.E3 is None:
            raise InvalidInputError("decision-mode E3 needs a realization")
        return realization.E3


@dataclass(frozen=True)
class FilterRealization:
    """Synthesized filter matrices and the certified attenuation level."""

    AF: np.ndarray
    BF: np.ndarray
    CF: np.ndarray
    E3: np.ndarray
    mu_star: float

    def __post_init__(self):
        for name in ("AF", "BF", "CF", "E3"):
            object.__setattr__(self, name, matrices.as_matrix(getattr(self, name), name))
        if not np.isfinite(self.mu_star) or self.mu_star < 0:
            raise InvalidInputError("mu_star must be finite and nonnegative")
