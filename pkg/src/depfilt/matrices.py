"""Dense matrix utilities for descriptor systems.

Everything here is a pure function on numpy arrays: numerical rank,
orthogonal complements, semi-explicit decompositions of a singular
descriptor matrix, matrix-pencil regularity/observability tests, and
symmetry/PSD checks used by the synthesis certificates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidInputError, ModelValidationError

#: Default relative tolerance for rank decisions (scaled by the largest
#: singular value); matches double-precision conditioning of desk-scale
#: problems.
DEFAULT_RTOL = 1e-10

_PENCIL_SEED = 719


def as_matrix(M, name="matrix") -> np.ndarray:
    """Coerce to a 2-D float array and reject non-finite entries."""
    A = np.asarray(M, dtype=float)
    if A.ndim == 1:
        A = A.reshape(1, -1)
    if A.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got ndim={A.ndim}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError(f"{name} contains NaN/Inf entries")
    return A


def rank_of(M, tol: float = DEFAULT_RTOL) -> int:
    """Numerical rank: number of singular values above ``tol * sigma_max``."""
    A = as_matrix(M)
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    if A.size == 0:
        return 0
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] == 0.0:
        return 0
    return int(np.sum(sv > tol * sv[0]))


def orthogonal_complement(E, tol: float = DEFAULT_RTOL) -> np.ndarray:
    """Orthonormal basis of the left null space of ``E``, as rows.

    Returns ``Eperp`` of shape ``(n - s, n)`` with ``Eperp @ E == 0`` and
    full row rank, where ``s = rank_of(E, tol)``.  Rows are the trailing
    left-singular vectors of ``E``; each row's first nonzero entry is made
    positive so the result is deterministic.  A full-rank ``E`` yields the
    empty ``(0, n)`` matrix.
    """
    A = as_matrix(E, "E")
    n = A.shape[0]
    if A.shape[1] != n:
        raise DimensionError("E must be square")
    U, sv, _ = np.linalg.svd(A)
    s = 0 if (A.size == 0 or sv[0] == 0.0) else int(np.sum(sv > tol * sv[0]))
    Eperp = U[:, s:].T.copy()
    for row in Eperp:
        nz = np.nonzero(np.abs(row) > tol)[0]
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return Eperp


@dataclass(frozen=True)
class SemiExplicitWitness:
    """Invertible ``S``, ``T`` with ``S @ diag(I_s, 0) @ T == E``."""

    S: np.ndarray
    T: np.ndarray
    rank: int

    def reconstruct(self) -> np.ndarray:
        n = self.S.shape[0]
        core = np.zeros((n, n))
        core[: self.rank, : self.rank] = np.eye(self.rank)
        return self.S @ core @ self.T

    def residual(self, E) -> float:
        E = np.asarray(E, dtype=float)
        scale = np.linalg.norm(E)
        err = np.linalg.norm(self.reconstruct() - E)
        return err / scale if scale > 0 else err


def semi_explicit_decompose(E, tol: float = DEFAULT_RTOL) -> SemiExplicitWitness:
    """Factor ``E = S @ diag(I_s, 0) @ T`` with invertible ``S``, ``T``.

    Built from the SVD ``E = U diag(sigma) V^T`` by folding the nonzero
    singular values into ``S``.  Any witness passing the reconstruction
    check is equally valid.
    """
    A = as_matrix(E, "E")
    n = A.shape[0]
    if A.shape[1] != n:
        raise DimensionError("E must be square")
    U, sv, Vt = np.linalg.svd(A)
    s = 0 if (A.size == 0 or sv[0] == 0.0) else int(np.sum(sv > tol * sv[0]))
    scale = np.ones(n)
    scale[:s] = sv[:s]
    S = U * scale  # U @ diag(scale)
    return SemiExplicitWitness(S=S, T=Vt.copy(), rank=s)


def _pencil_poly(E: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Coefficients (descending powers) of det(sE - A) by cofactor expansion.

    Exact up to rounding; intended for n <= 4 where the recursion is cheap.
    """
    n = E.shape[0]

    def det(rows, cols):
        if len(rows) == 1:
            i, j = rows[0], cols[0]
            return np.array([E[i, j], -A[i, j]])
        total = np.zeros(1)
        i = rows[0]
        for pos, j in enumerate(cols):
            entry = np.array([E[i, j], -A[i, j]])
            if entry[0] == 0.0 and entry[1] == 0.0:
                continue
            minor = det(rows[1:], cols[:pos] + cols[pos + 1 :])
            term = np.polymul(entry, minor)
            if pos % 2:
                term = -term
            total = np.polyadd(total, term)
        return total

    coeffs = det(list(range(n)), list(range(n)))
    full = np.zeros(n + 1)
    full[-len(coeffs) :] = coeffs
    return full


def _pencil_poly_interp(E: np.ndarray, A: np.ndarray) -> np.ndarray:
    """det(sE - A) coefficients recovered from n+1 determinant samples."""
    n = E.shape[0]
    nodes = np.arange(n + 1, dtype=float) - n / 2.0
    vals = np.array([np.linalg.det(s * E - A) for s in nodes])
    return np.polyfit(nodes, vals, n)


def _pencil_scale(E: np.ndarray, A: np.ndarray) -> float:
    """Hadamard-style magnitude scale for det(sE - A) on the sample box."""
    row = np.sum(np.abs(E) * 10.0 + np.abs(A), axis=1)
    row = np.maximum(row, 1e-300)
    return float(np.prod(row))


def pencil_regular(E, A, tol: float = DEFAULT_RTOL) -> bool:
    """True iff det(sE - A) is not the zero polynomial.

    Samples the determinant at ``n + 1`` distinct points drawn from a fixed
    seed on [-10, 10]; for n <= 4 the polynomial is also expanded exactly by
    cofactors, which settles borderline cases.
    """
    Em = as_matrix(E, "E")
    Am = as_matrix(A, "A")
    if Em.shape != Am.shape or Em.shape[0] != Em.shape[1]:
        raise DimensionError("E and A must be square with equal shapes")
    n = Em.shape[0]
    scale = _pencil_scale(Em, Am)
    if n <= 4:
        coeffs = _pencil_poly(Em, Am)
        return bool(np.max(np.abs(coeffs)) > tol * scale)
    rng = np.random.default_rng(_PENCIL_SEED)
    pts = []
    while len(pts) < n + 1:
        s = rng.uniform(-10.0, 10.0)
        if all(abs(s - q) > 1e-6 for q in pts):
            pts.append(s)
    dets = [abs(np.linalg.det(s * Em - Am)) for s in pts]
    return bool(max(dets) > tol * scale)


def pencil_eigenvalues(E, A, tol: float = DEFAULT_RTOL) -> np.ndarray:
    """Finite generalized eigenvalues: roots of det(sE - A)."""
    Em = as_matrix(E, "E")
    Am = as_matrix(A, "A")
    n = Em.shape[0]
    coeffs = _pencil_poly(Em, Am) if n <= 4 else _pencil_poly_interp(Em, Am)
    scale = max(np.max(np.abs(coeffs)), 1e-300)
    lead = 0
    while lead < len(coeffs) - 1 and abs(coeffs[lead]) <= tol * scale:
        lead += 1
    coeffs = coeffs[lead:]
    if len(coeffs) <= 1:
        return np.array([], dtype=complex)
    return np.roots(coeffs)


def observable(E, A, C, tol: float = DEFAULT_RTOL) -> bool:
    """Generalized PBH test: rank [sE - A; C] = n at every finite eigenvalue.

    Also probes a fixed set of seeded sample points for robustness.  Raises
    if the pencil is irregular (the eigenvalue set is then meaningless).
    """
    Em = as_matrix(E, "E")
    Am = as_matrix(A, "A")
    Cm = as_matrix(C, "C")
    n = Em.shape[0]
    if Cm.shape[1] != n:
        raise DimensionError("C must have n columns")
    if not pencil_regular(Em, Am, tol):
        raise ModelValidationError("pencil (E, A) is not regular")

    def stacked_rank(s: complex) -> int:
        top = s * Em - Am
        stack = np.vstack([top, Cm.astype(complex)])
        sv = np.linalg.svd(stack, compute_uv=False)
        if sv[0] == 0.0:
            return 0
        return int(np.sum(sv > max(tol, 1e-8) * sv[0]))

    for lam in pencil_eigenvalues(Em, Am, tol):
        if stacked_rank(lam) < n:
            return False
    rng = np.random.default_rng(_PENCIL_SEED + 1)
    for s in rng.uniform(-10.0, 10.0, size=4):
        if stacked_rank(s) < n:
            return False
    return True


def is_symmetric_psd(M, tol: float = 1e-9) -> bool:
    """Check ``||M - M^T|| <= tol * ||M||`` and ``lambda_min(sym(M)) >= -tol``."""
    A = as_matrix(M)
    if A.shape[0] != A.shape[1]:
        return False
    scale = np.linalg.norm(A)
    if np.linalg.norm(A - A.T) > tol * scale:
        return False
    w = np.linalg.eigvalsh(0.5 * (A + A.T))
    return bool(w.size == 0 or w[0] >= -tol)


def spectral_norm(M) -> float:
    A = np.asarray(M, dtype=float)
    if A.size == 0:
        return 0.0
    return float(np.linalg.svd(A, compute_uv=False)[0])
