"""Closed plant+filter DAE simulation and the energy-to-peak norm check.

Fixed-step implicit Euler with exact-Jacobian Newton solves, marched by the
compiled kernel when available (``depfilt._kernels``).  Consistent
initialization projects a guess onto the algebraic manifold
``Eperp (A x + Phi(x,u) + B w) = 0`` by damped Gauss-Newton with
minimum-norm corrections; individual components can be held fixed, which is
how a particular solution branch is selected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConsistencyError, DimensionError, InvalidInputError, SimulationAbortedError
from .expressions import ExprAst, eval_expr, jacobian_x, parse, zero_expr
from .matrices import orthogonal_complement, spectral_norm
from .system import DescriptorPlant, FilterRealization, FilterStructure


@dataclass
class SimConfig:
    t_end: float = 30.0
    dt: float = 1e-3
    newton_tol: float = 1e-10
    newton_maxit: int = 50
    w: ExprAst | None = None  # disturbance w(t), qw components
    u: ExprAst | None = None  # input u(t), m components
    F: ExprAst | None = None  # uncertainty realization F(t), k*l components row-major

    def __post_init__(self):
        if self.dt <= 0 or self.t_end < self.dt:
            raise InvalidInputError("need dt > 0 and t_end >= dt")
        if self.newton_tol <= 0 or self.newton_maxit < 1:
            raise InvalidInputError("bad Newton settings")

    @property
    def nsteps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass
class SimTrace:
    t: np.ndarray
    x: np.ndarray  # (N+1, n)
    xF: np.ndarray  # (N+1, n)
    z: np.ndarray  # (N+1, q)
    zF: np.ndarray  # (N+1, q)
    e: np.ndarray  # (N+1, q)
    w: np.ndarray  # (N+1, qw)
    newton_residuals: np.ndarray
    algebraic_residuals: np.ndarray  # ||Eperp rhs|| at every stored point

    def to_csv(self, path) -> None:
        """17-significant-digit CSV with LF endings."""
        n = self.x.shape[1]
        q = self.z.shape[1]
        qw = self.w.shape[1]
        header = (
            ["t"]
            + [f"x{i+1}" for i in range(n)]
            + [f"xF{i+1}" for i in range(n)]
            + [f"z{i+1}" for i in range(q)]
            + [f"zF{i+1}" for i in range(q)]
            + [f"e{i+1}" for i in range(q)]
            + [f"w{i+1}" for i in range(qw)]
        )
        cols = np.hstack(
            [self.t[:, None], self.x, self.xF, self.z, self.zF, self.e, self.w]
        )
        with open(path, "w", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for row in cols:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _tape_of_time_expr(expr: ExprAst | None, dim: int) -> "_kernels.Tape":
    if expr is None:
        expr = zero_expr(dim, 0, 0)
    if expr.dim != dim:
        raise DimensionError(f"expected {dim} components, got {expr.dim}")
    if expr.n != 0 or expr.m != 0:
        raise DimensionError("time signals may only reference t")
    return _kernels.tape_for_vector(expr)


def algebraic_residual(plant: DescriptorPlant, x, w=None, u=None, t: float = 0.0) -> np.ndarray:
    """Eperp (A x + Phi(x,u) + B w) for the plant equation."""
    Eperp = orthogonal_complement(plant.E)
    x = np.asarray(x, dtype=float).ravel()
    w = np.zeros(plant.qw) if w is None else np.asarray(w, dtype=float).ravel()
    u = np.zeros(plant.m) if u is None else np.asarray(u, dtype=float).ravel()
    rhs = plant.A @ x + eval_expr(plant.phi, x, u, t) + plant.B @ w
    return Eperp @ rhs


def _consistent_newton(residual, jacobian, guess, tol, maxit, hold=()):
    """Damped Gauss-Newton with minimum-norm corrections on the free components."""
    x = np.asarray(guess, dtype=float).ravel().copy()
    free = np.array([i for i in range(x.size) if i not in set(hold)], dtype=int)
    r = residual(x)
    if r.size == 0:
        return x, 0.0
    for _ in range(maxit):
        rn = np.linalg.norm(r)
        if rn <= tol:
            return x, rn
        J = jacobian(x)[:, free]
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        alpha = 1.0
        for _ in range(40):
            trial = x.copy()
            trial[free] += alpha * step
            r_trial = residual(trial)
            if np.linalg.norm(r_trial) < rn:
                x, r = trial, r_trial
                break
            alpha *= 0.5
        else:
            raise ConsistencyError(
                f"Newton stalled at residual {rn:.3e}", residual=rn
            )
    rn = float(np.linalg.norm(r))
    if rn <= tol:
        return x, rn
    raise ConsistencyError(f"no consistent point found (residual {rn:.3e})", residual=rn)


def consistent_init(
    plant: DescriptorPlant,
    guess,
    w0=None,
    u0=None,
    tol: float = 1e-10,
    maxit: int = 50,
    hold=(),
) -> np.ndarray:
    """Project a guess onto the plant's algebraic manifold.

    ``hold`` lists 0-based state indices kept at their guess values (branch
    selection); remaining components receive minimum-norm Newton corrections.
    A nonsingular E has no algebraic constraints, so the guess is returned
    unchanged.
    """
    guess = np.asarray(guess, dtype=float).ravel()
    if guess.size != plant.n:
        raise DimensionError(f"guess must have {plant.n} entries")
    w0 = np.zeros(plant.qw) if w0 is None else np.asarray(w0, dtype=float).ravel()
    u0 = np.zeros(plant.m) if u0 is None else np.asarray(u0, dtype=float).ravel()
    Eperp = orthogonal_complement(plant.E)
    if Eperp.shape[0] == 0:
        return guess.copy()

    def residual(x):
        return Eperp @ (plant.A @ x + eval_expr(plant.phi, x, u0, 0.0) + plant.B @ w0)

    def jacobian(x):
        return Eperp @ (plant.A + jacobian_x(plant.phi, x, u0, 0.0))

    x0, _ = _consistent_newton(residual, jacobian, guess, tol, maxit, hold)
    return x0


def consistent_filter_init(
    plant: DescriptorPlant,
    realization: FilterRealization,
    structure: FilterStructure,
    y0,
    guess=None,
    u0=None,
    tol: float = 1e-10,
    maxit: int = 50,
    match_output=None,
) -> np.ndarray:
    """Consistent initial state for the filter DAE given the initial measurement.

    With ``match_output`` set to the plant's initial estimate target z(0), the
    free directions along the filter's algebraic manifold are used to minimize
    |C_F xF - z(0)| (zero initial error where reachable), matching the
    bound's zero-error-initial-condition premise.
    """
    n, p = plant.n, plant.p
    y0 = np.asarray(y0, dtype=float).ravel()
    u0 = np.zeros(plant.m) if u0 is None else np.asarray(u0, dtype=float).ravel()
    e1 = structure.e1
    e2 = structure.effective_e2(realization)
    Eperp = orthogonal_complement(plant.E)
    if guess is None:
        guess = np.zeros(n)
    guess = np.asarray(guess, dtype=float).ravel()
    if Eperp.shape[0] == 0 and match_output is None:
        return guess.copy()

    def residual(x):
        rhs = (
            realization.AF @ x
            + realization.BF @ y0
            + e1 @ eval_expr(plant.phi, x, u0, 0.0)
            + e2 @ eval_expr(plant.psi, x, u0, 0.0)
        )
        return Eperp @ rhs

    def jacobian(x):
        J = realization.AF + e1 @ jacobian_x(plant.phi, x, u0, 0.0)
        J = J + e2 @ jacobian_x(plant.psi, x, u0, 0.0)
        return Eperp @ J

    if match_output is None:
        x0, _ = _consistent_newton(residual, jacobian, guess, tol, maxit)
        return x0

    # constrained least squares: exact consistency, minimal output error
    z0 = np.asarray(match_output, dtype=float).ravel()
    CF = realization.CF
    x = guess.copy()
    if np.linalg.matrix_rank(CF) == CF.shape[0] and CF.shape[0] <= n:
        x, *_ = np.linalg.lstsq(CF, z0, rcond=None)
    for _ in range(maxit):
        r = residual(x)
        err = CF @ x - z0
        if np.linalg.norm(r) <= tol:
            break
        J = jacobian(x)
        # KKT step: minimize |CF (x+d) - z0|^2 subject to J d = -r
        nc = J.shape[0]
        KKT = np.block([[CF.T @ CF, J.T], [J, np.zeros((nc, nc))]])
        rhs = np.concatenate([-CF.T @ err, -r])
        try:
            sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
        except np.linalg.LinAlgError as exc:
            raise ConsistencyError(f"filter init failed: {exc}")
        x = x + sol[:n]
    r = residual(x)
    if np.linalg.norm(r) > max(tol, 1e-8 * (1 + np.linalg.norm(x))):
        raise ConsistencyError(
            f"filter consistency not reached (residual {np.linalg.norm(r):.3e})",
            residual=float(np.linalg.norm(r)),
        )
    return x


def _build_spec(plant, realization, structure, config) -> "_kernels.StepperSpec":
    e2 = structure.effective_e2(realization)
    if config.F is not None and plant.k * plant.l == 0:
        raise DimensionError("uncertainty signal given but the plant declares none")
    return _kernels.StepperSpec(
        n=plant.n,
        p=plant.p,
        qw=plant.qw,
        m=plant.m,
        k=plant.k,
        l=plant.l,
        E=np.ascontiguousarray(plant.E),
        A=np.ascontiguousarray(plant.A),
        B=np.ascontiguousarray(plant.B),
        C=np.ascontiguousarray(plant.C),
        D=np.ascontiguousarray(plant.D),
        M1=np.ascontiguousarray(plant.M1),
        M2=np.ascontiguousarray(plant.M2),
        N=np.ascontiguousarray(plant.N),
        AF=np.ascontiguousarray(realization.AF),
        BF=np.ascontiguousarray(realization.BF),
        E1=np.ascontiguousarray(structure.e1),
        E2=np.ascontiguousarray(e2),
        phi_tape=_kernels.tape_for_vector(plant.phi),
        dphi_tape=_kernels.tape_for_jacobian(plant.phi),
        psi_tape=_kernels.tape_for_vector(plant.psi),
        dpsi_tape=_kernels.tape_for_jacobian(plant.psi),
        w_tape=_tape_of_time_expr(config.w, plant.qw),
        u_tape=_tape_of_time_expr(config.u, plant.m),
        F_tape=None if config.F is None else _tape_of_time_expr(config.F, plant.k * plant.l),
    )


def validate_uncertainty(config: SimConfig, plant: DescriptorPlant, tol: float = 1e-9):
    """Check ||F(t)|| <= 1 on the time grid; raises on violation."""
    if config.F is None:
        return
    tape = _tape_of_time_expr(config.F, plant.k * plant.l)
    ts = np.arange(config.nsteps + 1) * config.dt
    vals = tape.eval_batch(np.zeros((0, ts.size)), np.zeros((0, ts.size)), ts)
    mats = vals.T.reshape(ts.size, plant.k, plant.l)
    norms = np.linalg.svd(mats, compute_uv=False)[:, 0]
    worst = float(norms.max(initial=0.0))
    if worst > 1.0 + tol:
        raise InvalidInputError(
            f"uncertainty realization violates ||F(t)|| <= 1 (max {worst:.6f})"
        )


def simulate(
    plant: DescriptorPlant,
    realization: FilterRealization,
    structure: FilterStructure,
    config: SimConfig,
    x0,
    xF0,
    use_fallback: bool = False,
) -> SimTrace:
    """Implicit-Euler march of the coupled plant and filter from consistent ICs."""
    validate_uncertainty(config, plant)
    spec = _build_spec(plant, realization, structure, config)
    march = _kernels.march_fallback if use_fallback else _kernels.march
    x0 = np.asarray(x0, dtype=float).ravel()
    xF0 = np.asarray(xF0, dtype=float).ravel()
    if x0.size != plant.n or xF0.size != plant.n:
        raise DimensionError("initial states must have n entries")
    X, XF, W, resid, fail = march(
        spec, x0, xF0, config.nsteps, config.dt, config.newton_tol, config.newton_maxit
    )
    last = config.nsteps if not fail else fail - 1
    t = np.arange(last + 1) * config.dt
    X, XF, W, resid = X[: last + 1], XF[: last + 1], W[: last + 1], resid[: last + 1]

    e3 = structure.effective_e3(realization)
    if plant.m:
        U = spec.u_tape.eval_batch(np.zeros((0, last + 1)), np.zeros((0, last + 1)), t)
    else:
        U = np.zeros((0, last + 1))
    psis = spec.psi_tape.eval_batch(XF.T, U, t).T  # (N+1, p)
    Z = X @ plant.H.T
    ZF = XF @ realization.CF.T + psis @ e3.T
    E = Z - ZF

    Eperp = orthogonal_complement(plant.E)
    if Eperp.shape[0]:
        phis = spec.phi_tape.eval_batch(X.T, U, t).T
        rhs = X @ plant.A.T + phis + W @ plant.B.T
        if config.F is not None:
            Fv = spec.F_tape.eval_batch(np.zeros((0, last + 1)), np.zeros((0, last + 1)), t)
            mats = Fv.T.reshape(last + 1, plant.k, plant.l)
            dA = np.einsum("na,tab,bm->tnm", plant.M1, mats, plant.N)
            rhs = rhs + np.einsum("tnm,tm->tn", dA, X)
        alg = np.linalg.norm(rhs @ Eperp.T, axis=1)
    else:
        alg = np.zeros(last + 1)

    trace = SimTrace(
        t=t,
        x=X,
        xF=XF,
        z=Z,
        zF=ZF,
        e=E,
        w=W,
        newton_residuals=resid,
        algebraic_residuals=alg,
    )
    if fail:
        raise SimulationAbortedError(
            f"Newton failed at step {fail} (t = {fail * config.dt:.6f})", trace=trace
        )
    return trace


def norms(trace: SimTrace):
    """(e_inf, w_l2, ratio): grid sup-norm of e, trapezoidal L2 norm of w."""
    if trace.t.size == 0:
        raise InvalidInputError("empty trace")
    e_inf = float(np.max(np.linalg.norm(trace.e, axis=1)))
    wsq = np.sum(trace.w**2, axis=1)
    w_l2 = float(np.sqrt(np.trapezoid(wsq, trace.t))) if trace.t.size > 1 else 0.0
    if w_l2 > 0.0:
        ratio = e_inf / w_l2
    else:
        ratio = 0.0 if e_inf == 0.0 else float("inf")
    return e_inf, w_l2, ratio


def parse_time_signal(source: str, dim: int) -> ExprAst:
    """Parse a ';'-separated signal of t with ``dim`` components."""
    expr = parse(source, n=0, m=0)
    if expr.dim != dim:
        raise DimensionError(f"expected {dim} components, got {expr.dim}")
    return expr
