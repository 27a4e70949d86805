"""End-to-end filter synthesis: build constraints, solve, recover, certify.

The default pipeline applies the strict substitution P = X E + Eperp' Y
(X > 0), which turns the equality-constrained program into a strict LMI
problem; the equality form is kept behind ``mode='sdp'`` for equivalence
experiments.  The peak-bound block is tried on a ladder
strict -> nonstrict -> off, because it is structurally infeasible for
singular E (see :func:`diagnose_peak_obstruction`); the certificate
records which rung succeeded.  With the rung 'off' the attenuation level
is certified by the dissipation inequality alone and should be checked
against simulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sdp
from .errors import (
    DepfiltError,
    InvalidInputError,
    ModelValidationError,
    SynthesisInfeasibleError,
)
from .lmi import (
    LmiProblem,
    MarginsReport,
    apply_strict_substitution,
    build_synthesis_lmis,
    evaluate_at,
)
from .matrices import is_symmetric_psd, orthogonal_complement, rank_of, spectral_norm
from .system import DescriptorPlant, FilterRealization, FilterStructure, validate

PEAK_LADDER = ("strict", "nonstrict", "off")


@dataclass
class SynthesisOptions:
    mode: str = "strict"  # 'strict' (substituted LMIs) | 'sdp' (explicit equalities)
    peak_mode: str = "auto"  # 'auto' ladder, or one of strict | nonstrict | off
    dissipation_form: str = "full"
    coupling: str = "direct"  # multiplier side in the coupling columns
    estimator_pin: bool | None = None  # None: pin C_F = H exactly when peak block is off
    tracking_slack: float = 2.0  # zeta budget factor for the gain-selection stage
    lam: float = 0.0  # weight of alpha in the objective (0 = pure zeta)
    eperp: np.ndarray | None = None  # override the orthogonal complement
    tol: float = 1e-8
    max_iter: int = 200


@dataclass
class SynthesisCertificate:
    mode: str
    peak_mode: str
    coupling: str
    zeta: float
    epsilon: float | None
    alpha: float | None
    lam: float
    P1: np.ndarray
    P2: np.ndarray
    G1: np.ndarray
    G2: np.ndarray
    CF: np.ndarray
    E3: np.ndarray
    X1: np.ndarray | None
    X2: np.ndarray | None
    Y1: np.ndarray | None
    Y2: np.ndarray | None
    E: np.ndarray
    margins: MarginsReport
    solver_iterations: int
    objective: float
    dissipation_form: str = "full"
    estimator_pin: bool = False
    tracking_cap: float | None = None
    assignment: np.ndarray | None = None  # raw decision vector of the solved problem
    solution_values: dict | None = None  # per-variable view of the assignment
    zeta_floor: float | None = None  # stage-1 attenuation optimum, pre gain selection

    @property
    def mu_star(self) -> float:
        return float(np.sqrt(max(self.zeta, 0.0)))

    def check_invariants(self, tol: float = 1e-8) -> list:
        """Certificate health: zeta >= 0, P1 invertibility margin, pencil identities."""
        problems = []
        if self.zeta < -tol:
            problems.append(f"zeta is negative: {self.zeta}")
        gap = spectral_norm(np.eye(self.P1.shape[0]) - self.P1)
        if gap >= 1.0:
            problems.append(f"||I - P1|| = {gap} >= 1")
        for name, P in (("P1", self.P1), ("P2", self.P2)):
            EP = self.E.T @ P
            scale = max(1.0, float(np.abs(EP).max(initial=0.0)))
            if np.max(np.abs(EP - EP.T), initial=0.0) > tol * scale:
                problems.append(f"E'{name} is not symmetric")
            if not is_symmetric_psd(0.5 * (EP + EP.T), tol=tol * scale):
                problems.append(f"E'{name} is not positive semidefinite")
        return problems


@dataclass
class RungReport:
    peak_mode: str
    status: str
    objective: float


def _solve_one(
    plant: DescriptorPlant,
    structure: FilterStructure,
    opts: SynthesisOptions,
    peak_mode: str,
    tracking_cap: float | None = None,
):
    problem = build_synthesis_lmis(
        plant,
        structure,
        peak_mode=peak_mode,
        dissipation_form=opts.dissipation_form,
        lam=opts.lam,
        coupling=opts.coupling,
        estimator_pin=opts.estimator_pin,
        tracking_cap=tracking_cap,
    )
    if opts.mode == "strict":
        eperp = opts.eperp if opts.eperp is not None else orthogonal_complement(plant.E)
        problem = apply_strict_substitution(problem, plant.E, eperp)
    elif opts.mode != "sdp":
        raise InvalidInputError(f"unknown synthesis mode '{opts.mode}'")
    solution = sdp.solve_lmi(problem, sdp.SolveOptions(tol=opts.tol, max_iter=opts.max_iter))
    return problem, solution


def _extract_certificate(
    plant: DescriptorPlant,
    problem: LmiProblem,
    solution: sdp.Solution,
    opts: SynthesisOptions,
    peak_mode: str,
) -> SynthesisCertificate:
    pool = problem.pool
    x = solution.x
    get = lambda name: pool.extract(x, name) if name in pool.by_name else None
    if opts.mode == "strict":
        X1, X2 = get("X1"), get("X2")
        Y1, Y2 = get("Y1"), get("Y2")
        Eperp = problem.meta["Eperp"]
        P1 = X1 @ plant.E + (Eperp.T @ Y1 if Y1 is not None else 0.0)
        P2 = X2 @ plant.E + (Eperp.T @ Y2 if Y2 is not None else 0.0)
    else:
        X1 = X2 = Y1 = Y2 = None
        P1, P2 = get("P1"), get("P2")
    cf_fixed = problem.meta.get("cf_fixed")
    CF = cf_fixed if cf_fixed is not None else get("CF")
    E3 = get("E3")
    if E3 is None:
        E3 = np.zeros((plant.q, plant.p))
    margins = evaluate_at(problem, x)
    return SynthesisCertificate(
        mode=opts.mode,
        peak_mode=peak_mode,
        coupling=problem.meta["coupling"],
        zeta=get("zeta"),
        epsilon=get("eps"),
        alpha=get("alpha"),
        lam=opts.lam,
        P1=np.asarray(P1),
        P2=np.asarray(P2),
        G1=get("G1"),
        G2=get("G2"),
        CF=np.asarray(CF),
        E3=np.asarray(E3),
        X1=X1,
        X2=X2,
        Y1=Y1,
        Y2=Y2,
        E=plant.E.copy(),
        margins=margins,
        solver_iterations=solution.iterations,
        objective=solution.objective,
        dissipation_form=problem.meta["dissipation_form"],
        estimator_pin=bool(problem.meta.get("estimator_pin", False)),
        tracking_cap=problem.meta.get("tracking_cap"),
        assignment=np.array(x, dtype=float),
        solution_values={var.name: pool.extract(x, var.name) for var in pool.vars},
    )


def recover_filter(cert: SynthesisCertificate):
    """Solve P1 A_F = G1 and P1 B_F = G2 (P1 invertible by the synthesis LMI).

    In the 'adjoint' coupling the defining relations are G = P1' A_F, so the
    transposed system is solved instead.
    """
    gap = spectral_norm(np.eye(cert.P1.shape[0]) - cert.P1)
    if gap >= 1.0:
        raise DepfiltError(
            f"internal error: ||I - P1|| = {gap} >= 1, P1 not certified invertible"
        )
    P = cert.P1 if cert.coupling == "direct" else cert.P1.T
    AF = np.linalg.solve(P, cert.G1)
    BF = np.linalg.solve(P, cert.G2)
    res_a = np.linalg.norm(P @ AF - cert.G1)
    res_b = np.linalg.norm(P @ BF - cert.G2)
    if res_a > 1e-8 * max(1.0, np.linalg.norm(cert.G1)) or res_b > 1e-8 * max(
        1.0, np.linalg.norm(cert.G2)
    ):
        raise DepfiltError("internal error: filter recovery residual too large")
    return AF, BF


def synthesize(
    plant: DescriptorPlant,
    structure: FilterStructure,
    opts: SynthesisOptions | None = None,
):
    """Full pipeline; returns (FilterRealization, SynthesisCertificate)."""
    opts = opts or SynthesisOptions()
    report = validate(plant)
    if not report.passed:
        raise ModelValidationError(
            "plant validation failed:\n" + str(report)
        )
    ladder = PEAK_LADDER if opts.peak_mode == "auto" else (opts.peak_mode,)
    rungs = []
    for peak_mode in ladder:
        problem, solution = _solve_one(plant, structure, opts, peak_mode)
        rungs.append(RungReport(peak_mode=peak_mode, status=solution.status, objective=solution.objective))
        if solution.optimal:
            zeta_floor = problem.pool.extract(solution.x, "zeta")
            if (problem.meta.get("estimator_pin") or problem.meta.get("static_gain")) and opts.tracking_slack > 0:
                # the attenuation optimum is flat in the observer gain; spend a
                # bounded zeta budget on the best tracking dissipation instead
                cap = zeta_floor * max(opts.tracking_slack, 1.0 + 1e-6) + 1e-12
                problem2, solution2 = _solve_one(plant, structure, opts, peak_mode, tracking_cap=cap)
                if solution2.optimal:
                    problem, solution = problem2, solution2
            cert = _extract_certificate(plant, problem, solution, opts, peak_mode)
            cert.zeta_floor = zeta_floor
            AF, BF = recover_filter(cert)
            realization = FilterRealization(
                AF=AF, BF=BF, CF=cert.CF, E3=cert.E3, mu_star=cert.mu_star
            )
            return realization, cert
    diag = [f"{r.peak_mode}: {r.status}" for r in rungs]
    if rank_of(plant.E) < plant.n and opts.peak_mode in ("auto", "strict", "nonstrict"):
        diag.append(str(diagnose_peak_obstruction(plant)))
    raise SynthesisInfeasibleError(
        "synthesis infeasible on every peak-bound rung (" + "; ".join(d.splitlines()[0] for d in diag) + ")",
        diagnosis=diag,
    )


def lyapunov_value(cert: SynthesisCertificate, xi) -> float:
    """Generalized Lyapunov function xi' Etilde' P xi with P = diag(P1, P2)."""
    xi = np.asarray(xi, dtype=float).ravel()
    n = cert.E.shape[0]
    if xi.size != 2 * n:
        raise InvalidInputError(f"xi must have length {2 * n}")
    EP1 = cert.E.T @ cert.P1
    EP2 = cert.E.T @ cert.P2
    xf, xp = xi[:n], xi[n:]
    return float(xf @ EP1 @ xf + xp @ EP2 @ xp)


@dataclass
class PeakDiagnosis:
    """Why the peak-bound block cannot hold for singular E."""

    e_singular: bool
    witness: np.ndarray | None
    gamma: float
    h_component: float  # ||H v|| along the witness
    cf_restricted: bool  # True when C_F rows would have to stay in range(E')
    lines: list = field(default_factory=list)

    @property
    def obstructed(self) -> bool:
        return self.e_singular and (self.gamma > 0 or self.h_component > 1e-12)

    def __str__(self) -> str:
        return "\n".join(self.lines)


def diagnose_peak_obstruction(plant: DescriptorPlant, gamma: float | None = None) -> PeakDiagnosis:
    """Report the structural obstruction of the peak-bound block for singular E.

    Eliminating the -I/3 diagonal blocks reduces the peak bound to
    3 C_F'C_F + 3 a^2 g^2 I < E'P1.  For any v in ker(E) the equalities force
    E'P1 v = P1'E v = 0, so the left side must vanish along v: impossible for
    a > 0, g > 0, and (through the analogous plant-side block) whenever
    H v != 0.
    """
    gamma = plant.gamma if gamma is None else float(gamma)
    n = plant.n
    s = rank_of(plant.E)
    lines = []
    if s == n:
        lines.append("E is nonsingular: no structural obstruction in the peak-bound block.")
        return PeakDiagnosis(
            e_singular=False,
            witness=None,
            gamma=gamma,
            h_component=0.0,
            cf_restricted=False,
            lines=lines,
        )
    # right null space witness: E'P1 v = P1'E v = 0 for every feasible P1
    _, _, Vt = np.linalg.svd(plant.E)
    v = Vt[-1]
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    hv = float(np.linalg.norm(plant.H @ v))
    lines.append(
        f"E is singular (rank {s} of {n}); kernel witness v = {np.array2string(v, precision=6)}."
    )
    lines.append(
        "Along v the pencil couplings force v'E'P1 v = 0, so the reduced peak-bound "
        "condition needs 3 a^2 g^2 |v|^2 + 3 |C_F v|^2 < 0:"
    )
    if gamma > 0:
        lines.append(
            f"  impossible for any a > 0 with g = {gamma:g} > 0 (the a*g coupling term is positive)."
        )
    else:
        lines.append("  g = 0: the a*g coupling vanishes along v.")
    if hv > 1e-12:
        lines.append(
            f"  the plant-side block also needs |H v| = 0, but |H v| = {hv:g} > 0."
        )
    cf_restricted = gamma == 0.0 and hv <= 1e-12
    if cf_restricted:
        lines.append(
            "  obstruction persists only if C_F rows leave range(E'): C_F v = 0 is required."
        )
    return PeakDiagnosis(
        e_singular=True,
        witness=v,
        gamma=gamma,
        h_component=hv,
        cf_restricted=cf_restricted,
        lines=lines,
    )
