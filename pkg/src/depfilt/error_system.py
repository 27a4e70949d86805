"""Assembly of the augmented filter-error dynamics.

With the stacked state ``xi = [x_F; x]`` the error system is

    Etilde xidot = (Atilde + dAtilde(t)) xi + S1 Omega(xi, u) + Btilde w
    e = Ctilde xi + S2 Omega(xi, u)

where Omega stacks [Phi(x,u); Psi(x,u); Phi(x_F,u); Psi(x_F,u)].  The
uncertainty factors as dAtilde = M1tilde F(t) Ntilde using the compact
M1tilde = [B_F M2; M1], Ntilde = [0 N] (the padded zero blocks of the
printed factorization only add a decoupled diagonal to the multiplier
block, so they are dropped).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .matrices import spectral_norm
from .system import DescriptorPlant, FilterRealization, FilterStructure


@dataclass(frozen=True)
class AugmentedErrorSystem:
    Etilde: np.ndarray
    Atilde: np.ndarray
    Btilde: np.ndarray
    Ctilde: np.ndarray
    S1: np.ndarray
    S2: np.ndarray
    M1tilde: np.ndarray
    Ntilde: np.ndarray
    Gamma: np.ndarray
    gamma: float

    def delta_Atilde(self, F) -> np.ndarray:
        """Uncertainty realization M1tilde @ F @ Ntilde for a given F(t)."""
        return self.M1tilde @ np.asarray(F, dtype=float) @ self.Ntilde


def _gamma_block(gamma: float, rows: int, cols: int) -> np.ndarray:
    """gamma times the rows x cols identity-like rectangle."""
    G = np.zeros((rows, cols))
    d = min(rows, cols)
    G[:d, :d] = gamma * np.eye(d)
    return G


def build_gamma(gamma1: float, gamma2: float, n: int, p: int) -> np.ndarray:
    """Stacked Lipschitz bound matrix: ||Omega(a) - Omega(b)|| <= ||Gamma (a - b)||."""
    zeros_n = np.zeros((n, n))
    zeros_p = np.zeros((p, n))
    return np.block(
        [
            [zeros_n, _gamma_block(gamma1, n, n)],
            [zeros_p, _gamma_block(gamma2, p, n)],
            [_gamma_block(gamma1, n, n), zeros_n],
            [_gamma_block(gamma2, p, n), zeros_p],
        ]
    )


def assemble(
    plant: DescriptorPlant,
    structure: FilterStructure,
    realization: FilterRealization,
) -> AugmentedErrorSystem:
    """Build the error-system matrices from plant, structure and realization."""
    n, p, q, qw = plant.n, plant.p, plant.q, plant.qw
    AF, BF, CF = realization.AF, realization.BF, realization.CF
    if AF.shape != (n, n) or BF.shape != (n, p) or CF.shape != (q, n):
        raise DimensionError("realization dimensions do not match the plant")
    e1 = structure.e1
    e2 = structure.effective_e2(realization)
    e3 = structure.effective_e3(realization)
    if e1.shape != (n, n) or e2.shape != (n, p) or e3.shape != (q, p):
        raise DimensionError("structure matrices have wrong shapes")

    Etilde = np.block([[plant.E, np.zeros((n, n))], [np.zeros((n, n)), plant.E]])
    Atilde = np.block([[AF, BF @ plant.C], [np.zeros((n, n)), plant.A]])
    Btilde = np.vstack([BF @ plant.D, plant.B])
    Ctilde = np.hstack([-CF, plant.H])
    S1 = np.block(
        [
            [np.zeros((n, n)), BF, e1, e2],
            [np.eye(n), np.zeros((n, p)), np.zeros((n, n)), np.zeros((n, p))],
        ]
    )
    S2 = np.hstack(
        [np.zeros((q, n)), np.zeros((q, p)), np.zeros((q, n)), -e3]
    )
    M1tilde = np.vstack([BF @ plant.M2, plant.M1])
    Ntilde = np.hstack([np.zeros((plant.l, n)), plant.N])
    gamma = plant.gamma
    Gamma = build_gamma(plant.gamma1, plant.gamma2, n, p)
    return AugmentedErrorSystem(
        Etilde=Etilde,
        Atilde=Atilde,
        Btilde=Btilde,
        Ctilde=Ctilde,
        S1=S1,
        S2=S2,
        M1tilde=M1tilde,
        Ntilde=Ntilde,
        Gamma=Gamma,
        gamma=gamma,
    )


def omega_stack(phi_at_x, psi_at_x, phi_at_xF, psi_at_xF) -> np.ndarray:
    """Stack the four nonlinearity evaluations in the error-system order."""
    parts = [
        np.atleast_1d(np.asarray(v, dtype=float)).ravel()
        for v in (phi_at_x, psi_at_x, phi_at_xF, psi_at_xF)
    ]
    if parts[0].size != parts[2].size or parts[1].size != parts[3].size:
        raise DimensionError("phi/psi evaluations at x and x_F must have equal sizes")
    return np.concatenate(parts)


def gamma_norm_identity_error(gamma1: float, gamma2: float, n: int, p: int) -> float:
    """| ||Gamma|| - sqrt(g1^2 + g2^2) |, used as a structural self-check."""
    G = build_gamma(gamma1, gamma2, n, p)
    return abs(spectral_norm(G) - float(np.hypot(gamma1, gamma2)))
