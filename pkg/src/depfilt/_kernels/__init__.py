"""Stepping kernels: compiled extension when available, numpy fallback otherwise.

``march`` is the selected implementation; ``HAVE_COMPILED`` records which one.
Both consume a :class:`StepperSpec` and return identical results up to
floating-point roundoff (see ``benchmarks/bench_stepper.py``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import stepper_py
from .tape import Tape, compile_tape, tape_for_jacobian, tape_for_vector

try:  # pragma: no cover - build-env dependent
    from . import _stepper as _compiled

    HAVE_COMPILED = True
except ImportError:  # pragma: no cover
    _compiled = None
    HAVE_COMPILED = False


@dataclass
class StepperSpec:
    """Plant+filter data in the flat form both kernels consume."""

    n: int
    p: int
    qw: int
    m: int
    k: int
    l: int
    E: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    N: np.ndarray
    AF: np.ndarray
    BF: np.ndarray
    E1: np.ndarray
    E2: np.ndarray
    phi_tape: Tape
    dphi_tape: Tape
    psi_tape: Tape
    dpsi_tape: Tape
    w_tape: Tape
    u_tape: Tape
    F_tape: Tape | None


def march(spec: StepperSpec, x0, xF0, nsteps, dt, newton_tol, newton_maxit):
    impl = _compiled if HAVE_COMPILED else stepper_py
    return impl.march(spec, x0, xF0, int(nsteps), float(dt), float(newton_tol), int(newton_maxit))


def march_fallback(spec: StepperSpec, x0, xF0, nsteps, dt, newton_tol, newton_maxit):
    """Always use the pure-Python stepper (benchmark/testing hook)."""
    return stepper_py.march(
        spec, x0, xF0, int(nsteps), float(dt), float(newton_tol), int(newton_maxit)
    )


__all__ = [
    "HAVE_COMPILED",
    "StepperSpec",
    "Tape",
    "compile_tape",
    "march",
    "march_fallback",
    "tape_for_jacobian",
    "tape_for_vector",
]
