"""Pure-numpy implicit-Euler stepper (fallback when the extension is absent).

Marches the plant and filter DAEs with one Newton solve each per step,
using the exact Jacobian ``E/dt - A_eff - dPhi``.  Mirrors the compiled
kernel in ``_stepper.pyx`` op for op; the benchmark compares the two.
"""

from __future__ import annotations

import numpy as np


def march(spec, x0, xF0, nsteps, dt, newton_tol, newton_maxit):
    """Integrate ``nsteps`` implicit-Euler steps; returns partial results on failure.

    Returns ``(X, XF, W, resid, fail_step)`` where ``fail_step`` is 0 when the
    whole march succeeded, else the 1-based step index at which Newton failed
    (arrays are filled up to the preceding step).
    """
    n, p, qw, m = spec.n, spec.p, spec.qw, spec.m
    E, A, B, C, D = spec.E, spec.A, spec.B, spec.C, spec.D
    AF, BF, E1, E2 = spec.AF, spec.BF, spec.E1, spec.E2

    X = np.zeros((nsteps + 1, n))
    XF = np.zeros((nsteps + 1, n))
    W = np.zeros((nsteps + 1, qw))
    resid = np.zeros(nsteps + 1)
    X[0] = x0
    XF[0] = xF0
    if qw:
        W[0] = spec.w_tape.eval_scalar((), (), 0.0)

    u_t = np.zeros(m)
    phi = np.empty(n)
    dphi = np.empty(n * n)
    psi = np.empty(p)
    dpsi = np.empty(p * n)

    def uncertainty(t):
        if spec.F_tape is None:
            return A, C
        F = spec.F_tape.eval_scalar((), (), t).reshape(spec.k, spec.l)
        dA = spec.M1 @ F @ spec.N
        dC = spec.M2 @ F @ spec.N
        return A + dA, C + dC

    E_over_dt = E / dt

    def newton(v, rhs_mat, extra, jac_extra, x_prev):
        # solve E (v - x_prev)/dt = rhs_mat @ v + extra(v), exact Jacobian
        for _ in range(newton_maxit):
            g, dg = extra(v)
            r = E_over_dt @ (v - x_prev) - rhs_mat @ v - g
            rn = np.linalg.norm(r)
            if rn <= newton_tol * (1.0 + np.linalg.norm(v)):
                return v, rn, True
            J = E_over_dt - rhs_mat - jac_extra(dg)
            try:
                v = v - np.linalg.solve(J, r)
            except np.linalg.LinAlgError:
                return v, rn, False
            if not np.all(np.isfinite(v)):
                return v, np.inf, False
        g, _ = extra(v)
        r = E_over_dt @ (v - x_prev) - rhs_mat @ v - g
        rn = np.linalg.norm(r)
        return v, rn, rn <= newton_tol * (1.0 + np.linalg.norm(v))

    for step in range(1, nsteps + 1):
        t1 = step * dt
        if m:
            u_t = spec.u_tape.eval_scalar((), (), t1)
        w1 = spec.w_tape.eval_scalar((), (), t1) if qw else np.zeros(0)
        Aeff, Ceff = uncertainty(t1)
        Bw = B @ w1 if qw else np.zeros(n)

        def plant_extra(v):
            spec.phi_tape.eval_scalar(v, u_t, t1, out=phi)
            spec.dphi_tape.eval_scalar(v, u_t, t1, out=dphi)
            return phi + Bw, dphi.reshape(n, n)

        x1, rn_p, ok = newton(X[step - 1].copy(), Aeff, plant_extra, lambda dg: dg, X[step - 1])
        if not ok:
            return X, XF, W, resid, step

        spec.psi_tape.eval_scalar(x1, u_t, t1, out=psi)
        y1 = Ceff @ x1 + psi + (D @ w1 if qw else 0.0)
        BFy = BF @ y1

        def filt_extra(v):
            spec.phi_tape.eval_scalar(v, u_t, t1, out=phi)
            spec.psi_tape.eval_scalar(v, u_t, t1, out=psi)
            spec.dphi_tape.eval_scalar(v, u_t, t1, out=dphi)
            spec.dpsi_tape.eval_scalar(v, u_t, t1, out=dpsi)
            g = E1 @ phi + E2 @ psi + BFy
            dg = E1 @ dphi.reshape(n, n) + E2 @ dpsi.reshape(p, n)
            return g, dg

        xF1, rn_f, ok = newton(
            XF[step - 1].copy(), AF, filt_extra, lambda dg: dg, XF[step - 1]
        )
        if not ok:
            return X, XF, W, resid, step

        X[step] = x1
        XF[step] = xF1
        if qw:
            W[step] = w1
        resid[step] = max(rn_p, rn_f)

    return X, XF, W, resid, 0
