# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implicit-Euler stepper: tape evaluation and Newton in C loops.

Same contract as ``stepper_py.march``; selected at import by the package
when the extension built.
"""

from libc.math cimport sin, cos, tan, exp, log, tanh, fabs, copysign

import numpy as np

cimport numpy as cnp

cnp.import_array()

DEF OP_LOADC = 0
DEF OP_ADD = 1
DEF OP_SUB = 2
DEF OP_MUL = 3
DEF OP_DIV = 4
DEF OP_NEG = 5
DEF OP_SIN = 6
DEF OP_COS = 7
DEF OP_TAN = 8
DEF OP_EXP = 9
DEF OP_LN = 10
DEF OP_TANH = 11
DEF OP_ABS = 12
DEF OP_SIGN = 13
DEF OP_POWI = 14


cdef class CTape:
    cdef int n_x, n_u, n_ops, n_out, n_slots
    cdef cnp.int32_t[::1] code, arg1, arg2, outputs
    cdef double[::1] consts
    cdef double[::1] work

    def __init__(self, tape):
        self.n_x = tape.n_x
        self.n_u = tape.n_u
        self.code = np.ascontiguousarray(tape.code, dtype=np.int32)
        self.arg1 = np.ascontiguousarray(tape.arg1, dtype=np.int32)
        self.arg2 = np.ascontiguousarray(tape.arg2, dtype=np.int32)
        self.outputs = np.ascontiguousarray(tape.outputs, dtype=np.int32)
        self.consts = np.ascontiguousarray(tape.consts, dtype=np.float64)
        self.n_ops = self.code.shape[0]
        self.n_out = self.outputs.shape[0]
        self.n_slots = tape.n_slots
        self.work = np.zeros(self.n_slots, dtype=np.float64)

    cdef void eval(self, double* x, double* u, double t, double* out) noexcept:
        cdef int i, op, a, b, dst
        cdef double v
        cdef int base = self.n_x + self.n_u + 1
        cdef double* w = &self.work[0] if self.n_slots > 0 else NULL
        for i in range(self.n_x):
            w[i] = x[i]
        for i in range(self.n_u):
            w[self.n_x + i] = u[i]
        w[self.n_x + self.n_u] = t
        for i in range(self.n_ops):
            op = self.code[i]
            a = self.arg1[i]
            b = self.arg2[i]
            dst = base + i
            if op == OP_LOADC:
                w[dst] = self.consts[a]
            elif op == OP_ADD:
                w[dst] = w[a] + w[b]
            elif op == OP_SUB:
                w[dst] = w[a] - w[b]
            elif op == OP_MUL:
                w[dst] = w[a] * w[b]
            elif op == OP_DIV:
                w[dst] = w[a] / w[b]
            elif op == OP_NEG:
                w[dst] = -w[a]
            elif op == OP_SIN:
                w[dst] = sin(w[a])
            elif op == OP_COS:
                w[dst] = cos(w[a])
            elif op == OP_TAN:
                w[dst] = tan(w[a])
            elif op == OP_EXP:
                w[dst] = exp(w[a])
            elif op == OP_LN:
                w[dst] = log(w[a])
            elif op == OP_TANH:
                w[dst] = tanh(w[a])
            elif op == OP_ABS:
                w[dst] = fabs(w[a])
            elif op == OP_SIGN:
                v = w[a]
                w[dst] = 0.0 if v == 0.0 else copysign(1.0, v)
            elif op == OP_POWI:
                w[dst] = w[a] ** b
        for i in range(self.n_out):
            out[i] = w[self.outputs[i]]


cdef int solve_inplace(double* J, double* r, int n, int* piv) noexcept:
    """Gaussian elimination with partial pivoting; J is n*n row-major, destroyed."""
    cdef int i, j, k, mrow
    cdef double mx, v, f, tmp
    for i in range(n):
        piv[i] = i
    for k in range(n):
        mrow = k
        mx = fabs(J[k * n + k])
        for i in range(k + 1, n):
            v = fabs(J[i * n + k])
            if v > mx:
                mx = v
                mrow = i
        if mx == 0.0:
            return 1
        if mrow != k:
            for j in range(n):
                tmp = J[k * n + j]
                J[k * n + j] = J[mrow * n + j]
                J[mrow * n + j] = tmp
            tmp = r[k]
            r[k] = r[mrow]
            r[mrow] = tmp
        for i in range(k + 1, n):
            f = J[i * n + k] / J[k * n + k]
            if f != 0.0:
                r[i] -= f * r[k]
                for j in range(k, n):
                    J[i * n + j] -= f * J[k * n + j]
    for k in range(n - 1, -1, -1):
        v = r[k]
        for j in range(k + 1, n):
            v -= J[k * n + j] * r[j]
        r[k] = v / J[k * n + k]
    return 0


cdef double vec_norm(double* v, int n) noexcept:
    cdef double s = 0.0
    cdef int i
    for i in range(n):
        s += v[i] * v[i]
    return s ** 0.5


def march(spec, x0, xF0, int nsteps, double dt, double newton_tol, int newton_maxit):
    cdef int n = spec.n, p = spec.p, qw = spec.qw, m = spec.m
    cdef int k = spec.k, l = spec.l
    cdef double[:, ::1] E = np.ascontiguousarray(spec.E)
    cdef double[:, ::1] A = np.ascontiguousarray(spec.A)
    cdef double[:, ::1] B = np.ascontiguousarray(spec.B).reshape(n, qw)
    cdef double[:, ::1] C = np.ascontiguousarray(spec.C).reshape(p, n)
    cdef double[:, ::1] D = np.ascontiguousarray(spec.D).reshape(p, qw)
    cdef double[:, ::1] M1 = np.ascontiguousarray(spec.M1).reshape(n, k)
    cdef double[:, ::1] M2 = np.ascontiguousarray(spec.M2).reshape(p, k)
    cdef double[:, ::1] Nmat = np.ascontiguousarray(spec.N).reshape(l, n)
    cdef double[:, ::1] AF = np.ascontiguousarray(spec.AF)
    cdef double[:, ::1] BF = np.ascontiguousarray(spec.BF).reshape(n, p)
    cdef double[:, ::1] E1 = np.ascontiguousarray(spec.E1)
    cdef double[:, ::1] E2 = np.ascontiguousarray(spec.E2).reshape(n, p)

    cdef CTape phi_tape = CTape(spec.phi_tape)
    cdef CTape dphi_tape = CTape(spec.dphi_tape)
    cdef CTape psi_tape = CTape(spec.psi_tape)
    cdef CTape dpsi_tape = CTape(spec.dpsi_tape)
    cdef CTape w_tape = CTape(spec.w_tape) if qw else None
    cdef CTape u_tape = CTape(spec.u_tape) if m else None
    cdef bint has_unc = spec.F_tape is not None
    cdef CTape F_tape = CTape(spec.F_tape) if has_unc else None

    X_arr = np.zeros((nsteps + 1, n))
    XF_arr = np.zeros((nsteps + 1, n))
    W_arr = np.zeros((nsteps + 1, qw))
    resid_arr = np.zeros(nsteps + 1)
    cdef double[:, ::1] X = X_arr
    cdef double[:, ::1] XF = XF_arr
    cdef double[:, ::1] W = W_arr
    cdef double[::1] resid = resid_arr
    cdef int i, j, a, it, step, fail
    cdef double t1, rn, vn, acc

    for i in range(n):
        X[0, i] = x0[i]
        XF[0, i] = xF0[i]

    buf = np.zeros(
        7 * n + 2 * p + qw + m + k * l + 3 * n * n + p * n + n * n + n, dtype=np.float64
    )
    cdef double[::1] scratch = buf
    cdef double* v = &scratch[0]
    cdef double* r = v + n
    cdef double* phi = r + n
    cdef double* Bw = phi + n
    cdef double* y1 = Bw + n  # length p
    cdef double* psi = y1 + p
    cdef double* w1 = psi + p  # length qw
    cdef double* u1 = w1 + qw  # length m
    cdef double* Fv = u1 + m  # length k*l
    cdef double* dphi = Fv + k * l  # n*n
    cdef double* Aeff = dphi + n * n  # n*n
    cdef double* Jm = Aeff + n * n  # n*n
    cdef double* dpsi = Jm + n * n  # p*n
    cdef double* xprev = dpsi + p * n  # n
    cdef double* extra = xprev + n  # n (BF@y1 for the filter solve)
    ibuf = np.zeros(n, dtype=np.intc)
    cdef int[::1] pivbuf = ibuf
    cdef int* piv = &pivbuf[0]

    Ceff_arr = np.array(spec.C, dtype=np.float64, copy=True).reshape(p, n)
    cdef double[:, ::1] Ceff = Ceff_arr

    if qw:
        w_tape.eval(NULL, NULL, 0.0, w1)
        for j in range(qw):
            W[0, j] = w1[j]

    fail = 0
    for step in range(1, nsteps + 1):
        t1 = step * dt
        if m:
            u_tape.eval(NULL, NULL, t1, u1)
        if qw:
            w_tape.eval(NULL, NULL, t1, w1)

        # effective A, C under the time-varying uncertainty M1 F(t) N, M2 F(t) N
        for i in range(n):
            for j in range(n):
                Aeff[i * n + j] = A[i, j]
        for i in range(p):
            for j in range(n):
                Ceff[i, j] = C[i, j]
        if has_unc:
            F_tape.eval(NULL, NULL, t1, Fv)
            for i in range(n):
                for j in range(n):
                    acc = 0.0
                    for a in range(k):
                        for it in range(l):
                            acc += M1[i, a] * Fv[a * l + it] * Nmat[it, j]
                    Aeff[i * n + j] += acc
            for i in range(p):
                for j in range(n):
                    acc = 0.0
                    for a in range(k):
                        for it in range(l):
                            acc += M2[i, a] * Fv[a * l + it] * Nmat[it, j]
                    Ceff[i, j] += acc

        for i in range(n):
            acc = 0.0
            for j in range(qw):
                acc += B[i, j] * w1[j]
            Bw[i] = acc

        # --- plant Newton: E (v - x)/dt = Aeff v + phi(v) + B w
        for i in range(n):
            xprev[i] = X[step - 1, i]
            v[i] = xprev[i]
        rn = -1.0
        for it in range(newton_maxit + 1):
            phi_tape.eval(v, u1, t1, phi)
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc += E[i, j] * (v[j] - xprev[j]) / dt - Aeff[i * n + j] * v[j]
                r[i] = acc - phi[i] - Bw[i]
            rn = vec_norm(r, n)
            vn = vec_norm(v, n)
            if rn <= newton_tol * (1.0 + vn):
                break
            if it == newton_maxit or rn != rn:
                fail = step
                break
            dphi_tape.eval(v, u1, t1, dphi)
            for i in range(n):
                for j in range(n):
                    Jm[i * n + j] = E[i, j] / dt - Aeff[i * n + j] - dphi[i * n + j]
            if solve_inplace(Jm, r, n, piv):
                fail = step
                break
            for i in range(n):
                v[i] -= r[i]
        if fail:
            break
        for i in range(n):
            X[step, i] = v[i]
        resid[step] = rn

        # --- plant output y = Ceff x + psi(x) + D w
        psi_tape.eval(v, u1, t1, psi)
        for i in range(p):
            acc = psi[i]
            for j in range(n):
                acc += Ceff[i, j] * v[j]
            for j in range(qw):
                acc += D[i, j] * w1[j]
            y1[i] = acc
        for i in range(n):
            acc = 0.0
            for j in range(p):
                acc += BF[i, j] * y1[j]
            extra[i] = acc

        # --- filter Newton: E (v - xF)/dt = AF v + BF y + E1 phi(v) + E2 psi(v)
        for i in range(n):
            xprev[i] = XF[step - 1, i]
            v[i] = xprev[i]
        for it in range(newton_maxit + 1):
            phi_tape.eval(v, u1, t1, phi)
            psi_tape.eval(v, u1, t1, psi)
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc += E[i, j] * (v[j] - xprev[j]) / dt - AF[i, j] * v[j] - E1[i, j] * phi[j]
                for j in range(p):
                    acc -= E2[i, j] * psi[j]
                r[i] = acc - extra[i]
            rn = vec_norm(r, n)
            vn = vec_norm(v, n)
            if rn <= newton_tol * (1.0 + vn):
                break
            if it == newton_maxit or rn != rn:
                fail = step
                break
            dphi_tape.eval(v, u1, t1, dphi)
            dpsi_tape.eval(v, u1, t1, dpsi)
            for i in range(n):
                for j in range(n):
                    acc = E[i, j] / dt - AF[i, j]
                    for a in range(n):
                        acc -= E1[i, a] * dphi[a * n + j]
                    for a in range(p):
                        acc -= E2[i, a] * dpsi[a * n + j]
                    Jm[i * n + j] = acc
            if solve_inplace(Jm, r, n, piv):
                fail = step
                break
            for i in range(n):
                v[i] -= r[i]
        if fail:
            break
        for i in range(n):
            XF[step, i] = v[i]
        if qw:
            for j in range(qw):
                W[step, j] = w1[j]
        if rn > resid[step]:
            resid[step] = rn

    return X_arr, XF_arr, W_arr, resid_arr, fail
