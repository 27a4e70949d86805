"""Dense primal-dual interior-point method for small SDPs.

Solves

    min c'x   s.t.   X_j(x) = G0_j + sum_i x_i Gi_j >= 0  (PSD blocks)

with an infeasible start, HKM scaling and a Mehrotra predictor-corrector.
Linear equalities are eliminated up front through a nullspace basis, so the
core only ever sees PSD blocks.  Problem sides here are tens of rows; all
linear algebra is dense LAPACK.

Infeasibility is certified from the normalized dual iterate (Y with
A*(Y) ~ 0 and <G0, Y> < 0 proves the primal cone section empty);
unboundedness from a normalized primal improving ray.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"
NUMERICAL = "NumericalTrouble"
ITERLIMIT = "IterationLimit"


@dataclass
class IpmResult:
    status: str
    x: np.ndarray | None
    objective: float
    iterations: int
    primal_infeas: float
    dual_infeas: float
    rel_gap: float


def _max_step(S: np.ndarray, dS: np.ndarray) -> float:
    """Largest a with S + a dS psd (S > 0), via the generalized eigenproblem."""
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w = np.linalg.eigvalsh(S)
        shift = max(0.0, -w[0]) + 1e-14 * max(1.0, abs(w[-1]))
        L = np.linalg.cholesky(S + shift * np.eye(S.shape[0]))
    Linv = np.linalg.inv(L)
    M = Linv @ dS @ Linv.T
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    lam_min = w[0]
    if lam_min >= -1e-16:
        return np.inf
    return -1.0 / lam_min


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def solve_sdp_blocks(
    c: np.ndarray,
    blocks: list,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> IpmResult:
    """Core IPM: ``blocks`` is a list of (G0, Gtensor) with Gtensor (m, d, d)."""
    m = c.size
    dims = [G0.shape[0] for G0, _ in blocks]
    ntot = sum(dims)
    if ntot == 0:
        # unconstrained linear objective
        if np.linalg.norm(c) > 0:
            return IpmResult(UNBOUNDED, None, -np.inf, 0, 0.0, 0.0, 0.0)
        return IpmResult(OPTIMAL, np.zeros(m), 0.0, 0, 0.0, 0.0, 0.0)

    # equilibrate rows (per block) and columns (per variable); row scaling
    # leaves x unchanged, column scaling is undone on exit
    scaled = []
    for G0, G in blocks:
        s = max(
            float(np.abs(G0).max(initial=0.0)),
            float(np.abs(G).max(initial=0.0)) if G.size else 0.0,
            1e-10,
        )
        scaled.append((G0 / s, G / s))
    blocks = scaled
    col = np.zeros(m)
    for _, G in blocks:
        if G.size:
            col = np.maximum(col, np.abs(G).reshape(m, -1).max(axis=1))
    col = np.where(col > 1e-10, col, 1.0)
    blocks = [(G0, G / col[:, None, None]) for G0, G in blocks]
    c = c / col
    obj_scale = max(float(np.abs(c).max(initial=0.0)), 1e-10)
    c = c / obj_scale

    g0_scale = max(1.0, *(float(np.abs(G0).max(initial=0.0)) for G0, _ in blocks))
    c_scale = max(1.0, float(np.abs(c).max(initial=0.0)))
    rho = max(10.0, 2.0 * g0_scale)
    X = [rho * np.eye(d) for d in dims]
    Y = [max(10.0, 2.0 * c_scale) * np.eye(d) for d in dims]
    u = np.zeros(m)

    best = None
    best_score = np.inf

    def adjoint(Ys):
        out = np.zeros(m)
        for (G0, G), Yj in zip(blocks, Ys):
            out += np.einsum("iab,ab->i", G, Yj)
        return out

    def polish_dual(Y, r_d):
        """Correct Y inside the cone to exact dual feasibility.

        Least squares in the Y-weighted metric (dY = sum_i w_i Y G_i Y) keeps
        the correction proportionate to Y's spectrum, so the polished point
        stays positive whenever the scaled correction is small.  Any leftover
        roundoff indefiniteness is removed by a tiny identity shift; the
        caller re-measures every residual on the returned point.
        """
        if m == 0:
            return None
        gram = np.zeros((m, m))
        for (_, G), Yj in zip(blocks, Y):
            P = np.einsum("ab,jbc,cd->jad", Yj, G, Yj)  # Y G_j Y
            gram += np.einsum("iab,jba->ij", G, P)  # tr(G_i Y G_j Y)
        gram = 0.5 * (gram + gram.T)
        Ynew = [Yj.copy() for Yj in Y]
        res = r_d.copy()
        for _ in range(3):  # refine: the projection itself is computed in floats
            try:
                w = np.linalg.lstsq(gram, res, rcond=1e-12)[0]
            except np.linalg.LinAlgError:
                return None
            for (_, G), Yj in zip(blocks, Ynew):
                dS = np.einsum("i,iab->ab", w, G)
                Yj += Yj @ dS @ Yj
            res = c - adjoint(Ynew)
        out = []
        for Yp in Ynew:
            Yp = 0.5 * (Yp + Yp.T)
            wmin = float(np.linalg.eigvalsh(Yp)[0])
            scale = max(1.0, float(np.abs(Yp).max(initial=0.0)))
            if wmin < -1e-6 * scale:
                return None
            if wmin < 0.0:
                Yp = Yp + (-wmin + 1e-15 * scale) * np.eye(Yp.shape[0])
            out.append(Yp)
        return out

    status = ITERLIMIT
    iters = 0
    stall = 0
    tracked = np.inf
    dual_bound = -np.inf
    dual_bound_res = np.inf
    for it in range(max_iter):
        iters = it + 1
        R = [G0 + np.einsum("i,iab->ab", u, G) - Xj for (G0, G), Xj in zip(blocks, X)]
        r_d = c - adjoint(Y)
        gap = sum(float(np.sum(Xj * Yj)) for Xj, Yj in zip(X, Y))
        mu = gap / ntot
        pobj = float(c @ u)
        dobj = -sum(float(np.sum(G0 * Yj)) for (G0, _), Yj in zip(blocks, Y))
        pres = max(float(np.abs(Rj).max(initial=0.0)) for Rj in R) / (1.0 + g0_scale)
        dres = float(np.abs(r_d).max(initial=0.0)) / (1.0 + c_scale)
        relgap = abs(gap) / (1.0 + abs(pobj) + abs(dobj))

        if dres <= 1e4 * tol:
            # maintain the best exactly-feasible dual lower bound: weak
            # duality against the (feasible) primal iterate then certifies
            # optimality even when no single iterate meets every tolerance
            Ypol = polish_dual(Y, r_d)
            if Ypol is not None:
                rd_p = c - adjoint(Ypol)
                dres_p = float(np.abs(rd_p).max(initial=0.0)) / (1.0 + c_scale)
                dobj_p = -sum(float(np.sum(G0 * Yj)) for (G0, _), Yj in zip(blocks, Ypol))
                if dres_p <= tol and dobj_p > dual_bound:
                    dual_bound = dobj_p
                    dual_bound_res = dres_p

        score = max(pres, dres, relgap)
        if score < best_score:
            best_score = score
            best = (u.copy(), pres, dres, relgap, pobj)

        if pres <= tol and dres <= tol and relgap <= tol:
            status = OPTIMAL
            best = (u.copy(), pres, dres, relgap, pobj)
            break
        if pres <= tol and np.isfinite(dual_bound):
            truegap = pobj - dual_bound
            reltg = abs(truegap) / (1.0 + abs(pobj) + abs(dual_bound))
            if truegap >= -1e4 * tol and reltg <= tol:
                status = OPTIMAL
                best = (u.copy(), pres, dual_bound_res, reltg, pobj)
                break

        # primal infeasibility certificate: A*(Y) ~ 0 with <G0, Y> < 0
        ynorm = sum(float(np.linalg.norm(Yj)) for Yj in Y)
        if ynorm > 1e4:
            a_res = float(np.abs(adjoint(Y)).max(initial=0.0)) / ynorm
            g0y = sum(float(np.sum(G0 * Yj)) for (G0, _), Yj in zip(blocks, Y)) / ynorm
            if a_res <= 1e-9 * max(1.0, g0_scale) and g0y < -1e-10:
                status = INFEASIBLE
                break
        # dual infeasibility certificate: improving primal ray
        unorm = float(np.linalg.norm(u))
        if unorm > 1e6:
            uh = u / unorm
            ray_ok = all(
                float(np.linalg.eigvalsh(_sym(np.einsum("i,iab->ab", uh, G)))[0])
                >= -1e-9
                for _, G in blocks
            )
            if ray_ok and float(c @ uh) < -1e-10:
                status = UNBOUNDED
                break

        # give up only after a long window without meaningful progress
        if score < 0.9 * tracked:
            tracked = score
            stall = 0
        else:
            stall += 1
            if stall >= 20:
                status = NUMERICAL
                break

        try:
            Xinv = [np.linalg.inv(Xj) for Xj in X]
        except np.linalg.LinAlgError:
            status = NUMERICAL
            break

        # HKM Schur complement B[i1,i2] = sum_j tr(G_i1 Xinv G_i2 Y)
        B = np.zeros((m, m))
        T = []
        for (G0, G), Xi, Yj in zip(blocks, Xinv, Y):
            Tj = np.einsum("ab,ibc,cd->iad", Xi, G, Yj)
            B += np.einsum("iab,jba->ij", G, Tj)
            T.append(Tj)
        B = 0.5 * (B + B.T)

        def solve_direction(Rc):
            h = -r_d.copy()
            for (G0, G), Xi, Yj, Rj, Rcj in zip(blocks, Xinv, Y, R, Rc):
                h += np.einsum("iab,ba->i", G, Xi @ (Rcj - Rj @ Yj))
            try:
                du = np.linalg.solve(B + 1e-13 * np.trace(B) / m * np.eye(m), h)
            except np.linalg.LinAlgError:
                return None
            dX, dY = [], []
            for (G0, G), Xi, Yj, Rj, Rcj in zip(blocks, Xinv, Y, R, Rc):
                dG = np.einsum("i,iab->ab", du, G)
                dXj = Rj + dG
                dYj = Xi @ (Rcj - (Rj + dG) @ Yj)
                dX.append(_sym(dXj))
                dY.append(_sym(dYj))
            return du, dX, dY

        # predictor
        Rc_aff = [-Xj @ Yj for Xj, Yj in zip(X, Y)]
        pred = solve_direction(Rc_aff)
        if pred is None:
            status = NUMERICAL
            break
        du_a, dX_a, dY_a = pred
        tau = 0.9 if it < 3 else 0.98
        ap = min(1.0, tau * min(_max_step(Xj, dXj) for Xj, dXj in zip(X, dX_a)))
        ad = min(1.0, tau * min(_max_step(Yj, dYj) for Yj, dYj in zip(Y, dY_a)))
        gap_aff = sum(
            float(np.sum((Xj + ap * dXj) * (Yj + ad * dYj)))
            for Xj, dXj, Yj, dYj in zip(X, dX_a, Y, dY_a)
        )
        sigma = min(1.0, max(1e-10, (max(gap_aff, 0.0) / gap) ** 3))

        # corrector with second-order term
        Rc = [
            sigma * mu * np.eye(d) - Xj @ Yj - dXj @ dYj
            for d, Xj, Yj, dXj, dYj in zip(dims, X, Y, dX_a, dY_a)
        ]
        corr = solve_direction(Rc)
        if corr is None:
            status = NUMERICAL
            break
        du, dX, dY = corr
        ap = min(1.0, tau * min(_max_step(Xj, dXj) for Xj, dXj in zip(X, dX)))
        ad = min(1.0, tau * min(_max_step(Yj, dYj) for Yj, dYj in zip(Y, dY)))
        if ap < 1e-12 and ad < 1e-12:
            status = NUMERICAL
            break
        u = u + ap * du
        X = [_sym(Xj + ap * dXj) for Xj, dXj in zip(X, dX)]
        Y = [_sym(Yj + ad * dYj) for Yj, dYj in zip(Y, dY)]
        if not (np.all(np.isfinite(u)) and all(np.all(np.isfinite(Xj)) for Xj in X)):
            status = NUMERICAL
            break

    if best is None:
        return IpmResult(status, None, np.nan, iters, np.inf, np.inf, np.inf)
    ub, pres, dres, relgap, pobj = best
    x = ub / col if status in (OPTIMAL, ITERLIMIT, NUMERICAL) else None
    return IpmResult(status, x, pobj * obj_scale, iters, pres, dres, relgap)


def solve_sdp(
    c: np.ndarray,
    blocks: list,
    Aeq: np.ndarray | None = None,
    beq: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> IpmResult:
    """Equality-constrained front end: eliminates ``Aeq x = beq`` by nullspace."""
    c = np.asarray(c, dtype=float).ravel()
    m = c.size
    if Aeq is None or Aeq.shape[0] == 0:
        return solve_sdp_blocks(c, blocks, tol=tol, max_iter=max_iter)
    Aeq = np.asarray(Aeq, dtype=float)
    beq = np.asarray(beq, dtype=float).ravel()

    x_p, *_ = np.linalg.lstsq(Aeq, beq, rcond=None)
    res = np.linalg.norm(Aeq @ x_p - beq)
    if res > 1e-8 * max(1.0, np.linalg.norm(beq)):
        return IpmResult(INFEASIBLE, None, np.nan, 0, np.inf, np.inf, np.inf)
    U, sv, Vt = np.linalg.svd(Aeq)
    rank = int(np.sum(sv > 1e-12 * (sv[0] if sv.size else 1.0)))
    Z = Vt[rank:].T  # m x (m - rank)
    mz = Z.shape[1]

    red_blocks = []
    for G0, G in blocks:
        G0p = G0 + np.einsum("i,iab->ab", x_p, G)
        Gp = np.einsum("iab,ij->jab", G, Z) if mz else np.zeros((0, *G0.shape))
        red_blocks.append((_sym(G0p), Gp))

    if mz == 0:
        feas = all(
            float(np.linalg.eigvalsh(G0p)[0]) >= -tol * max(1.0, float(np.abs(G0p).max(initial=0.0)))
            for G0p, _ in red_blocks
        )
        obj = float(c @ x_p)
        if feas:
            return IpmResult(OPTIMAL, x_p, obj, 0, 0.0, 0.0, 0.0)
        return IpmResult(INFEASIBLE, None, np.nan, 0, np.inf, np.inf, np.inf)

    cz = Z.T @ c
    inner = solve_sdp_blocks(cz, red_blocks, tol=tol, max_iter=max_iter)
    x = None if inner.x is None else x_p + Z @ inner.x
    obj = inner.objective + float(c @ x_p) if np.isfinite(inner.objective) else inner.objective
    return IpmResult(
        inner.status, x, obj, inner.iterations, inner.primal_infeas, inner.dual_infeas, inner.rel_gap
    )
