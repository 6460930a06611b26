"""Dense primal-dual interior-point engine for LMI-form problems.

Solves   min c'y   s.t.  A y = b,   M_k(y) + C_k  PSD for each block,

with an infeasible-start Mehrotra predictor-corrector using the HKM
direction.  Designed for the desk-scale relaxations this package builds
(a few thousand scalar variables, block sides up to a few hundred), where
the dominant costs are the Schur-complement assembly (organized around the
sparse per-variable coefficient structure of moment matrices) and one dense
Cholesky per iteration.  Everything is deterministic.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp


@dataclass
class BlockData:
    side: int
    Sk: sp.csr_matrix          # (side^2, n) both triangles
    const: np.ndarray          # (side, side) constant part
    var_ids: np.ndarray        # distinct variables appearing in the block
    cell_start: np.ndarray     # slices into the cell arrays, per variable
    cell_p: np.ndarray
    cell_q: np.ndarray
    cell_a: np.ndarray
    gather_rows: np.ndarray    # all cells (for the H gather): row index
    gather_cols: np.ndarray
    gather_B: sp.csr_matrix    # (ncells, nblockvars) incidence with coefs


def _prepare_blocks(problem) -> list[BlockData]:
    out = []
    n = problem.nvars
    for blk in problem.blocks:
        order = np.argsort(blk.var_idx, kind="stable")
        var_sorted = blk.var_idx[order]
        pos_sorted = blk.entry_pos[order]
        coef_sorted = blk.coefs[order]
        p = pos_sorted // blk.side
        q = pos_sorted % blk.side
        uniq, starts = np.unique(var_sorted, return_index=True)
        starts = np.append(starts, len(var_sorted))
        const = np.zeros((blk.side, blk.side))
        if blk.const_pos is not None:
            np.add.at(const.ravel(), blk.const_pos, blk.const_val)
        Sk = sp.coo_matrix(
            (blk.coefs, (blk.entry_pos, blk.var_idx)), shape=(blk.side**2, n)
        ).tocsr()
        local = np.searchsorted(uniq, var_sorted)
        gather_B = sp.coo_matrix(
            (coef_sorted, (np.arange(len(var_sorted)), local)),
            shape=(len(var_sorted), len(uniq)),
        ).tocsr()
        out.append(BlockData(
            side=blk.side, Sk=Sk, const=0.5 * (const + const.T),
            var_ids=uniq, cell_start=starts,
            cell_p=p, cell_q=q, cell_a=coef_sorted,
            gather_rows=p, gather_cols=q, gather_B=gather_B,
        ))
    return out


def _assemble_schur(H: np.ndarray, bd: BlockData, Zinv: np.ndarray,
                    Lam: np.ndarray, chunk_bytes: int = 2 * 10**8) -> None:
    """Accumulate the HKM kernel H[v,w] = tr(V_v Z^-1 V_w Lam) for one block.

    Per variable v:  X_v = Z^-1 V_v Lam  (small GEMM over its cells); then
    H[v, w] = sum over w's cells (r,t,b) of b * X_v[t, r], done as one
    dense-sparse product per chunk of variables.
    """
    s = bd.side
    nv = len(bd.var_ids)
    if nv == 0:
        return
    chunk = max(1, min(nv, int(chunk_bytes // (8 * s * s))))
    ncells = len(bd.cell_a)
    for lo in range(0, nv, chunk):
        hi = min(nv, lo + chunk)
        X = np.empty((hi - lo, s, s))
        for j in range(lo, hi):
            a, bnd = bd.cell_start[j], bd.cell_start[j + 1]
            P = bd.cell_p[a:bnd]
            Q = bd.cell_q[a:bnd]
            W = bd.cell_a[a:bnd]
            X[j - lo] = Zinv[:, P] @ (W[:, None] * Lam[Q, :])
        # gather X[., t, r] at every cell of the block, then push through
        # the cell->variable incidence to get H columns
        G = X[:, bd.gather_cols, bd.gather_rows]
        Hc = G @ bd.gather_B if ncells else np.zeros((hi - lo, nv))
        rows = bd.var_ids[lo:hi]
        H[np.ix_(rows, bd.var_ids)] += Hc


def _max_step(Z: np.ndarray, dZ: np.ndarray, chol) -> float:
    """Largest alpha with Z + alpha dZ staying positive definite."""
    L = chol
    W = sla.solve_triangular(L, dZ, lower=True)
    W = sla.solve_triangular(L, W.T, lower=True)
    try:
        lam_min = float(np.linalg.eigvalsh(0.5 * (W + W.T))[0])
    except np.linalg.LinAlgError:
        return 0.0
    if lam_min >= 0:
        return 1.0
    return min(1.0, -1.0 / lam_min)


def solve_interior_point(problem, A_k, b_k, row_idx, row_scales, cfg, notes,
                         t0: float):
    """Runs the predictor-corrector loop; returns the same payload shape the
    splitting path produces (y, multipliers, residual dict, status, trace)."""
    n = problem.nvars
    m = A_k.shape[0]
    c = np.asarray(problem.c, dtype=float)
    A = A_k.tocsr()
    At = A.T.tocsr()
    b = np.asarray(b_k, dtype=float)
    blocks = _prepare_blocks(problem)
    sides = np.array([bd.side for bd in blocks])
    total_dim = int(sides.sum())

    y = np.zeros(n)
    nu = np.zeros(m)
    Z = []
    Lam = []
    for bd in blocks:
        M0 = (bd.Sk @ y).reshape(bd.side, bd.side) + bd.const
        shift = max(1.0, -float(np.linalg.eigvalsh(0.5 * (M0 + M0.T))[0]) * 1.5)
        Z.append(0.5 * (M0 + M0.T) + shift * np.eye(bd.side))
        Lam.append(np.eye(bd.side))

    b_norm = 1.0 + np.linalg.norm(b)
    c_norm = 1.0 + np.linalg.norm(c)
    trace = []
    status = "max-iterations"
    max_iter = min(200, max(20, cfg.max_iterations))
    gamma = 0.99

    obj = float(c @ y)
    dual_obj = 0.0
    rp_rel = rd_rel = gap_rel = np.inf

    for it in range(1, max_iter + 1):
        # residuals
        r_p = b - A @ y
        SLam = np.zeros(n)
        for bd, L_k in zip(blocks, Lam):
            SLam += bd.Sk.T @ L_k.ravel()
        r_d = c - At @ nu - SLam
        r_z = []
        for bd, Z_k in zip(blocks, Z):
            Mk = (bd.Sk @ y).reshape(bd.side, bd.side) + bd.const
            r_z.append(0.5 * (Mk + Mk.T) - Z_k)

        mu = sum(float(np.tensordot(Z_k, L_k)) for Z_k, L_k in zip(Z, Lam)) / total_dim
        obj = float(c @ y)
        dual_obj = float(b @ nu) - sum(
            float(np.tensordot(bd.const, L_k)) for bd, L_k in zip(blocks, Lam)
        )
        rp_rel = np.linalg.norm(r_p) / b_norm
        rz_rel = max(np.linalg.norm(rz) for rz in r_z) / c_norm if r_z else 0.0
        rd_rel = np.linalg.norm(r_d) / c_norm
        gap_rel = abs(obj - dual_obj) / (1.0 + abs(obj) + abs(dual_obj))
        trace.append({"iter": it, "rp": max(rp_rel, rz_rel), "rd": rd_rel,
                      "eq": rp_rel, "gap": gap_rel, "obj": obj, "rho": mu})
        if cfg.verbose:
            print(f"  ipm {it:3d}  mu {mu:9.2e}  rp {rp_rel:8.1e}  rz {rz_rel:8.1e}  "
                  f"rd {rd_rel:8.1e}  gap {gap_rel:8.1e}  obj {obj:+.8f}")

        if max(rp_rel, rz_rel) < cfg.tol_feas and rd_rel < 10 * cfg.tol_feas \
                and gap_rel < cfg.tol_gap:
            status = "optimal"
            break
        state = np.linalg.norm(y) + np.linalg.norm(nu) + sum(
            float(np.linalg.norm(L_k)) for L_k in Lam
        )
        if state > cfg.divergence_threshold:
            status = "infeasible"
            notes.append("interior-point iterates diverged (infeasibility certificate)")
            break

        # factor the slacks; fall back to a centering push if near-singular
        Zinv = []
        Zchol = []
        ok = True
        for Z_k in Z:
            try:
                L = np.linalg.cholesky(Z_k)
            except np.linalg.LinAlgError:
                ok = False
                break
            Zchol.append(L)
            Linv = sla.solve_triangular(L, np.eye(Z_k.shape[0]), lower=True)
            Zinv.append(Linv.T @ Linv)
        if not ok:
            status = "max-iterations"
            notes.append("slack lost positive definiteness; stopping early")
            break

        H = np.zeros((n, n))
        for bd, Zi, L_k in zip(blocks, Zinv, Lam):
            _assemble_schur(H, bd, Zi, L_k)
        H = 0.5 * (H + H.T)

        h_scale = float(np.abs(np.diag(H)).max()) or 1.0
        Hf = None
        for jit in (1e-14, 1e-11, 1e-8):
            try:
                Hf = sla.cho_factor(H + jit * h_scale * np.eye(n), lower=True,
                                    check_finite=False)
                break
            except np.linalg.LinAlgError:
                continue
        if Hf is None:
            notes.append("Schur factorization lost definiteness; stopping early")
            break
        HinvAt = sla.cho_solve(Hf, At.toarray(), check_finite=False) if m else np.zeros((n, 0))
        if m:
            schur = A @ HinvAt
            s_scale = float(np.abs(np.diag(schur)).max()) or 1.0
            Sf = None
            for jit in (1e-14, 1e-11, 1e-8):
                try:
                    Sf = sla.cho_factor(0.5 * (schur + schur.T)
                                        + jit * s_scale * np.eye(m),
                                        lower=True, check_finite=False)
                    break
                except np.linalg.LinAlgError:
                    continue
            if Sf is None:
                notes.append("equality Schur factorization failed; stopping early")
                break

        def solve_newton(sigma_mu: float, corr=None):
            # complementarity residual R_k = sigma*mu*I - Z Lam (- dZ dLam);
            # reduced system:  H dy - A' dnu = g - r_d,   A dy = r_p
            rhs1 = -r_d
            for bd, Zi, Z_k, L_k, rz_k, idx in zip(blocks, Zinv, Z, Lam, r_z,
                                                   range(len(blocks))):
                Rc = sigma_mu * np.eye(bd.side) - Z_k @ L_k
                if corr is not None:
                    Rc -= corr[0][idx] @ corr[1][idx]
                rhs1 = rhs1 + bd.Sk.T @ (Zi @ Rc - Zi @ rz_k @ L_k).ravel()
            if m:
                t1 = sla.cho_solve(Hf, rhs1, check_finite=False)
                dnu = sla.cho_solve(Sf, r_p - A @ t1, check_finite=False)
                dy = sla.cho_solve(Hf, rhs1 + At @ dnu, check_finite=False)
            else:
                dnu = np.zeros(0)
                dy = sla.cho_solve(Hf, rhs1, check_finite=False)
            dZ = []
            dLam = []
            for bd, Zi, Z_k, L_k, rz_k, idx in zip(blocks, Zinv, Z, Lam, r_z,
                                                   range(len(blocks))):
                Md = (bd.Sk @ dy).reshape(bd.side, bd.side)
                dZ_k = 0.5 * (Md + Md.T) + rz_k
                Rc = sigma_mu * np.eye(bd.side) - Z_k @ L_k
                if corr is not None:
                    Rc -= corr[0][idx] @ corr[1][idx]
                dL = Zi @ (Rc - dZ_k @ L_k)
                dLam.append(0.5 * (dL + dL.T))
                dZ.append(dZ_k)
            return dy, dnu, dZ, dLam

        # predictor
        dy_a, dnu_a, dZ_a, dLam_a = solve_newton(0.0)
        ap = min(_max_step(Z_k, dZ_k, Lc) for Z_k, dZ_k, Lc in zip(Z, dZ_a, Zchol))
        ad = 1.0
        for L_k, dL_k in zip(Lam, dLam_a):
            try:
                Lc = np.linalg.cholesky(L_k)
            except np.linalg.LinAlgError:
                ad = 0.0
                break
            ad = min(ad, _max_step(L_k, dL_k, Lc))
        mu_aff = sum(
            float(np.tensordot(Z_k + ap * dZ_k, L_k + ad * dL_k))
            for Z_k, dZ_k, L_k, dL_k in zip(Z, dZ_a, Lam, dLam_a)
        ) / total_dim
        sigma = min(1.0, max(0.0, mu_aff / mu)) ** 3

        # corrector
        dy, dnu, dZ, dLam = solve_newton(sigma * mu, corr=(dZ_a, dLam_a))
        ap = min(_max_step(Z_k, dZ_k, Lc) for Z_k, dZ_k, Lc in zip(Z, dZ, Zchol))
        ad = 1.0
        for L_k, dL_k in zip(Lam, dLam):
            try:
                Lc = np.linalg.cholesky(L_k)
            except np.linalg.LinAlgError:
                ad = 0.0
                break
            ad = min(ad, _max_step(L_k, dL_k, Lc))
        ap *= gamma
        ad *= gamma
        if ap <= 1e-10 and ad <= 1e-10:
            notes.append("step sizes collapsed; stopping early")
            break

        y = y + ap * dy
        nu = nu + ad * dnu
        Z = [Z_k + ap * dZ_k for Z_k, dZ_k in zip(Z, dZ)]
        Lam = [L_k + ad * dL_k for L_k, dL_k in zip(Lam, dLam)]

    # final metrics on the returned iterate; a run that stopped early for
    # numerical reasons may still satisfy the tolerances
    r_p = b - A @ y
    SLam = np.zeros(n)
    for bd, L_k in zip(blocks, Lam):
        SLam += bd.Sk.T @ L_k.ravel()
    rd_rel = np.linalg.norm(c - At @ nu - SLam) / c_norm
    obj = float(c @ y)
    dual_obj = float(b @ nu) - sum(
        float(np.tensordot(bd.const, L_k)) for bd, L_k in zip(blocks, Lam)
    )
    gap_rel = abs(obj - dual_obj) / (1.0 + abs(obj) + abs(dual_obj))
    rp_rel = np.linalg.norm(r_p) / b_norm
    rz_rel = 0.0
    for bd, Z_k in zip(blocks, Z):
        Mk = (bd.Sk @ y).reshape(bd.side, bd.side) + bd.const
        rz_rel = max(rz_rel, np.linalg.norm(0.5 * (Mk + Mk.T) - Z_k) / c_norm)
    if status == "max-iterations" and max(rp_rel, rz_rel) < cfg.tol_feas \
            and rd_rel < 10 * cfg.tol_feas and gap_rel < cfg.tol_gap:
        status = "optimal"

    eq_res = np.linalg.norm(problem.A @ y - problem.b) / (1.0 + np.linalg.norm(problem.b))
    min_eig = np.inf
    for bd in blocks:
        Mk = (bd.Sk @ y).reshape(bd.side, bd.side) + bd.const
        min_eig = min(min_eig, float(np.linalg.eigvalsh(0.5 * (Mk + Mk.T))[0]))
    multipliers = np.zeros(problem.A.shape[0])
    if m:
        multipliers[row_idx] = nu / row_scales
    return {
        "y": y,
        "eq_multipliers": multipliers,
        "block_multipliers": Lam,
        "objective": float(c @ y),
        "dual_objective": dual_obj,
        "residuals": {
            "eq_residual": eq_res,
            "cone_residual": rp_rel,
            "dual_residual": rd_rel,
            "min_block_eig": min_eig,
            "rel_gap": gap_rel,
        },
        "status": status,
        "iterations": len(trace),
        "trace": trace,
    }
