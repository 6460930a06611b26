"""First-order conic solver for the assembled moment relaxations.

Problems have the shape

    min  c'y   s.t.   A y = b,    mat_k(S_k y + s_k) PSD for every block k.

The solver is an operator-splitting scheme: each iteration projects onto the
affine subspace {A y = b} jointly with the least-squares coupling to the
block slacks (through one cached sparse KKT factorization), then projects the
slacks blockwise onto the PSD cone, with over-relaxation and scaled dual
updates.  It is deterministic: fixed iteration order, no randomized pivoting.

The module also speaks the SDPA sparse interchange format so problems can be
cross-checked against external SDP solvers, and reconstructs the dual
polynomial (value-function subsolution) from the equality multipliers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .polyalg import Polynomial, VarSpace


class SolverBreakdown(RuntimeError):
    """Numerical breakdown (non-finite iterates); carries the trace so far."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


class DualUnavailableError(RuntimeError):
    """Requested dual quantities were not produced by the solve."""


@dataclass
class BlockSpec:
    """One PSD block: entries are linear in the decision vector.

    ``entry_pos`` indexes the flattened side*side matrix (both triangles
    present); parallel arrays give decision indices and coefficients.
    Constant offsets (``const_*``) only occur for imported problems.
    """

    side: int
    entry_pos: np.ndarray
    var_idx: np.ndarray
    coefs: np.ndarray
    const_pos: np.ndarray | None = None
    const_val: np.ndarray | None = None
    diagonal: bool = False
    label: str = ""


@dataclass
class ConicProblem:
    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    blocks: list[BlockSpec]

    @property
    def nvars(self) -> int:
        return len(self.c)

    def validate(self) -> None:
        n = self.nvars
        if self.A.shape[1] != n:
            raise ValueError(f"A has {self.A.shape[1]} columns for {n} variables")
        if self.A.shape[0] != len(self.b):
            raise ValueError("A row count and b length differ")
        for k, blk in enumerate(self.blocks):
            if blk.var_idx.size and (blk.var_idx.min() < 0 or blk.var_idx.max() >= n):
                raise ValueError(f"block {k} references an out-of-range variable")
            if blk.entry_pos.size and blk.entry_pos.max() >= blk.side**2:
                raise ValueError(f"block {k} entry position exceeds its side")


@dataclass
class SolverConfig:
    tol_feas: float = 1e-7
    tol_psd: float = 1e-8
    tol_gap: float = 1e-6
    max_iterations: int = 200000
    algorithm: str = "auto"  # auto | interior-point | splitting
    ipm_size_limit: int = 12000
    rho: float = 1.0
    rho_min: float = 1e-3
    rho_max: float = 1e3
    over_relaxation: float = 1.6
    adapt_rho: bool = True
    adapt_every: int = 100
    check_every: int = 25
    divergence_threshold: float = 1e8
    qr_row_limit: int = 1500
    equilibrate: bool = True
    equilibrate_passes: int = 10
    acceleration_memory: int = 10
    polish: bool = True
    polish_trigger: float = 2e-4
    polish_every: int = 1000
    face_thresholds: tuple[float, ...] = (1e-5, 1e-4, 1e-3)
    verbose: bool = False


@dataclass
class SolverResult:
    y: np.ndarray
    eq_multipliers: np.ndarray | None
    block_multipliers: list[np.ndarray] | None
    objective: float
    dual_objective: float
    residuals: dict
    status: str
    iterations: int
    wall_time: float
    trace: list = field(default_factory=list)
    notes: list = field(default_factory=list)


def project_psd(M: np.ndarray) -> np.ndarray:
    """Nearest positive semidefinite matrix in Frobenius norm."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    sym = 0.5 * (M + M.T)
    try:
        w, V = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise SolverBreakdown(f"eigendecomposition failed: {exc}", []) from exc
    w = np.clip(w, 0.0, None)
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------- #
# internal helpers


def _build_scatter(blocks: list[BlockSpec], nvars: int):
    """Stack all block entries into one sparse map S: y -> vec(blocks)."""
    sizes = [blk.side**2 for blk in blocks]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rows, cols, vals = [], [], []
    const = np.zeros(offsets[-1])
    for blk, off in zip(blocks, offsets[:-1]):
        rows.append(blk.entry_pos + off)
        cols.append(blk.var_idx)
        vals.append(blk.coefs)
        if blk.const_pos is not None:
            np.add.at(const, blk.const_pos + off, blk.const_val)
    S = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(offsets[-1], nvars),
    ).tocsr()
    S.sum_duplicates()
    return S, const, offsets


def _project_stacked(vec: np.ndarray, blocks: list[BlockSpec], offsets: np.ndarray) -> np.ndarray:
    out = np.empty_like(vec)
    for blk, start in zip(blocks, offsets[:-1]):
        stop = start + blk.side**2
        if blk.diagonal:
            # diagonal block: PSD means elementwise nonnegative diagonal
            M = vec[start:stop].reshape(blk.side, blk.side)
            P = np.zeros_like(M)
            np.fill_diagonal(P, np.clip(np.diag(M), 0.0, None))
            out[start:stop] = P.ravel()
            continue
        M = vec[start:stop].reshape(blk.side, blk.side)
        out[start:stop] = project_psd(M).ravel()
    return out


def _min_block_eig(vec: np.ndarray, blocks: list[BlockSpec], offsets: np.ndarray,
                   block_scales: np.ndarray | None = None) -> float:
    worst = np.inf
    for k, (blk, start) in enumerate(zip(blocks, offsets[:-1])):
        stop = start + blk.side**2
        M = vec[start:stop].reshape(blk.side, blk.side)
        if block_scales is not None:
            M = M / block_scales[k]
        if blk.diagonal:
            worst = min(worst, float(np.diag(M).min()))
        else:
            sym = 0.5 * (M + M.T)
            worst = min(worst, float(np.linalg.eigvalsh(sym)[0]))
    return worst


def _preprocess_rows(A: sp.csr_matrix, b: np.ndarray, cfg: SolverConfig):
    """Drop zero rows, normalize the rest, remove near-dependent rows by
    rank-revealing QR (skipped above the size limit; the transport rows are
    independent by construction there)."""
    notes = []
    norms = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel())
    keep = norms > 1e-12
    inconsistent = (~keep) & (np.abs(b) > 1e-9)
    if inconsistent.any():
        return None, None, None, None, notes + ["zero row with nonzero rhs"], True
    if not keep.all():
        notes.append(f"dropped {int((~keep).sum())} zero rows")
    idx = np.flatnonzero(keep)
    A_k = A[idx]
    scales = norms[idx]
    D = sp.diags(1.0 / scales)
    A_k = D @ A_k
    b_k = b[idx] / scales

    m = A_k.shape[0]
    if m and m <= cfg.qr_row_limit:
        dense = A_k.toarray()
        _, R, piv = scipy.linalg.qr(dense.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        tol = 1e-10 * (diag[0] if diag.size else 1.0)
        rank = int((diag > tol).sum())
        if rank < m:
            kept_rows = np.sort(piv[:rank])
            notes.append(f"dropped {m - rank} near-dependent rows (rank-revealing QR)")
            A_k = A_k[kept_rows]
            b_k = b_k[kept_rows]
            idx = idx[kept_rows]
            scales = scales[kept_rows]
    else:
        notes.append("rank-revealing pass skipped (row count above limit)")
    return A_k.tocsr(), b_k, idx, scales, notes, False


def _equilibrate(A: sp.csr_matrix, b: np.ndarray, S: sp.csr_matrix,
                 s_const: np.ndarray, offsets: np.ndarray, nblocks: int,
                 passes: int):
    """Ruiz-style scaling: per-column diagonal over the stacked [A; S]
    system, per-row diagonal on A, and a single positive scalar per PSD
    block (blockwise scaling keeps the cone intact)."""
    n = A.shape[1]
    m = A.shape[0]
    d = np.ones(n)
    r = np.ones(m)
    e = np.ones(nblocks)
    A = A.copy()
    S = S.copy()
    b = b.copy()
    s_const = s_const.copy()
    for _ in range(passes):
        col_a = np.asarray(abs(A).max(axis=0).todense()).ravel() if m else np.zeros(n)
        col_s = np.asarray(abs(S).max(axis=0).todense()).ravel()
        colmax = np.maximum(col_a, col_s)
        colmax[colmax < 1e-12] = 1.0
        dc = 1.0 / np.sqrt(colmax)
        D = sp.diags(dc)
        A = (A @ D).tocsr()
        S = (S @ D).tocsr()
        d *= dc
        if m:
            rowmax = np.asarray(abs(A).max(axis=1).todense()).ravel()
            rowmax[rowmax < 1e-12] = 1.0
            rr = 1.0 / np.sqrt(rowmax)
            A = (sp.diags(rr) @ A).tocsr()
            b *= rr
            r *= rr
        for k in range(nblocks):
            lo, hi = offsets[k], offsets[k + 1]
            sub = S[lo:hi]
            mx = max(abs(sub).max() if sub.nnz else 0.0,
                     np.abs(s_const[lo:hi]).max() if hi > lo else 0.0)
            if mx < 1e-12:
                continue
            ek = 1.0 / np.sqrt(mx)
            S[lo:hi] = S[lo:hi].multiply(ek)
            s_const[lo:hi] *= ek
            e[k] *= ek
        S = S.tocsr()
    return A, b, S, s_const, d, r, e


def solve(problem: ConicProblem, config: SolverConfig | None = None) -> SolverResult:
    """Run the splitting scheme until the feasibility, cone and gap
    tolerances hold, the iterate diverges (infeasibility certificate), or
    the iteration budget runs out."""
    cfg = config or SolverConfig()
    problem.validate()
    t0 = time.perf_counter()
    n = problem.nvars
    c_orig = np.asarray(problem.c, dtype=float)

    pre = _preprocess_rows(problem.A.tocsr(), np.asarray(problem.b, float), cfg)
    A_k, b_k, row_idx, row_scales, notes, bad = pre
    if bad:
        return SolverResult(
            y=np.zeros(n), eq_multipliers=None, block_multipliers=None,
            objective=np.nan, dual_objective=np.nan,
            residuals={"eq_residual": np.inf}, status="infeasible",
            iterations=0, wall_time=time.perf_counter() - t0, notes=notes,
        )

    algorithm = cfg.algorithm
    if algorithm == "auto":
        algorithm = "interior-point" if n <= cfg.ipm_size_limit else "splitting"
    if algorithm == "interior-point":
        from ._ipm import solve_interior_point

        payload = solve_interior_point(problem, A_k, b_k, row_idx, row_scales,
                                       cfg, notes, t0)
        notes.append("engine: interior-point")
        return SolverResult(
            y=payload["y"],
            eq_multipliers=payload["eq_multipliers"],
            block_multipliers=payload["block_multipliers"],
            objective=payload["objective"],
            dual_objective=payload["dual_objective"],
            residuals=payload["residuals"],
            status=payload["status"],
            iterations=payload["iterations"],
            wall_time=time.perf_counter() - t0,
            trace=payload["trace"],
            notes=notes,
        )

    S, s_const, offsets = _build_scatter(problem.blocks, n)
    nblocks = len(problem.blocks)

    if cfg.equilibrate:
        A_k, b_k, S, s_const, d_col, r_row, e_blk = _equilibrate(
            A_k, b_k, S, s_const, offsets, nblocks, cfg.equilibrate_passes
        )
    else:
        d_col = np.ones(n)
        r_row = np.ones(A_k.shape[0])
        e_blk = np.ones(nblocks)

    c = c_orig * d_col
    obj_scale = 1.0 / max(float(np.abs(c).max()), 1e-12)
    c = c * obj_scale

    St = S.T.tocsr()
    StS = (St @ S).tocsc()
    m = A_k.shape[0]

    rho = cfg.rho

    def factorize(rho_val: float):
        K = sp.bmat(
            [[rho_val * StS, A_k.T], [A_k, None]], format="csc"
        )
        try:
            return spla.splu(K)
        except RuntimeError:
            # singular KKT: regularize gently and note it
            notes.append("KKT regularized (factorization fallback)")
            reg = sp.bmat(
                [[rho_val * StS + 1e-10 * sp.eye(n), A_k.T],
                 [A_k, -1e-10 * sp.eye(m)]], format="csc"
            )
            return spla.splu(reg)

    lu = factorize(rho)

    nslack = S.shape[0]
    z = np.zeros(nslack)
    lam = np.zeros(nslack)
    y = np.zeros(n)
    nu = np.zeros(m)
    alpha = cfg.over_relaxation
    trace: list[dict] = []
    status = "max-iterations"
    iterations = cfg.max_iterations
    baseline = None
    b_norm = 1.0 + np.linalg.norm(problem.b)
    c_norm = 1.0 + np.linalg.norm(c)
    rhs = np.empty(n + m)
    rhs[n:] = b_k

    rp = rd = eq_res = np.inf
    w = np.zeros(nslack)

    def unscale_y(y_hat: np.ndarray) -> np.ndarray:
        return d_col * y_hat

    def original_min_eig(w_hat: np.ndarray) -> float:
        return _min_block_eig(w_hat, problem.blocks, offsets, e_blk)

    # safeguarded Anderson acceleration over the (z, lambda) fixed point
    mem = cfg.acceleration_memory
    buf_v: list[np.ndarray] = []
    buf_f: list[np.ndarray] = []
    fallback: np.ndarray | None = None
    prev_res = np.inf
    v = np.zeros(2 * nslack)

    def clear_acceleration():
        nonlocal fallback, prev_res
        buf_v.clear()
        buf_f.clear()
        fallback = None
        prev_res = np.inf

    polished: dict | None = None
    last_polish_at = 0

    def full_multipliers(nu_hat: np.ndarray) -> np.ndarray:
        out = np.zeros(problem.A.shape[0])
        if m:
            out[row_idx] = nu_hat * r_row / (row_scales * obj_scale)
        return out

    def try_polish(y_hat: np.ndarray, nu_hat: np.ndarray,
                   z_hat: np.ndarray) -> dict | None:
        face_mats = [
            z_hat[start:start + blk.side**2].reshape(blk.side, blk.side) / e_blk[k]
            for k, (blk, start) in enumerate(zip(problem.blocks, offsets[:-1]))
        ]
        cand = polish(problem, unscale_y(y_hat), full_multipliers(nu_hat), cfg,
                      face_mats)
        if cand is None:
            return None
        ok = (cand["eq_res"] < cfg.tol_feas and cand["min_eig"] > -cfg.tol_psd
              and cand["gap"] < cfg.tol_gap)
        cand["accepted"] = ok
        return cand

    for it in range(1, cfg.max_iterations + 1):
        z_in = v[:nslack]
        lam_in = v[nslack:]
        rhs[:n] = rho * St.dot(z_in - lam_in - s_const) - c
        sol = lu.solve(rhs)
        y = sol[:n]
        # the KKT solve produces the multiplier of +(Ay - b); the dual
        # vector of the max b'nu problem is its negative
        nu = -sol[n:]
        w = S.dot(y) + s_const
        w_hat = alpha * w + (1.0 - alpha) * z_in
        z_prev = z
        z = _project_stacked(w_hat + lam_in, problem.blocks, offsets)
        lam = lam_in + w_hat - z
        fv = np.concatenate([z, lam])
        res = float(np.linalg.norm(fv - v))

        if fallback is not None and res > prev_res:
            # the accelerated guess regressed: resume from the plain iterate
            v = fallback
            clear_acceleration()
            continue
        fallback = None
        prev_res = res

        if mem:
            buf_v.append(v.copy())
            buf_f.append(fv.copy())
            if len(buf_v) > mem:
                buf_v.pop(0)
                buf_f.pop(0)
        if mem and len(buf_v) >= 3:
            R = np.column_stack([
                (buf_f[i] - buf_v[i]) - (buf_f[i - 1] - buf_v[i - 1])
                for i in range(1, len(buf_v))
            ])
            g = fv - v
            gamma, *_ = np.linalg.lstsq(R, g, rcond=None)
            Fd = np.column_stack([
                buf_f[i] - buf_f[i - 1] for i in range(1, len(buf_f))
            ])
            v_candidate = fv - Fd @ gamma
            if np.isfinite(v_candidate).all():
                fallback = fv
                v = v_candidate
            else:
                v = fv
        else:
            v = fv

        if it % cfg.check_every == 0 or it == cfg.max_iterations:
            if not np.isfinite(y).all() or not np.isfinite(z).all():
                raise SolverBreakdown(f"non-finite iterate at iteration {it}", trace)
            y_orig = unscale_y(y)
            rp = np.linalg.norm(w - z) / (1.0 + max(np.linalg.norm(w), np.linalg.norm(z)))
            rd = rho * np.linalg.norm(St.dot(z - z_prev)) / c_norm
            eq_res = np.linalg.norm(problem.A.dot(y_orig) - problem.b) / b_norm
            obj = float(c_orig @ y_orig)
            dual_obj = float(b_k @ nu) / obj_scale
            gap = abs(obj - dual_obj) / (1.0 + abs(obj) + abs(dual_obj))
            trace.append({"iter": it, "rp": rp, "rd": rd, "eq": eq_res,
                          "gap": gap, "obj": obj, "rho": rho})
            if cfg.verbose:
                print(f"  it {it:7d}  rp {rp:9.2e}  rd {rd:9.2e}  eq {eq_res:9.2e}  "
                      f"gap {gap:9.2e}  obj {obj:+.8f}")

            state_norm = np.linalg.norm(z) + np.linalg.norm(lam)
            if baseline is None and it >= 2 * cfg.check_every:
                baseline = state_norm + 1.0
            if baseline is not None and state_norm > cfg.divergence_threshold * baseline:
                status = "infeasible"
                iterations = it
                notes.append("iterate growth exceeded the divergence threshold")
                break

            if rp < cfg.tol_feas and rd < cfg.tol_feas and eq_res < cfg.tol_feas \
                    and gap < cfg.tol_gap:
                min_eig = original_min_eig(w)
                if min_eig > -cfg.tol_psd:
                    status = "optimal"
                    iterations = it
                    break

            if cfg.polish and rp < cfg.polish_trigger \
                    and it - last_polish_at >= cfg.polish_every:
                last_polish_at = it
                cand = try_polish(y, nu, z)
                if cand is not None and cand["accepted"]:
                    polished = cand
                    status = "optimal"
                    iterations = it
                    notes.append(f"polished at iteration {it} "
                                 f"(face tol {cand['face_tol']:g})")
                    break

            if cfg.adapt_rho and it % cfg.adapt_every == 0 and it < cfg.max_iterations:
                ratio = np.sqrt(rp / max(rd, 1e-16))
                factor = float(np.clip(ratio, 0.2, 5.0))
                if (factor > 1.5 or factor < 0.67) and cfg.rho_min < rho < cfg.rho_max:
                    rho = float(np.clip(rho * factor, cfg.rho_min, cfg.rho_max))
                    lam /= factor
                    v = np.concatenate([z, lam])
                    clear_acceleration()
                    lu = factorize(rho)

    if polished is None and cfg.polish and status != "infeasible":
        cand = try_polish(y, nu, z)
        if cand is not None:
            unpolished_score = max(eq_res, -original_min_eig(w),
                                   abs(float(c_orig @ unscale_y(y))
                                       - float(b_k @ nu) / obj_scale)
                                   / (1.0 + abs(float(c_orig @ unscale_y(y)))))
            cand_score = max(cand["eq_res"], -cand["min_eig"], cand["gap"])
            if cand["accepted"] or cand_score < unpolished_score:
                polished = cand
                notes.append(f"final polish (face tol {cand['face_tol']:g}, "
                             f"accepted={cand['accepted']})")
                if cand["accepted"]:
                    status = "optimal"

    if polished is not None:
        y_orig = polished["y"]
        multipliers = polished["nu"]
        block_mults = polished["lam_blocks"]
        obj = polished["objective"]
        dual_obj = polished["dual_objective"]
        residuals = {
            "eq_residual": polished["eq_res"],
            "cone_residual": rp,
            "dual_residual": polished["stationarity"],
            "min_block_eig": polished["min_eig"],
            "rel_gap": polished["gap"],
        }
    else:
        y_orig = unscale_y(y)
        min_eig = original_min_eig(w)
        eq_res = np.linalg.norm(problem.A.dot(y_orig) - problem.b) / b_norm
        obj = float(c_orig @ y_orig)
        dual_obj = float(b_k @ nu) / obj_scale if m else 0.0
        gap = abs(obj - dual_obj) / (1.0 + abs(obj) + abs(dual_obj))
        multipliers = full_multipliers(nu)
        block_mults = []
        for k, (blk, start) in enumerate(zip(problem.blocks, offsets[:-1])):
            L = -rho * lam[start:start + blk.side**2].reshape(blk.side, blk.side)
            block_mults.append(0.5 * (L + L.T) * (e_blk[k] / obj_scale))
        residuals = {
            "eq_residual": eq_res,
            "cone_residual": rp,
            "dual_residual": rd,
            "min_block_eig": min_eig,
            "rel_gap": gap,
        }

    return SolverResult(
        y=y_orig,
        eq_multipliers=multipliers,
        block_multipliers=block_mults,
        objective=obj,
        dual_objective=dual_obj,
        residuals=residuals,
        status=status,
        iterations=iterations,
        wall_time=time.perf_counter() - t0,
        trace=trace,
        notes=notes,
    )


# ---------------------------------------------------------------------- #
# active-face polish: refine a fuzzy splitting iterate into a sharp KKT pair


def _block_maps(problem: ConicProblem):
    maps = []
    n = problem.nvars
    for blk in problem.blocks:
        Sk = sp.coo_matrix(
            (blk.coefs, (blk.entry_pos, blk.var_idx)), shape=(blk.side**2, n)
        ).tocsr()
        ck = np.zeros(blk.side**2)
        if blk.const_pos is not None:
            np.add.at(ck, blk.const_pos, blk.const_val)
        maps.append((Sk, ck))
    return maps


def _polish(problem: ConicProblem, y0: np.ndarray, nu0: np.ndarray,
            face_tol: float, maps, face_mats=None) -> dict | None:
    """Least-squares refinement on the active face.

    The near-zero eigenspace of each block (from ``face_mats`` when given,
    else from the blocks at ``y0``) is frozen: the primal correction solves
    {A y = b, M_k(y) V0_k = 0} closest to ``y0``; the dual reconstruction
    fits multipliers supported on those eigenspaces to the stationarity
    identity, with one PSD projection and a final multiplier refit.
    Returns polished quantities or None when the face is degenerate.
    """
    n = problem.nvars
    m = problem.A.shape[0]
    spla_lsmr = spla.lsmr

    faces = []
    for k, ((Sk, ck), blk) in enumerate(zip(maps, problem.blocks)):
        if face_mats is not None:
            M = face_mats[k]
        else:
            M = (Sk @ y0 + ck).reshape(blk.side, blk.side)
        M = 0.5 * (M + M.T)
        w, V = np.linalg.eigh(M)
        top = max(float(w[-1]), 1e-9)
        V0 = V[:, w < face_tol * top]
        faces.append(V0)
    face_cols = [V0.shape[1] for V0 in faces]
    if all(r == 0 for r in face_cols):
        return None

    # --- primal: least-norm correction onto the linearized face ------- #
    def p_matvec(dy):
        parts = [problem.A @ dy]
        for (Sk, _), V0, blk in zip(maps, faces, problem.blocks):
            if V0.shape[1] == 0:
                continue
            Md = (Sk @ dy).reshape(blk.side, blk.side)
            parts.append((Md @ V0).ravel())
        return np.concatenate(parts)

    def p_rmatvec(r):
        out = problem.A.T @ r[:m]
        pos = m
        for (Sk, _), V0, blk in zip(maps, faces, problem.blocks):
            if V0.shape[1] == 0:
                continue
            cnt = blk.side * V0.shape[1]
            R = r[pos:pos + cnt].reshape(blk.side, V0.shape[1])
            out = out + Sk.T @ (R @ V0.T).ravel()
            pos += cnt
        return out

    rows = m + sum(blk.side * r for blk, r in zip(problem.blocks, face_cols))
    Eop = spla.LinearOperator((rows, n), matvec=p_matvec, rmatvec=p_rmatvec)
    target = np.concatenate([[problem.b - problem.A @ y0][0].ravel()] + [
        -((Sk @ y0 + ck).reshape(blk.side, blk.side) @ V0).ravel()
        for (Sk, ck), V0, blk in zip(maps, faces, problem.blocks)
        if V0.shape[1]
    ])
    dy = spla_lsmr(Eop, target, atol=1e-14, btol=1e-14, maxiter=4 * n)[0]
    y_pol = y0 + dy

    # --- dual: multipliers supported on the frozen eigenspaces -------- #
    wcols = [r * r for r in face_cols]
    wtot = int(np.sum(wcols))

    def d_matvec(x):
        nu = x[:m]
        out = problem.A.T @ nu
        pos = m
        for (Sk, _), V0, r in zip(maps, faces, face_cols):
            if r == 0:
                continue
            W = x[pos:pos + r * r].reshape(r, r)
            out = out + Sk.T @ (V0 @ W @ V0.T).ravel()
            pos += r * r
        return out

    def d_rmatvec(r_vec):
        parts = [problem.A @ r_vec]
        for (Sk, _), V0, r in zip(maps, faces, face_cols):
            if r == 0:
                continue
            U = (Sk @ r_vec).reshape(V0.shape[0], V0.shape[0])
            parts.append((V0.T @ U @ V0).ravel())
        return np.concatenate(parts)

    Dop = spla.LinearOperator((n, m + wtot), matvec=d_matvec, rmatvec=d_rmatvec)
    x0 = np.concatenate([nu0, np.zeros(wtot)])
    resid0 = problem.c - d_matvec(x0)
    dx = spla_lsmr(Dop, resid0, atol=1e-14, btol=1e-14, maxiter=4 * (m + wtot))[0]
    x = x0 + dx

    # PSD-project the face multipliers, then refit the equality multipliers
    lam_blocks = []
    pos = m
    cleaned = np.zeros(problem.c.shape)
    for (Sk, _), V0, r in zip(maps, faces, face_cols):
        if r == 0:
            lam_blocks.append(np.zeros((V0.shape[0], V0.shape[0])))
            continue
        W = x[pos:pos + r * r].reshape(r, r)
        W = project_psd(0.5 * (W + W.T))
        Lam = V0 @ W @ V0.T
        lam_blocks.append(Lam)
        cleaned += Sk.T @ Lam.ravel()
        pos += r * r
    At = problem.A.T.tocsr()
    nu_fit = spla_lsmr(At, problem.c - cleaned, atol=1e-14, btol=1e-14,
                       maxiter=4 * max(m, 1))[0] if m else np.zeros(0)

    stat_res = float(np.linalg.norm(problem.c - cleaned - At @ nu_fit, np.inf))
    eq_res = float(np.linalg.norm(problem.A @ y_pol - problem.b)
                   / (1.0 + np.linalg.norm(problem.b)))
    min_eig = np.inf
    for (Sk, ck), blk in zip(maps, problem.blocks):
        M = (Sk @ y_pol + ck).reshape(blk.side, blk.side)
        M = 0.5 * (M + M.T)
        if blk.diagonal:
            min_eig = min(min_eig, float(np.diag(M).min()))
        else:
            min_eig = min(min_eig, float(np.linalg.eigvalsh(M)[0]))
    obj = float(problem.c @ y_pol)
    dual_obj = float(problem.b @ nu_fit) if m else 0.0
    gap = abs(obj - dual_obj) / (1.0 + abs(obj) + abs(dual_obj))
    return {
        "y": y_pol,
        "nu": nu_fit,
        "lam_blocks": lam_blocks,
        "objective": obj,
        "dual_objective": dual_obj,
        "eq_res": eq_res,
        "min_eig": min_eig,
        "gap": gap,
        "stationarity": stat_res,
        "face_tol": face_tol,
    }


def polish(problem: ConicProblem, y: np.ndarray, nu: np.ndarray,
           cfg: SolverConfig, face_mats=None) -> dict | None:
    """Try the configured face thresholds; keep the candidate with the best
    worst-case violation (feasibility, cone, gap)."""
    maps = _block_maps(problem)
    best = None
    best_score = np.inf
    for tol in cfg.face_thresholds:
        try:
            cand = _polish(problem, y, nu, tol, maps, face_mats)
        except np.linalg.LinAlgError:
            continue
        if cand is None:
            continue
        score = max(cand["eq_res"], -cand["min_eig"], cand["gap"],
                    0.01 * cand["stationarity"])
        if score < best_score:
            best, best_score = cand, score
    return best


# ---------------------------------------------------------------------- #
# SDPA sparse interchange format


def export_sdpa(problem: ConicProblem) -> str:
    """Serialize in SDPA sparse format.

    Decision scalars map onto SDPA's x variables; every PSD block becomes an
    SDPA block; equality rows are lowered into one reserved diagonal block of
    paired (+row, -row) inequalities, flagged in a leading comment so our
    reader can reconstruct them exactly.  External SDPA-format solvers see an
    equivalent inequality-pair formulation.
    """
    n = problem.nvars
    m_eq = problem.A.shape[0]
    lines = []
    block_sizes = []
    eq_block = 0
    if m_eq:
        eq_block = 1
        block_sizes.append(-2 * m_eq)
        lines.append(f"*cfoc eqblock={eq_block} rows={m_eq}")
    for blk in problem.blocks:
        block_sizes.append(-blk.side if blk.diagonal else blk.side)
    lines.append(str(n))
    lines.append(str(len(block_sizes)))
    lines.append(" ".join(str(s) for s in block_sizes))
    lines.append(" ".join(repr(float(v)) for v in problem.c))

    def entry(matno: int, blkno: int, i: int, j: int, v: float):
        if v != 0.0:
            lines.append(f"{matno} {blkno} {i} {j} {repr(float(v))}")

    if m_eq:
        A = problem.A.tocoo()
        for r, col, v in zip(A.row, A.col, A.data):
            entry(col + 1, eq_block, 2 * r + 1, 2 * r + 1, v)
            entry(col + 1, eq_block, 2 * r + 2, 2 * r + 2, -v)
        for r, v in enumerate(problem.b):
            entry(0, eq_block, 2 * r + 1, 2 * r + 1, v)
            entry(0, eq_block, 2 * r + 2, 2 * r + 2, -v)

    for k, blk in enumerate(problem.blocks):
        blkno = eq_block + k + 1
        ii = blk.entry_pos // blk.side
        jj = blk.entry_pos % blk.side
        upper = ii <= jj
        for pos in np.flatnonzero(upper):
            entry(int(blk.var_idx[pos]) + 1, blkno,
                  int(ii[pos]) + 1, int(jj[pos]) + 1, float(blk.coefs[pos]))
        if blk.const_pos is not None:
            ci = blk.const_pos // blk.side
            cj = blk.const_pos % blk.side
            for pos in range(len(blk.const_pos)):
                if ci[pos] <= cj[pos]:
                    # stored constant C corresponds to SDPA's -F0
                    entry(0, blkno, int(ci[pos]) + 1, int(cj[pos]) + 1,
                          -float(blk.const_val[pos]))
    return "\n".join(lines) + "\n"


class SdpaParseError(ValueError):
    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


def import_sdpa(text: str) -> ConicProblem:
    """Parse SDPA sparse format back into a conic problem.  Files written by
    :func:`export_sdpa` round-trip exactly, equalities included."""
    eq_block = 0
    m_eq = 0
    header: list[tuple[int, str]] = []
    entries: list[tuple[int, int, int, int, int, float]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped:
            continue
        if stripped.startswith(("*", '"')):
            if stripped.startswith("*cfoc eqblock="):
                try:
                    parts = dict(p.split("=") for p in stripped[1:].split()[1:])
                    eq_block = int(parts["eqblock"])
                    m_eq = int(parts["rows"])
                except Exception:
                    raise SdpaParseError("malformed cfoc equality annotation", lineno)
            continue
        if len(header) < 4:
            header.append((lineno, stripped))
            continue
        parts = stripped.replace(",", " ").split()
        if len(parts) != 5:
            raise SdpaParseError(f"expected 5 fields, got {len(parts)}", lineno)
        try:
            matno, blkno, i, j = (int(float(p)) for p in parts[:4])
            val = float(parts[4])
        except ValueError:
            raise SdpaParseError("cannot parse entry fields", lineno)
        entries.append((lineno, matno, blkno, i, j, val))

    if len(header) < 4:
        raise SdpaParseError("incomplete header", len(text.splitlines()))
    try:
        nvars = int(float(header[0][1].split()[0]))
    except ValueError:
        raise SdpaParseError("cannot parse variable count", header[0][0])
    try:
        nblocks = int(float(header[1][1].split()[0]))
    except ValueError:
        raise SdpaParseError("cannot parse block count", header[1][0])
    sizes_txt = header[2][1].replace(",", " ").replace("(", " ").replace(")", " ").split()
    if len(sizes_txt) != nblocks:
        raise SdpaParseError(f"expected {nblocks} block sizes, got {len(sizes_txt)}",
                             header[2][0])
    sizes = [int(float(s)) for s in sizes_txt]
    c_txt = header[3][1].replace(",", " ").split()
    if len(c_txt) != nvars:
        raise SdpaParseError(f"expected {nvars} objective entries, got {len(c_txt)}",
                             header[3][0])
    c = np.array([float(v) for v in c_txt])

    # collect per-block entry lists
    per_block: dict[int, list] = {k: [] for k in range(1, nblocks + 1)}
    for lineno, matno, blkno, i, j, val in entries:
        if not 1 <= blkno <= nblocks:
            raise SdpaParseError(f"block index {blkno} out of range", lineno)
        side = abs(sizes[blkno - 1])
        if not (1 <= i <= side and 1 <= j <= side):
            raise SdpaParseError(f"entry ({i},{j}) outside block of side {side}", lineno)
        if not 0 <= matno <= nvars:
            raise SdpaParseError(f"matrix index {matno} out of range", lineno)
        per_block[blkno].append((matno, i - 1, j - 1, val))

    eq_rows, eq_cols, eq_vals = [], [], []
    b = np.zeros(m_eq)
    blocks: list[BlockSpec] = []
    for blkno in range(1, nblocks + 1):
        side = abs(sizes[blkno - 1])
        diagonal = sizes[blkno - 1] < 0
        if blkno == eq_block and m_eq:
            for matno, i, j, val in per_block[blkno]:
                if i != j or i % 2 != 0:
                    continue  # the paired negative copies are implied
                r = i // 2
                if matno == 0:
                    b[r] = val
                else:
                    eq_rows.append(r)
                    eq_cols.append(matno - 1)
                    eq_vals.append(val)
            continue
        pos, var, coef = [], [], []
        cpos, cval = [], []
        for matno, i, j, val in per_block[blkno]:
            targets = [(i, j)] if i == j else [(i, j), (j, i)]
            for ti, tj in targets:
                if matno == 0:
                    cpos.append(ti * side + tj)
                    cval.append(-val)  # C = -F0
                else:
                    pos.append(ti * side + tj)
                    var.append(matno - 1)
                    coef.append(val)
        blocks.append(BlockSpec(
            side=side,
            entry_pos=np.array(pos, dtype=np.int64),
            var_idx=np.array(var, dtype=np.int64),
            coefs=np.array(coef, dtype=float),
            const_pos=np.array(cpos, dtype=np.int64) if cpos else None,
            const_val=np.array(cval, dtype=float) if cval else None,
            diagonal=diagonal,
        ))

    A = sp.coo_matrix((eq_vals, (eq_rows, eq_cols)), shape=(m_eq, nvars)).tocsr()
    return ConicProblem(c=c, A=A, b=b, blocks=blocks)


# ---------------------------------------------------------------------- #
# dual polynomial reconstruction


def extract_dual_polynomial(relaxed, result: SolverResult) -> tuple[Polynomial, float]:
    """Rebuild the value-function subsolution from equality multipliers.

    Each transport row was generated by one test monomial over
    (time, states[, parameters]); the row's multiplier is exactly that
    monomial's coefficient in the dual polynomial v.  Returns (v, bound)
    where the scalar bound equals the dual objective (known systems) or the
    unit-mass row's multiplier (uncertain systems).
    """
    if result.eq_multipliers is None:
        raise DualUnavailableError(
            "no equality multipliers available; export the problem with "
            "export_sdpa and recover duals from an external solver"
        )
    space: VarSpace = relaxed.spec.space
    ter = relaxed.measures["terminal"]
    terms: dict[tuple[int, ...], float] = {}
    for r, row in enumerate(relaxed.rows):
        coeff = float(result.eq_multipliers[r])
        if coeff == 0.0:
            continue
        full = [0] * space.dim
        for idx, e in zip(ter.var_indices, row.test):
            full[idx] = e
        terms[tuple(full)] = terms.get(tuple(full), 0.0) + coeff
    v = Polynomial(space, terms)
    if "initial-mass" in relaxed.extra_row_labels:
        mass_row = len(relaxed.rows) + relaxed.extra_row_labels.index("initial-mass")
        bound = float(result.eq_multipliers[mass_row])
    else:
        bound = float(result.dual_objective)
    return v, bound
