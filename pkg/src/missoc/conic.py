"""Primal-dual interior-point solver for quadratic programs coupled to many
independent small positive-semidefinite blocks.

Problem form:

    min  1/2 theta' Q theta + q' theta
    s.t. C theta + sum_b A_b(Z_b) = c,      Z_b >= 0 (PSD)

where each equality row touches at most one block. Blocks are tiny (order
<= 8), so all per-block linear algebra is dense and the Schur complement of
the Newton system is formed explicitly. Nesterov-Todd scaling, Mehrotra-style
adaptive centering, fraction-to-boundary steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class ConicInfeasibleError(RuntimeError):
    """The solver diagnosed the constraint system as infeasible."""


class ConicConvergenceError(RuntimeError):
    """Iteration cap reached before tolerances were met."""

    def __init__(self, message: str, best: "ConicSolution"):
        super().__init__(message)
        self.best = best


@dataclass
class ConicBlock:
    """One PSD block: constraint matrices ``mats[i]`` act on rows ``rows[i]``."""

    order: int
    rows: np.ndarray  # row indices, length r
    mats: np.ndarray  # (r, order, order), symmetric


@dataclass
class ConicProblem:
    Q: np.ndarray  # (M, M) symmetric PSD
    q: np.ndarray  # (M,)
    C: np.ndarray  # (K, M)
    c: np.ndarray  # (K,)
    blocks: list[ConicBlock] = field(default_factory=list)


@dataclass
class ConicSolution:
    theta: np.ndarray
    Z: list[np.ndarray]
    S: list[np.ndarray]
    lam: np.ndarray
    objective: float
    rel_gap: float
    rel_primal: float
    rel_dual: float
    iterations: int


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _nt_scaling(Z: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Symmetric PD W with W S W = Z."""
    # W = S^-1/2 (S^1/2 Z S^1/2)^1/2 S^-1/2
    ws, vs = np.linalg.eigh(S)
    ws = np.maximum(ws, 1e-300)
    S_half = (vs * np.sqrt(ws)) @ vs.T
    S_ihalf = (vs / np.sqrt(ws)) @ vs.T
    inner = _sym(S_half @ Z @ S_half)
    wi, vi = np.linalg.eigh(inner)
    wi = np.maximum(wi, 1e-300)
    inner_half = (vi * np.sqrt(wi)) @ vi.T
    return _sym(S_ihalf @ inner_half @ S_ihalf)


def _floor_pd(X: np.ndarray, rel: float = 1e-14) -> np.ndarray:
    """Push eigenvalues up to a small positive floor (guards against the
    iterates drifting numerically indefinite near convergence)."""
    w, v = np.linalg.eigh(_sym(X))
    floor = rel * max(w.max(), 1.0)
    if w.min() >= floor:
        return _sym(X)
    return _sym((v * np.maximum(w, floor)) @ v.T)


def _refined_solve(fact, A: np.ndarray, b: np.ndarray, rounds: int = 2):
    """Cholesky solve with iterative refinement; recovers digits lost to
    ill conditioning near the central-path boundary."""
    x = scipy.linalg.cho_solve(fact, b)
    for _ in range(rounds):
        r = b - A @ x
        x = x + scipy.linalg.cho_solve(fact, r)
    return x


def _max_step(X: np.ndarray, dX: np.ndarray) -> float:
    """Largest alpha with X + alpha dX still positive definite (X PD)."""
    try:
        L = np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky(_floor_pd(X, rel=1e-12))
    Y = scipy.linalg.solve_triangular(L, dX, lower=True)
    Y = scipy.linalg.solve_triangular(L, Y.T, lower=True)
    lam_min = np.linalg.eigvalsh(_sym(Y)).min()
    if lam_min >= 0:
        return np.inf
    return -1.0 / lam_min


def solve_conic(
    prob: ConicProblem,
    gap_tol: float = 1e-7,
    feas_tol: float = 1e-7,
    max_iter: int = 200,
) -> ConicSolution:
    """Path-following solve; deterministic for identical inputs."""
    Q, q, C, c = prob.Q, prob.q, prob.C, prob.c
    K, M = C.shape
    blocks = prob.blocks

    # row equilibration: certificate rows mix O(1) selectors with large
    # basis-transform entries; scaling each row to unit size keeps the Schur
    # complement well conditioned and does not change (theta, Z)
    if K:
        rs = np.sqrt((C**2).sum(axis=1))
        for b in blocks:
            rs[b.rows] = np.maximum(
                rs[b.rows], np.sqrt((b.mats**2).sum(axis=(1, 2)))
            )
        rs = np.maximum(rs, 1e-300)
        C = C / rs[:, None]
        c = c / rs
        blocks = [
            ConicBlock(b.order, b.rows, b.mats / rs[b.rows][:, None, None])
            for b in blocks
        ]
    else:
        rs = np.ones(0)

    if K == 0:
        theta = _solve_psd(Q, -q)
        obj = 0.5 * theta @ Q @ theta + q @ theta
        return ConicSolution(theta, [], [], np.zeros(0), obj, 0.0, 0.0, 0.0, 0)

    reg = 1e-12 * (np.trace(Q) / max(M, 1) + 1.0)
    Qr = Q + reg * np.eye(M)
    Q_fact = scipy.linalg.cho_factor(Qr, lower=True)

    scale = max(1.0, np.abs(c).max() if K else 1.0)
    theta = scipy.linalg.cho_solve(Q_fact, -q)
    Z = [scale * np.eye(b.order) for b in blocks]
    S = [scale * np.eye(b.order) for b in blocks]
    lam = np.zeros(K)

    nu = sum(b.order for b in blocks)
    c_norm = 1.0 + np.linalg.norm(c)
    q_norm = 1.0 + np.linalg.norm(q)

    def A_apply(Zs):
        out = np.zeros(K)
        for b, Zb in zip(blocks, Zs):
            out[b.rows] += np.einsum("rij,ij->r", b.mats, Zb)
        return out

    def A_adjoint(y):
        return [np.einsum("r,rij->ij", y[b.rows], b.mats) for b in blocks]

    def residuals(theta, Z, S, lam):
        r_p = c - C @ theta - A_apply(Z)
        r_d = Q @ theta + q - C.T @ lam
        r_s = [Sb + Ab for Sb, Ab in zip(S, A_adjoint(lam))]
        return r_p, r_d, r_s

    best = None
    best_metric = np.inf
    best_it = 0

    for it in range(max_iter):
        r_p, r_d, r_s = residuals(theta, Z, S, lam)
        gap = sum(np.sum(Zb * Sb) for Zb, Sb in zip(Z, S))
        mu = gap / max(nu, 1)
        pobj = 0.5 * theta @ Q @ theta + q @ theta
        rel_p = np.linalg.norm(r_p) / c_norm
        rel_d = np.linalg.norm(r_d) / q_norm
        rel_gap = gap / (1.0 + abs(pobj))

        metric = rel_p + rel_d + rel_gap
        if metric < 0.9 * best_metric:
            best_it = it
        if metric < best_metric:
            best_metric = metric
            best = ConicSolution(
                theta.copy(), [Zb.copy() for Zb in Z], [Sb.copy() for Sb in S],
                lam.copy(), pobj, rel_gap, rel_p, rel_d, it,
            )

        if rel_p <= feas_tol and rel_d <= feas_tol and rel_gap <= gap_tol:
            return ConicSolution(
                theta, Z, S, lam / rs, pobj, rel_gap, rel_p, rel_d, it
            )

        # stalled at the floating-point accuracy floor: accept the best
        # iterate when it is close to tolerance
        if (
            it - best_it >= 20
            and best.rel_primal <= 100 * feas_tol
            and best.rel_dual <= 100 * feas_tol
            and best.rel_gap <= 100 * gap_tol
        ):
            best.lam = best.lam / rs
            return best

        # infeasibility heuristic: complementarity collapsed but the primal
        # residual cannot be driven down and the duals blow up
        dual_mag = np.linalg.norm(lam)
        if mu < 1e-10 * scale and rel_p > 1e-5 and dual_mag > 1e8:
            raise ConicInfeasibleError(
                f"constraints look infeasible (primal residual {rel_p:.2e}, "
                f"dual magnitude {dual_mag:.2e})"
            )

        # floored copies are used wherever positive definiteness is
        # required; the iterates themselves stay unmodified so the
        # primal residual is not polluted by the flooring
        Zf = [_floor_pd(Zb) for Zb in Z]
        Sf = [_floor_pd(Sb) for Sb in S]
        W = [_nt_scaling(Zb, Sb) for Zb, Sb in zip(Zf, Sf)]

        # Schur complement over the equality rows
        Mmat = np.zeros((K, K))
        for b, Wb in zip(blocks, W):
            WA = np.einsum("ik,rkl,lj->rij", Wb, b.mats, Wb)
            Mb = np.einsum("rij,sij->rs", b.mats, WA)
            Mmat[np.ix_(b.rows, b.rows)] += Mb
        CQiCt = C @ _refined_solve(Q_fact, Qr, C.T)
        Schur = Mmat + CQiCt
        Schur_fact, Schur_bumped = _factor_with_bump(Schur)

        def solve_direction(sigma_mu):
            # Newton system with NT-linearized centrality
            #   dZ + W dS W = R,  R = sigma*mu*S^-1 - Z
            # eliminated down to the Schur system in d_lam.
            rhs = r_p.copy()
            Rs = []
            for b, Zb, Sb, Wb, rsb in zip(blocks, Z, Sf, W, r_s):
                Rb = sigma_mu * np.linalg.inv(Sb) - Zb
                Rs.append(Rb)
                rhs[b.rows] -= np.einsum(
                    "rij,ij->r", b.mats, Rb + Wb @ rsb @ Wb
                )
            rhs = rhs + C @ _refined_solve(Q_fact, Qr, r_d)
            d_lam = _refined_solve(Schur_fact, Schur_bumped, rhs)
            d_theta = _refined_solve(Q_fact, Qr, -r_d + C.T @ d_lam)
            adj = A_adjoint(d_lam)
            d_S = [-rsb - Ab for rsb, Ab in zip(r_s, adj)]
            d_Z = [
                _sym(Rb + Wb @ (rsb + Ab) @ Wb)
                for Rb, Wb, rsb, Ab in zip(Rs, W, r_s, adj)
            ]
            return d_theta, d_lam, d_Z, d_S

        # predictor
        d_theta, d_lam, d_Z, d_S = solve_direction(0.0)
        a_p = min(
            [1.0] + [_max_step(Zb, dZb) for Zb, dZb in zip(Zf, d_Z)]
        )
        a_d = min(
            [1.0] + [_max_step(Sb, dSb) for Sb, dSb in zip(Sf, d_S)]
        )
        a_p = min(1.0, 0.98 * a_p)
        a_d = min(1.0, 0.98 * a_d)
        gap_aff = sum(
            np.sum((Zb + a_p * dZb) * (Sb + a_d * dSb))
            for Zb, dZb, Sb, dSb in zip(Z, d_Z, S, d_S)
        )
        mu_aff = max(gap_aff, 0.0) / max(nu, 1)
        sigma = min(0.8, max(1e-6, (mu_aff / max(mu, 1e-300)) ** 3))

        # corrector (recentering) step
        d_theta, d_lam, d_Z, d_S = solve_direction(sigma * mu)
        a_p = min([1.0] + [_max_step(Zb, dZb) for Zb, dZb in zip(Zf, d_Z)])
        a_d = min([1.0] + [_max_step(Sb, dSb) for Sb, dSb in zip(Sf, d_S)])
        a_p = min(1.0, 0.98 * a_p)
        a_d = min(1.0, 0.98 * a_d)

        theta = theta + a_p * d_theta
        Z = [_sym(Zb + a_p * dZb) for Zb, dZb in zip(Z, d_Z)]
        lam = lam + a_d * d_lam
        S = [_sym(Sb + a_d * dSb) for Sb, dSb in zip(S, d_S)]

    raise ConicConvergenceError(
        f"no convergence in {max_iter} iterations "
        f"(best residuals p={best.rel_primal:.2e} d={best.rel_dual:.2e} "
        f"gap={best.rel_gap:.2e})",
        best,
    )


def _solve_psd(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    reg = 1e-12 * (np.trace(A) / max(len(b), 1) + 1.0)
    fact = scipy.linalg.cho_factor(A + reg * np.eye(len(b)), lower=True)
    return scipy.linalg.cho_solve(fact, b)


def _factor_with_bump(A: np.ndarray):
    """(cho_factor, bumped matrix) with the smallest bump that factors."""
    bump = 1e-12 * (np.trace(A) / max(A.shape[0], 1) + 1.0)
    for _ in range(20):
        bumped = A + bump * np.eye(A.shape[0])
        try:
            return scipy.linalg.cho_factor(bumped, lower=True), bumped
        except scipy.linalg.LinAlgError:
            bump *= 100.0
    raise scipy.linalg.LinAlgError("Schur complement not positive definite")
