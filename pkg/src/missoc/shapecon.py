"""Shape-constrained additive model fitting.

Bounds, monotonicity, and convexity of each fitted component are enforced
over the whole observed domain through per-interval nonnegativity
certificates: a polynomial is nonnegative on an interval exactly when a small
PSD matrix with prescribed anti-diagonal sums exists. The anti-diagonal
selectors (H), the interval coefficient transform (W), and the basis-segment
coefficient map (G) assemble those certificates into linear rows coupling the
PSD blocks to the regression coefficients.

Monotonicity and convexity reuse the same machinery on the derivative (or
second-derivative) coefficient map, with blocks one (or two) orders smaller.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .conic import (
    ConicBlock,
    ConicConvergenceError,
    ConicInfeasibleError,
    ConicProblem,
    solve_conic,
)
from .regression import (
    AdditiveModelFit,
    TrainingSet,
    block_slices,
    make_bases,
)
from .splines import BSplineBasis, design_matrix, segment_poly_coeffs


class InfeasibleSpecError(ValueError):
    """The shape specification admits no feasible coefficient vector."""


class ShapeFitConvergenceError(RuntimeError):
    """The conic solve hit its iteration cap; best iterate attached."""

    def __init__(self, message: str, best_fit: AdditiveModelFit):
        super().__init__(message)
        self.best_fit = best_fit


INCREASING = "increasing"
DECREASING = "decreasing"
CONVEX = "convex"
CONCAVE = "concave"


@dataclass(frozen=True)
class PointwiseSet:
    """Training indices constrained against their observed responses."""

    relation: str  # "=", "<=" (underestimation) or ">=" (overestimation)
    indices: tuple[int, ...]

    def __post_init__(self):
        if self.relation not in ("=", "<=", ">="):
            raise ValueError(f"unknown pointwise relation {self.relation!r}")
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))


@dataclass(frozen=True)
class ShapeSpec:
    """Shape requirements for a constrained fit.

    ``monotone`` and ``curvature`` map covariate labels to directions;
    weights, when given, must lie in (0,1) and sum to 1 per side.
    """

    lower: float | None = None
    upper: float | None = None
    weights_lower: tuple[float, ...] | None = None
    weights_upper: tuple[float, ...] | None = None
    monotone: dict[str, str] = field(default_factory=dict)
    curvature: dict[str, str] = field(default_factory=dict)
    pointwise: tuple[PointwiseSet, ...] = ()

    def __post_init__(self):
        if self.lower is not None and self.upper is not None:
            if not self.lower < self.upper:
                raise ValueError("need lower < upper")
        for side in (self.weights_lower, self.weights_upper):
            if side is not None:
                w = np.asarray(side, dtype=float)
                if abs(w.sum() - 1.0) > 1e-10:
                    raise ValueError("weights must sum to 1 per side")
                if np.any(w <= 0) or np.any(w >= 1):
                    if len(w) > 1:
                        raise ValueError("weights must lie in (0, 1)")
        for direction in self.monotone.values():
            if direction not in (INCREASING, DECREASING):
                raise ValueError(f"unknown monotone direction {direction!r}")
        for direction in self.curvature.values():
            if direction not in (CONVEX, CONCAVE):
                raise ValueError(f"unknown curvature {direction!r}")

    @property
    def is_empty(self) -> bool:
        return (
            self.lower is None
            and self.upper is None
            and not self.monotone
            and not self.curvature
            and not self.pointwise
        )


def build_H(d: int) -> np.ndarray:
    """The 2d+1 anti-diagonal selector matrices of order d+1 (1-based rule:
    ones where i+j = 2(d+1-l)+1 for l <= d, i+j = 2(2d+2-l) for l > d)."""
    H = np.zeros((2 * d + 1, d + 1, d + 1))
    for l in range(1, 2 * d + 2):
        target = 2 * (d + 1 - l) + 1 if l <= d else 2 * (2 * d + 2 - l)
        for i in range(1, d + 2):
            j = target - i
            if 1 <= j <= d + 1:
                H[l - 1, i - 1, j - 1] = 1.0
    return H


def build_W(d: int, t_lo: float, t_hi: float) -> np.ndarray:
    """Interval coefficient transform of order d+1.

    Row r holds the coefficient of u^(r-1) in (1+u)^d p((t_lo + t_hi u)/(1+u))
    as a linear function of the power-basis coefficients of p.
    """
    if not t_lo < t_hi:
        raise ValueError(f"degenerate interval [{t_lo}, {t_hi}]")
    W = np.zeros((d + 1, d + 1))
    for i in range(1, d + 2):
        for j in range(1, d + 2):
            acc = 0.0
            for m in range(max(0, i + j - 2 - d), min(i - 1, j - 1) + 1):
                acc += (
                    math.comb(j - 1, m)
                    * math.comb(d - j + 1, i - 1 - m)
                    * t_lo ** (j - 1 - m)
                    * t_hi**m
                )
            W[i - 1, j - 1] = acc
    return W


def build_G(q: int, basis: BSplineBasis) -> np.ndarray:
    """Selection matrix (d+1) x (k+d): G_q theta gives the power-basis
    coefficients (in x) of the fitted component on internal interval q.

    Columns outside the d+1 basis functions active on the interval are zero.
    """
    d = basis.degree
    G = np.zeros((d + 1, basis.n_basis))
    for l in range(q + 1, q + d + 2):  # 1-based active basis indices
        G[:, l - 1] = segment_poly_coeffs(l, basis, q)
    return G


def derivative_map(d: int) -> np.ndarray:
    """d x (d+1) matrix mapping degree-d power coefficients to those of the
    derivative."""
    D = np.zeros((d, d + 1))
    for i in range(d):
        D[i, i + 1] = i + 1
    return D


def estimate_weights(
    fit: AdditiveModelFit, T: TrainingSet
) -> tuple[np.ndarray, np.ndarray]:
    """Data-driven per-covariate bound weights.

    Normalizes the per-component minima (maxima) over the training samples.
    Falls back to uniform weights with a warning when the normalized values
    leave (0, 1), which happens when some component minima (maxima) change
    sign across covariates.
    """
    p = fit.p
    if p == 1:
        return np.array([1.0]), np.array([1.0])
    mins = np.empty(p)
    maxs = np.empty(p)
    for j in range(p):
        vals = np.array([fit.component(j, x) for x in T.X[:, j]])
        mins[j], maxs[j] = vals.min(), vals.max()
    uniform = np.full(p, 1.0 / p)
    w_lo, w_up = uniform, uniform
    if mins.sum() != 0.0:
        cand = mins / mins.sum()
        if np.all((cand > 0) & (cand < 1)):
            w_lo = cand
    if maxs.sum() != 0.0:
        cand = maxs / maxs.sum()
        if np.all((cand > 0) & (cand < 1)):
            w_up = cand
    if w_lo is uniform or w_up is uniform:
        warnings.warn(
            "mixed-sign component extrema; falling back to uniform bound "
            "weights",
            stacklevel=2,
        )
    return w_lo, w_up


@dataclass
class ConicProgram:
    """Assembled constrained-fit program over the non-intercept coefficients.

    Collects the quadratic data plus equality rows coupling the coefficient
    vector to PSD certificate blocks; ``to_problem`` freezes it for the
    interior-point solver.
    """

    Q: np.ndarray
    q: np.ndarray
    dim: int
    rows_C: list[np.ndarray] = field(default_factory=list)
    rows_c: list[float] = field(default_factory=list)
    blocks: list[ConicBlock] = field(default_factory=list)
    # (coeff_map, rhs_poly, sign, t_lo, t_hi) per certificate, for direct
    # post-solve violation checks on the fitted coefficients
    certificates: list[tuple] = field(default_factory=list)

    def add_row(self, coeff_row: np.ndarray, rhs: float) -> int:
        self.rows_C.append(np.asarray(coeff_row, dtype=float))
        self.rows_c.append(float(rhs))
        return len(self.rows_c) - 1

    def add_certificate(
        self,
        coeff_map: np.ndarray,
        rhs_poly: np.ndarray,
        W: np.ndarray,
        sign: float,
        interval: tuple[float, float] | None = None,
    ) -> None:
        """Require sign*(coeff_map @ theta - rhs_poly) >= 0 as a polynomial on
        the interval that W was built for.

        ``coeff_map`` is (d_eff+1) x dim, ``rhs_poly`` the power-basis
        coefficients of the constant side, ``sign`` +1 for lower-type and -1
        for upper-type constraints.
        """
        d_eff = coeff_map.shape[0] - 1
        if interval is not None:
            self.certificates.append(
                (coeff_map, np.array(rhs_poly, dtype=float), sign, *interval)
            )
        H = build_H(d_eff)
        rows = []
        mats = []
        for l in range(d_eff):  # odd anti-diagonals vanish
            rows.append(self.add_row(np.zeros(self.dim), 0.0))
            mats.append(H[l])
        WT = W @ coeff_map
        Wb = W @ rhs_poly
        for r in range(d_eff + 1):
            rows.append(
                self.add_row(-sign * WT[r], -sign * Wb[r])
            )
            mats.append(H[d_eff + r])
        self.blocks.append(
            ConicBlock(
                order=d_eff + 1,
                rows=np.array(rows),
                mats=np.array(mats),
            )
        )

    def add_slack_row(self, coeff_row: np.ndarray, rhs: float) -> None:
        """coeff_row @ theta <= rhs via a nonnegative 1x1 slack block."""
        idx = self.add_row(coeff_row, rhs)
        self.blocks.append(
            ConicBlock(order=1, rows=np.array([idx]), mats=np.ones((1, 1, 1)))
        )

    def to_problem(self) -> ConicProblem:
        K = len(self.rows_c)
        C = (
            np.vstack(self.rows_C) if K else np.zeros((0, self.dim))
        )
        return ConicProblem(
            Q=self.Q,
            q=self.q,
            C=C,
            c=np.array(self.rows_c),
            blocks=self.blocks,
        )


def add_pointwise_rows(
    program: ConicProgram,
    B1: np.ndarray,
    y_centered: np.ndarray,
    sets: tuple[PointwiseSet, ...],
) -> None:
    """Append interpolation / under- / over-estimation rows.

    ``B1`` is the design matrix without the intercept column and
    ``y_centered`` the responses with the (fixed) intercept removed; empty
    index sets are a no-op.
    """
    for ps in sets:
        for i in ps.indices:
            row = B1[i]
            rhs = y_centered[i]
            if ps.relation == "=":
                program.add_row(row, rhs)
            elif ps.relation == "<=":
                program.add_slack_row(row, rhs)
            else:  # ">="
                program.add_slack_row(-row, -rhs)


def build_program(
    T: TrainingSet,
    bases: list[BSplineBasis],
    spec: ShapeSpec,
    margin: float = 0.0,
) -> tuple[ConicProgram, float]:
    """Assemble the conic program for a constrained fit; returns it together
    with the frozen intercept (the response mean).

    A positive ``margin`` tightens every shape certificate from ``>= 0`` to
    ``>= margin``, which is how the restoration pass in ``fit_constrained``
    absorbs the interior-point solver's finite feasibility accuracy.
    """
    alpha = float(T.y.mean())
    B = design_matrix(T.X, bases)
    B1 = B[:, 1:]
    slices = [slice(s.start - 1, s.stop - 1) for s in block_slices(bases)]
    y_c = T.y - alpha

    penalty = np.zeros((B1.shape[1], B1.shape[1]))
    for s in slices:
        col_sums = B1[:, s].sum(axis=0)
        penalty[s, s] = np.outer(col_sums, col_sums)
    # 1/n objective scaling keeps the quadratic data on the same footing as
    # the O(1) certificate rows without moving the minimizer
    Q = (2.0 / T.n) * (B1.T @ B1 + penalty)
    q = (-2.0 / T.n) * (B1.T @ y_c)
    program = ConicProgram(Q=Q, q=q, dim=B1.shape[1])

    p = len(bases)
    needs_bounds = spec.lower is not None or spec.upper is not None
    if needs_bounds:
        w_lo = w_up = None
        if spec.weights_lower is not None:
            w_lo = np.asarray(spec.weights_lower, dtype=float)
        if spec.weights_upper is not None:
            w_up = np.asarray(spec.weights_upper, dtype=float)
        if (spec.lower is not None and w_lo is None) or (
            spec.upper is not None and w_up is None
        ):
            unconstrained = _unconstrained_theta(Q, q)
            base_fit = _fit_from_theta(alpha, unconstrained, bases, slices)
            est_lo, est_up = estimate_weights(base_fit, T)
            w_lo = est_lo if w_lo is None else w_lo
            w_up = est_up if w_up is None else w_up
        for w, side in ((w_lo, spec.lower), (w_up, spec.upper)):
            if side is not None and len(w) != p:
                raise ValueError(
                    f"bound weights must have one entry per covariate ({p})"
                )

    for j, (basis, s) in enumerate(zip(bases, slices)):
        d = basis.degree
        G_full = [build_G(qi, basis) for qi in range(basis.k)]
        maps = []  # (coeff_map factory, rhs constant, sign)
        if spec.lower is not None:
            b = w_lo[j] * (spec.lower - alpha)
            maps.append((np.eye(d + 1), b, +1.0))
        if spec.upper is not None:
            b = w_up[j] * (spec.upper - alpha)
            maps.append((np.eye(d + 1), b, -1.0))
        direction = spec.monotone.get(basis.label)
        if direction is not None:
            if d < 1:
                raise ValueError(
                    f"monotonicity needs degree >= 1 on {basis.label}"
                )
            sign = +1.0 if direction == INCREASING else -1.0
            maps.append((derivative_map(d), 0.0, sign))
        curv = spec.curvature.get(basis.label)
        if curv is not None:
            if d < 2:
                raise ValueError(
                    f"convexity needs degree >= 2 on {basis.label}"
                )
            sign = +1.0 if curv == CONVEX else -1.0
            maps.append((derivative_map(d - 1) @ derivative_map(d), 0.0, sign))

        for qi in range(basis.k):
            t_lo = basis.knots.internal[qi]
            t_hi = basis.knots.internal[qi + 1]
            for transform, b, sign in maps:
                d_eff = transform.shape[0] - 1
                coeff_map = np.zeros((d_eff + 1, program.dim))
                coeff_map[:, s] = transform @ G_full[qi]
                rhs_poly = np.zeros(d_eff + 1)
                # sign*(p - b) >= margin  <=>  sign*(p - (b + sign*margin)) >= 0
                rhs_poly[0] = b + sign * margin
                W = build_W(d_eff, t_lo, t_hi)
                program.add_certificate(
                    coeff_map, rhs_poly, W, sign, interval=(t_lo, t_hi)
                )

    if spec.pointwise:
        _check_pointwise_consistency(T, spec, alpha)
        add_pointwise_rows(program, B1, y_c, spec.pointwise)
    return program, alpha


def _check_pointwise_consistency(T: TrainingSet, spec: ShapeSpec, alpha: float):
    for ps in spec.pointwise:
        for i in ps.indices:
            if not 0 <= i < T.n:
                raise ValueError(f"pointwise index {i} outside 0..{T.n - 1}")
            y = T.y[i]
            if ps.relation in ("=", ">=") and spec.upper is not None:
                if y > spec.upper + 1e-12:
                    raise InfeasibleSpecError(
                        f"pointwise target y[{i}]={y} exceeds upper bound "
                        f"{spec.upper}"
                    )
            if ps.relation in ("=", "<=") and spec.lower is not None:
                if y < spec.lower - 1e-12:
                    raise InfeasibleSpecError(
                        f"pointwise target y[{i}]={y} below lower bound "
                        f"{spec.lower}"
                    )


def shape_violation(program: ConicProgram, theta: np.ndarray, pts: int = 65) -> float:
    """Worst infringement of the program's shape certificates at ``theta``.

    Each certificate demands sign*(p(x) - rhs(x)) >= 0 on its interval; the
    return value is the largest negative excursion over a per-interval grid
    (0.0 when every certificate holds everywhere sampled).
    """
    worst = 0.0
    u = np.linspace(0.0, 1.0, pts)
    for coeff_map, rhs_poly, sign, t_lo, t_hi in program.certificates:
        coeff = sign * (coeff_map @ theta - rhs_poly)
        xs = t_lo + (t_hi - t_lo) * u
        vals = np.polynomial.polynomial.polyval(xs, coeff)
        worst = max(worst, float(-vals.min()))
    return worst


def _restored_solution(
    T, bases, spec, program, sol, gap_tol: float, max_iter: int
):
    """Re-solve with tightened certificates when the returned iterate leaves a
    measurable shape violation.

    The interior-point solver has a finite feasibility floor on hard
    instances (it may stop with a primal residual around 1e-6 relative);
    demanding certificates >= margin instead of >= 0 places that floor
    strictly inside the true feasible set. The margin escalates until the
    unmargined certificates verify on a grid, and the original iterate is
    kept if restoration cannot do better.
    """
    viol = shape_violation(program, sol.theta)
    if viol == 0.0:
        return sol
    margin = 4.0 * viol
    best = sol
    best_viol = viol
    for _ in range(3):
        prog_m, _ = build_program(T, bases, spec, margin=margin)
        try:
            cand = solve_conic(
                prog_m.to_problem(), gap_tol=gap_tol, max_iter=max_iter
            )
        except (ConicInfeasibleError, ConicConvergenceError):
            break
        cand_viol = shape_violation(program, cand.theta)
        if cand_viol < best_viol:
            best, best_viol = cand, cand_viol
        if cand_viol == 0.0:
            break
        margin *= 4.0
    return best


def _unconstrained_theta(Q: np.ndarray, q: np.ndarray) -> np.ndarray:
    import scipy.linalg

    reg = 1e-12 * (np.trace(Q) / max(len(q), 1) + 1.0)
    fact = scipy.linalg.cho_factor(Q + reg * np.eye(len(q)), lower=True)
    return scipy.linalg.cho_solve(fact, -q)


def _fit_from_theta(alpha, theta, bases, slices) -> AdditiveModelFit:
    return AdditiveModelFit(
        intercept=float(alpha),
        coefficients=[theta[s].copy() for s in slices],
        bases=bases,
    )


def fit_constrained(
    T: TrainingSet,
    degrees,
    intervals,
    spec: ShapeSpec,
    domains=None,
    labels=None,
    gap_tol: float = 1e-7,
    max_iter: int = 200,
    return_solution: bool = False,
):
    """Fit the additive model subject to the shape specification.

    The intercept is frozen at the response mean before the constraint system
    is built; the remaining coefficients solve the penalized least-squares
    objective restricted to the certified feasible set.
    """
    bases = make_bases(T, degrees, intervals, domains, labels)
    program, alpha = build_program(T, bases, spec)
    slices = [slice(s.start - 1, s.stop - 1) for s in block_slices(bases)]
    problem = program.to_problem()
    try:
        sol = solve_conic(problem, gap_tol=gap_tol, max_iter=max_iter)
    except ConicInfeasibleError as exc:
        raise InfeasibleSpecError(str(exc)) from exc
    except ConicConvergenceError as exc:
        best_fit = _fit_from_theta(alpha, exc.best.theta, bases, slices)
        raise ShapeFitConvergenceError(str(exc), best_fit) from exc
    sol = _restored_solution(T, bases, spec, program, sol, gap_tol, max_iter)
    fit = _fit_from_theta(alpha, sol.theta, bases, slices)
    B1 = design_matrix(T.X, bases)[:, 1:]
    defects = np.array(
        [B1[:, s].sum(axis=0) @ sol.theta[s] for s in slices]
    )
    out = AdditiveModelFit(
        intercept=fit.intercept,
        coefficients=fit.coefficients,
        bases=bases,
        residual_norm=float(np.linalg.norm(T.y - alpha - B1 @ sol.theta)),
        zero_mean_defects=defects,
    )
    if return_solution:
        return out, sol
    return out
