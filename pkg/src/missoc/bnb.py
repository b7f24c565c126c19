"""Branch-and-bound solver for the separable surrogate MINLP.

Separability is the whole game: the objective is a sum of univariate
piecewise polynomials, so every node relaxation is a small LP whose only
nonlinear content is handled by per-interval linear underestimators of the
univariate pieces (tangents on convex pieces, the secant on concave ones, a
Bernstein-shifted secant on mixed-curvature ones). Branching fixes the
interval binaries, bisects deviation ranges where the envelope is loose, and
enforces integrality of integer original variables; node selection is
best-bound with FIFO tie-break, so runs are deterministic.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .splines import taylor_shift
from .surrogate import SurrogateMINLP, eval_surrogate_at

MAX_BERNSTEIN_DEGREE = 7
FRAC_TOL = 1e-6
PRUNE_TOL = 1e-9


class UnsupportedSurrogateError(ValueError):
    """The surrogate contains parts the built-in solver cannot bound."""


def optimality_gap(ub: float, lb: float) -> float:
    """Percent gap 100 |ub - lb| / |ub|; +inf when ub = 0 and lb != ub."""
    if not math.isfinite(ub):
        raise ValueError("upper bound must be finite")
    if ub == 0.0:
        return 0.0 if lb == ub else math.inf
    return 100.0 * abs(ub - lb) / abs(ub)


def bernstein_bounds(coeffs, lo: float, hi: float) -> tuple[float, float]:
    """Enclosure of a power-basis polynomial's range over [lo, hi] from its
    Bernstein coefficients; exact at the endpoints, degree at most 7."""
    coeffs = np.asarray(coeffs, dtype=float)
    n = len(coeffs) - 1
    if n > MAX_BERNSTEIN_DEGREE:
        raise ValueError(f"degree {n} exceeds {MAX_BERNSTEIN_DEGREE}")
    if not hi >= lo:
        raise ValueError(f"empty interval [{lo}, {hi}]")
    if n <= 0:
        v = coeffs[0] if len(coeffs) else 0.0
        return float(v), float(v)
    # rescale to t in [0, 1]: q(t) = p(lo + w t)
    w = hi - lo
    shifted = taylor_shift(coeffs, lo)  # p(x) = sum shifted_i (x - lo)^i
    scaled = shifted * w ** np.arange(n + 1)
    # power -> Bernstein: B_j = sum_i C(j,i)/C(n,i) scaled_i
    B = np.empty(n + 1)
    for j in range(n + 1):
        B[j] = sum(
            math.comb(j, i) / math.comb(n, i) * scaled[i]
            for i in range(j + 1)
        )
    return float(B.min()), float(B.max())


def _poly_val(coeffs, x):
    return float(np.polynomial.polynomial.polyval(x, coeffs))


def _poly_der(coeffs):
    c = np.asarray(coeffs, dtype=float)
    if len(c) <= 1:
        return np.zeros(1)
    return c[1:] * np.arange(1, len(c))


def interval_cuts(phi, lo: float, hi: float) -> list[tuple[float, float]]:
    """Linear underestimators (a, b) with a*x + b <= phi(x) on [lo, hi].

    phi is the deviation polynomial of one interval (power basis, zero
    constant term on unrefined intervals). Convex pieces get tangents,
    concave ones the secant (their convex envelope), mixed curvature gets
    the secant shifted down by a Bernstein bound of its overshoot.
    """
    phi = np.asarray(phi, dtype=float)
    if hi - lo <= 1e-14:
        v = _poly_val(phi, 0.5 * (lo + hi))
        return [(0.0, v)]
    cuts = []
    second = _poly_der(_poly_der(phi))
    curv_lo, curv_hi = bernstein_bounds(second, lo, hi)
    scale = max(1.0, np.abs(phi).max())
    if curv_lo >= -1e-12 * scale:  # convex on the interval
        for p in np.linspace(lo, hi, 5):
            a = _poly_val(_poly_der(phi), p)
            cuts.append((a, _poly_val(phi, p) - a * p))
    else:
        a = (_poly_val(phi, hi) - _poly_val(phi, lo)) / (hi - lo)
        b = _poly_val(phi, lo) - a * lo
        if curv_hi <= 1e-12 * scale:  # concave: secant is the envelope
            cuts.append((a, b))
        else:  # mixed: shift the secant below the overshoot
            over = np.zeros(max(len(phi), 2))
            over[: len(phi)] -= phi
            over[0] += b
            over[1] += a
            _, delta = bernstein_bounds(over, lo, hi)
            cuts.append((a, b - max(delta, 0.0)))
    lo_val, _ = bernstein_bounds(phi, lo, hi)
    cuts.append((0.0, lo_val))
    return cuts


@dataclass(frozen=True)
class Node:
    depth: int
    lb: float
    y_fixed: dict  # (j, q) -> 0 or 1
    dev_bounds: dict  # (j, q) -> (lo, hi), overriding [0, width]
    var_bounds: dict  # name -> (lo, hi), overriding the box


@dataclass
class SolveReport:
    x: np.ndarray | None
    objective: float
    lower_bound: float
    gap_pct: float
    nodes: int
    time_s: float
    status: str
    log: list = field(default_factory=list)

    def csv_row(self) -> str:
        obj = f"{self.objective:.12g}" if self.x is not None else ""
        return (
            f"{obj},{self.lower_bound:.12g},{self.gap_pct:.6g},"
            f"{self.nodes},{self.time_s:.3f},{self.status}"
        )


class _LPBuilder:
    """Column layout and fixed rows shared by all node LPs of one solve."""

    def __init__(self, surr: SurrogateMINLP):
        self.surr = surr
        self.nv = len(surr.variables)
        self.col_x = {v.name: j for j, v in enumerate(surr.variables)}
        col = self.nv
        self.col_y = {}
        self.col_dev = {}
        self.col_sp = {}
        for j, comp in enumerate(surr.components):
            for q in range(comp.k):
                self.col_y[j, q] = col
                self.col_dev[j, q] = col + 1
                self.col_sp[j, q] = col + 2
                col += 3
        self.col_sigma = {}
        for j in range(len(surr.components)):
            self.col_sigma[j] = col
            col += 1
        self.ncols = col

        self.obj = np.zeros(self.ncols)
        for name, coeff in surr.linear.items():
            self.obj[self.col_x[name]] += coeff
        for j in range(len(surr.components)):
            self.obj[self.col_sigma[j]] += 1.0

        # rows independent of the node
        self.A_eq = []
        self.b_eq = []
        self.A_ub = []
        self.b_ub = []
        for j, comp in enumerate(surr.components):
            row = np.zeros(self.ncols)
            for q in range(comp.k):
                row[self.col_y[j, q]] = 1.0
            self._eq(row, 1.0)
            row = np.zeros(self.ncols)
            row[self.col_x[comp.var]] = 1.0
            for q in range(comp.k):
                row[self.col_y[j, q]] = -comp.breakpoints[q]
                row[self.col_dev[j, q]] = -1.0
            self._eq(row, 0.0)
            row = np.zeros(self.ncols)
            row[self.col_sigma[j]] = 1.0
            for q in range(comp.k):
                row[self.col_sp[j, q]] = -1.0
            self._eq(row, 0.0)
            for q in range(comp.k):
                row = np.zeros(self.ncols)
                row[self.col_dev[j, q]] = 1.0
                row[self.col_y[j, q]] = -comp.widths[q]
                self._ub(row, 0.0)
        for con in surr.linear_constraints:
            row = np.zeros(self.ncols)
            for name, coeff in con.coeffs.items():
                row[self.col_x[name]] = coeff
            if con.relation == "=":
                self._eq(row, -con.constant)
            else:
                self._ub(row, -con.constant)

    def _eq(self, row, rhs):
        self.A_eq.append(row)
        self.b_eq.append(rhs)

    def _ub(self, row, rhs):
        self.A_ub.append(row)
        self.b_ub.append(rhs)


def _node_dev_range(surr, node, j, q):
    lo, hi = node.dev_bounds.get((j, q), (0.0, surr.components[j].widths[q]))
    return lo, hi


def relax_node(builder: _LPBuilder, node: Node):
    """Solve the node LP. Returns (status, value, z) where status is
    'optimal' or 'infeasible' and value includes the surrogate constant."""
    surr = builder.surr
    bounds = [None] * builder.ncols
    for v in surr.variables:
        lo, hi = node.var_bounds.get(v.name, (v.lower, v.upper))
        bounds[builder.col_x[v.name]] = (lo, hi)
        if lo > hi:
            return "infeasible", math.inf, None
    A_ub = list(builder.A_ub)
    b_ub = list(builder.b_ub)
    for j, comp in enumerate(surr.components):
        for q in range(comp.k):
            yfix = node.y_fixed.get((j, q))
            if yfix is None:
                bounds[builder.col_y[j, q]] = (0.0, 1.0)
            else:
                bounds[builder.col_y[j, q]] = (float(yfix), float(yfix))
            lo, hi = _node_dev_range(surr, node, j, q)
            if yfix == 0:
                lo, hi = 0.0, 0.0
            bounds[builder.col_dev[j, q]] = (lo, hi)
            bounds[builder.col_sp[j, q]] = (
                (0.0, 0.0) if yfix == 0 else (None, None)
            )
            phi = comp.piece.coeffs[q].copy()
            c0 = phi[0]
            phi[0] = 0.0
            for a, b in interval_cuts(phi, lo, hi):
                # sp >= (c0+b)*y + a*dev: the intercept rides on y so the
                # cut reduces to sp >= 0 at y = 0 and to the plain affine
                # underestimator at y = 1
                row = np.zeros(builder.ncols)
                row[builder.col_sp[j, q]] = -1.0
                row[builder.col_y[j, q]] = c0 + b
                row[builder.col_dev[j, q]] = a
                A_ub.append(row)
                b_ub.append(0.0)
        bounds[builder.col_sigma[j]] = (None, None)

    # identify intervals whose deviation polynomial is convex over the node
    # range; those admit exact tangent cuts at the LP point (Kelley loop)
    convex_keys = []
    for j, comp in enumerate(surr.components):
        for q in range(comp.k):
            if node.y_fixed.get((j, q)) == 0:
                continue
            lo, hi = bounds[builder.col_dev[j, q]]
            if hi - lo <= 1e-14:
                continue
            phi = comp.piece.coeffs[q].copy()
            phi[0] = 0.0
            curv_lo, _ = bernstein_bounds(
                _poly_der(_poly_der(phi)), lo, hi
            )
            if curv_lo >= -1e-12 * max(1.0, np.abs(phi).max()):
                convex_keys.append((j, q, phi))

    res = None
    for _ in range(12):
        res = scipy.optimize.linprog(
            builder.obj,
            A_ub=np.array(A_ub),
            b_ub=np.array(b_ub),
            A_eq=np.array(builder.A_eq),
            b_eq=np.array(builder.b_eq),
            bounds=bounds,
            method="highs",
        )
        if res.status == 2 or not res.success:
            return "infeasible", math.inf, None
        z = res.x
        added = 0
        for j, q, phi in convex_keys:
            y = z[builder.col_y[j, q]]
            dev = z[builder.col_dev[j, q]]
            c0 = surr.components[j].piece.coeffs[q][0]
            gap = c0 * y + _poly_val(phi, dev) - z[builder.col_sp[j, q]]
            if gap <= 1e-10 * max(1.0, abs(z[builder.col_sp[j, q]])):
                continue
            a = _poly_val(_poly_der(phi), dev)
            b = _poly_val(phi, dev) - a * dev
            row = np.zeros(builder.ncols)
            row[builder.col_sp[j, q]] = -1.0
            row[builder.col_y[j, q]] = c0 + b
            row[builder.col_dev[j, q]] = a
            A_ub.append(row)
            b_ub.append(0.0)
            added += 1
        if added == 0:
            break
    return "optimal", float(res.fun) + surr.constant, res.x


def _try_incumbent(builder: _LPBuilder, z) -> tuple[float, np.ndarray] | None:
    """Lift the LP point's original coordinates into a feasible surrogate
    solution; integer variables are rounded and feasibility rechecked."""
    surr = builder.surr
    x = np.array([z[builder.col_x[v.name]] for v in surr.variables])
    for j, v in enumerate(surr.variables):
        if v.integer:
            x[j] = round(x[j])
        x[j] = min(max(x[j], v.lower), v.upper)
    comp_dom = {c.var: (c.breakpoints[0], c.breakpoints[-1]) for c in surr.components}
    idx = surr.var_index()
    for name, (lo, hi) in comp_dom.items():
        x[idx[name]] = min(max(x[idx[name]], lo), hi)
    for con in surr.linear_constraints:
        val = con.constant + sum(
            c * x[idx[n]] for n, c in con.coeffs.items()
        )
        if con.relation == "=":
            if abs(val) > 1e-6:
                return None
        elif val > 1e-6:
            return None
    value, _ = eval_surrogate_at(surr, x)
    return value, x


def _branch(builder: _LPBuilder, node: Node, z) -> list[Node] | None:
    """Children of the node, or None when the LP point is branch-free."""
    surr = builder.surr

    best_frac, best_key = FRAC_TOL, None
    for key, col in builder.col_y.items():
        if key in node.y_fixed:
            continue
        frac = min(z[col], 1.0 - z[col])
        if frac > best_frac:
            best_frac, best_key = frac, key
    if best_key is not None:
        children = []
        for val in (0, 1):
            fixed = dict(node.y_fixed)
            fixed[best_key] = val
            j = best_key[0]
            if val == 1:
                for q in range(surr.components[j].k):
                    if q != best_key[1]:
                        fixed[j, q] = 0
            children.append(
                Node(node.depth + 1, node.lb, fixed, node.dev_bounds,
                     node.var_bounds)
            )
        return children

    for v in surr.variables:
        if not v.integer:
            continue
        xv = z[builder.col_x[v.name]]
        if abs(xv - round(xv)) > FRAC_TOL:
            lo, hi = node.var_bounds.get(v.name, (v.lower, v.upper))
            children = []
            for new in ((lo, math.floor(xv)), (math.ceil(xv), hi)):
                vb = dict(node.var_bounds)
                vb[v.name] = (float(new[0]), float(new[1]))
                children.append(
                    Node(node.depth + 1, node.lb, node.y_fixed,
                         node.dev_bounds, vb)
                )
            return children

    best_gap, best_key = 1e-9, None
    for (j, q), col in builder.col_y.items():
        if z[col] < 0.5:
            continue
        coeffs = surr.components[j].piece.coeffs[q]
        phi = coeffs.copy()
        phi[0] = 0.0
        dev = z[builder.col_dev[j, q]]
        true_sp = coeffs[0] * z[col] + _poly_val(phi, dev)
        gap = true_sp - z[builder.col_sp[j, q]]
        if gap > best_gap:
            best_gap, best_key = gap, (j, q)
    if best_key is None:
        return None
    j, q = best_key
    lo, hi = _node_dev_range(surr, node, j, q)
    dev = z[builder.col_dev[j, q]]
    m = min(max(dev, lo + 0.2 * (hi - lo)), hi - 0.2 * (hi - lo))
    left_dev = dict(node.dev_bounds)
    left_dev[j, q] = (lo, m)
    right_dev = dict(node.dev_bounds)
    right_dev[j, q] = (m, hi)
    right_fixed = dict(node.y_fixed)
    right_fixed[j, q] = 1
    for qq in range(surr.components[j].k):
        if qq != q:
            right_fixed[j, qq] = 0
    return [
        Node(node.depth + 1, node.lb, node.y_fixed, left_dev, node.var_bounds),
        Node(node.depth + 1, node.lb, right_fixed, right_dev, node.var_bounds),
    ]


def solve(
    surrogate: SurrogateMINLP,
    time_limit: float = 600.0,
    node_cap: int = 200_000,
    gap_tol: float = 1e-4,
    collect_log: bool = False,
) -> SolveReport:
    """Best-bound branch-and-bound; deterministic for identical inputs."""
    if surrogate.residual_objective is not None:
        raise UnsupportedSurrogateError(
            "surrogate carries an unsubstituted objective expression"
        )
    if surrogate.nonlinear_constraints:
        raise UnsupportedSurrogateError(
            "nonlinear original constraints are not supported by the "
            "built-in solver"
        )
    start = time.monotonic()
    builder = _LPBuilder(surrogate)
    root = Node(0, -math.inf, {}, {}, {})
    heap = []
    counter = 0
    heapq.heappush(heap, (-math.inf, counter, root))
    incumbent = None
    ub = math.inf
    nodes = 0
    log = []
    status = "optimal"
    pruned_lb = math.inf  # weakest bound among abandoned subtrees

    while heap:
        lb_global = min(heap[0][0], pruned_lb)
        if incumbent is not None:
            gap = optimality_gap(ub, min(lb_global, ub))
            if gap <= 100.0 * gap_tol:
                break
        if time.monotonic() - start > time_limit:
            status = "time_limit"
            break
        if nodes >= node_cap:
            status = "node_cap"
            break
        _, _, node = heapq.heappop(heap)
        nodes += 1
        lp_status, lb, z = relax_node(builder, node)
        if lp_status != "optimal":
            continue
        if lb >= ub - PRUNE_TOL * max(1.0, abs(ub)):
            pruned_lb = min(pruned_lb, lb)
            continue
        cand = _try_incumbent(builder, z)
        if cand is not None and cand[0] < ub - 1e-12:
            ub, incumbent = cand[0], cand[1]
        if collect_log:
            lo_now = min(lb, heap[0][0] if heap else lb)
            log.append((nodes, node.depth, lo_now,
                        ub if incumbent is not None else math.nan,
                        optimality_gap(ub, lo_now)
                        if incumbent is not None else math.nan))
        if ub - lb <= max(
            1e-12, 0.5 * gap_tol * max(1.0, abs(ub))
        ) and incumbent is not None:
            pruned_lb = min(pruned_lb, lb)
            continue  # node cannot improve the incumbent meaningfully
        children = _branch(builder, node, z)
        if children is None:
            pruned_lb = min(pruned_lb, lb)
            continue  # LP point is exact for this node
        for child in children:
            counter += 1
            heapq.heappush(heap, (lb, counter, child))

    if incumbent is None:
        lb_final = min(heap[0][0], pruned_lb) if heap else pruned_lb
        return SolveReport(
            x=None,
            objective=math.nan,
            lower_bound=lb_final,
            gap_pct=math.nan,
            nodes=nodes,
            time_s=time.monotonic() - start,
            status="no_incumbent" if status == "optimal" else status,
            log=log,
        )
    lb_final = min(heap[0][0], pruned_lb, ub) if heap else min(pruned_lb, ub)
    gap = optimality_gap(ub, lb_final)
    if status == "optimal" and gap > 100.0 * gap_tol:
        status = "tolerance_not_met"
    return SolveReport(
        x=incumbent,
        objective=ub,
        lower_bound=lb_final,
        gap_pct=gap,
        nodes=nodes,
        time_s=time.monotonic() - start,
        status=status,
        log=log,
    )


def write_log_csv(report: SolveReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("node,depth,lb,ub,gap_pct\n")
        for row in report.log:
            fh.write(",".join(f"{v:.12g}" for v in row) + "\n")
