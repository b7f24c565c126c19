"""B-spline bases over extended knot sequences and piecewise-polynomial conversion.

A basis of degree ``d`` over ``k`` internal intervals has ``k + d`` functions.
The internal knot span ``[t[d], t[d+k]]`` (0-based positions in the extended
sequence) is the data domain; external knots replicate the width of the
adjacent boundary interval so every internal interval is covered by exactly
``d + 1`` nonzero basis functions.

Interval convention: intervals are half-open ``[t_q, t_{q+1})`` except the
last internal interval, which is closed so evaluation at the domain maximum
is well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidKnotsError(ValueError):
    """Internal knots are not strictly increasing."""


class DegenerateDomainError(ValueError):
    """Fewer than two internal knots; no interval to model."""


class OutOfDomainError(ValueError):
    """A sample lies outside the internal knot range of its covariate."""


@dataclass(frozen=True)
class KnotVector:
    """Extended knot sequence for one covariate.

    ``internal`` has k+1 strictly increasing entries spanning the data domain,
    ``extended`` has k + 2d + 1 entries with ``extended[d] == internal[0]``
    and ``extended[d + k] == internal[-1]``.
    """

    internal: np.ndarray
    extended: np.ndarray
    degree: int

    @property
    def k(self) -> int:
        return len(self.internal) - 1

    @property
    def n_basis(self) -> int:
        return self.k + self.degree

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.internal[0]), float(self.internal[-1])


def extend_knots(internal, degree: int) -> KnotVector:
    """Extend internal knots by ``degree`` knots on each side.

    External knots replicate the first/last internal interval width outward,
    which keeps the sequence strictly increasing and conditioning predictable.
    """
    internal = np.asarray(internal, dtype=float)
    if internal.ndim != 1 or len(internal) < 2:
        raise DegenerateDomainError(
            "need at least 2 internal knots, got %d" % internal.size
        )
    if not np.all(np.diff(internal) > 0):
        raise InvalidKnotsError("internal knots must be strictly increasing")
    d = int(degree)
    if d < 0:
        raise ValueError("degree must be nonnegative")
    h_lo = internal[1] - internal[0]
    h_hi = internal[-1] - internal[-2]
    left = internal[0] - h_lo * np.arange(d, 0, -1)
    right = internal[-1] + h_hi * np.arange(1, d + 1)
    extended = np.concatenate([left, internal, right])
    return KnotVector(internal=internal, extended=extended, degree=d)


@dataclass(frozen=True)
class BSplineBasis:
    """B-spline basis of one covariate; immutable, evaluation is pure."""

    knots: KnotVector
    label: str = "x"

    @property
    def degree(self) -> int:
        return self.knots.degree

    @property
    def k(self) -> int:
        return self.knots.k

    @property
    def n_basis(self) -> int:
        return self.knots.n_basis

    @property
    def domain(self) -> tuple[float, float]:
        return self.knots.domain

    def interval_of(self, x: float) -> int:
        """Internal interval index (0-based) containing x under the half-open
        convention [t_q, t_{q+1}), with the last interval closed."""
        lo, hi = self.domain
        if not (lo <= x <= hi):
            raise OutOfDomainError(
                f"{self.label}={x!r} outside knot range [{lo}, {hi}]"
            )
        t = self.knots.internal
        if x >= t[-1]:
            return self.k - 1
        return int(np.searchsorted(t, x, side="right")) - 1

    def eval_all(self, x: float) -> np.ndarray:
        """Values of all k + d basis functions at x (dense length-(k+d) row)."""
        q = self.interval_of(x)
        vals = self._nonzero_at(x, q)
        out = np.zeros(self.n_basis)
        out[q : q + self.degree + 1] = vals
        return out

    def eval_matrix(self, xs) -> np.ndarray:
        """Basis values for an array of points: row i is ``eval_all(xs[i])``.

        Same triangular scheme as ``eval_all``, vectorized over the points.
        """
        xs = np.asarray(xs, dtype=float).ravel()
        lo, hi = self.domain
        if xs.size and (xs.min() < lo or xs.max() > hi):
            bad = xs[(xs < lo) | (xs > hi)][0]
            raise OutOfDomainError(
                f"{self.label}={bad!r} outside knot range [{lo}, {hi}]"
            )
        d = self.degree
        t = self.knots.extended
        internal = self.knots.internal
        q = np.searchsorted(internal, xs, side="right") - 1
        q[xs >= internal[-1]] = self.k - 1
        pos = q + d
        n = len(xs)
        vals = np.zeros((n, d + 1))
        left = np.zeros((n, d + 1))
        right = np.zeros((n, d + 1))
        vals[:, 0] = 1.0
        for r in range(1, d + 1):
            left[:, r] = xs - t[pos + 1 - r]
            right[:, r] = t[pos + r] - xs
            saved = np.zeros(n)
            for s in range(r):
                term = vals[:, s] / (right[:, s + 1] + left[:, r - s])
                vals[:, s] = saved + right[:, s + 1] * term
                saved = left[:, r - s] * term
            vals[:, r] = saved
        out = np.zeros((n, self.n_basis))
        out[np.arange(n)[:, None], q[:, None] + np.arange(d + 1)] = vals
        return out

    def _nonzero_at(self, x: float, q_int: int) -> np.ndarray:
        """The d+1 nonzero basis values on internal interval q_int,
        i.e. B_{q_int}, ..., B_{q_int+d} (0-based), via the triangular
        Cox-de Boor scheme."""
        d = self.degree
        t = self.knots.extended
        pos = q_int + d  # position of the interval in the extended sequence
        vals = np.zeros(d + 1)
        left = np.zeros(d + 1)
        right = np.zeros(d + 1)
        vals[0] = 1.0
        for r in range(1, d + 1):
            left[r] = x - t[pos + 1 - r]
            right[r] = t[pos + r] - x
            saved = 0.0
            for s in range(r):
                term = vals[s] / (right[s + 1] + left[r - s])
                vals[s] = saved + right[s + 1] * term
                saved = left[r - s] * term
            vals[r] = saved
        return vals


def bspline_value(l: int, basis: BSplineBasis, x: float) -> float:
    """Value of the l-th basis function (1-based, l in 1..k+d) at x."""
    if not (1 <= l <= basis.n_basis):
        raise IndexError(f"basis index {l} out of 1..{basis.n_basis}")
    return float(basis.eval_all(x)[l - 1])


def _poly_mul_linear(p: np.ndarray, a: float, b: float) -> np.ndarray:
    """Multiply polynomial p (ascending coefficients) by (a + b x)."""
    out = np.zeros(len(p) + 1)
    out[: len(p)] += a * p
    out[1:] += b * p
    return out


def _segment_coeffs(l: int, basis: BSplineBasis, q: int, ref: float) -> np.ndarray:
    """Power-basis coefficients in (x - ref) of basis function l's segment on
    internal interval q, via the Cox-de Boor recursion on coefficient vectors.

    ``ref = 0`` gives plain power-basis coefficients; ``ref`` at the interval
    start keeps the recursion well conditioned for fine knots at high degree.
    """
    d = basis.degree
    t = basis.knots.extended
    pos = q + d  # extended-sequence index of the interval [t[pos], t[pos+1])

    def seg(i: int, deg: int) -> np.ndarray:
        # coefficients of B_{i,deg} (0-based extended index) on the interval
        if deg == 0:
            p = np.zeros(1)
            if i == pos:
                p[0] = 1.0
            return p
        p = np.zeros(deg + 1)
        den1 = t[i + deg] - t[i]
        if den1 > 0:
            p += _poly_mul_linear(
                seg(i, deg - 1), (ref - t[i]) / den1, 1.0 / den1
            )
        den2 = t[i + deg + 1] - t[i + 1]
        if den2 > 0:
            p += _poly_mul_linear(
                seg(i + 1, deg - 1), (t[i + deg + 1] - ref) / den2, -1.0 / den2
            )
        return p

    return seg(l - 1, d)


def segment_poly_coeffs(l: int, basis: BSplineBasis, q: int) -> np.ndarray:
    """Exact power-basis coefficients (in x, ascending, length d+1) of the
    segment of basis function l (1-based) on internal interval q (0-based).

    Intervals outside the support of l yield all zeros.
    """
    if not (1 <= l <= basis.n_basis):
        raise IndexError(f"basis index {l} out of 1..{basis.n_basis}")
    return _segment_coeffs(l, basis, q, 0.0)


def taylor_shift(coeffs: np.ndarray, c: float) -> np.ndarray:
    """Rewrite p(x) = sum a_i x^i as sum b_i (x - c)^i via repeated synthetic
    division (Horner shift); stable, no factorials."""
    b = np.array(coeffs, dtype=float)
    n = len(b)
    for i in range(n - 1):
        for j in range(n - 2, i - 1, -1):
            b[j] += c * b[j + 1]
    return b


@dataclass(frozen=True)
class PiecewisePoly:
    """Piecewise polynomial in shifted power basis.

    On interval q (between ``breakpoints[q]`` and ``breakpoints[q+1]``) the
    value is ``sum_d coeffs[q, d] * (x - breakpoints[q])**d``.
    """

    breakpoints: np.ndarray
    coeffs: np.ndarray  # shape (k, d+1)

    @property
    def k(self) -> int:
        return len(self.breakpoints) - 1

    @property
    def degree(self) -> int:
        return self.coeffs.shape[1] - 1

    def interval_of(self, x: float) -> int:
        t = self.breakpoints
        if not (t[0] <= x <= t[-1]):
            raise OutOfDomainError(f"{x!r} outside [{t[0]}, {t[-1]}]")
        if x >= t[-1]:
            return self.k - 1
        q = int(np.searchsorted(t, x, side="right")) - 1
        if q > 0 and x == t[q]:
            return q - 1
        return q

    def __call__(self, x: float) -> float:
        q = self.interval_of(x)
        dx = x - self.breakpoints[q]
        return float(np.polynomial.polynomial.polyval(dx, self.coeffs[q]))

    def derivative(self) -> "PiecewisePoly":
        d = self.degree
        if d == 0:
            return PiecewisePoly(self.breakpoints, np.zeros((self.k, 1)))
        dcoef = self.coeffs[:, 1:] * np.arange(1, d + 1)
        return PiecewisePoly(self.breakpoints, dcoef)


def to_piecewise_poly(theta, basis: BSplineBasis) -> PiecewisePoly:
    """Convert a coefficient vector on the basis into per-interval shifted
    power-basis polynomials."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (basis.n_basis,):
        raise ValueError(
            f"expected {basis.n_basis} coefficients, got {theta.shape}"
        )
    d = basis.degree
    k = basis.k
    coeffs = np.zeros((k, d + 1))
    for q in range(k):
        ref = basis.knots.internal[q]
        p = np.zeros(d + 1)
        for l in range(q + 1, q + d + 2):  # the d+1 active basis functions
            if theta[l - 1] != 0.0:
                p += theta[l - 1] * _segment_coeffs(l, basis, q, ref)
        coeffs[q] = p
    return PiecewisePoly(breakpoints=basis.knots.internal.copy(), coeffs=coeffs)


def make_basis(lo: float, hi: float, k: int, degree: int, label: str = "x") -> BSplineBasis:
    """Equidistant internal knots on [lo, hi] with k intervals."""
    if not (hi > lo):
        raise DegenerateDomainError(f"empty domain [{lo}, {hi}]")
    internal = np.linspace(lo, hi, k + 1)
    return BSplineBasis(knots=extend_knots(internal, degree), label=label)


def design_matrix(samples: np.ndarray, bases: list[BSplineBasis]) -> np.ndarray:
    """Full design matrix [1 : B_1 : ... : B_p] for an n x p sample array."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n, p = samples.shape
    if p != len(bases):
        raise ValueError(f"{p} sample columns but {len(bases)} bases")
    cols = [np.ones((n, 1))]
    for j, basis in enumerate(bases):
        cols.append(basis.eval_matrix(samples[:, j]))
    return np.hstack(cols)
