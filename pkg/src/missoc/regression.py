"""Penalized least-squares fitting of smooth additive B-spline models.

The identifiability penalty forces each fitted component to have zero mean
over the training samples, so the intercept equals the response mean and the
normal equations are well posed despite the constant function lying in the
span of every per-covariate block.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .splines import BSplineBasis, design_matrix, make_basis

DEFAULT_DEGREE = 3
DEFAULT_INTERVALS = 10


class IllPosedFitError(ValueError):
    """The penalized normal equations are numerically singular."""

    def __init__(self, smallest_pivot: float):
        self.smallest_pivot = smallest_pivot
        super().__init__(
            f"rank-deficient fit beyond the identifiability penalty "
            f"(smallest pivot {smallest_pivot:.3e})"
        )


@dataclass(frozen=True)
class TrainingSet:
    """Covariate samples X (n x p) with responses y (length n)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y disagree on sample count")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("training data contains non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def covariate_range(self, j: int) -> tuple[float, float]:
        col = self.X[:, j]
        return float(col.min()), float(col.max())


@dataclass(frozen=True)
class AdditiveModelFit:
    """Fitted additive model: intercept plus one coefficient vector per basis."""

    intercept: float
    coefficients: list[np.ndarray]
    bases: list[BSplineBasis]
    residual_norm: float = 0.0
    zero_mean_defects: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def p(self) -> int:
        return len(self.bases)

    def component(self, j: int, x: float) -> float:
        """Value of the j-th fitted component (zero-mean part, no intercept)."""
        return float(self.bases[j].eval_all(x) @ self.coefficients[j])

    def predict(self, x) -> float:
        x = np.asarray(x, dtype=float).ravel()
        if x.shape != (self.p,):
            raise ValueError(f"expected {self.p} covariate values, got {x.shape}")
        return self.intercept + sum(
            self.component(j, x[j]) for j in range(self.p)
        )

    def theta_full(self) -> np.ndarray:
        """Stacked parameter vector (intercept first)."""
        return np.concatenate([[self.intercept], *self.coefficients])


def block_slices(bases: list[BSplineBasis]) -> list[slice]:
    """Column slices of each per-covariate block in the full design matrix."""
    out = []
    start = 1
    for basis in bases:
        out.append(slice(start, start + basis.n_basis))
        start += basis.n_basis
    return out


def identifiability_penalty(blocks: list[np.ndarray]) -> np.ndarray:
    """Block-diagonal penalty: 0 for the intercept, B_j^T 1 1^T B_j per block."""
    sizes = [blk.shape[1] for blk in blocks]
    dim = 1 + sum(sizes)
    P = np.zeros((dim, dim))
    start = 1
    for blk in blocks:
        s = blk.sum(axis=0)
        stop = start + blk.shape[1]
        P[start:stop, start:stop] = np.outer(s, s)
        start = stop
    return P


def _solve_normal_equations(A: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve the SPD system A x = rhs with a diagonal pivot safeguard."""
    safeguard = 1e-12 * np.trace(A)
    try:
        c, low = scipy.linalg.cho_factor(A, lower=True)
        pivots = np.diag(c) ** 2
        if pivots.min() < safeguard:
            raise IllPosedFitError(float(pivots.min()))
        return scipy.linalg.cho_solve((c, low), rhs)
    except scipy.linalg.LinAlgError:
        eigvals = np.linalg.eigvalsh(A)
        raise IllPosedFitError(float(eigvals.min())) from None


def make_bases(
    T: TrainingSet,
    degrees,
    intervals,
    domains=None,
    labels=None,
) -> list[BSplineBasis]:
    """Equidistant per-covariate bases over the observed (or given) ranges."""
    degrees = _per_covariate(degrees, T.p, "degrees")
    intervals = _per_covariate(intervals, T.p, "intervals")
    bases = []
    for j in range(T.p):
        lo, hi = domains[j] if domains is not None else T.covariate_range(j)
        label = labels[j] if labels is not None else f"x{j + 1}"
        bases.append(make_basis(lo, hi, intervals[j], degrees[j], label))
    return bases


def _per_covariate(value, p: int, name: str) -> list[int]:
    if np.isscalar(value):
        value = [int(value)] * p
    value = [int(v) for v in value]
    if len(value) != p:
        raise ValueError(f"{name} must be a scalar or length-{p} sequence")
    return value


def fit_additive(
    T: TrainingSet,
    degrees=DEFAULT_DEGREE,
    intervals=DEFAULT_INTERVALS,
    domains=None,
    labels=None,
) -> AdditiveModelFit:
    """Fit the additive model by penalized least squares.

    Solves (B^T B + P^I) theta = B^T y; the closed-form optimum of the
    penalized objective ||y - B theta||^2 + theta^T P^I theta.
    """
    bases = make_bases(T, degrees, intervals, domains, labels)
    n_params = 1 + sum(b.n_basis for b in bases)
    if T.n < n_params:
        raise ValueError(
            f"need at least {n_params} samples for {n_params} parameters, "
            f"got {T.n}"
        )
    B = design_matrix(T.X, bases)
    slices = block_slices(bases)
    P = identifiability_penalty([B[:, s] for s in slices])
    theta = _solve_normal_equations(B.T @ B + P, B.T @ T.y)
    coeffs = [theta[s].copy() for s in slices]
    defects = np.array([B[:, s].sum(axis=0) @ theta[s] for s in slices])
    resid = float(np.linalg.norm(T.y - B @ theta))
    return AdditiveModelFit(
        intercept=float(theta[0]),
        coefficients=coeffs,
        bases=bases,
        residual_norm=resid,
        zero_mean_defects=defects,
    )


def predict(fit: AdditiveModelFit, x) -> float:
    return fit.predict(x)


MODEL_FORMAT_VERSION = 1


def dump_model(fit: AdditiveModelFit) -> str:
    """Serialize a fit to the versioned plain-text model format.

    Doubles are written with 17 significant digits, which round-trips
    bit-faithfully through decimal.
    """
    buf = io.StringIO()
    buf.write(f"missoc-model {MODEL_FORMAT_VERSION}\n")
    buf.write(f"intercept {fit.intercept:.17g}\n")
    for basis, theta in zip(fit.bases, fit.coefficients):
        buf.write(f"covariate {basis.label}\n")
        buf.write(f"degree {basis.degree}\n")
        knots = " ".join(f"{t:.17g}" for t in basis.knots.internal)
        buf.write(f"knots {knots}\n")
        coeffs = " ".join(f"{c:.17g}" for c in theta)
        buf.write(f"coefficients {coeffs}\n")
    buf.write("end\n")
    return buf.getvalue()


def load_model(text: str) -> AdditiveModelFit:
    """Parse the plain-text model format written by dump_model."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("missoc-model"):
        raise ValueError("not a missoc model file")
    version = int(lines[0].split()[1])
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    intercept = None
    bases: list[BSplineBasis] = []
    coeffs: list[np.ndarray] = []
    label = degree = knots = None
    from .splines import extend_knots

    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "intercept":
            intercept = float(rest)
        elif key == "covariate":
            label = rest
        elif key == "degree":
            degree = int(rest)
        elif key == "knots":
            knots = np.array([float(v) for v in rest.split()])
        elif key == "coefficients":
            theta = np.array([float(v) for v in rest.split()])
            basis = BSplineBasis(knots=extend_knots(knots, degree), label=label)
            if theta.shape != (basis.n_basis,):
                raise ValueError(
                    f"covariate {label}: {theta.size} coefficients for a "
                    f"basis of {basis.n_basis}"
                )
            bases.append(basis)
            coeffs.append(theta)
        elif key == "end":
            break
        else:
            raise ValueError(f"unknown model-file key {key!r}")
    if intercept is None:
        raise ValueError("model file has no intercept")
    return AdditiveModelFit(intercept=intercept, coefficients=coeffs, bases=bases)
