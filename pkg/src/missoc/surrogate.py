"""Assembly of the surrogate MINLP via the multiple-choice formulation.

The fitted additive model replaces the nonlinear part of the objective: per
covariate j and knot interval q there is a binary y_jq selecting the
interval, a deviation x_jq in [0, width_jq * y_jq], and the interval value
sigma'_jq = c_jq0 y_jq + sum_d c_jqd x_jq^d in the shifted power basis.
Exactly one interval is active per covariate, x_j = sum_q (y_jq t_jq + x_jq),
and the objective is the intercept plus the carried-through affine part of
the original objective plus sum_j sigma_j.

Original constraints are retained untouched; affine ones are recognized so
the solver can embed them in its linear relaxations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expressions import Expr, decompose_affine
from .regression import AdditiveModelFit
from .splines import PiecewisePoly, to_piecewise_poly

DOMAIN_TOL = 1e-9


class DomainMismatchError(ValueError):
    """A variable box extends beyond the fitted knot range."""


class UnsupportedScopeError(ValueError):
    """Surrogate substitution requested for constraint functions."""


@dataclass(frozen=True)
class SurrogateComponent:
    """One covariate's piecewise-polynomial objective contribution."""

    var: str
    piece: PiecewisePoly

    @property
    def k(self) -> int:
        return self.piece.k

    @property
    def degree(self) -> int:
        return self.piece.degree

    @property
    def breakpoints(self) -> np.ndarray:
        return self.piece.breakpoints

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.piece.breakpoints)


@dataclass(frozen=True)
class LinearConstraint:
    """sum coeffs[v]*x_v + constant <relation> 0."""

    coeffs: dict[str, float]
    constant: float
    relation: str  # "<=" or "="


@dataclass(frozen=True)
class SurrogateMINLP:
    constant: float  # fitted intercept plus affine constant of g_0
    linear: dict[str, float]  # affine carry-through coefficients by variable
    components: tuple[SurrogateComponent, ...]
    variables: tuple  # original Variable records, declaration order
    linear_constraints: tuple[LinearConstraint, ...]
    nonlinear_constraints: tuple = ()  # retained original constraints
    residual_objective: Expr | None = None  # original g_0 when C is empty

    @property
    def n_binaries(self) -> int:
        return sum(c.k for c in self.components)

    @property
    def n_auxiliaries(self) -> int:
        """Added continuous variables: x_jq and sigma'_jq per interval plus
        sigma_j per covariate."""
        return sum(2 * c.k + 1 for c in self.components)

    def var_index(self) -> dict[str, int]:
        return {v.name: j for j, v in enumerate(self.variables)}


def build_surrogate(
    fit: AdditiveModelFit, instance, complicating=(0,)
) -> SurrogateMINLP:
    """Assemble the surrogate MINLP from a fit and the original instance.

    Only objective substitution (complicating set {0}) is supported; an
    empty set returns the instance wrapped verbatim with no substitution.
    """
    C = frozenset(complicating)
    if C == frozenset():
        lin_cons, nl_cons = _classify_constraints(instance.constraints)
        return SurrogateMINLP(
            constant=0.0,
            linear={},
            components=(),
            variables=tuple(instance.variables),
            linear_constraints=lin_cons,
            nonlinear_constraints=nl_cons,
            residual_objective=instance.objective,
        )
    if C != frozenset({0}):
        raise UnsupportedScopeError(
            f"surrogate substitution of constraint functions {sorted(C - {0})} "
            f"is not supported; only the objective (index 0) can be replaced"
        )

    const, coeffs, _ = instance.complicating_split()
    covariates = instance.covariates()
    labels = tuple(b.label for b in fit.bases)
    if labels != covariates:
        raise ValueError(
            f"fit covariates {labels} do not match the instance's nonlinear "
            f"variables {covariates}"
        )

    idx = instance.var_index()
    components = []
    for basis in fit.bases:
        v = instance.variables[idx[basis.label]]
        lo, hi = basis.domain
        if v.lower < lo - DOMAIN_TOL or v.upper > hi + DOMAIN_TOL:
            raise DomainMismatchError(
                f"box [{v.lower}, {v.upper}] of {v.name} exceeds the fitted "
                f"knot range [{lo}, {hi}]"
            )
    for j, basis in enumerate(fit.bases):
        piece = to_piecewise_poly(fit.coefficients[j], basis)
        components.append(SurrogateComponent(var=basis.label, piece=piece))

    lin_cons, nl_cons = _classify_constraints(instance.constraints)
    return SurrogateMINLP(
        constant=fit.intercept + const,
        linear=dict(coeffs),
        components=tuple(components),
        variables=tuple(instance.variables),
        linear_constraints=lin_cons,
        nonlinear_constraints=nl_cons,
    )


def _classify_constraints(constraints):
    linear = []
    nonlinear = []
    for con in constraints:
        aff = decompose_affine(con.expr)
        if aff is not None:
            linear.append(
                LinearConstraint(
                    coeffs=dict(aff[1]), constant=aff[0], relation=con.relation
                )
            )
        else:
            nonlinear.append(con)
    return tuple(linear), tuple(nonlinear)


def eval_surrogate_at(surrogate: SurrogateMINLP, x):
    """Canonical lifting of a point into the multiple-choice variables.

    Returns (objective value, assignment) where the assignment selects
    y_jq = 1 for the interval containing x_j (ties go to the left interval
    at shared knots) and sets the deviation accordingly.
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.shape != (len(surrogate.variables),):
        raise ValueError(
            f"expected {len(surrogate.variables)} variable values, "
            f"got {x.shape}"
        )
    idx = surrogate.var_index()
    value = surrogate.constant
    for name, coeff in surrogate.linear.items():
        value += coeff * x[idx[name]]
    assignment = {"y": [], "dev": [], "sigma_prime": [], "sigma": []}
    for comp in surrogate.components:
        xj = x[idx[comp.var]]
        q = comp.piece.interval_of(xj)  # raises OutOfDomainError outside
        y = np.zeros(comp.k)
        dev = np.zeros(comp.k)
        sp = np.zeros(comp.k)
        y[q] = 1.0
        dev[q] = xj - comp.breakpoints[q]
        sp[q] = float(
            np.polynomial.polynomial.polyval(dev[q], comp.piece.coeffs[q])
        )
        sigma = float(sp.sum())
        assignment["y"].append(y)
        assignment["dev"].append(dev)
        assignment["sigma_prime"].append(sp)
        assignment["sigma"].append(sigma)
    value += sum(assignment["sigma"])
    return float(value), assignment


def export_text(surrogate: SurrogateMINLP) -> str:
    """Plain-text algebraic listing for debugging and cross-checking."""
    lines = ["surrogate-minlp"]
    for v in surrogate.variables:
        kind = "integer" if v.integer else "continuous"
        lines.append(f"var {v.name} in [{v.lower:.17g}, {v.upper:.17g}] {kind}")
    obj = [f"{surrogate.constant:.17g}"]
    for name, coeff in sorted(surrogate.linear.items()):
        obj.append(f"{coeff:+.17g}*{name}")
    for comp in surrogate.components:
        obj.append(f"+sigma_{comp.var}")
    lines.append("min " + " ".join(obj))
    for comp in surrogate.components:
        t = comp.breakpoints
        for q in range(comp.k):
            lines.append(
                f"var y_{comp.var}_{q} in [0, 1] binary"
            )
            lines.append(
                f"var d_{comp.var}_{q} in [0, {t[q + 1] - t[q]:.17g}]"
            )
            poly = " ".join(
                f"{c:+.17g}*d_{comp.var}_{q}^{d}" if d else f"{c:+.17g}*y_{comp.var}_{q}"
                for d, c in enumerate(comp.piece.coeffs[q])
            )
            lines.append(f"st sp_{comp.var}_{q} = {poly}")
            lines.append(
                f"st d_{comp.var}_{q} <= {t[q + 1] - t[q]:.17g}*y_{comp.var}_{q}"
            )
        ys = " + ".join(f"y_{comp.var}_{q}" for q in range(comp.k))
        lines.append(f"st {ys} = 1")
        xs = " + ".join(
            f"{t[q]:.17g}*y_{comp.var}_{q} + d_{comp.var}_{q}"
            for q in range(comp.k)
        )
        lines.append(f"st {comp.var} = {xs}")
        sps = " + ".join(f"sp_{comp.var}_{q}" for q in range(comp.k))
        lines.append(f"st sigma_{comp.var} = {sps}")
    for con in surrogate.linear_constraints:
        terms = [f"{con.constant:.17g}"] + [
            f"{c:+.17g}*{n}" for n, c in sorted(con.coeffs.items())
        ]
        lines.append(f"st {' '.join(terms)} {con.relation} 0")
    for con in surrogate.nonlinear_constraints:
        from .expressions import unparse

        lines.append(f"st {unparse(con.expr)} {con.relation} 0")
    return "\n".join(lines) + "\n"
