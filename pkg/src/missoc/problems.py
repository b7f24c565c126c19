"""Instance definition language, sampling, and the end-to-end driver.

Instances are plain text, one statement per ``;``:

    var <name> in [lo, hi] [integer];
    min <expr>;
    st <expr> <= 0;            (also >=, =, and the "s.t." spelling)
    shape bounds [L, U];
    shape monotone <var> up|down;
    shape convex <var>;  shape concave <var>;
    point interp|under|over <index> <index> ...;
    bestknown <value>;

``#`` starts a comment; expressions use infix syntax with ``^`` for powers.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .expressions import (
    BinOp,
    Expr,
    ParseError,
    evaluate,
    parse_expr,
    split_affine,
    variables_of,
)
from .regression import TrainingSet
from .shapecon import (
    CONCAVE,
    CONVEX,
    DECREASING,
    INCREASING,
    PointwiseSet,
    ShapeSpec,
)


class InstanceValidationError(ValueError):
    """The parsed instance violates a structural assumption."""


class SamplingError(RuntimeError):
    """Could not draw finite responses within the resampling cap."""


class StageError(RuntimeError):
    """An algorithm stage failed; carries the stage tag."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class Variable:
    name: str
    lower: float
    upper: float
    integer: bool = False


@dataclass(frozen=True)
class Constraint:
    """g(x) <relation> 0 with relation in {"<=", "="}."""

    expr: Expr
    relation: str = "<="


@dataclass(frozen=True)
class ProblemInstance:
    variables: tuple[Variable, ...]
    objective: Expr
    constraints: tuple[Constraint, ...] = ()
    complicating: frozenset[int] = frozenset({0})
    shape: ShapeSpec | None = None
    best_known: float | None = None
    name: str = "instance"

    def var_index(self) -> dict[str, int]:
        return {v.name: j for j, v in enumerate(self.variables)}

    def env(self, x) -> dict[str, float]:
        return {v.name: float(xi) for v, xi in zip(self.variables, x)}

    def objective_value(self, x) -> float:
        return evaluate(self.objective, self.env(x))

    def constraint_values(self, x) -> np.ndarray:
        env = self.env(x)
        return np.array([evaluate(c.expr, env) for c in self.constraints])

    def complicating_split(self):
        """(affine constant, affine coeffs by name, nonlinear terms) of g_0."""
        return split_affine(self.objective)

    def covariates(self) -> tuple[str, ...]:
        """Variables appearing in the nonlinear part of g_0, in declaration
        order."""
        _, _, nonlinear = self.complicating_split()
        names = set()
        for term in nonlinear:
            names |= variables_of(term)
        return tuple(v.name for v in self.variables if v.name in names)

    def covariate_part(self, env: dict[str, float]) -> float:
        """Value of the nonlinear (approximated) part of g_0."""
        _, _, nonlinear = self.complicating_split()
        return sum(evaluate(t, env) for t in nonlinear)


DEFAULT_SAMPLES_PER_PARAM = 15
DEFAULT_TIME_LIMIT = 600.0


@dataclass(frozen=True)
class MissocConfig:
    degrees: int | tuple[int, ...] = 3
    intervals: int | tuple[int, ...] = 10
    samples_per_param: int = DEFAULT_SAMPLES_PER_PARAM
    seed: int = 0
    time_limit: float = DEFAULT_TIME_LIMIT
    gap_tol: float = 1e-4
    node_cap: int = 200_000
    refine: bool = True


# ---------------------------------------------------------------------------
# Parsing


def parse_instance(text: str, name: str = "instance") -> ProblemInstance:
    variables: list[Variable] = []
    objective = None
    constraints: list[Constraint] = []
    shape_kwargs: dict = {}
    monotone: dict[str, str] = {}
    curvature: dict[str, str] = {}
    pointwise: list[PointwiseSet] = []
    best_known = None

    for stmt, line in _statements(text):
        head, _, rest = stmt.partition(" ")
        head = head.lower()
        rest = rest.strip()
        try:
            if head == "var":
                variables.append(_parse_var(rest, line))
            elif head == "min":
                if objective is not None:
                    raise ParseError("duplicate objective", line, 1)
                objective = _parse_offset(rest, line)
            elif head in ("st", "s.t."):
                constraints.append(_parse_constraint(rest, line))
            elif head == "shape":
                _parse_shape(rest, line, shape_kwargs, monotone, curvature)
            elif head == "point":
                pointwise.append(_parse_point(rest, line))
            elif head == "bestknown":
                best_known = float(rest)
            else:
                raise ParseError(f"unknown statement {head!r}", line, 1)
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(str(exc), line, 1) from None

    if objective is None:
        raise ParseError("instance has no objective (min statement)", 1, 1)

    shape = None
    if shape_kwargs or monotone or curvature or pointwise:
        shape = ShapeSpec(
            monotone=monotone,
            curvature=curvature,
            pointwise=tuple(pointwise),
            **shape_kwargs,
        )

    instance = ProblemInstance(
        variables=tuple(variables),
        objective=objective,
        constraints=tuple(constraints),
        shape=shape,
        best_known=best_known,
        name=name,
    )
    _validate(instance)
    return instance


def _statements(text: str):
    """Split on ';' outside comments, tracking 1-based start lines."""
    buf: list[str] = []
    buf_line = None
    last_line = 1
    for ln, raw in enumerate(text.split("\n"), start=1):
        last_line = ln
        rest, _, _ = raw.partition("#")
        while ";" in rest:
            chunk, _, rest = rest.partition(";")
            buf.append(chunk)
            stmt = " ".join(" ".join(buf).split())
            if stmt:
                yield stmt, buf_line if buf_line is not None else ln
            buf = []
            buf_line = None
        if rest.strip():
            if buf_line is None:
                buf_line = ln
            buf.append(rest)
        elif buf:
            buf.append(rest)
    tail = " ".join(" ".join(buf).split())
    if tail:
        yield tail, buf_line if buf_line is not None else last_line


def _parse_offset(expr_text: str, line: int) -> Expr:
    try:
        return parse_expr(expr_text)
    except ParseError as exc:
        raise ParseError(str(exc).partition(": ")[2], line + exc.line - 1, exc.col)


def _parse_var(rest: str, line: int) -> Variable:
    words = rest.split()
    if len(words) < 2 or words[1] != "in":
        raise ParseError("expected 'var <name> in [lo, hi]'", line, 1)
    name = words[0]
    if not (name[0].isalpha() or name[0] == "_"):
        raise ParseError(f"bad variable name {name!r}", line, 1)
    tail = " ".join(words[2:])
    integer = False
    if tail.endswith("integer"):
        integer = True
        tail = tail[: -len("integer")].strip()
    tail = tail.strip()
    if not (tail.startswith("[") and tail.endswith("]")):
        raise ParseError("expected bounds like [lo, hi]", line, 1)
    parts = tail[1:-1].split(",")
    if len(parts) != 2:
        raise ParseError("expected exactly two bounds", line, 1)
    lo, hi = float(parts[0]), float(parts[1])
    if not lo < hi:
        raise ParseError(f"empty box [{lo}, {hi}]", line, 1)
    return Variable(name=name, lower=lo, upper=hi, integer=integer)


def _parse_constraint(rest: str, line: int) -> Constraint:
    for rel in ("<=", ">=", "="):
        if rel in rest:
            lhs_text, _, rhs_text = rest.partition(rel)
            lhs = _parse_offset(lhs_text, line)
            rhs = _parse_offset(rhs_text, line)
            g = BinOp("-", lhs, rhs)
            if rel == ">=":
                g = BinOp("-", rhs, lhs)
                rel = "<="
            return Constraint(expr=g, relation="=" if rel == "=" else "<=")
    raise ParseError("constraint needs a relation (<=, >= or =)", line, 1)


def _parse_shape(rest, line, shape_kwargs, monotone, curvature):
    words = rest.split()
    if not words:
        raise ParseError("empty shape statement", line, 1)
    kind = words[0].lower()
    if kind == "bounds":
        tail = " ".join(words[1:])
        if not (tail.startswith("[") and tail.endswith("]")):
            raise ParseError("expected 'shape bounds [L, U]'", line, 1)
        lo_s, _, hi_s = tail[1:-1].partition(",")
        lo, hi = float(lo_s), float(hi_s)
        if math.isfinite(lo):
            shape_kwargs["lower"] = lo
        if math.isfinite(hi):
            shape_kwargs["upper"] = hi
    elif kind == "monotone":
        if len(words) != 3 or words[2] not in ("up", "down"):
            raise ParseError("expected 'shape monotone <var> up|down'", line, 1)
        monotone[words[1]] = INCREASING if words[2] == "up" else DECREASING
    elif kind in ("convex", "concave"):
        if len(words) != 2:
            raise ParseError(f"expected 'shape {kind} <var>'", line, 1)
        curvature[words[1]] = CONVEX if kind == "convex" else CONCAVE
    else:
        raise ParseError(f"unknown shape statement {kind!r}", line, 1)


def _parse_point(rest: str, line: int) -> PointwiseSet:
    words = rest.split()
    relations = {"interp": "=", "under": "<=", "over": ">="}
    if not words or words[0] not in relations:
        raise ParseError("expected 'point interp|under|over <indices>'", line, 1)
    try:
        indices = tuple(int(w) for w in words[1:])
    except ValueError:
        raise ParseError("point indices must be integers", line, 1)
    if not indices:
        raise ParseError("point statement needs at least one index", line, 1)
    return PointwiseSet(relations[words[0]], indices)


def _validate(instance: ProblemInstance):
    declared = {v.name for v in instance.variables}
    used = variables_of(instance.objective)
    for c in instance.constraints:
        used |= variables_of(c.expr)
    unknown = used - declared
    if unknown:
        raise InstanceValidationError(
            f"undeclared variables: {sorted(unknown)}"
        )
    for name in instance.covariates():
        v = instance.variables[instance.var_index()[name]]
        if not (math.isfinite(v.lower) and math.isfinite(v.upper)):
            raise InstanceValidationError(
                f"variable {name} appears nonlinearly in the objective but "
                f"has non-finite bounds"
            )
    # midpoint of the box, clipped to finite values for unbounded variables
    mid = [
        0.5 * (max(v.lower, -1e6) + min(v.upper, 1e6))
        for v in instance.variables
    ]
    env = instance.env(mid)
    try:
        vals = [evaluate(instance.objective, env)] + [
            evaluate(c.expr, env) for c in instance.constraints
        ]
    except (ValueError, ZeroDivisionError, OverflowError) as exc:
        raise InstanceValidationError(
            f"expression does not evaluate at the box midpoint: {exc}"
        ) from None
    if not all(math.isfinite(v) for v in vals):
        raise InstanceValidationError(
            "non-finite expression value at the box midpoint"
        )


def load_instance(path) -> ProblemInstance:
    import pathlib

    p = pathlib.Path(path)
    return parse_instance(p.read_text(), name=p.stem)


# ---------------------------------------------------------------------------
# Sampling


RESAMPLE_CAP = 1000


def sample_training(
    instance: ProblemInstance, config: MissocConfig
) -> TrainingSet:
    """Uniform box sampling of the covariates of the complicating part.

    Responses are exact evaluations of the approximated (nonlinear) part of
    g_0; the affine remainder is carried through the surrogate untouched.
    Sample count: s * (1 + sum_j (d_j + k_j)).
    """
    names = instance.covariates()
    if not names:
        raise InstanceValidationError(
            "objective has no nonlinear part to approximate"
        )
    p = len(names)
    degrees = _broadcast(config.degrees, p, "degrees")
    intervals = _broadcast(config.intervals, p, "intervals")
    n = config.samples_per_param * (1 + sum(
        d + k for d, k in zip(degrees, intervals)
    ))
    idx = instance.var_index()
    boxes = [
        (instance.variables[idx[nm]].lower, instance.variables[idx[nm]].upper)
        for nm in names
    ]
    _, _, nonlinear = instance.complicating_split()
    rng = np.random.default_rng(config.seed)
    X = np.empty((n, p))
    y = np.empty(n)
    for i in range(n):
        for attempt in range(RESAMPLE_CAP):
            row = np.array([rng.uniform(lo, hi) for lo, hi in boxes])
            env = {nm: float(v) for nm, v in zip(names, row)}
            try:
                val = sum(evaluate(t, env) for t in nonlinear)
            except (ValueError, ZeroDivisionError, OverflowError):
                continue
            if math.isfinite(val):
                X[i] = row
                y[i] = val
                break
        else:
            raise SamplingError(
                f"no finite response after {RESAMPLE_CAP} draws for row {i}"
            )
    return TrainingSet(X=X, y=y)


def _broadcast(value, p: int, name: str) -> tuple[int, ...]:
    if np.isscalar(value):
        return (int(value),) * p
    value = tuple(int(v) for v in value)
    if len(value) != p:
        raise ValueError(f"{name} must be scalar or length {p}")
    return value


# ---------------------------------------------------------------------------
# End-to-end driver


@dataclass
class MissocReport:
    instance: str
    x: np.ndarray | None
    objective: float  # g_0(x*) on the original instance
    x_tilde: np.ndarray | None
    surrogate_objective: float  # surrogate value at the solver incumbent
    gap_pct: float
    nodes: int
    stage_times: dict[str, float]
    status: str
    fit: object = None
    surrogate: object = None

    @property
    def total_time(self) -> float:
        return sum(self.stage_times.values())

    def csv_rows(self) -> list[str]:
        rows = []
        for stage in ("sample", "fit", "surrogate", "solve", "refine"):
            if stage not in self.stage_times:
                continue
            obj = ""
            sobj = ""
            gap = ""
            nodes = ""
            if stage == "solve":
                sobj = f"{self.surrogate_objective:.12g}"
                gap = f"{self.gap_pct:.6g}"
                nodes = str(self.nodes)
            if stage == "refine":
                obj = f"{self.objective:.12g}"
            rows.append(
                f"{self.instance},{stage},{self.stage_times[stage]:.3f},"
                f"{obj},{sobj},{gap},{nodes},{self.status}"
            )
        rows.append(
            f"{self.instance},total,{self.total_time:.3f},"
            f"{self.objective:.12g},{self.surrogate_objective:.12g},"
            f"{self.gap_pct:.6g},{self.nodes},{self.status}"
        )
        return rows


REPORT_CSV_HEADER = (
    "instance,stage,time_s,objective,surrogate_objective,gap_pct,nodes,status"
)


def covariate_domains(instance: ProblemInstance):
    idx = instance.var_index()
    return [
        (instance.variables[idx[nm]].lower, instance.variables[idx[nm]].upper)
        for nm in instance.covariates()
    ]


def fit_stage(instance: ProblemInstance, T: TrainingSet, config: MissocConfig):
    """Constrained fit when the instance carries a shape spec, else the
    closed-form penalized least-squares fit."""
    from .regression import fit_additive
    from .shapecon import fit_constrained

    names = instance.covariates()
    domains = covariate_domains(instance)
    if instance.shape is not None and not instance.shape.is_empty:
        return fit_constrained(
            T,
            degrees=config.degrees,
            intervals=config.intervals,
            spec=instance.shape,
            domains=domains,
            labels=names,
        )
    return fit_additive(
        T,
        degrees=config.degrees,
        intervals=config.intervals,
        domains=domains,
        labels=names,
    )


def run_missoc(
    instance: ProblemInstance, config: MissocConfig | None = None
) -> MissocReport:
    """Sample, fit, build the surrogate, solve it globally, refine locally."""
    from .bnb import solve
    from .localsearch import refine
    from .surrogate import build_surrogate

    if config is None:
        config = MissocConfig()
    times: dict[str, float] = {}

    def staged(tag, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except Exception as exc:
            raise StageError(tag, exc) from exc
        times[tag] = time.perf_counter() - t0
        return out

    T = staged("sample", sample_training, instance, config)
    fit = staged("fit", fit_stage, instance, T, config)
    surr = staged("surrogate", build_surrogate, fit, instance)
    report = staged(
        "solve",
        solve,
        surr,
        time_limit=config.time_limit,
        node_cap=config.node_cap,
        gap_tol=config.gap_tol,
    )
    if report.x is None:
        return MissocReport(
            instance=instance.name,
            x=None,
            objective=math.nan,
            x_tilde=None,
            surrogate_objective=math.nan,
            gap_pct=report.gap_pct,
            nodes=report.nodes,
            stage_times=times,
            status=report.status,
            fit=fit,
            surrogate=surr,
        )
    x_tilde = report.x
    if config.refine:
        refined = staged("refine", refine, instance, x_tilde)
        x_star = refined.x
        status = report.status
        if not refined.converged:
            status = f"{status};refine_incomplete"
    else:
        x_star = x_tilde
        status = report.status
    return MissocReport(
        instance=instance.name,
        x=x_star,
        objective=float(instance.objective_value(x_star)),
        x_tilde=x_tilde,
        surrogate_objective=float(report.objective),
        gap_pct=report.gap_pct,
        nodes=report.nodes,
        stage_times=times,
        status=status,
        fit=fit,
        surrogate=surr,
    )
