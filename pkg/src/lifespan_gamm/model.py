"""Model specifications, design assembly, prediction and effect extraction.

A :class:`ModelSpec` is an ordered list of terms.  :func:`assemble` turns it
into design blocks for :func:`~lifespan_gamm.mixed.fit_reml` and keeps, per
term, everything needed to rebuild the same columns on new data (knots,
constraint transforms, factor levels).  Longitudinal and cross-sectional
effects are linear contrasts of the coefficient vector, so their standard
errors come straight from the posterior covariance.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import basis
from .data import Categorical, LongitudinalDataset
from .errors import ConfigError, SchemaError, SpecError
from .mixed import FittedModel, TermInfo, VarianceComponents, fit_reml

FORMAT = "lifespan-gamm-model"
FORMAT_VERSION = 1
VARIANTS = ("1a", "1b", "2a", "2b", "3a", "3b")
INTERCEPT = "(Intercept)"


# ---------------------------------------------------------------------------
# term grammar
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Smooth:
    var: str
    k: int = 20

    @property
    def label(self):
        return f"s({self.var})"


@dataclass(frozen=True)
class VaryingCoefficient:
    """``beta(smooth_var) * by_var``; left uncentred so ``beta`` keeps its level."""

    smooth_var: str
    by_var: str
    k: int = 5

    @property
    def label(self):
        return f"s({self.smooth_var}):{self.by_var}"


@dataclass(frozen=True)
class TensorFull:
    var1: str
    var2: str
    k1: int = 20
    k2: int = 5

    @property
    def label(self):
        return f"te({self.var1},{self.var2})"


@dataclass(frozen=True)
class TensorInteraction:
    var1: str
    var2: str
    k1: int = 20
    k2: int = 5

    @property
    def label(self):
        return f"ti({self.var1},{self.var2})"


@dataclass(frozen=True)
class FactorSmooth:
    """One centred difference smooth per non-reference level of an ordered factor."""

    smooth_var: str
    ordered_factor: str
    k: int = 20

    @property
    def label(self):
        return f"s({self.smooth_var}):{self.ordered_factor}"


@dataclass(frozen=True)
class Parametric:
    var: str

    @property
    def label(self):
        return self.var


@dataclass(frozen=True)
class OrderedFactorMain:
    var: str

    @property
    def label(self):
        return self.var


@dataclass(frozen=True)
class RandomIntercept:
    group: str = "participant_id"

    @property
    def label(self):
        return f"(1|{self.group})"


TERM_TYPES = {cls.__name__: cls for cls in (
    Smooth, VaryingCoefficient, TensorFull, TensorInteraction, FactorSmooth,
    Parametric, OrderedFactorMain, RandomIntercept)}
SMOOTH_TYPES = (Smooth, VaryingCoefficient, TensorFull, TensorInteraction, FactorSmooth)


def term_to_dict(term) -> dict:
    return {"type": type(term).__name__, **asdict(term)}


def term_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in TERM_TYPES:
        raise SpecError(f"unknown term type {kind!r}; expected one of {sorted(TERM_TYPES)}")
    try:
        return TERM_TYPES[kind](**d)
    except TypeError as exc:
        raise SpecError(f"bad fields for {kind}: {exc}") from None


@dataclass(frozen=True)
class ModelSpec:
    """Ordered terms plus the outcome column; an intercept is always included.

    ``baseline_only`` restricts fitting to each participant's first row.
    """

    terms: tuple
    outcome: str = "outcome"
    baseline_only: bool = False
    variant: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if sum(isinstance(t, RandomIntercept) for t in self.terms) > 1:
            raise SpecError("at most one random intercept is allowed")
        mains = {t.var for t in self.terms if isinstance(t, OrderedFactorMain)}
        for t in self.terms:
            if isinstance(t, FactorSmooth) and t.ordered_factor not in mains:
                raise SpecError(
                    f"{t.label} needs the main effect OrderedFactorMain({t.ordered_factor!r}) "
                    "because difference smooths are centred")
        labels = [t.label for t in self.terms]
        if len(set(labels)) != len(labels):
            raise SpecError(f"duplicate terms in {labels}")

    @property
    def random_intercept(self) -> RandomIntercept | None:
        for t in self.terms:
            if isinstance(t, RandomIntercept):
                return t
        return None

    @property
    def variables(self) -> list[str]:
        out = []
        for t in self.terms:
            for name in ("var", "smooth_var", "by_var", "var1", "var2", "ordered_factor"):
                v = getattr(t, name, None)
                if v is not None and v not in out:
                    out.append(v)
        return out

    def to_dict(self) -> dict:
        return {"outcome": self.outcome, "baseline_only": self.baseline_only,
                "variant": self.variant, "terms": [term_to_dict(t) for t in self.terms]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        if "terms" not in d:
            raise SpecError("model spec has no 'terms' list")
        return cls(tuple(term_from_dict(t) for t in d["terms"]), d.get("outcome", "outcome"),
                   bool(d.get("baseline_only", False)), d.get("variant"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise SpecError(f"model spec is not valid JSON: {exc}") from None

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "ModelSpec":
        return cls.from_json(Path(path).read_text())

    @property
    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def canonical_spec(variant: str, k_age: int = 20, k_time: int = 5, k_cohort: int = 5,
                   covariates=(), k_varying: int | None = None) -> ModelSpec:
    """The six model variants compared in the simulation study.

    ``k_varying`` is the basis size of the varying-coefficient smooth of
    variant 2a (defaults to ``k_cohort``).
    """
    if variant not in VARIANTS:
        raise SpecError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    ri = RandomIntercept()
    k_vc = k_cohort if k_varying is None else k_varying
    terms = {
        "1a": [Smooth("age", k_age)],
        "1b": [Smooth("age", k_age), ri],
        "2a": [Smooth("baseline_age", k_age), VaryingCoefficient("baseline_age", "time", k_vc), ri],
        "2b": [TensorFull("baseline_age", "time", k_age, k_time), ri],
        "3a": [Smooth("age", k_age), Parametric("birth_date"), ri],
        "3b": [Smooth("age", k_age), VaryingCoefficient("age", "birth_date", k_cohort), ri],
    }[variant]
    terms += [Parametric(c) for c in covariates]
    return ModelSpec(tuple(terms), baseline_only=(variant == "1a"), variant=variant)


# ---------------------------------------------------------------------------
# design assembly
# ---------------------------------------------------------------------------


def _column(data, name):
    try:
        return data[name]
    except (KeyError, SchemaError):
        raise SchemaError(f"model variable {name!r} is not available") from None


def _numeric(data, name):
    col = _column(data, name)
    if isinstance(col, Categorical):
        raise SpecError(f"{name!r} is categorical but used as a numeric variable")
    col = np.asarray(col)
    if col.dtype.kind not in "fiub":
        raise SpecError(f"{name!r} is not numeric")
    return col.astype(float).ravel()


def _spline(knots):
    return basis.CubicRegressionSpline(np.asarray(knots, dtype=float))


def _levels_codes(data, name, levels=None):
    col = _column(data, name)
    if isinstance(col, Categorical):
        if levels is None:
            return list(col.levels), col.codes, col.ordered
        return list(levels), Categorical(np.zeros(0, int), tuple(levels)).encode(col), col.ordered
    vals = np.asarray(col)
    if levels is None:
        if vals.dtype.kind in "fiub":
            return None, None, False
        levels = sorted({str(v) for v in vals})
    return list(levels), Categorical(np.zeros(0, int), tuple(levels)).encode(vals.astype(str)), False


@dataclass
class TermBuild:
    """Columns of one term on some data, plus the state to rebuild them."""

    term: object
    state: dict
    parametric: list = field(default_factory=list)   # (label, column)
    blocks: list = field(default_factory=list)        # BasisBlock


def _build_term(term, data, state=None) -> TermBuild:
    """Build the columns of ``term``; with ``state`` reuse training-time knots and transforms."""
    fresh = state is None
    state = {} if fresh else state
    tb = TermBuild(term, state)
    if isinstance(term, Smooth):
        x = _numeric(data, term.var)
        if fresh:
            blk, sp = basis.build_cr_basis(x, term.k, label=term.label)
            blk = basis.apply_sum_to_zero_constraint(blk)
            state.update(knots=sp.knots.tolist(), transform=blk.constraint_transform.tolist())
        else:
            sp = _spline(state["knots"])
            Z = np.asarray(state["transform"])
            blk = basis.BasisBlock(sp.evaluate(x) @ Z, (Z.T @ sp.S @ Z,), Z, 2, term.label)
        tb.blocks.append(blk)
    elif isinstance(term, VaryingCoefficient):
        x, z = _numeric(data, term.smooth_var), _numeric(data, term.by_var)
        if fresh:
            blk, sp = basis.build_cr_basis(x, term.k, label=term.label)
            state.update(knots=sp.knots.tolist())
        else:
            sp = _spline(state["knots"])
            blk = basis.BasisBlock(sp.evaluate(x), (sp.S,), np.eye(term.k), 2, term.label)
        tb.blocks.append(basis.varying_coefficient(blk, z))
    elif isinstance(term, (TensorFull, TensorInteraction)):
        x1, x2 = _numeric(data, term.var1), _numeric(data, term.var2)
        if fresh:
            b1, s1 = basis.build_cr_basis(x1, term.k1, label=term.var1)
            b2, s2 = basis.build_cr_basis(x2, term.k2, label=term.var2)
            state.update(knots1=s1.knots.tolist(), knots2=s2.knots.tolist())
        else:
            s1, s2 = _spline(state["knots1"]), _spline(state["knots2"])
            b1 = basis.BasisBlock(s1.evaluate(x1), (s1.S,), np.eye(term.k1), 2, term.var1)
            b2 = basis.BasisBlock(s2.evaluate(x2), (s2.S,), np.eye(term.k2), 2, term.var2)
        if isinstance(term, TensorInteraction):
            if fresh:
                b1 = basis.apply_sum_to_zero_constraint(b1)
                b2 = basis.apply_sum_to_zero_constraint(b2)
                state.update(transform1=b1.constraint_transform.tolist(),
                             transform2=b2.constraint_transform.tolist())
            else:
                Z1, Z2 = np.asarray(state["transform1"]), np.asarray(state["transform2"])
                b1 = basis.BasisBlock(b1.design @ Z1, (Z1.T @ s1.S @ Z1,), Z1, 1, term.var1)
                b2 = basis.BasisBlock(b2.design @ Z2, (Z2.T @ s2.S @ Z2,), Z2, 1, term.var2)
            blk = basis.tensor_product(b1, b2, mode="full")
        else:
            blk = basis.tensor_product(b1, b2, mode="full")
            if fresh:
                blk = basis.apply_sum_to_zero_constraint(blk)
                state.update(transform=blk.constraint_transform.tolist())
            else:
                Z = np.asarray(state["transform"])
                blk = basis.BasisBlock(blk.design @ Z, tuple(Z.T @ S @ Z for S in blk.penalties), Z, 1, "")
        tb.blocks.append(replace(blk, term_label=term.label))
    elif isinstance(term, FactorSmooth):
        x = _numeric(data, term.smooth_var)
        levels, codes, ordered = _levels_codes(data, term.ordered_factor, state.get("levels"))
        if levels is None:
            raise SpecError(f"{term.ordered_factor!r} must be a factor for {term.label}")
        if fresh:
            if not ordered:
                raise SpecError(f"{term.label}: {term.ordered_factor!r} is not an ordered factor")
            base, sp = basis.build_cr_basis(x, term.k, label=f"s({term.smooth_var})")
            blocks, _ = basis.factor_difference_smooths(
                replace(base, term_label=term.label),
                codes, len(levels), ordered=True, labels=levels)
            state.update(knots=sp.knots.tolist(), levels=levels,
                         transforms=[b.constraint_transform.tolist() for b in blocks])
            tb.blocks.extend(blocks)
        else:
            sp = _spline(state["knots"])
            Bx = sp.evaluate(x)
            for lvl, Z in enumerate(state["transforms"], start=1):
                Z = np.asarray(Z)
                ind = (codes == lvl).astype(float)
                tb.blocks.append(basis.BasisBlock((Bx * ind[:, None]) @ Z, (Z.T @ sp.S @ Z,), Z, 1,
                                                  f"{term.label}:{levels[lvl]}"))
    elif isinstance(term, (Parametric, OrderedFactorMain)):
        levels, codes, _ = _levels_codes(data, term.var, state.get("levels"))
        if isinstance(term, OrderedFactorMain) and levels is None:
            raise SpecError(f"OrderedFactorMain({term.var!r}) needs a factor column")
        if levels is None:
            tb.parametric.append((term.var, _numeric(data, term.var)))
        else:
            state["levels"] = levels
            for lvl in range(1, len(levels)):
                tb.parametric.append((f"{term.var}{levels[lvl]}", (codes == lvl).astype(float)))
    elif isinstance(term, RandomIntercept):
        pass
    else:  # pragma: no cover - guarded by ModelSpec
        raise SpecError(f"unsupported term {term!r}")
    return tb


@dataclass
class ModelDesign:
    """Assembled design of a spec on its training data and the recipe for new data."""

    spec: ModelSpec
    states: list
    parametric_labels: list
    block_labels: list
    reference: dict
    ranges: dict
    parametric: np.ndarray | None = field(default=None, repr=False)
    blocks: list = field(default_factory=list, repr=False)
    grouping: np.ndarray | None = field(default=None, repr=False)
    group_levels: tuple = field(default=(), repr=False)
    y: np.ndarray | None = field(default=None, repr=False)
    data: LongitudinalDataset | None = field(default=None, repr=False)

    def matrix(self, columns) -> np.ndarray:
        """Full population-level design (intercept, parametric, smooth blocks) on ``columns``."""
        cols = self.complete(columns)
        n = _nrows(cols)
        par, blks = [np.ones(n)], []
        for term, state in zip(self.spec.terms, self.states):
            tb = _build_term(term, cols, state)
            par.extend(c for _, c in tb.parametric)
            blks.extend(b.design for b in tb.blocks)
        return np.column_stack(par + blks)

    def complete(self, columns) -> dict:
        """Fill in derived age/time/cohort columns and pinned covariate references."""
        cols = dict(columns)
        has = cols.__contains__
        if not has("time") and has("age") and has("baseline_age"):
            cols["time"] = np.asarray(cols["age"], float) - np.asarray(cols["baseline_age"], float)
        if not has("age") and has("baseline_age") and has("time"):
            cols["age"] = np.asarray(cols["baseline_age"], float) + np.asarray(cols["time"], float)
        if not has("birth_date") and has("date") and has("age"):
            cols["birth_date"] = np.asarray(cols["date"], float) - np.asarray(cols["age"], float)
        if not has("baseline_age") and has("age") and has("time"):
            cols["baseline_age"] = np.asarray(cols["age"], float) - np.asarray(cols["time"], float)
        n = _nrows(cols)
        for name, ref in self.reference.items():
            if name not in cols:
                cols[name] = np.full(n, ref, dtype=float) if isinstance(ref, float) else np.array([ref] * n, dtype=object)
        for name in self.spec.variables:
            if name not in cols:
                raise SchemaError(f"prediction grid lacks model variable {name!r}")
        return cols

    def extrapolation_warnings(self, columns) -> list[str]:
        cols = self.complete(columns)
        out = []
        for name, (lo, hi) in self.ranges.items():
            v = np.asarray(cols[name], dtype=float)
            if v.size and (v.min() < lo - 1e-9 or v.max() > hi + 1e-9):
                out.append(f"{name} outside the training range [{lo:.6g}, {hi:.6g}]")
        return out

    def to_dict(self) -> dict:
        return {"states": self.states, "parametric_labels": self.parametric_labels,
                "block_labels": self.block_labels, "reference": self.reference,
                "ranges": {k: list(v) for k, v in self.ranges.items()}}

    @classmethod
    def from_dict(cls, spec: ModelSpec, d: dict) -> "ModelDesign":
        return cls(spec, d["states"], d["parametric_labels"], d["block_labels"], d["reference"],
                   {k: tuple(v) for k, v in d["ranges"].items()})


def _nrows(cols) -> int:
    for v in cols.values():
        return len(v)
    return 0


def assemble(spec: ModelSpec, dataset: LongitudinalDataset) -> ModelDesign:
    """Build design blocks, parametric columns and grouping for ``spec`` on ``dataset``."""
    data = dataset.baseline_rows() if spec.baseline_only else dataset
    for name in spec.variables + [spec.outcome]:
        if not data.has_column(name):
            raise SchemaError(f"dataset has no column {name!r} required by the model")
    states, par_labels, par_cols, blocks = [], [INTERCEPT], [np.ones(data.n_rows)], []
    for term in spec.terms:
        tb = _build_term(term, data)
        states.append(tb.state)
        for lab, col in tb.parametric:
            par_labels.append(lab)
            par_cols.append(col)
        blocks.extend(tb.blocks)
    reference, ranges = {}, {}
    for name in spec.variables:
        col = data[name]
        if isinstance(col, Categorical):
            reference[name] = col.levels[0]
        elif name in data.covariates:
            col = np.asarray(col, dtype=float)
            reference[name] = float(col.mean())
    for term in spec.terms:
        if isinstance(term, SMOOTH_TYPES):
            for name in (getattr(term, a, None) for a in ("var", "smooth_var", "var1", "var2")):
                if name is not None:
                    col = np.asarray(data[name], dtype=float)
                    ranges[name] = (float(col.min()), float(col.max()))
    grouping, group_levels = None, ()
    ri = spec.random_intercept
    if ri is not None:
        if ri.group == "participant_id":
            grouping, group_levels = data.group_codes, tuple(data.participant_index)
        else:
            col = data[ri.group]
            labels = col.labels if isinstance(col, Categorical) else np.asarray(col).astype(str)
            group_levels, grouping = np.unique(labels, return_inverse=True)
            group_levels = tuple(group_levels)
    return ModelDesign(spec, states, par_labels, [b.term_label for b in blocks], reference, ranges,
                       np.column_stack(par_cols), blocks, grouping, group_levels,
                       np.asarray(data[spec.outcome], dtype=float), data)


def fit_model(spec: ModelSpec, dataset: LongitudinalDataset, lambdas=None, **kwargs) -> FittedModel:
    """Assemble ``spec`` on ``dataset`` and fit it by REML."""
    design = assemble(spec, dataset)
    fitted = fit_reml(design.blocks, design.parametric, design.grouping, design.y,
                      parametric_labels=design.parametric_labels, lambdas=lambdas, **kwargs)
    return replace(fitted, design=design, spec=spec, group_levels=design.group_levels, training=design.data)


# ---------------------------------------------------------------------------
# prediction and effects
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    estimate: np.ndarray
    se: np.ndarray
    warnings: tuple[str, ...] = ()


def _linear_se(L, cov):
    return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", L, cov, L), 0.0))


def predict(fitted: FittedModel, grid) -> Prediction:
    """Population-level prediction (random intercepts excluded) with pointwise SE."""
    design: ModelDesign = fitted.design
    X = design.matrix(grid)
    msgs = tuple(design.extrapolation_warnings(grid))
    for m in msgs:
        warnings.warn(m, stacklevel=2)
    return Prediction(X @ fitted.beta_hat, _linear_se(X, fitted.coef_covariance), msgs)


@dataclass(frozen=True)
class EffectCurve:
    abscissa: np.ndarray
    estimate: np.ndarray
    pointwise_se: np.ndarray
    kind: str = ""
    label: str = ""
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if not (len(self.abscissa) == len(self.estimate) == len(self.pointwise_se)):
            raise ValueError("abscissa, estimate and se must have equal lengths")

    def bounds(self, level: float = 0.95):
        z = stats.norm.ppf(0.5 + level / 2)
        return self.estimate - z * self.pointwise_se, self.estimate + z * self.pointwise_se

    def rows(self, level: float = 0.95):
        lo, hi = self.bounds(level)
        return zip(self.abscissa, self.estimate, self.pointwise_se, lo, hi)

    def to_csv(self, dest, level: float = 0.95, extra: dict | None = None):
        """Write ``abscissa, estimate, se, lower, upper`` (plus constant ``extra`` columns)."""
        write_curves([self], dest, level, [extra or {}])


def write_curves(curves, dest, level=0.95, extras=None):
    extras = extras or [{} for _ in curves]
    keys = list(extras[0]) if extras else []
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + ["abscissa", "estimate", "se", "lower", "upper"])
        for curve, extra in zip(curves, extras):
            for row in curve.rows(level):
                w.writerow([extra[k] for k in keys] + [repr(float(v)) for v in row])


def uses_cohort(spec: ModelSpec) -> bool:
    return "birth_date" in spec.variables or "date" in spec.variables


def longitudinal_contrast(fitted: FittedModel, baseline_age: float, times, cohort: float | None = None):
    """Matrix ``L`` with ``L @ beta`` the change from ``t = 0`` along ``times``."""
    spec = fitted.spec
    if uses_cohort(spec) and cohort is None:
        raise ConfigError("a birth cohort is required for the longitudinal effect of a cohort model")
    t = np.asarray(times, dtype=float)
    def grid(tt):
        g = {"baseline_age": np.full(tt.size, float(baseline_age)), "time": tt,
             "age": float(baseline_age) + tt}
        if cohort is not None:
            g["birth_date"] = np.full(tt.size, float(cohort))
            g["date"] = g["birth_date"] + g["age"]
        return g
    Xt = fitted.design.matrix(grid(t))
    X0 = fitted.design.matrix(grid(np.zeros(1)))
    return Xt - X0, fitted.design.extrapolation_warnings(grid(t))


def _times(horizon, step):
    if not horizon > 0:
        raise SpecError("horizon must be positive")
    if not step > 0:
        raise SpecError("step must be positive")
    n = int(math.floor(horizon / step + 1e-9))
    return np.arange(n + 1) * step


def longitudinal_effect(fitted: FittedModel, baseline_age: float, cohort: float | None = None,
                        horizon: float = 15.0, step: float = 0.1) -> EffectCurve:
    """Expected change of a fixed-cohort participant followed from ``baseline_age``.

    The curve is anchored at zero for ``t = 0``.  Cohort models need ``cohort``
    (birth date on the dataset's date scale).
    """
    t = _times(horizon, step)
    L, msgs = longitudinal_contrast(fitted, baseline_age, t, cohort)
    est = L @ fitted.beta_hat
    se = _linear_se(L, fitted.coef_covariance)
    est[0], se[0] = 0.0, 0.0
    return EffectCurve(t, est, se, "longitudinal", f"baseline {baseline_age:g}", tuple(msgs))


def cross_sectional_grid(ages, date: float | None):
    a = np.asarray(ages, dtype=float)
    g = {"age": a, "baseline_age": a, "time": np.zeros_like(a)}
    if date is not None:
        g["date"] = np.full(a.size, float(date))
        g["birth_date"] = g["date"] - a
    return g


def cross_sectional_effect(fitted: FittedModel, age_grid, date: float | None = None) -> EffectCurve:
    """Population curve across ages observed at one calendar ``date``.

    For cohort models each age carries birth date ``date - age``; the other
    variants ignore ``date``.
    """
    if uses_cohort(fitted.spec) and date is None:
        raise ConfigError("a calendar date is required for the cross-sectional effect of a cohort model")
    g = cross_sectional_grid(age_grid, date if uses_cohort(fitted.spec) else None)
    X = fitted.design.matrix(g)
    msgs = tuple(fitted.design.extrapolation_warnings(g))
    return EffectCurve(np.asarray(age_grid, dtype=float), X @ fitted.beta_hat,
                       _linear_se(X, fitted.coef_covariance), "cross-sectional",
                       "" if date is None else f"date {date:g}", msgs)


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


def parametric_table(fitted: FittedModel, level: float = 0.95):
    """Rows (term, estimate, se, t, p, lower, upper) for the unpenalized coefficients."""
    z = stats.norm.ppf(0.5 + level / 2)
    rows = []
    for t in fitted.terms:
        if t.kind != "parametric":
            continue
        est = float(fitted.beta_hat[t.start])
        se = float(math.sqrt(max(fitted.coef_covariance[t.start, t.start], 0.0)))
        tval = est / se if se > 0 else math.copysign(math.inf, est) if est else 0.0
        p = float(2 * stats.t.sf(abs(tval), fitted.residual_df)) if se > 0 else (0.0 if est else 1.0)
        rows.append((t.label, est, se, tval, p, est - z * se, est + z * se))
    return rows


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _arr(a):
    return None if a is None else np.asarray(a, dtype=float).tolist()


def model_to_dict(fitted: FittedModel) -> dict:
    vc = fitted.variance_components
    return {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "spec": fitted.spec.to_dict(),
        "spec_hash": fitted.spec.hash,
        "design": fitted.design.to_dict(),
        "beta": _arr(fitted.beta_hat),
        "covariance": _arr(fitted.coef_covariance),
        "variance_components": {"sigma": vc.sigma, "sigma_b": vc.sigma_b,
                                "sigma_lambda": vc.sigma_lambda, "lambdas": vc.lambdas},
        "edf": fitted.edf_per_term,
        "terms": [asdict(t) for t in fitted.terms],
        "reml": fitted.reml_value,
        "convergence": fitted.convergence_report,
        "random_effects": _arr(fitted.random_effects),
        "group_levels": list(fitted.group_levels),
        "n_obs": fitted.n_obs,
        "residual_df": fitted.residual_df,
        "fitted_values": _arr(fitted.fitted_values),
        "residuals": _arr(fitted.residuals),
        "penalty_labels": list(fitted.penalty_labels),
    }


def model_from_dict(d: dict) -> FittedModel:
    if d.get("format") != FORMAT:
        raise SpecError("not a saved model file")
    if d.get("version") != FORMAT_VERSION:
        raise SpecError(f"unsupported model file version {d.get('version')}")
    spec = ModelSpec.from_dict(d["spec"])
    if spec.hash != d["spec_hash"]:
        raise SpecError("model file spec hash mismatch; the file was edited or corrupted")
    vcd = d["variance_components"]
    vc = VarianceComponents(vcd["sigma"], vcd["sigma_b"], dict(vcd["sigma_lambda"]), dict(vcd["lambdas"]))
    terms = tuple(TermInfo(t["label"], t["start"], t["stop"], t["kind"], tuple(t["penalty_index"]),
                           t["null_space_dim"]) for t in d["terms"])
    re = d["random_effects"]
    return FittedModel(
        beta_hat=np.asarray(d["beta"], dtype=float),
        coef_covariance=np.asarray(d["covariance"], dtype=float),
        variance_components=vc,
        edf_per_term=dict(d["edf"]),
        terms=terms,
        reml_value=d["reml"],
        convergence_report=d["convergence"],
        random_effects=None if re is None else np.asarray(re, dtype=float),
        n_obs=d["n_obs"],
        residual_df=d["residual_df"],
        fitted_values=np.asarray(d["fitted_values"], dtype=float),
        residuals=np.asarray(d["residuals"], dtype=float),
        penalty_labels=tuple(d["penalty_labels"]),
        design=ModelDesign.from_dict(spec, d["design"]),
        spec=spec,
        group_levels=tuple(d["group_levels"]),
    )


def save_model(fitted: FittedModel, path):
    Path(path).write_text(json.dumps(model_to_dict(fitted)))


def load_model(path) -> FittedModel:
    try:
        return model_from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise SpecError(f"model file is not valid JSON: {exc}") from None
