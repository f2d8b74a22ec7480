"""Long-format longitudinal data and the derived age/time/cohort variables."""

from __future__ import annotations

import csv
import datetime as _dt
import io
import os
from collections.abc import Mapping
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConsistencyError,
    DegenerateCovariateError,
    ParseError,
    SchemaError,
    SpecError,
)

EPOCH = _dt.date(1970, 1, 1)
DAYS_PER_YEAR = 365.25
BIRTH_DATE_TOL = 1e-6

# names of the derived columns every model can reference
DERIVED = ("age", "date", "baseline_age", "time", "birth_date")


@dataclass(frozen=True)
class Categorical:
    """Label-encoded categorical column; ``codes`` index into ``levels``."""

    codes: np.ndarray
    levels: tuple[str, ...]
    ordered: bool = False

    def __len__(self):
        return self.codes.size

    @property
    def labels(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=object)[self.codes]

    def take(self, idx) -> "Categorical":
        return replace(self, codes=self.codes[idx])

    def encode(self, values) -> np.ndarray:
        """Map labels (or already-encoded integer codes) onto this column's levels."""
        if isinstance(values, Categorical):
            values = values.labels
        values = np.asarray(values)
        if values.dtype.kind in "iu":
            return values.astype(int)
        lookup = {lvl: i for i, lvl in enumerate(self.levels)}
        try:
            return np.array([lookup[str(v)] for v in values], dtype=int)
        except KeyError as exc:
            raise SpecError(f"unknown level {exc.args[0]!r}; known levels {list(self.levels)}") from None


@dataclass
class Schema:
    """Which CSV columns carry the participant id, age, date and outcome."""

    participant: str = "participant_id"
    age: str = "age"
    date: str = "date"
    outcome: str = "outcome"
    categorical: tuple[str, ...] = ()
    ordered: dict[str, list[str]] = field(default_factory=dict)
    covariates: tuple[str, ...] | None = None

    @classmethod
    def from_mapping(cls, m: Mapping | None) -> "Schema":
        if m is None:
            return cls()
        if isinstance(m, Schema):
            return m
        kw = dict(m)
        for key in ("categorical", "covariates"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass(frozen=True)
class LongitudinalDataset:
    """Immutable long-format dataset, rows grouped by participant and sorted by age.

    Besides the raw age, measurement date and outcome, every row carries
    ``baseline_age`` (age at the participant's first row), ``time`` (years since
    that first row) and ``birth_date`` (``date - age``).
    """

    participant_id: np.ndarray
    age: np.ndarray
    date: np.ndarray
    outcome: np.ndarray
    baseline_age: np.ndarray
    time: np.ndarray
    birth_date: np.ndarray
    covariates: dict = field(default_factory=dict)
    outcome_name: str = "outcome"
    standardization: dict = field(default_factory=dict)
    participant_index: dict = field(default_factory=dict, repr=False)

    # -- construction -----------------------------------------------------

    @classmethod
    def from_columns(cls, participant_id, age, date, outcome, covariates=None,
                     outcome_name: str = "outcome") -> "LongitudinalDataset":
        pid = np.asarray([str(p) for p in participant_id], dtype=object)
        age = np.asarray(age, dtype=float)
        date = np.asarray(date, dtype=float)
        outcome = np.asarray(outcome, dtype=float)
        n = pid.size
        if not (age.size == date.size == outcome.size == n):
            raise SchemaError("participant, age, date and outcome columns differ in length")
        if np.any(~np.isfinite(age)) or np.any(age <= 0):
            bad = int(np.flatnonzero(~(np.isfinite(age) & (age > 0)))[0])
            raise ParseError(f"row {bad + 1}: age must be a positive finite number, got {age[bad]}")
        if np.any(~np.isfinite(date)):
            raise ParseError(f"row {int(np.flatnonzero(~np.isfinite(date))[0]) + 1}: date is not finite")
        if np.any(~np.isfinite(outcome)):
            raise ParseError(f"row {int(np.flatnonzero(~np.isfinite(outcome))[0]) + 1}: outcome is not finite")
        covariates = dict(covariates or {})
        for name, col in covariates.items():
            if len(col) != n:
                raise SchemaError(f"covariate {name!r} has {len(col)} values for {n} rows")

        # participants in order of first appearance, rows sorted by age (stable)
        _, first = np.unique(pid, return_index=True)
        order_of_pid = {p: r for r, p in enumerate(pid[np.sort(first)])}
        group = np.array([order_of_pid[p] for p in pid], dtype=int)
        perm = np.lexsort((age, group))
        pid, age, date, outcome, group = pid[perm], age[perm], date[perm], outcome[perm], group[perm]
        covariates = {k: (v.take(perm) if isinstance(v, Categorical) else np.asarray(v, dtype=float)[perm])
                      for k, v in covariates.items()}

        starts = np.flatnonzero(np.r_[True, group[1:] != group[:-1]])
        counts = np.diff(np.r_[starts, n])
        baseline_age = np.repeat(age[starts], counts)
        time = age - baseline_age
        if np.any(time < 0):
            raise ConsistencyError("negative time since baseline after sorting by age")
        birth_date = date - age
        first_birth = np.repeat(birth_date[starts], counts)
        gap = np.abs(birth_date - first_birth)
        if np.any(gap > BIRTH_DATE_TOL):
            r = int(np.argmax(gap))
            raise ConsistencyError(
                f"participant {pid[r]!r}: date minus age varies by {gap[r]:.3g} years across visits "
                f"(tolerance {BIRTH_DATE_TOL})")
        index = {pid[s]: np.arange(s, s + c) for s, c in zip(starts, counts)}
        return cls(pid, age, date, outcome, baseline_age, time, birth_date, covariates,
                   outcome_name, {}, index)

    # -- access -----------------------------------------------------------

    @property
    def n_rows(self) -> int:
        return self.age.size

    @property
    def n_participants(self) -> int:
        return len(self.participant_index)

    @property
    def timepoints_per_participant(self) -> np.ndarray:
        return np.array([len(v) for v in self.participant_index.values()], dtype=int)

    @property
    def group_codes(self) -> np.ndarray:
        codes = np.empty(self.n_rows, dtype=int)
        for g, rows in enumerate(self.participant_index.values()):
            codes[rows] = g
        return codes

    def has_column(self, name: str) -> bool:
        return name in self.columns()

    def columns(self) -> dict:
        cols = {
            "participant_id": self.participant_id,
            "age": self.age,
            "date": self.date,
            "baseline_age": self.baseline_age,
            "time": self.time,
            "birth_date": self.birth_date,
            "outcome": self.outcome,
            self.outcome_name: self.outcome,
        }
        cols.update(self.covariates)
        return cols

    def __getitem__(self, name: str):
        cols = self.columns()
        if name not in cols:
            raise SchemaError(f"dataset has no column {name!r}")
        return cols[name]

    def subset(self, mask) -> "LongitudinalDataset":
        """Rows where ``mask`` holds; derived columns are kept as computed on the full data."""
        idx = np.flatnonzero(np.asarray(mask, dtype=bool))
        pid = self.participant_id[idx]
        index = {}
        for r, p in enumerate(pid):
            index.setdefault(p, []).append(r)
        return replace(
            self,
            participant_id=pid,
            age=self.age[idx], date=self.date[idx], outcome=self.outcome[idx],
            baseline_age=self.baseline_age[idx], time=self.time[idx], birth_date=self.birth_date[idx],
            covariates={k: (v.take(idx) if isinstance(v, Categorical) else v[idx]) for k, v in self.covariates.items()},
            participant_index={p: np.asarray(r) for p, r in index.items()},
        )

    def baseline_rows(self) -> "LongitudinalDataset":
        return self.subset(self.time == 0)


def standardize_covariate(dataset: LongitudinalDataset, name: str) -> LongitudinalDataset:
    """Replace a numeric covariate by its z-score (sample SD, ``ddof=1``).

    The original mean and SD are kept in ``dataset.standardization[name]``.
    """
    col = dataset.covariates.get(name)
    if col is None:
        raise SchemaError(f"no covariate named {name!r}")
    if isinstance(col, Categorical):
        raise SpecError(f"covariate {name!r} is categorical and cannot be standardized")
    mean = float(np.mean(col))
    sd = float(np.std(col, ddof=1)) if col.size > 1 else 0.0
    if not sd > 0:
        raise DegenerateCovariateError(f"covariate {name!r} has zero variance")
    z = (col - mean) / sd
    # one correction pass removes the rounding left by the first division
    z = z - z.mean()
    z = z / np.std(z, ddof=1)
    covariates = dict(dataset.covariates)
    covariates[name] = z
    stdz = dict(dataset.standardization)
    stdz[name] = (mean, sd)
    return replace(dataset, covariates=covariates, standardization=stdz)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def parse_date(text: str) -> float:
    """ISO-8601 calendar date or a plain decimal number, as decimal years.

    Calendar dates count years since 1970-01-01 using 365.25-day years;
    numbers are taken as given.
    """
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    try:
        day = _dt.date.fromisoformat(text[:10])
    except ValueError:
        raise ValueError(f"not a date: {text!r}") from None
    return (day - EPOCH).days / DAYS_PER_YEAR


def _open_text(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8")
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"))
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def load_dataset(csv_source, schema=None) -> LongitudinalDataset:
    """Read a long-format CSV (header row required) into a dataset.

    ``schema`` maps the roles ``participant``, ``age``, ``date`` and
    ``outcome`` to column names and may declare categorical and ordered
    columns; any other column that does not parse as a number becomes
    categorical.
    """
    schema = Schema.from_mapping(schema)
    fh = _open_text(csv_source)
    try:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("CSV input is empty; a header row is required") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    finally:
        if fh is not csv_source:
            fh.close()

    pos = {name: i for i, name in enumerate(header)}
    for role in ("participant", "age", "date", "outcome"):
        col = getattr(schema, role)
        if col not in pos:
            raise SchemaError(f"required column {col!r} ({role}) not found in header {header}")
    special = {schema.participant, schema.age, schema.date, schema.outcome}
    cov_names = list(schema.covariates) if schema.covariates is not None else [h for h in header if h not in special]
    for name in cov_names:
        if name not in pos:
            raise SchemaError(f"covariate column {name!r} not found in header")

    def cell(r, line, name):
        try:
            return r[pos[name]].strip()
        except IndexError:
            raise ParseError(f"row {line}: missing value for column {name!r}") from None

    pid, age, date, y = [], [], [], []
    raw = {name: [] for name in cov_names}
    for line, r in enumerate(rows, start=2):
        pid.append(cell(r, line, schema.participant))
        for name, sink, conv in ((schema.age, age, float), (schema.outcome, y, float), (schema.date, date, parse_date)):
            text = cell(r, line, name)
            try:
                sink.append(conv(text))
            except ValueError:
                raise ParseError(f"row {line}: column {name!r} value {text!r} is not numeric") from None
        for name in cov_names:
            raw[name].append(cell(r, line, name))

    covariates = {}
    for name in cov_names:
        values = raw[name]
        if name in schema.ordered:
            levels = tuple(str(v) for v in schema.ordered[name])
            covariates[name] = _encode(name, values, levels, ordered=True)
            continue
        if name not in schema.categorical:
            try:
                covariates[name] = np.array([float(v) for v in values])
                continue
            except ValueError:
                pass
        covariates[name] = _encode(name, values, tuple(sorted(set(values))), ordered=False)
    return LongitudinalDataset.from_columns(pid, age, date, y, covariates, outcome_name=schema.outcome)


def _encode(name, values, levels, ordered):
    lookup = {lvl: i for i, lvl in enumerate(levels)}
    codes = np.empty(len(values), dtype=int)
    for i, v in enumerate(values):
        if v not in lookup:
            raise ParseError(f"row {i + 2}: column {name!r} has undeclared level {v!r}")
        codes[i] = lookup[v]
    return Categorical(codes, levels, ordered)


def write_dataset(dataset: LongitudinalDataset, dest, date_column: str = "date") -> None:
    """Write the raw columns back as CSV with 17 significant digits."""
    names = ["participant_id", "age", date_column, dataset.outcome_name, *dataset.covariates]
    fmt = "{:.17g}".format
    cols = [dataset.participant_id, dataset.age, dataset.date, dataset.outcome]
    own = isinstance(dest, (str, os.PathLike))
    fh = open(dest, "w", newline="", encoding="utf-8") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        covs = [c.labels if isinstance(c, Categorical) else c for c in dataset.covariates.values()]
        for i in range(dataset.n_rows):
            row = [str(cols[0][i]), fmt(cols[1][i]), fmt(cols[2][i]), fmt(cols[3][i])]
            for c in covs:
                row.append(str(c[i]) if c.dtype == object else fmt(c[i]))
            w.writerow(row)
    finally:
        if own:
            fh.close()


def schema_for(dataset: LongitudinalDataset) -> Schema:
    """Schema that re-reads a file produced by :func:`write_dataset`."""
    cats = tuple(k for k, v in dataset.covariates.items() if isinstance(v, Categorical) and not v.ordered)
    ordered = {k: list(v.levels) for k, v in dataset.covariates.items() if isinstance(v, Categorical) and v.ordered}
    return Schema(participant="participant_id", age="age", date="date", outcome=dataset.outcome_name,
                  categorical=cats, ordered=ordered, covariates=tuple(dataset.covariates))
