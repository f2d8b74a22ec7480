"""Synthetic lifespan datasets and the six-model comparison study.

Dates inside datasets are decimal years since 1970-01-01 (the scale ISO dates
are parsed to); protocol and truth parameters are given in calendar years and
converted on sampling.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import spearmanr

from .data import LongitudinalDataset
from .errors import ConfigError, GammError
from .model import VARIANTS, canonical_spec, cross_sectional_grid, fit_model, longitudinal_contrast

log = logging.getLogger(__name__)

EPOCH_YEAR = 1970.0
AGE_RANGE = (4.0, 90.0)
BASELINES = (10.0, 35.0, 60.0)
TIMES = tuple(float(t) for t in range(1, 13))
CROSS_AGES = tuple(float(a) for a in range(10, 90, 5))
REGIMES = ("none", "offset", "interaction")


# ---------------------------------------------------------------------------
# ground truths
# ---------------------------------------------------------------------------


def _ramp(a, start=45.0, end=90.0, width=3.0):
    """Smooth ramp: ~0 before ``start``, then linear, reaching 1 at ``end``."""
    a = np.asarray(a, dtype=float)
    soft = lambda u: width * np.logaddexp(0.0, u / width)
    return soft(a - start) / soft(end - start)


def hippocampus_like(a):
    """Steep childhood growth to an adolescent peak, then slow decline that
    accelerates late in life."""
    a = np.asarray(a, dtype=float)
    late = 5.0 * np.logaddexp(0.0, (a - 45.0) / 5.0)
    return (4.0 + 1.0 * (1 - np.exp(-(a - 2.0) / 6.0))
            + 0.35 * np.exp(-(((a - 16.0) / 6.0) ** 2)) - 0.004 * a - 2e-4 * late ** 2)


def white_matter_like(a):
    """Inverted U with its maximum at 45 years."""
    x = np.asarray(a, dtype=float) / 45.0
    return 300.0 + 200.0 * x ** 1.5 * np.exp(1.5 * (1 - x))


def cortex_like(a):
    """Peak in early childhood, fast adolescent thinning with a brief plateau
    in the early twenties, then steady decline."""
    a = np.asarray(a, dtype=float)
    return (2.0 + 0.9 * np.exp(-(a - 4.0) / 9.0)
            - 0.18 * np.exp(-(((a - 18.0) / 6.0) ** 2)) - 0.004 * a)


CURVES = {"hippocampus": hippocampus_like, "white_matter": white_matter_like, "cortex": cortex_like}


def curve_stats(curve, lo=AGE_RANGE[0], hi=AGE_RANGE[1], step=0.01):
    g = curve(np.arange(lo, hi + step / 2, step))
    return float(np.std(g)), float(np.ptp(g))


@dataclass(frozen=True)
class GroundTruth:
    """True mean outcome ``curve(a) + cohort(a, c)``.

    ``cohort_regime`` is ``none``, ``offset`` (``slope * (c - c_ref)``) or
    ``interaction`` (``slope * ramp(a) * (c - c_ref)``, zero before mid-life).
    ``cohort_magnitude`` is the slope as a fraction of the curve's range per
    birth year; ``reference_birth_date`` (calendar years) is ``c_ref``.
    """

    name: str
    curve: Callable = field(repr=False)
    cohort_regime: str = "none"
    cohort_magnitude: float = 0.0
    reference_birth_date: float = 1958.0

    def __post_init__(self):
        if self.cohort_regime not in REGIMES:
            raise ConfigError(f"unknown cohort regime {self.cohort_regime!r}")

    @property
    def sd(self) -> float:
        return curve_stats(self.curve)[0]

    @property
    def slope(self) -> float:
        return self.cohort_magnitude * curve_stats(self.curve)[1]

    def cohort(self, age, birth_year):
        """Cohort contribution; ``birth_year`` in calendar years."""
        c = np.asarray(birth_year, dtype=float) - self.reference_birth_date
        if self.cohort_regime == "none":
            return np.zeros(np.broadcast(np.asarray(age), c).shape)
        if self.cohort_regime == "offset":
            return self.slope * c * np.ones_like(np.asarray(age, dtype=float))
        return self.slope * _ramp(age) * c

    def mean(self, age, birth_year):
        return self.curve(age) + self.cohort(age, birth_year)

    def longitudinal(self, baseline_age, t, birth_year):
        a1 = np.asarray(baseline_age, dtype=float)
        return self.mean(a1 + t, birth_year) - self.mean(a1, birth_year)


DEFAULT_MAGNITUDE = {"none": 0.0, "offset": 0.005, "interaction": 0.005}


def builtin_truths(regimes=REGIMES, magnitudes=None) -> dict:
    """Three synthetic curve shapes under each cohort regime, keyed ``(curve, regime)``."""
    mags = dict(DEFAULT_MAGNITUDE, **(magnitudes or {}))
    return {(name, r): GroundTruth(name, fn, r, mags[r]) for name, fn in CURVES.items() for r in regimes}


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingProtocol:
    n_participants: int = 1000
    timepoint_probabilities: tuple = (1 / 3, 1 / 3, 1 / 3)
    interval_range_years: tuple = (1.0, 6.0)
    baseline_age_range: tuple = AGE_RANGE
    baseline_date_range: tuple = (2000.0, 2010.0)
    sigma_b_fraction: float = 0.5
    sigma_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("interval_range_years", "baseline_age_range", "baseline_date_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} must be ordered, got [{lo}, {hi}]")
            object.__setattr__(self, name, (float(lo), float(hi)))
        p = np.asarray(self.timepoint_probabilities, dtype=float)
        if np.any(p < 0) or not math.isclose(p.sum(), 1.0, rel_tol=1e-9):
            raise ConfigError("timepoint probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "timepoint_probabilities", tuple(float(v) for v in p))
        if self.sigma_b_fraction < 0 or self.sigma_fraction < 0:
            raise ConfigError("noise fractions must be non-negative")
        if self.n_participants < 1:
            raise ConfigError("n_participants must be positive")

    @property
    def reference_date(self) -> float:
        """Mid-study calendar date."""
        lo, hi = self.baseline_date_range
        return 0.5 * (lo + hi)

    @classmethod
    def from_dict(cls, d) -> "SamplingProtocol":
        names = {f.name for f in fields(cls)}
        bad = set(d) - names
        if bad:
            raise ConfigError(f"unknown protocol keys {sorted(bad)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _rng(seed, *key):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))


def sample_dataset(truth: GroundTruth, protocol: SamplingProtocol, rng=None) -> LongitudinalDataset:
    """Draw one synthetic longitudinal dataset; ``rng`` defaults to one seeded by ``protocol.seed``."""
    rng = _rng(protocol.seed) if rng is None else rng
    n = protocol.n_participants
    m = rng.choice(np.arange(1, len(protocol.timepoint_probabilities) + 1), size=n,
                   p=protocol.timepoint_probabilities)
    a1 = rng.uniform(*protocol.baseline_age_range, size=n)
    d1 = rng.uniform(*protocol.baseline_date_range, size=n)
    sd = truth.sd
    b = rng.normal(0.0, protocol.sigma_b_fraction * sd, size=n)
    gaps = rng.uniform(*protocol.interval_range_years, size=(n, max(int(m.max()) - 1, 0)))
    offsets = np.concatenate([np.zeros((n, 1)), np.cumsum(gaps, axis=1)], axis=1)
    keep = np.arange(offsets.shape[1])[None, :] < m[:, None]
    pid = np.repeat(np.arange(n), m)
    t = offsets[keep]
    age = a1[pid] + t
    cal = d1[pid] + t
    birth = d1[pid] - a1[pid]
    y = truth.mean(age, birth) + b[pid] + rng.normal(0.0, protocol.sigma_fraction * sd, size=age.size)
    width = len(str(n - 1))
    ids = [f"p{i:0{width}d}" for i in pid]
    return LongitudinalDataset.from_columns(ids, age, cal - EPOCH_YEAR, y)


# ---------------------------------------------------------------------------
# bias-variance decomposition
# ---------------------------------------------------------------------------


def decompose_mse(estimates, truth):
    """Return ``(rmse, bias, variance)`` of replicate estimates against ``truth``.

    The variance is the population variance over replicates, so that
    ``rmse**2 == bias**2 + variance``.  Works elementwise over trailing axes.
    """
    est = np.asarray(estimates, dtype=float)
    if est.shape[0] < 2:
        raise ValueError("need at least two replicates")
    bias = est.mean(axis=0) - np.asarray(truth, dtype=float)
    variance = est.var(axis=0)
    return np.sqrt(bias ** 2 + variance), bias, variance


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Experiment:
    """What to run: truths x regimes x variants, replicates, protocol, seed."""

    curves: tuple = tuple(CURVES)
    regimes: tuple = REGIMES
    variants: tuple = VARIANTS
    n_replicates: int = 100
    protocol: SamplingProtocol = SamplingProtocol(n_participants=250)
    master_seed: int = 1
    magnitudes: dict = field(default_factory=dict)
    reference_birth_date: float | None = None
    k_age: int = 20
    k_time: int = 5
    k_cohort: int = 5
    cross_sectional: bool = False
    name: str = "custom"

    def __post_init__(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")
        for c in self.curves:
            if c not in CURVES:
                raise ConfigError(f"unknown curve {c!r}; built-in curves are {sorted(CURVES)}")
        for r in self.regimes:
            if r not in REGIMES:
                raise ConfigError(f"unknown regime {r!r}")
        if self.n_replicates < 2:
            raise ConfigError("need at least two replicates")

    def truth(self, curve, regime) -> GroundTruth:
        mag = dict(DEFAULT_MAGNITUDE, **self.magnitudes)[regime]
        ref = self.reference_birth_date
        if ref is None:
            ref = self.protocol.reference_date - 0.5 * sum(AGE_RANGE)
        return GroundTruth(curve, CURVES[curve], regime, mag, ref)

    def pinned_cohort(self, baseline_age) -> float:
        """Birth year of the cohort aged ``baseline_age`` at the mid-study date."""
        return self.protocol.reference_date - baseline_age

    def to_dict(self) -> dict:
        d = asdict(self)
        d["protocol"] = asdict(self.protocol)
        return d

    @classmethod
    def from_dict(cls, d) -> "Experiment":
        d = dict(d)
        names = {f.name for f in fields(cls)}
        bad = set(d) - names
        if bad:
            raise ConfigError(f"unknown experiment keys {sorted(bad)}")
        if "protocol" in d:
            d["protocol"] = SamplingProtocol.from_dict(d["protocol"])
        for key in ("curves", "regimes", "variants"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


PRESETS = ("quick", "desk", "full", "identical-dates")


def load_preset(name_or_path) -> Experiment:
    """Built-in preset by name or a JSON file with the same keys."""
    if str(name_or_path) in PRESETS:
        text = resources.files("lifespan_gamm.presets").joinpath(f"{name_or_path}.json").read_text()
    else:
        p = Path(name_or_path)
        if not p.is_file():
            raise ConfigError(f"no preset named {name_or_path!r} and no such file; presets: {', '.join(PRESETS)}")
        text = p.read_text()
    try:
        return Experiment.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"preset is not valid JSON: {exc}") from None


def _run_task(args):
    exp, ci, ri, rep = args
    curve, regime = exp.curves[ci], exp.regimes[ri]
    truth = exp.truth(curve, regime)
    # key on the global curve / regime indices so sub-runs reproduce the same replicates
    rng = _rng(exp.master_seed, list(CURVES).index(curve), REGIMES.index(regime), rep)
    ds = sample_dataset(truth, exp.protocol, rng)
    cohorts = [exp.pinned_cohort(a) - EPOCH_YEAR for a in BASELINES]
    ref_date = exp.protocol.reference_date - EPOCH_YEAR
    long_est = np.full((len(exp.variants), len(BASELINES), len(TIMES)), np.nan)
    cross_est = np.full((len(exp.variants), len(CROSS_AGES)), np.nan)
    errors = []
    for vi, variant in enumerate(exp.variants):
        spec = canonical_spec(variant, exp.k_age, exp.k_time, exp.k_cohort)
        try:
            fitted = fit_model(spec, ds)
            for bi, a1 in enumerate(BASELINES):
                L, _ = longitudinal_contrast(fitted, a1, np.asarray(TIMES), cohorts[bi])
                long_est[vi, bi] = L @ fitted.beta_hat
            if exp.cross_sectional:
                X = fitted.design.matrix(cross_sectional_grid(CROSS_AGES, ref_date))
                cross_est[vi] = X @ fitted.beta_hat
        except (GammError, np.linalg.LinAlgError) as exc:
            errors.append((variant, type(exc).__name__, str(exc)))
            long_est[vi] = np.nan
            cross_est[vi] = np.nan
    return long_est, cross_est, errors


@dataclass
class ExperimentReport:
    """Per-cell and averaged RMSE / bias / variance of the longitudinal estimates.

    ``cells`` rows: (region, regime, variant, baseline_age, t, rmse, bias, variance).
    ``averages`` rows: (region, regime, variant, rmse, bias, variance, sd, n_ok)
    with ``rmse = sqrt(mean mse)``, ``bias = sqrt(mean bias^2)``, ``variance =
    mean variance`` and ``sd = sqrt(variance)``.
    """

    experiment: Experiment
    cells: list
    averages: list
    failures: list
    replicates_ok: dict
    cross_cells: list = field(default_factory=list)

    def average(self, region, regime, variant) -> dict:
        for row in self.averages:
            if row[:3] == (region, regime, variant):
                return dict(zip(AVERAGE_HEADER, row))
        raise KeyError((region, regime, variant))

    def cell_rmse(self, region, regime, variant, baseline_age):
        return np.array([r[5] for r in self.cells if r[:4] == (region, regime, variant, baseline_age)])

    def cross_sectional_rmse(self, region, regime, variant) -> float:
        """Root of the mean squared error over the cross-sectional age grid."""
        rmse = np.array([r[4] for r in self.cross_cells if r[:3] == (region, regime, variant)])
        if rmse.size == 0:
            raise KeyError((region, regime, variant))
        return float(np.sqrt(np.mean(rmse ** 2)))

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "cells.csv", CELL_HEADER, self.cells)
        _write_csv(out / "averages.csv", AVERAGE_HEADER, self.averages)
        _write_csv(out / "failures.csv", FAILURE_HEADER, self.failures)
        if self.experiment.cross_sectional:
            _write_csv(out / "cross_sectional.csv", CROSS_HEADER, self.cross_cells)
        meta = {"preset": self.experiment.name, "master_seed": self.experiment.master_seed,
                "n_replicates": self.experiment.n_replicates, "n_failures": len(self.failures),
                "replicates_ok": {"/".join(k): v for k, v in sorted(self.replicates_ok.items())},
                "experiment": self.experiment.to_dict()}
        (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return [out / n for n in ("cells.csv", "averages.csv", "failures.csv", "run.json")]


CELL_HEADER = ("region", "regime", "variant", "baseline_age", "t", "rmse", "bias", "variance")
AVERAGE_HEADER = ("region", "regime", "variant", "rmse", "bias", "variance", "sd", "n_ok")
FAILURE_HEADER = ("region", "regime", "replicate", "variant", "error", "message")
CROSS_HEADER = ("region", "regime", "variant", "age", "rmse", "bias", "variance")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def run_experiment(experiment: Experiment, workers: int | None = 1) -> ExperimentReport:
    """Run every (curve, regime, replicate) task and aggregate per variant.

    Results depend only on ``experiment`` (seeds are derived per task), not
    on ``workers`` or scheduling.  Fit failures are recorded and the failing
    replicate is excluded for that variant only.
    """
    exp = experiment
    tasks = [(exp, ci, ri, r) for ci in range(len(exp.curves)) for ri in range(len(exp.regimes))
             for r in range(exp.n_replicates)]
    workers = (os.cpu_count() or 1) if workers is None else max(1, int(workers))
    if workers == 1:
        results = [_run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    return aggregate(exp, tasks, results)


def aggregate(exp: Experiment, tasks, results) -> ExperimentReport:
    cells, averages, failures, cross_cells = [], [], [], []
    ok = {}
    times = np.asarray(TIMES)
    R = exp.n_replicates
    for ci, curve in enumerate(exp.curves):
        for ri, regime in enumerate(exp.regimes):
            truth = exp.truth(curve, regime)
            base = (ci * len(exp.regimes) + ri) * R
            block = [results[base + r] for r in range(R)]
            for r, (_, _, errs) in enumerate(block):
                for variant, kind, msg in errs:
                    failures.append((curve, regime, r, variant, kind, msg))
            long_all = np.stack([b[0] for b in block])     # R x V x B x T
            cross_all = np.stack([b[1] for b in block])    # R x V x A
            true_long = np.array([truth.longitudinal(a1, times, exp.pinned_cohort(a1)) for a1 in BASELINES])
            ages = np.asarray(CROSS_AGES)
            true_cross = truth.mean(ages, exp.protocol.reference_date - ages)
            for vi, variant in enumerate(exp.variants):
                good = np.all(np.isfinite(long_all[:, vi]), axis=(1, 2))
                ok[(curve, regime, variant)] = int(good.sum())
                if good.sum() < 2:
                    averages.append((curve, regime, variant, math.nan, math.nan, math.nan, math.nan, int(good.sum())))
                    continue
                rmse, bias, var = decompose_mse(long_all[good, vi], true_long)
                for bi, a1 in enumerate(BASELINES):
                    for ti, t in enumerate(TIMES):
                        cells.append((curve, regime, variant, a1, t, float(rmse[bi, ti]),
                                      float(bias[bi, ti]), float(var[bi, ti])))
                mean_var = float(var.mean())
                averages.append((curve, regime, variant, float(math.sqrt(np.mean(bias ** 2) + mean_var)),
                                 float(math.sqrt(np.mean(bias ** 2))), mean_var, float(math.sqrt(mean_var)),
                                 int(good.sum())))
                if exp.cross_sectional:
                    cgood = np.all(np.isfinite(cross_all[:, vi]), axis=1)
                    if cgood.sum() >= 2:
                        crm, cb, cv = decompose_mse(cross_all[cgood, vi], true_cross)
                        for ai, a in enumerate(CROSS_AGES):
                            cross_cells.append((curve, regime, variant, a, float(crm[ai]), float(cb[ai]), float(cv[ai])))
    return ExperimentReport(exp, cells, averages, failures, ok, cross_cells)


def _parse(v):
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            return v


def _read_csv(path, header):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        got = tuple(next(r))
        if got != tuple(header):
            raise ConfigError(f"{path} has header {got}, expected {tuple(header)}")
        return [tuple(_parse(v) for v in row) for row in r]


def read_report(out_dir) -> ExperimentReport:
    """Load the tables written by ``ExperimentReport.write``."""
    out = Path(out_dir)
    try:
        meta = json.loads((out / "run.json").read_text())
    except FileNotFoundError:
        raise ConfigError(f"{out} holds no simulation results (run.json missing)") from None
    exp = Experiment.from_dict(meta["experiment"])
    cells = [r[:3] + (float(r[3]), float(r[4])) + r[5:] for r in _read_csv(out / "cells.csv", CELL_HEADER)]
    cross = []
    if exp.cross_sectional and (out / "cross_sectional.csv").is_file():
        cross = [r[:3] + (float(r[3]),) + r[4:] for r in _read_csv(out / "cross_sectional.csv", CROSS_HEADER)]
    ok = {tuple(k.split("/")): v for k, v in meta["replicates_ok"].items()}
    return ExperimentReport(exp, cells, _read_csv(out / "averages.csv", AVERAGE_HEADER),
                            _read_csv(out / "failures.csv", FAILURE_HEADER), ok, cross)


# ---------------------------------------------------------------------------
# qualitative checks
# ---------------------------------------------------------------------------

ORDERINGS = {
    "none": "1b lowest average RMSE",
    "offset": "3a below 1a, 1b, 2a and 2b",
    "interaction": "3b lowest and 3a, 3b both below 2a, 2b",
}
GROWTH_MIN_CORRELATION = 0.5


def ordering_holds(report: ExperimentReport, region: str, regime: str) -> bool:
    """Whether the expected variant ordering for ``regime`` holds for ``region``."""
    rm = {r[2]: r[3] for r in report.averages if r[0] == region and r[1] == regime}
    if any(not np.isfinite(v) for v in rm.values()):
        return False
    if regime == "none":
        return min(rm, key=rm.get) == "1b"
    if regime == "offset":
        return all(rm["3a"] < rm[v] for v in ("1a", "1b", "2a", "2b"))
    if regime == "interaction":
        return (min(rm, key=rm.get) == "3b"
                and max(rm["3a"], rm["3b"]) < min(rm["2a"], rm["2b"]))
    raise ConfigError(f"unknown regime {regime!r}")


def grows_with_time(rmse) -> bool:
    """RMSE over follow-up times is largest at the last time and trends upward.

    The trend is a Spearman rank correlation with time of at least
    ``GROWTH_MIN_CORRELATION``.
    """
    rmse = np.asarray(rmse, dtype=float)
    if rmse.size < 3 or not np.all(np.isfinite(rmse)):
        return False
    rho = spearmanr(np.arange(rmse.size), rmse)[0]
    return bool(rmse[-1] >= rmse.max() and rho >= GROWTH_MIN_CORRELATION)


def age_time_failure(report: ExperimentReport, region: str, baseline_age: float = 10.0,
                     from_time: float = 6.0) -> bool:
    """2b's interaction-regime RMSE grows with time and exceeds 3b's from ``from_time`` on."""
    r2 = report.cell_rmse(region, "interaction", "2b", baseline_age)
    r3 = report.cell_rmse(region, "interaction", "3b", baseline_age)
    late = np.asarray(TIMES) >= from_time
    return bool(r2.size == len(TIMES) and r3.size == len(TIMES)
                and grows_with_time(r2) and np.all(r2[late] > r3[late]))


def check_rows(report: ExperimentReport):
    """Rows ``(check, region, passed)`` for the orderings and the age-time failure mode."""
    exp = report.experiment
    rows = []
    for regime in exp.regimes:
        needed = {"none": ("1b",), "offset": ("1a", "1b", "2a", "2b", "3a"),
                  "interaction": ("2a", "2b", "3a", "3b")}[regime]
        if not set(needed) <= set(exp.variants):
            continue
        for region in exp.curves:
            rows.append((f"ordering[{regime}]: {ORDERINGS[regime]}", region,
                         ordering_holds(report, region, regime)))
    if "interaction" in exp.regimes and {"2b", "3b"} <= set(exp.variants):
        for region in exp.curves:
            rows.append(("age-time: 2b RMSE at baseline 10 grows and exceeds 3b for t >= 6", region,
                         age_time_failure(report, region)))
    return rows
