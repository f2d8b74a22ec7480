"""Posterior curve simulation, confidence bands, HDIs and term diagnostics.

The posterior is the empirical-Bayes one: ``beta | y ~ N(beta_hat, V)`` with
the smoothing parameters fixed at their REML estimates.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.linalg import lapack

from .errors import NumericalError, SpecError
from .mixed import FittedModel
from .model import Smooth, _linear_se, assemble

DRAWS_HDI = 20_000
DRAWS_BAND = 10_000
CHUNK = 1024
N_PERMUTATIONS = 200
RIDGE = 1e-10


@dataclass(frozen=True)
class PosteriorCurveSample:
    """Posterior draws of a curve evaluated on ``grid`` (one row per draw)."""

    draws: np.ndarray
    grid: np.ndarray
    seed: int
    estimate: np.ndarray | None = None
    se: np.ndarray | None = None

    def __post_init__(self):
        if self.draws.ndim != 2 or self.draws.shape[1] != len(self.grid):
            raise ValueError("draws must be n_draws x len(grid)")
        if not np.all(np.isfinite(self.draws)):
            raise NumericalError("posterior draws are not finite")

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]


@dataclass(frozen=True)
class IntervalEstimate:
    """Lower and upper limits (arrays or scalars) at a given level."""

    lower: np.ndarray
    upper: np.ndarray
    level: float
    kind: str
    estimate: np.ndarray | None = None
    multiplier: float | None = None

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise SpecError("level must lie in (0, 1)")
        if self.kind not in ("pointwise", "simultaneous", "hdi"):
            raise SpecError(f"unknown interval kind {self.kind!r}")
        if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise NumericalError("interval lower limit exceeds upper limit")


# ---------------------------------------------------------------------------
# posterior sampling
# ---------------------------------------------------------------------------


def covariance_factor(cov: np.ndarray) -> np.ndarray:
    """Matrix ``F`` with ``F @ F.T == cov`` from a pivoted Cholesky factorization.

    Semi-definite matrices give a factor with ``rank`` columns.  If the
    factorization fails (non-finite or indefinite input) it is retried once
    with a ridge of ``1e-10 * trace / p``.
    """
    cov = np.asarray(cov, dtype=float)
    p = cov.shape[0]
    if p == 0:
        return np.zeros((0, 0))
    cov = (cov + cov.T) / 2
    scale = float(np.max(np.abs(np.diag(cov)))) if cov.size else 0.0
    if scale == 0.0 and np.all(cov == 0):
        return np.zeros((p, 0))
    ridge = 0.0
    for attempt in range(2):
        if not np.all(np.isfinite(cov)):
            break
        a = cov + ridge * np.eye(p)
        u, piv, rank, info = lapack.dpstrf(a, lower=0)
        if info >= 0:
            u = np.triu(u)[:rank]
            f = np.zeros((p, rank))
            f[piv - 1] = u.T
            err = np.max(np.abs(f @ f.T - a))
            if err <= 1e-8 * max(scale, 1e-300):
                return f
        ridge = RIDGE * float(np.trace(cov)) / p
    raise NumericalError("posterior covariance factorization failed after ridge retry")


def _chunk_normals(seed: int, chunk: int, n: int, dim: int) -> np.ndarray:
    bits = np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chunk,)))
    return np.random.Generator(bits).standard_normal((n, dim))


def sample_linear(L: np.ndarray, beta: np.ndarray, cov: np.ndarray, n_draws: int,
                  seed: int, workers: int = 1) -> np.ndarray:
    """Draws of ``L @ beta_s`` with ``beta_s ~ N(beta, cov)``.

    Draws are generated in fixed chunks of ``CHUNK`` rows, each from its own
    counter-based stream keyed by ``(seed, chunk)``, so the result does not
    depend on ``workers``.
    """
    if n_draws < 1:
        raise SpecError("n_draws must be at least 1")
    L = np.atleast_2d(np.asarray(L, dtype=float))
    f = covariance_factor(cov)
    mean = L @ beta
    lf = L @ f
    sizes = [min(CHUNK, n_draws - s) for s in range(0, n_draws, CHUNK)]

    def block(i):
        if lf.shape[1] == 0:
            return np.tile(mean, (sizes[i], 1))
        return mean + _chunk_normals(seed, i, sizes[i], lf.shape[1]) @ lf.T

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(block, range(len(sizes))))
    else:
        parts = [block(i) for i in range(len(sizes))]
    return np.vstack(parts)


def _grid_abscissa(grid) -> np.ndarray:
    for key in ("age", "time"):
        if key in grid:
            return np.asarray(grid[key], dtype=float)
    return np.asarray(next(iter(grid.values())), dtype=float)


def sample_posterior_curves(fitted: FittedModel, grid, n_draws: int = DRAWS_BAND, seed: int = 0,
                            workers: int = 1, contrast: np.ndarray | None = None,
                            abscissa=None) -> PosteriorCurveSample:
    """Posterior draws of the population curve on ``grid``.

    ``grid`` is a mapping of model variables (as for ``predict``).  Passing
    ``contrast`` instead samples ``contrast @ beta`` directly, e.g. a
    longitudinal contrast; ``abscissa`` then labels its rows.
    """
    if contrast is None:
        L = fitted.design.matrix(grid)
        x = _grid_abscissa(grid) if abscissa is None else np.asarray(abscissa, dtype=float)
    else:
        L = np.atleast_2d(np.asarray(contrast, dtype=float))
        x = np.arange(L.shape[0], dtype=float) if abscissa is None else np.asarray(abscissa, dtype=float)
    draws = sample_linear(L, fitted.beta_hat, fitted.coef_covariance, n_draws, seed, workers)
    return PosteriorCurveSample(draws, x, int(seed), L @ fitted.beta_hat,
                                _linear_se(L, fitted.coef_covariance))


# ---------------------------------------------------------------------------
# bands
# ---------------------------------------------------------------------------


def normal_multiplier(level: float) -> float:
    if not 0 < level < 1:
        raise SpecError("level must lie in (0, 1)")
    return float(stats.norm.ppf(0.5 + level / 2))


def pointwise_band(source, level: float = 0.95, grid=None) -> IntervalEstimate:
    """``estimate +/- z * se`` at each grid point.

    ``source`` is a ``PosteriorCurveSample`` (its point estimate and SE are
    used), an object with ``estimate`` and ``pointwise_se``/``se``
    attributes, or a fitted model together with ``grid``.
    """
    z = normal_multiplier(level)
    if isinstance(source, FittedModel):
        if grid is None:
            raise SpecError("a grid is required to band a fitted model")
        X = source.design.matrix(grid)
        est, se = X @ source.beta_hat, _linear_se(X, source.coef_covariance)
    else:
        est = np.asarray(source.estimate, dtype=float)
        se = np.asarray(getattr(source, "pointwise_se", None)
                        if hasattr(source, "pointwise_se") else source.se, dtype=float)
    return IntervalEstimate(est - z * se, est + z * se, level, "pointwise", est, z)


def simultaneous_multiplier(sample: PosteriorCurveSample, level: float = 0.95) -> float:
    """``level`` quantile of ``max_g |draw_g - estimate_g| / se_g`` over draws.

    Grid points with zero standard error are excluded from the maximum.
    """
    normal_multiplier(level)
    se = np.asarray(sample.se, dtype=float)
    keep = se > 0
    if not np.any(keep):
        return normal_multiplier(level)
    dev = np.abs(sample.draws[:, keep] - sample.estimate[keep]) / se[keep]
    return float(np.quantile(dev.max(axis=1), level))


def simultaneous_band(fitted: FittedModel, grid=None, level: float = 0.95, n_draws: int = DRAWS_BAND,
                      seed: int = 0, workers: int = 1, sample: PosteriorCurveSample | None = None,
                      **kwargs) -> IntervalEstimate:
    """Band ``estimate +/- m* * se`` that contains the whole curve with probability ``level``."""
    if sample is None:
        sample = sample_posterior_curves(fitted, grid, n_draws, seed, workers, **kwargs)
    m = simultaneous_multiplier(sample, level)
    est, se = sample.estimate, sample.se
    return IntervalEstimate(est - m * se, est + m * se, level, "simultaneous", est, m)


# ---------------------------------------------------------------------------
# derived quantities
# ---------------------------------------------------------------------------


def hdi(values, level: float = 0.95) -> IntervalEstimate:
    """Shortest interval containing ``ceil(level * n)`` of the sorted sample.

    Among equally short windows the leftmost wins.
    """
    normal_multiplier(level)
    x = np.sort(np.asarray(values, dtype=float))
    n = x.size
    if n == 0:
        raise SpecError("cannot compute an HDI of an empty sample")
    m = min(n, max(1, math.ceil(level * n - 1e-9)))
    widths = x[m - 1:] - x[: n - m + 1]
    i = int(np.argmin(widths))
    return IntervalEstimate(float(x[i]), float(x[i + m - 1]), level, "hdi")


def age_at_max_distribution(sample: PosteriorCurveSample, level: float = 0.95):
    """Grid location of each draw's maximum (ties to the smallest age) and its HDI."""
    order = np.argsort(sample.grid, kind="stable")
    grid = sample.grid[order]
    ages = grid[np.argmax(sample.draws[:, order], axis=1)]
    return ages, hdi(ages, level)


# ---------------------------------------------------------------------------
# term tests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TermTest:
    term: str
    edf: float
    ref_df: int
    statistic: float
    p_value: float
    wald: float


def wald_term_test(fitted: FittedModel, term: str) -> TermTest:
    """Wald test of a smooth term with a rank ``round(edf)`` pseudo-inverse.

    ``statistic = b' V_r^- b / r`` is referred to an F distribution with
    ``(r, residual_df)`` degrees of freedom.
    """
    info = fitted.term(term)
    b = fitted.beta_hat[info.start:info.stop]
    V = fitted.coef_covariance[info.start:info.stop, info.start:info.stop]
    edf = float(fitted.edf_per_term.get(term, info.n_cols))
    r = int(min(info.n_cols, max(1, round(edf))))
    w, U = np.linalg.eigh((V + V.T) / 2)
    idx = np.argsort(w)[::-1][:r]
    w, U = w[idx], U[:, idx]
    ok = w > w.max(initial=0.0) * 1e-12
    proj = U[:, ok].T @ b
    T = float(np.sum(proj ** 2 / w[ok])) if np.any(ok) else 0.0
    F = T / r
    p = float(stats.f.sf(F, r, fitted.residual_df)) if F > 0 else 1.0
    return TermTest(term, edf, r, F, p, T)


@dataclass(frozen=True)
class BasisCheck:
    term: str
    k_prime: int
    edf: float
    k_index: float
    p_value: float


def _difference_ratio(e):
    return float(np.mean(np.diff(e) ** 2) / 2 / np.var(e))


def _smooth_variable(fitted, term):
    for t in fitted.spec.terms:
        if isinstance(t, Smooth) and t.label == term:
            return t.var
    raise SpecError(f"{term!r} is not a univariate smooth of the model")


def basis_dimension_check(fitted: FittedModel, term: str, dataset=None,
                          n_permutations: int = N_PERMUTATIONS, seed: int = 0) -> BasisCheck:
    """Residual-ordering diagnostic of whether a smooth's basis is large enough.

    Residuals are ordered by the smooth's covariate; ``k_index`` is half the
    mean squared first difference over the residual variance (about 1 when no
    pattern remains).  The p-value is the share of ``n_permutations`` random
    orderings giving an index at most the observed one.  Models loaded from
    disk need the training ``dataset``.
    """
    var = _smooth_variable(fitted, term)
    data = fitted.training
    if dataset is not None:
        data = assemble(fitted.spec, dataset).data
    if data is None:
        raise SpecError("the training dataset is required for a loaded model")
    x = np.asarray(data[var], dtype=float)
    if x.size != fitted.residuals.size:
        raise SpecError("dataset rows do not match the fitted residuals")
    e = fitted.residuals[np.argsort(x, kind="stable")]
    obs = _difference_ratio(e)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    perm = np.array([_difference_ratio(rng.permutation(e)) for _ in range(n_permutations)])
    info = fitted.term(term)
    return BasisCheck(term, info.n_cols, float(fitted.edf_per_term[term]), obs,
                      float(np.mean(perm <= obs)))


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

BAND_HEADER = ("grid", "estimate", "lower", "upper", "kind")


def write_bands(dest, grid, bands, extra: dict | None = None):
    """Write plot-ready ``grid, estimate, lower, upper, kind`` rows for each band."""
    extra = extra or {}
    keys = list(extra)
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + list(BAND_HEADER))
        for band in bands:
            for g, e, lo, hi in zip(grid, band.estimate, band.lower, band.upper):
                w.writerow([extra[k] for k in keys] + [repr(float(g)), repr(float(e)),
                                                       repr(float(lo)), repr(float(hi)), band.kind])


def write_draws(dest, sample: PosteriorCurveSample):
    """Write draws as rows ``draw, grid, value``."""
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["draw", "grid", "value"])
        for i, row in enumerate(sample.draws):
            for g, v in zip(sample.grid, row):
                w.writerow([i, repr(float(g)), repr(float(v))])


def write_hdi_summary(dest, rows):
    """Rows of ``(label, posterior_mean, lower, upper, level)``."""
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "posterior_mean", "lower", "upper", "level"])
        for label, mean, iv in rows:
            w.writerow([label, repr(float(mean)), repr(float(iv.lower)), repr(float(iv.upper)),
                        repr(float(iv.level))])
