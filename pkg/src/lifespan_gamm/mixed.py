"""Penalized smooths as mixed-model effects, fitted by restricted maximum likelihood.

The fitted model is

    y = X beta + Z b + eps,   eps ~ N(0, sigma^2 I),   b ~ N(0, sigma_b^2 I),

where the columns of ``X`` are the parametric terms followed by the smooth
blocks, each smooth carrying the improper Gaussian prior implied by its
penalty ``sum_j lambda_j S_j / sigma^2``.  The random intercepts enter as one
more penalized block with penalty ``lambda_b I`` and ``lambda_b =
sigma^2 / sigma_b^2``; they are eliminated analytically (Schur complement) so
that every dense operation is in the dimension of ``beta``.

The criterion minimized is minus twice the restricted log likelihood with the
residual variance profiled out::

    V(rho) = (n - M) (1 + log(2 pi D / (n - M))) + log|H| - log|S|_+

with ``D`` the penalized residual sum of squares, ``H = A'A + S`` over
``A = [X Z]`` and ``M`` the dimension of the unpenalized space.  The free
parameters are ``rho = log lambda`` for every smoothing parameter and the
random-intercept ratio.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, sparse

from .basis import NULL_EIGEN_RTOL, BasisBlock
from .errors import ConvergenceError, IdentifiabilityError, NumericalError, RankError

log = logging.getLogger(__name__)

GTOL = 1e-6
FTOL = 1e-10
MAX_ITER = 200
RHO_BOUNDS = (-16.0, 20.0)
START_LAMBDAS = (0.1, 10.0, 1000.0)
IDENT_RTOL = 1e-9
FLAT_CURVATURE = 1e-8


# ---------------------------------------------------------------------------
# mixed-model representation of a single smooth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixedDecomposition:
    """Split of a penalized block into unpenalized and whitened penalized parts.

    ``design @ back_transform == hstack([fixed_columns, random_columns])`` and
    the coefficients relate by ``beta = back_transform @ [fixed; random]``.
    On the random part the penalty is the identity, so with smoothing
    parameter ``lambda`` its prior variance is ``sigma^2 / lambda``.
    """

    fixed_columns: np.ndarray
    random_columns: np.ndarray
    back_transform: np.ndarray

    @property
    def n_fixed(self) -> int:
        return self.fixed_columns.shape[1]

    def fit(self, y, lam: float, extra_fixed=None) -> tuple[np.ndarray, np.ndarray]:
        """Ridge fit at fixed ``lam``; returns (block coefficients, fitted values).

        ``extra_fixed`` holds further unpenalized columns (an intercept, say);
        their coefficients are not returned.
        """
        y = np.asarray(y, dtype=float)
        E = np.zeros((y.size, 0)) if extra_fixed is None else np.atleast_2d(np.asarray(extra_fixed, float).T).T
        A = np.hstack([E, self.fixed_columns, self.random_columns])
        pen = np.zeros(A.shape[1])
        pen[E.shape[1] + self.n_fixed:] = lam
        coef = linalg.solve(A.T @ A + np.diag(pen), A.T @ y, assume_a="sym")
        beta = self.back_transform @ coef[E.shape[1]:]
        return beta, A @ coef


def decompose_penalty(block: BasisBlock, rtol: float = NULL_EIGEN_RTOL) -> MixedDecomposition:
    """Eigen-split the block penalty into its null space and whitened range space."""
    S = block.penalty
    ev, U = linalg.eigh(0.5 * (S + S.T))
    top = max(ev.max(initial=0.0), 0.0)
    if ev.size and ev.min() < -rtol * max(top, 1e-300):
        raise NumericalError(f"penalty has a negative eigenvalue {ev.min():.3g}")
    null = ev <= rtol * top if top > 0 else np.ones(ev.size, dtype=bool)
    U0, Ur = U[:, null], U[:, ~null]
    T = np.hstack([U0, Ur / np.sqrt(ev[~null])])
    return MixedDecomposition(block.design @ U0, block.design @ T[:, U0.shape[1]:], T)


def smoothing_parameter_from_variances(sigma: float, sigma_lambda: float) -> float:
    """Smoothing parameter ``sigma^2 / sigma_lambda^2``; infinite when ``sigma_lambda == 0``."""
    if sigma_lambda < 0 or sigma < 0:
        raise ValueError("standard deviations must be non-negative")
    if sigma_lambda == 0:
        return math.inf
    return (sigma / sigma_lambda) ** 2


# ---------------------------------------------------------------------------
# fitted model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TermInfo:
    """Location of one term's coefficients within ``beta``."""

    label: str
    start: int
    stop: int
    kind: str  # "parametric" or "smooth"
    penalty_index: tuple[int, ...] = ()
    null_space_dim: int = 0

    @property
    def cols(self) -> slice:
        return slice(self.start, self.stop)

    @property
    def n_cols(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class VarianceComponents:
    sigma: float
    sigma_b: float | None
    sigma_lambda: dict
    lambdas: dict

    def as_rows(self, group_name: str = "participant"):
        """(group, name, sd) rows in the order of a variance-component table."""
        rows = []
        if self.sigma_b is not None:
            rows.append((group_name, "(Intercept)", self.sigma_b))
        for name, sd in self.sigma_lambda.items():
            rows.append(("Xr", name, sd))
        rows.append(("Residual", "", self.sigma))
        return rows


@dataclass(frozen=True)
class FittedModel:
    """Result of a REML fit.

    ``coef_covariance`` is the Bayesian posterior covariance of ``beta`` with
    the random intercepts integrated out; ``random_effects`` are the predicted
    participant intercepts in group-code order.
    """

    beta_hat: np.ndarray
    coef_covariance: np.ndarray
    variance_components: VarianceComponents
    edf_per_term: dict
    terms: tuple[TermInfo, ...]
    reml_value: float
    convergence_report: dict
    random_effects: np.ndarray | None
    n_obs: int
    residual_df: float
    fitted_values: np.ndarray = field(repr=False)
    residuals: np.ndarray = field(repr=False)
    penalty_labels: tuple[str, ...] = ()
    # attached by the model layer
    design: object = field(default=None, repr=False)
    spec: object = field(default=None, repr=False)
    group_levels: tuple = field(default=(), repr=False)
    training: object = field(default=None, repr=False)

    @property
    def sigma(self) -> float:
        return self.variance_components.sigma

    def term(self, label: str) -> TermInfo:
        for t in self.terms:
            if t.label == label:
                return t
        raise KeyError(f"no term {label!r}; terms are {[t.label for t in self.terms]}")

    @property
    def smooth_terms(self) -> list[TermInfo]:
        return [t for t in self.terms if t.kind == "smooth"]

    @property
    def total_edf(self) -> float:
        return float(sum(self.edf_per_term.values()))


def compute_edf(fitted: FittedModel) -> dict:
    """Effective degrees of freedom per term (as stored at fit time)."""
    return dict(fitted.edf_per_term)


# ---------------------------------------------------------------------------
# REML problem
# ---------------------------------------------------------------------------


@dataclass
class _Penalty:
    label: str
    cols: slice
    S: np.ndarray          # scaled, in block coordinates
    scale: float           # S_scaled = scale * S_original
    block: int
    R: np.ndarray = None   # R'R = S, rows span the range of S

    def __post_init__(self):
        ev, V = linalg.eigh(self.S)
        keep = ev > NULL_EIGEN_RTOL * max(ev.max(initial=0.0), 1e-300)
        self.R = np.sqrt(ev[keep])[:, None] * V[:, keep].T


class _PenaltyGroup:
    """All penalties acting on one block, expressed on a basis of their joint range.

    ``logdet(lam)`` returns ``log|sum_j lam_j P_j|`` together with the terms
    ``lam_j tr(M^-1 P_j)`` of its derivative.  Two-penalty groups (tensor
    products) are handled in the eigenbasis of the dominant penalty so that
    smoothing parameters many orders of magnitude apart stay accurate.
    """

    def __init__(self, cols, members, U, P):
        self.cols, self.members, self.U, self.P = cols, members, U, P
        self.r = U.shape[1]
        if len(P) == 1:
            ev = linalg.eigvalsh(P[0])
            self._logdetP = float(np.sum(np.log(ev)))
        elif len(P) == 2:
            self._split = [self._prepare(P[d], P[1 - d]) for d in (0, 1)]

    @staticmethod
    def _prepare(Pd, Po):
        ev, V = linalg.eigh(Pd)
        rng = ev > NULL_EIGEN_RTOL * ev.max()
        Vr, V0 = V[:, rng], V[:, ~rng]
        A = Vr.T @ Po @ Vr
        if V0.shape[1]:
            B = Vr.T @ Po @ V0
            C = V0.T @ Po @ V0
            cC = linalg.cho_factor(C)
            BCi = linalg.cho_solve(cC, B.T).T
            A = A - BCi @ B.T
            logdetC = 2.0 * np.sum(np.log(np.diag(cC[0])))
        else:
            logdetC = 0.0
        return ev[rng], 0.5 * (A + A.T), logdetC, V0.shape[1]

    def logdet(self, lam):
        lam_g = np.array([lam[j] for j in self.members])
        if len(self.P) == 1:
            return self.r * math.log(lam_g[0]) + self._logdetP, np.array([float(self.r)])
        if len(self.P) == 2:
            d = int(np.argmax(lam_g * [np.abs(P).max() for P in self.P]))
            o = 1 - d
            E, As, logdetC, r0 = self._split[d]
            Sc = lam_g[d] * np.diag(E) + lam_g[o] * As
            cS = linalg.cho_factor(Sc, check_finite=False)
            ld = 2.0 * np.sum(np.log(np.diag(cS[0]))) + r0 * math.log(lam_g[o]) + logdetC
            td = lam_g[d] * float(np.sum(np.diag(linalg.cho_solve(cS, np.eye(E.size), check_finite=False)) * E))
            tr = np.empty(2)
            tr[d], tr[o] = td, self.r - td
            return ld, tr
        M = sum(l * P for l, P in zip(lam_g, self.P))
        cM = linalg.cho_factor(M, check_finite=False)
        Mi = linalg.cho_solve(cM, np.eye(self.r), check_finite=False)
        return (2.0 * np.sum(np.log(np.diag(cM[0]))),
                np.array([l * np.sum(Mi * P) for l, P in zip(lam_g, self.P)]))


class RemlProblem:
    """Profiled REML criterion and its gradient for fixed design and data.

    Parameters are ``log`` smoothing parameters for every free penalty,
    followed by ``log(sigma^2 / sigma_b^2)`` when a grouping is present.
    """

    def __init__(self, X, y, penalties, grouping=None, fixed_lambdas=None, labels=None):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float).ravel()
        self.n, self.p = self.X.shape
        if self.y.size != self.n:
            raise RankError("outcome length does not match the design rows")
        if self.p >= self.n:
            raise RankError(f"{self.p} columns for {self.n} rows; need fewer columns than rows")
        self.XtX = self.X.T @ self.X
        self.Xty = self.X.T @ self.y
        self.yty = float(self.y @ self.y)

        # penalties: list of (label, cols slice, S in block coordinates, block id)
        self.penalties: list[_Penalty] = []
        for lab, cols, S, blk in penalties:
            XtXb = self.XtX[cols, cols]
            nS = np.linalg.norm(S)
            scale = np.linalg.norm(XtXb) / nS if nS > 0 else 1.0
            self.penalties.append(_Penalty(lab, cols, scale * S, scale, blk))
        self.groups: list[_PenaltyGroup] = []
        by_block = {}
        for j, pen in enumerate(self.penalties):
            by_block.setdefault(pen.block, []).append(j)
        for blk, members in by_block.items():
            cols = self.penalties[members[0]].cols
            total = sum(self.penalties[j].S for j in members)
            ev, U = linalg.eigh(total)
            keep = ev > NULL_EIGEN_RTOL * ev.max()
            grp = _PenaltyGroup(cols, members, U[:, keep], [U[:, keep].T @ self.penalties[j].S @ U[:, keep]
                                                             for j in members])
            grp.U0 = U[:, ~keep]
            self.groups.append(grp)
        self.rank_S = sum(g.U.shape[1] for g in self.groups)
        self.M = self.p - self.rank_S

        fixed_lambdas = dict(fixed_lambdas or {})
        self.fixed = {}
        for j, pen in enumerate(self.penalties):
            if pen.label in fixed_lambdas and fixed_lambdas[pen.label] is not None:
                self.fixed[j] = float(fixed_lambdas[pen.label]) / pen.scale
        self.free = [j for j in range(len(self.penalties)) if j not in self.fixed]

        self.grouped = grouping is not None
        if self.grouped:
            g = np.asarray(grouping, dtype=int).ravel()
            self.G = int(g.max()) + 1
            Z = sparse.csr_matrix((np.ones(self.n), (g, np.arange(self.n))), shape=(self.G, self.n))
            self.Zt = Z
            self.m = np.asarray(Z.sum(axis=1)).ravel()
            self.ZtX = np.asarray(Z @ self.X)
            self.Zty = np.asarray(Z @ self.y).ravel()
            self.grouping = g
        self.n_params = len(self.free) + (1 if self.grouped else 0)
        self._check_identifiable()

    # -- helpers ------------------------------------------------------------

    def _check_identifiable(self):
        """The unpenalized directions of ``beta`` must be estimable."""
        N = np.eye(self.p)
        keep = np.ones(self.p, dtype=bool)
        blocks = []
        for grp in self.groups:
            idx = np.arange(self.p)[grp.cols]
            keep[idx] = False
            # null space of the block penalty within the block
            Q = linalg.null_space(grp.U.T) if grp.U.shape[1] else np.eye(idx.size)
            if Q.shape[1]:
                E = np.zeros((self.p, Q.shape[1]))
                E[idx] = Q
                blocks.append(E)
        parts = [N[:, keep]] + blocks
        Nfull = np.hstack(parts) if parts else np.zeros((self.p, 0))
        if Nfull.shape[1] == 0:
            return
        XN = self.X @ Nfull
        norms = np.linalg.norm(XN, axis=0)
        if np.any(norms == 0):
            raise IdentifiabilityError("an unpenalized model direction is identically zero on the data")
        sv = linalg.svdvals(XN / norms)
        if sv[-1] < IDENT_RTOL * sv[0]:
            raise IdentifiabilityError(
                "unpenalized part of the design is rank deficient "
                f"(condition {sv[0] / sv[-1]:.3g}); for an age-cohort model this happens when "
                "age and birth date are perfectly collinear, e.g. all measurement dates equal")

    def lambdas_from(self, rho) -> np.ndarray:
        lam = np.empty(len(self.penalties))
        for j, v in self.fixed.items():
            lam[j] = v
        for i, j in enumerate(self.free):
            lam[j] = math.exp(rho[i])
        return lam

    def state(self, rho):
        """Everything the criterion and the final fit need at ``rho``."""
        rho = np.asarray(rho, dtype=float)
        lam = self.lambdas_from(rho)
        S = np.zeros((self.p, self.p))
        for j, pen in enumerate(self.penalties):
            S[pen.cols, pen.cols] += lam[j] * pen.S
        st = {"rho": rho, "lam": lam, "S": S}
        A = self.XtX
        rhs = self.Xty.copy()
        if self.grouped:
            lam_b = math.exp(rho[-1])
            d = self.m + lam_b
            Qd = self.ZtX.T / d             # p x G  (Q D^-1)
            A = A - Qd @ self.ZtX
            rhs = rhs - Qd @ self.Zty
            st.update(lam_b=lam_b, d=d, Qd=Qd)
        # Rotate each penalized block onto the eigenvectors of its total
        # penalty, add the penalty as an exact diagonal and equilibrate.  Adding
        # S to X'X before rotating would lose X'X to rounding once the
        # smoothing parameters are large.
        T = np.eye(self.p)
        s_diag = np.zeros(self.p)
        for grp in self.groups:
            c = grp.cols
            lam_g = [lam[j] for j in grp.members]
            ev, V = linalg.eigh(sum(l * P for l, P in zip(lam_g, grp.P)))
            r0 = grp.U0.shape[1]
            T[c, c] = np.hstack([grp.U0, grp.U @ V])
            s_diag[c][r0:] = np.maximum(ev, 0.0)
        Ht = T.T @ A @ T + np.diag(s_diag)
        sc = 1.0 / np.sqrt(np.abs(np.diag(Ht)))
        Ht = sc[:, None] * Ht * sc[None, :]
        Ht = 0.5 * (Ht + Ht.T)
        try:
            cf = linalg.cho_factor(Ht, lower=False, check_finite=False)
        except linalg.LinAlgError:
            raise NumericalError("penalized normal equations are not positive definite") from None
        W = T * sc[None, :]                  # Hs^-1 = W Ht^-1 W'
        beta = W @ linalg.cho_solve(cf, W.T @ rhs, check_finite=False)
        Htinv = linalg.cho_solve(cf, np.eye(self.p), check_finite=False)
        Hinv = W @ Htinv @ W.T
        Hinv = 0.5 * (Hinv + Hinv.T)
        logdetH = 2.0 * np.sum(np.log(np.diag(cf[0]))) - 2.0 * np.sum(np.log(sc))
        # penalized residual sum of squares, computed directly (the shortcut
        # y'y - beta'X'y cancels badly when H is ill conditioned)
        r = self.y - self.X @ beta
        if self.grouped:
            b = (self.Zty - self.ZtX @ beta) / st["d"]
            r -= b[self.grouping]
            logdetH += np.sum(np.log(st["d"]))
            st["b"] = b
        quad = np.array([float(np.sum((pen.R @ beta[pen.cols]) ** 2)) for pen in self.penalties])
        D = r @ r + lam @ quad
        if self.grouped:
            D += st["lam_b"] * (b @ b)
        D = max(D, 1e-300)
        logdetS = 0.0
        pen_tr = []
        for grp in self.groups:
            try:
                ld, tr = grp.logdet(lam)
            except linalg.LinAlgError:
                raise NumericalError("penalty range-space matrix is not positive definite") from None
            logdetS += ld
            pen_tr.append(tr)
        if self.grouped:
            logdetS += self.G * rho[-1]
        nu = self.n - self.M
        V = nu * (1.0 + math.log(2.0 * math.pi * D / nu)) + logdetH - logdetS
        st.update(beta=beta, Hinv=Hinv, D=D, V=V, pen_tr=pen_tr, nu=nu, W=W, Htinv=Htinv, quad=quad)
        return st

    def penalty_traces(self, st) -> np.ndarray:
        """``lambda_j tr(Hs^-1 S_j)`` per penalty, evaluated in the rotated basis."""
        if "hs_tr" not in st:
            W, Htinv, lam = st["W"], st["Htinv"], st["lam"]
            out = np.empty(len(self.penalties))
            for j, pen in enumerate(self.penalties):
                c = pen.cols
                K = math.sqrt(lam[j]) * (pen.R @ W[c, c])
                out[j] = np.sum((K @ Htinv[c, c]) * K)
            st["hs_tr"] = out
        return st["hs_tr"]

    def gradient(self, st) -> np.ndarray:
        lam, D, nu, quad = st["lam"], st["D"], st["nu"], st["quad"]
        hs_tr = self.penalty_traces(st)
        grad_full = np.zeros(len(self.penalties))
        for grp, pen_tr in zip(self.groups, st["pen_tr"]):
            for j, tj in zip(grp.members, pen_tr):
                grad_full[j] = nu * lam[j] * quad[j] / D + hs_tr[j] - tj
        grad = [grad_full[j] for j in self.free]
        if self.grouped:
            lam_b, b, d, Qd = st["lam_b"], st["b"], st["d"], st["Qd"]
            K = st["W"].T @ Qd
            tr_bb = np.sum(1.0 / d) + np.sum((st["Htinv"] @ K) * K)
            st["tr_bb"] = tr_bb
            grad.append(nu * lam_b * (b @ b) / D + lam_b * tr_bb - self.G)
        return np.asarray(grad, dtype=float)

    def objective(self, rho):
        st = self.state(rho)
        return st["V"], self.gradient(st)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def _projected(g, x, lo, hi):
    pg = g.copy()
    pg[(x <= lo) & (g > 0)] = 0.0
    pg[(x >= hi) & (g < 0)] = 0.0
    return pg


def minimize_bfgs_box(fun, x0, lo, hi, gtol=GTOL, ftol=FTOL, max_iter=MAX_ITER, max_step=4.0):
    """Quasi-Newton (BFGS) minimization with box bounds and a monotone line search.

    Every accepted step strictly decreases ``fun`` (Armijo condition).
    Returns ``(x, f, g, trace, converged)``.
    """
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    f, g = fun(x)
    n = x.size
    Hk = np.eye(n)
    trace = [(0, f, float(np.max(np.abs(_projected(g, x, lo, hi)), initial=0.0)))]
    converged = False
    for it in range(1, max_iter + 1):
        pg = _projected(g, x, lo, hi)
        gnorm = float(np.max(np.abs(pg), initial=0.0))
        if gnorm < gtol:
            converged = True
            break
        active = pg == 0.0
        d = -Hk @ g
        d[active] = 0.0
        if not d @ g < 0:
            Hk = np.eye(n)
            d = -pg
        big = np.max(np.abs(d))
        if big > max_step:
            d *= max_step / big
        alpha = 1.0
        accepted = False
        flat = True  # every trial value within the relative tolerance of f
        for _ in range(50):
            xn = np.clip(x + alpha * d, lo, hi)
            step = xn - x
            if not np.any(step):
                break
            fn, gn = fun(xn)
            if np.isfinite(fn) and fn <= f + 1e-4 * (g @ step):
                accepted = True
                break
            flat &= bool(np.isfinite(fn)) and abs(fn - f) <= ftol * max(1.0, abs(f))
            alpha *= 0.5
        if not accepted:
            if not np.allclose(Hk, np.eye(n)):
                Hk = np.eye(n)
                continue
            # no representable decrease even along steepest descent: the
            # relative-change criterion holds if the objective is flat here
            converged = flat
            break
        s, yv = xn - x, gn - g
        sy = s @ yv
        if sy > 1e-12 * max(1.0, np.linalg.norm(s) * np.linalg.norm(yv)):
            if it == 1:
                Hk = np.eye(n) * (sy / (yv @ yv))
            rho_k = 1.0 / sy
            V = np.eye(n) - rho_k * np.outer(s, yv)
            Hk = V @ Hk @ V.T + rho_k * np.outer(s, s)
        rel = abs(f - fn) / max(1.0, abs(fn))
        x, f, g = xn, fn, gn
        trace.append((it, f, float(np.max(np.abs(_projected(g, x, lo, hi)), initial=0.0))))
        if rel < ftol:
            converged = True
            break
    return x, f, g, trace, converged


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _assemble(blocks, parametric, parametric_labels):
    n = None
    cols, terms, penalties = [], [], []
    start = 0
    if parametric is not None:
        P = np.asarray(parametric, dtype=float)
        P = P.reshape(P.shape[0], -1)
        n = P.shape[0]
        labels = list(parametric_labels or [f"x{i}" for i in range(P.shape[1])])
        for i, lab in enumerate(labels):
            terms.append(TermInfo(lab, start + i, start + i + 1, "parametric"))
        cols.append(P)
        start += P.shape[1]
    for b, blk in enumerate(blocks):
        if n is not None and blk.n_rows != n:
            raise RankError("all blocks must have the same number of rows")
        n = blk.n_rows
        sl = slice(start, start + blk.n_cols)
        idx = []
        for j, S in enumerate(blk.penalties):
            lab = blk.term_label if len(blk.penalties) == 1 else f"{blk.term_label}[{j + 1}]"
            idx.append(len(penalties))
            penalties.append((lab, sl, np.asarray(S, dtype=float), b))
        terms.append(TermInfo(blk.term_label, sl.start, sl.stop, "smooth", tuple(idx), blk.null_space_dim))
        cols.append(blk.design)
        start = sl.stop
    X = np.hstack(cols) if cols else np.zeros((0, 0))
    return X, terms, penalties


def fit_reml(design_blocks, parametric_columns, random_intercept_grouping, y, *,
             parametric_labels=None, lambdas=None, gtol=GTOL, ftol=FTOL, max_iter=MAX_ITER,
             starts=START_LAMBDAS) -> FittedModel:
    """Estimate coefficients, smoothing parameters and variance components by REML.

    Parameters
    ----------
    design_blocks : list of BasisBlock
        Penalized terms, in coefficient order after the parametric columns.
    parametric_columns : array (n, q) or None
        Unpenalized columns, usually starting with the intercept.
    random_intercept_grouping : int array (n,) or None
        Group code per row; ``None`` fits without random intercept.
    y : array (n,)
    lambdas : dict, optional
        Smoothing parameters to hold fixed, keyed by penalty label, on the
        scale of the blocks' own penalties.
    """
    blocks = list(design_blocks)
    X, terms, penalties = _assemble(blocks, parametric_columns, parametric_labels)
    # a smoothing parameter fixed at zero leaves its columns unpenalized
    unpenalized = [p[0] for p in penalties if (lambdas or {}).get(p[0]) == 0]
    if unpenalized:
        keep = [j for j, p in enumerate(penalties) if p[0] not in unpenalized]
        new_index = {j: i for i, j in enumerate(keep)}
        penalties = [penalties[j] for j in keep]
        terms = [replace(t, penalty_index=tuple(new_index[j] for j in t.penalty_index if j in new_index))
                 for t in terms]
    y = np.asarray(y, dtype=float).ravel()
    grouping = None if random_intercept_grouping is None else np.asarray(random_intercept_grouping, dtype=int)
    pinned_reason = None
    if grouping is not None:
        _, grouping = np.unique(grouping, return_inverse=True)
        if np.bincount(grouping).max() == 1:
            pinned_reason = "every group has a single observation; sigma_b pinned to 0"
    prob_grouping = grouping if pinned_reason is None else None
    problem = RemlProblem(X, y, penalties, prob_grouping, lambdas)

    lo, hi = RHO_BOUNDS
    trace_all = []
    best = None
    if problem.n_params == 0:
        rho = np.zeros(0)
        best = (rho, problem.objective(rho)[0], np.zeros(0), [(0, None, 0.0)], True)
    else:
        for lam0 in starts:
            x0 = np.full(problem.n_params, math.log(lam0))
            if problem.grouped:
                x0[-1] = 0.0
            res = minimize_bfgs_box(problem.objective, x0, lo, hi, gtol=gtol, ftol=ftol, max_iter=max_iter)
            trace_all.append(res[3])
            if best is None or res[1] < best[1]:
                best = res
    rho, V, g, trace, converged = best
    if not converged:
        raise ConvergenceError(
            f"REML optimization did not converge in {max_iter} iterations "
            f"(projected gradient {trace[-1][2]:.3g})", trace)

    st = problem.state(rho)
    grad = problem.gradient(st)

    if problem.grouped and pinned_reason is None:
        # flat likelihood along the random-intercept direction: sigma_b is not
        # identified separately from sigma
        h = 1e-2
        e = np.zeros_like(rho)
        e[-1] = h
        curv = (problem.state(np.clip(rho + e, lo, hi))["V"] - 2 * st["V"]
                + problem.state(np.clip(rho - e, lo, hi))["V"]) / h ** 2
        if abs(curv) < FLAT_CURVATURE and rho[-1] < hi:
            pinned_reason = f"REML curvature {curv:.2g} along log sigma_b; sigma_b pinned to 0"

    fitted = _finish(problem, st, grad, terms, V, trace, trace_all, pinned_reason, y)
    if unpenalized:
        vc = fitted.variance_components
        lam = dict(vc.lambdas, **{lab: 0.0 for lab in unpenalized})
        sig = dict(vc.sigma_lambda, **{lab: math.inf for lab in unpenalized})
        fitted = replace(fitted, variance_components=replace(vc, lambdas=lam, sigma_lambda=sig),
                         penalty_labels=fitted.penalty_labels + tuple(unpenalized))
    return fitted


def _finish(problem, st, grad, terms, V, trace, trace_all, pinned_reason, y):
    lam, beta, Hinv, D, nu = st["lam"], st["beta"], st["Hinv"], st["D"], st["nu"]
    sigma2 = D / nu
    cov = sigma2 * Hinv
    cov = 0.5 * (cov + cov.T)
    # edf of a term: trace of its block of I - Hs^-1 S
    hs_tr = problem.penalty_traces(st)
    edf = {}
    for t in terms:
        shrink = sum(hs_tr[j] for j in t.penalty_index)
        edf[t.label] = edf.get(t.label, 0.0) + float(t.n_cols - shrink)
    edf_b = 0.0
    fitted = problem.X @ beta
    b = None
    sigma_b = None
    if problem.grouped:
        b = st["b"]
        if "tr_bb" not in st:
            problem.gradient(st)
        edf_b = problem.G - st["lam_b"] * st["tr_bb"]
        fitted = fitted + b[problem.grouping]
        sigma_b = math.sqrt(sigma2 / st["lam_b"]) if pinned_reason is None else 0.0
    elif pinned_reason is not None:
        sigma_b = 0.0
    sigma = math.sqrt(sigma2)
    lambdas, sig_lam = {}, {}
    for j, pen in enumerate(problem.penalties):
        lam_orig = float(lam[j] * pen.scale)
        lambdas[pen.label] = lam_orig
        sig_lam[pen.label] = sigma / math.sqrt(lam_orig)
    vc = VarianceComponents(sigma, sigma_b, sig_lam, lambdas)
    resid_df = problem.n - sum(edf.values()) - edf_b
    report = {
        "iterations": len(trace) - 1,
        "gradient_norm": float(np.max(np.abs(_projected(grad, st["rho"], *RHO_BOUNDS)), initial=0.0)),
        "converged": True,
        "restarts": len(trace_all),
        "trace": [list(t) for t in trace],
        "log_params": st["rho"].tolist(),
        "sigma_b_pinned": pinned_reason,
        "edf_random": float(edf_b),
    }
    return FittedModel(
        beta_hat=beta,
        coef_covariance=cov,
        variance_components=vc,
        edf_per_term=edf,
        terms=tuple(terms),
        reml_value=-0.5 * V,
        convergence_report=report,
        random_effects=b,
        n_obs=problem.n,
        residual_df=float(resid_df),
        fitted_values=fitted,
        residuals=y - fitted,
        penalty_labels=tuple(p.label for p in problem.penalties),
    )
