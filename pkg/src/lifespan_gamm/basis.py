"""Spline bases, wiggliness penalties and the linear algebra that reshapes them.

The univariate building block is the cubic regression spline in value
parameterization: coefficient ``j`` is the value of the natural cubic
interpolant at knot ``j``.  With ``h_j`` the knot spacings, second derivatives
at the knots are ``delta = F beta`` with ``F = [0; B^{-1} D; 0]`` and the
integrated squared second derivative is ``beta' D' B^{-1} D beta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .errors import RankError, SpecError

NULL_EIGEN_RTOL = 1e-10


@dataclass(frozen=True)
class BasisBlock:
    """Design columns of one model term together with their penalties.

    ``penalties`` holds one matrix per smoothing parameter (one for a
    univariate smooth, one per margin for a tensor product).  The
    ``constraint_transform`` maps the block's free coefficients back to the
    unconstrained basis coefficients.
    """

    design: np.ndarray
    penalties: tuple[np.ndarray, ...]
    constraint_transform: np.ndarray
    null_space_dim: int
    term_label: str = ""

    @property
    def penalty(self) -> np.ndarray:
        if not self.penalties:
            return np.zeros((self.n_cols, self.n_cols))
        return sum(self.penalties[1:], self.penalties[0].copy())

    @property
    def n_cols(self) -> int:
        return self.design.shape[1]

    @property
    def n_rows(self) -> int:
        return self.design.shape[0]


def null_space_dim(penalty: np.ndarray, rtol: float = NULL_EIGEN_RTOL) -> int:
    """Number of eigenvalues of ``penalty`` that are zero relative to the largest."""
    if penalty.size == 0:
        return 0
    ev = linalg.eigvalsh(0.5 * (penalty + penalty.T))
    top = max(ev.max(), 0.0)
    if top == 0.0:
        return penalty.shape[0]
    return int(np.sum(ev <= rtol * top))


def _make_block(design, penalties, transform, label):
    penalties = tuple(0.5 * (S + S.T) for S in penalties)
    total = sum(penalties[1:], penalties[0].copy()) if penalties else np.zeros((design.shape[1],) * 2)
    return BasisBlock(
        design=design,
        penalties=penalties,
        constraint_transform=transform,
        null_space_dim=null_space_dim(total),
        term_label=label,
    )


# ---------------------------------------------------------------------------
# cubic regression spline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CubicRegressionSpline:
    """Natural cubic spline with function values at ``knots`` as coefficients."""

    knots: np.ndarray
    F: np.ndarray = field(init=False, repr=False)
    S: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1 or knots.size < 3:
            raise SpecError("a cubic regression spline needs at least 3 knots")
        if np.any(np.diff(knots) <= 0):
            raise SpecError("knots must be strictly increasing")
        k = knots.size
        h = np.diff(knots)
        D = np.zeros((k - 2, k))
        B = np.zeros((k - 2, k - 2))
        for i in range(k - 2):
            D[i, i] = 1.0 / h[i]
            D[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
            D[i, i + 2] = 1.0 / h[i + 1]
            B[i, i] = (h[i] + h[i + 1]) / 3.0
            if i + 1 < k - 2:
                B[i, i + 1] = B[i + 1, i] = h[i + 1] / 6.0
        BinvD = linalg.solve(B, D, assume_a="pos")
        F = np.zeros((k, k))
        F[1:-1] = BinvD
        S = D.T @ BinvD
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "S", 0.5 * (S + S.T))

    @property
    def k(self) -> int:
        return self.knots.size

    def _locate(self, x):
        j = np.searchsorted(self.knots, x, side="right") - 1
        return np.clip(j, 0, self.k - 2)

    def evaluate(self, x) -> np.ndarray:
        """Basis matrix at ``x``; linear extrapolation outside the knot range."""
        x = np.asarray(x, dtype=float).ravel()
        kn, F = self.knots, self.F
        n, k = x.size, self.k
        X = np.zeros((n, k))
        inside = (x >= kn[0]) & (x <= kn[-1])
        xi = x[inside]
        j = self._locate(xi)
        h = kn[j + 1] - kn[j]
        am = (kn[j + 1] - xi) / h
        ap = (xi - kn[j]) / h
        cm = ((kn[j + 1] - xi) ** 3 / h - h * (kn[j + 1] - xi)) / 6.0
        cp = ((xi - kn[j]) ** 3 / h - h * (xi - kn[j])) / 6.0
        rows = np.flatnonzero(inside)
        Xi = cm[:, None] * F[j] + cp[:, None] * F[j + 1]
        Xi[np.arange(rows.size), j] += am
        Xi[np.arange(rows.size), j + 1] += ap
        X[rows] = Xi

        left = x < kn[0]
        if left.any():
            h0 = kn[1] - kn[0]
            d0 = -h0 / 3.0 * F[0] - h0 / 6.0 * F[1]
            d0[0] -= 1.0 / h0
            d0[1] += 1.0 / h0
            row = np.zeros(k)
            row[0] = 1.0
            X[left] = row + (x[left] - kn[0])[:, None] * d0
        right = x > kn[-1]
        if right.any():
            h1 = kn[-1] - kn[-2]
            d1 = h1 / 6.0 * F[-2] + h1 / 3.0 * F[-1]
            d1[-2] -= 1.0 / h1
            d1[-1] += 1.0 / h1
            row = np.zeros(k)
            row[-1] = 1.0
            X[right] = row + (x[right] - kn[-1])[:, None] * d1
        return X

    def second_derivative(self, x) -> np.ndarray:
        """Matrix mapping coefficients to f'' at ``x`` (zero outside the knots)."""
        x = np.asarray(x, dtype=float).ravel()
        kn = self.knots
        out = np.zeros((x.size, self.k))
        inside = (x >= kn[0]) & (x <= kn[-1])
        xi = x[inside]
        j = self._locate(xi)
        h = kn[j + 1] - kn[j]
        out[inside] = ((kn[j + 1] - xi) / h)[:, None] * self.F[j] + ((xi - kn[j]) / h)[:, None] * self.F[j + 1]
        return out

    def to_dict(self) -> dict:
        return {"knots": self.knots.tolist()}

    @classmethod
    def from_dict(cls, d) -> "CubicRegressionSpline":
        return cls(np.asarray(d["knots"], dtype=float))


def place_knots(x, k: int, range_=None) -> np.ndarray:
    """Knots at quantiles of the distinct values of ``x``, ends at the range."""
    xu = np.unique(np.asarray(x, dtype=float))
    if xu.size < k:
        raise RankError(f"need at least {k} distinct values to place {k} knots, got {xu.size}")
    knots = np.quantile(xu, np.linspace(0.0, 1.0, k))
    if range_ is not None:
        a, b = float(range_[0]), float(range_[1])
        if not a < b:
            raise SpecError(f"invalid integration range [{a}, {b}]")
        knots[0], knots[-1] = min(a, knots[0]), max(b, knots[-1])
    return knots


def build_cr_basis(x, k: int, range_=None, knots=None, label: str = "") -> tuple[BasisBlock, CubicRegressionSpline]:
    """Cubic regression spline basis for ``x`` with ``k`` knots.

    Returns the unconstrained block (design ``n x k``, penalty equal to the
    integrated squared second derivative over the knot range) and the spline
    object needed to evaluate the basis at new points.
    """
    if k < 3:
        raise SpecError(f"k must be at least 3, got {k}")
    x = np.asarray(x, dtype=float).ravel()
    if knots is None:
        knots = place_knots(x, k, range_)
    elif len(knots) != k:
        raise SpecError(f"{len(knots)} knots supplied for k={k}")
    if np.unique(x).size < k:
        raise RankError(f"x has {np.unique(x).size} distinct values, fewer than k={k}")
    spline = CubicRegressionSpline(np.asarray(knots, dtype=float))
    block = _make_block(spline.evaluate(x), (spline.S,), np.eye(k), label)
    return block, spline


# ---------------------------------------------------------------------------
# transformations of blocks
# ---------------------------------------------------------------------------


def sum_to_zero_transform(design: np.ndarray) -> np.ndarray:
    """Null-space basis ``Z`` of the column sums, so that ``1' X Z = 0``."""
    C = design.sum(axis=0)[:, None]
    if not np.any(C):
        # constraint already satisfied; drop the last direction anyway to keep
        # the column count contract
        return np.eye(design.shape[1])[:, :-1]
    Q, _ = linalg.qr(C, mode="full")
    return Q[:, 1:]


def apply_sum_to_zero_constraint(block: BasisBlock, x_sample=None) -> BasisBlock:
    """Centre the block so every design column sums to zero over the rows.

    ``x_sample`` may be a different design on which the constraint is
    computed (for example the training rows); by default the block's own rows.
    """
    ref = block.design if x_sample is None else np.asarray(x_sample, dtype=float)
    Z = sum_to_zero_transform(ref)
    return _make_block(
        block.design @ Z,
        tuple(Z.T @ S @ Z for S in block.penalties),
        block.constraint_transform @ Z,
        block.term_label,
    )


def varying_coefficient(block: BasisBlock, z) -> BasisBlock:
    """Multiply every column by ``z``: the block now represents ``beta(x) * z``."""
    z = np.asarray(z, dtype=float).ravel()
    if z.size != block.n_rows:
        raise SpecError(f"by-variable has {z.size} values for a design with {block.n_rows} rows")
    return replace(block, design=block.design * z[:, None])


def rowwise_kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product: row i is ``kron(A[i], B[i])``."""
    return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], -1)


def tensor_product(block_x: BasisBlock, block_y: BasisBlock, mode: str = "full") -> BasisBlock:
    """Tensor-product smooth of two marginal blocks.

    ``mode="full"`` keeps every product column (constrain afterwards for a
    centred term).  ``mode="interaction"`` centres each margin first, which
    removes the pure main effects from the span.  The penalty is split into
    ``S_x (x) I`` and ``I (x) S_y``, one smoothing parameter per margin.
    """
    if block_x.n_rows != block_y.n_rows:
        raise SpecError(f"margins have {block_x.n_rows} and {block_y.n_rows} rows")
    if mode == "interaction":
        block_x = apply_sum_to_zero_constraint(block_x)
        block_y = apply_sum_to_zero_constraint(block_y)
    elif mode != "full":
        raise SpecError(f"unknown tensor mode {mode!r}")
    (Sx,), (Sy,) = block_x.penalties, block_y.penalties
    px, py = block_x.n_cols, block_y.n_cols
    penalties = (np.kron(Sx, np.eye(py)), np.kron(np.eye(px), Sy))
    label = block_x.term_label + "," + block_y.term_label
    return _make_block(rowwise_kron(block_x.design, block_y.design), penalties, np.eye(px * py), label)


def factor_difference_smooths(block: BasisBlock, codes, n_levels: int, ordered: bool = True,
                              labels=None) -> tuple[list[BasisBlock], np.ndarray]:
    """Difference smooths for an ordered factor.

    Block ``l`` is the smooth basis restricted to rows at level ``l + 1``
    (zero elsewhere) and centred, so it represents how the trajectory of that
    level departs from the baseline level.  Centring removes offsets, hence
    ``n_levels - 1`` dummy main-effect columns are returned as well.
    """
    if not ordered:
        raise SpecError("difference smooths need an ordered factor; encode the factor as ordered")
    if n_levels < 1:
        raise SpecError("a factor needs at least one level")
    codes = np.asarray(codes).ravel()
    if codes.size != block.n_rows:
        raise SpecError("factor length does not match the design rows")
    blocks, offsets = [], []
    for level in range(1, n_levels):
        ind = (codes == level).astype(float)
        offsets.append(ind)
        name = labels[level] if labels is not None else str(level)
        masked = replace(varying_coefficient(block, ind), term_label=f"{block.term_label}:{name}")
        if ind.any():
            masked = apply_sum_to_zero_constraint(masked)
        else:
            Z = np.eye(block.n_cols)[:, :-1]
            masked = _make_block(masked.design @ Z, tuple(Z.T @ S @ Z for S in masked.penalties),
                                 masked.constraint_transform @ Z, masked.term_label)
        blocks.append(masked)
    off = np.column_stack(offsets) if offsets else np.zeros((block.n_rows, 0))
    return blocks, off
