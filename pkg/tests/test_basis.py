import numpy as np
import pytest
from scipy.interpolate import CubicSpline

from lifespan_gamm.basis import (apply_sum_to_zero_constraint, build_cr_basis, factor_difference_smooths,
                                 null_space_dim, rowwise_kron, tensor_product, varying_coefficient)
from lifespan_gamm.errors import RankError, SpecError


def simpson_wiggliness(knots, values):
    """Integral of f''^2 for the natural interpolant, Simpson's rule per knot interval.

    f'' is linear between knots, so its square is quadratic and Simpson's
    rule is exact on each interval.
    """
    f2 = CubicSpline(knots, values, bc_type="natural").derivative(2)
    a, b = knots[:-1], knots[1:]
    return float(np.sum((b - a) / 6 * (f2(a) ** 2 + 4 * f2((a + b) / 2) ** 2 + f2(b) ** 2)))


class TestCubicRegressionSpline:
    @pytest.mark.parametrize("k", [5, 8, 10, 20])
    def test_penalty_matches_quadrature(self, k):
        rng = np.random.default_rng(k)
        x = np.sort(rng.uniform(0, 1, 400))
        block, spline = build_cr_basis(x, k)
        worst = 0.0
        for _ in range(100):
            beta = rng.normal(size=k)
            exact = simpson_wiggliness(spline.knots, beta)
            worst = max(worst, abs(beta @ block.penalty @ beta - exact) / exact)
        assert worst < 1e-6

    def test_value_parameterization_at_knot(self):
        _, spline = build_cr_basis(np.linspace(0, 1, 11), 3, knots=[0.0, 0.5, 1.0])
        np.testing.assert_allclose(spline.evaluate([0.5])[0], [0, 1, 0], atol=1e-15)

    def test_matches_natural_interpolant(self):
        rng = np.random.default_rng(3)
        block, spline = build_cr_basis(rng.uniform(0, 10, 200), 9)
        beta = rng.normal(size=9)
        x = np.linspace(spline.knots[0], spline.knots[-1], 301)
        ref = CubicSpline(spline.knots, beta, bc_type="natural")(x)
        np.testing.assert_allclose(spline.evaluate(x) @ beta, ref, atol=1e-12)

    def test_linear_extrapolation(self):
        rng = np.random.default_rng(4)
        _, spline = build_cr_basis(rng.uniform(0, 1, 100), 6)
        beta = rng.normal(size=6)
        cs = CubicSpline(spline.knots, beta, bc_type="natural")
        lo, hi = spline.knots[0], spline.knots[-1]
        for edge, dx in ((lo, -0.3), (hi, 0.4)):
            np.testing.assert_allclose(spline.evaluate([edge + dx]) @ beta,
                                       cs(edge) + dx * cs(edge, 1), atol=1e-12)

    def test_constant_and_linear_unpenalized(self):
        block, spline = build_cr_basis(np.linspace(0, 3, 50), 7)
        S = block.penalty
        ones, lin = np.ones(7), spline.knots
        assert abs(ones @ S @ ones) < 1e-12
        assert abs(lin @ S @ lin) < 1e-10
        assert block.null_space_dim == 2

    def test_penalty_symmetric_psd(self):
        block, _ = build_cr_basis(np.random.default_rng(5).uniform(0, 1, 80), 12)
        S = block.penalty
        assert np.max(np.abs(S - S.T)) < 1e-12
        ev = np.linalg.eigvalsh(S)
        assert ev.min() >= -1e-10 * ev.max()

    def test_errors(self):
        with pytest.raises(SpecError):
            build_cr_basis(np.linspace(0, 1, 20), 2)
        with pytest.raises(RankError):
            build_cr_basis(np.repeat([1.0, 2.0, 3.0], 5), 5)

    def test_range_widens_knots(self):
        _, spline = build_cr_basis(np.linspace(2, 8, 40), 5, range_=(0, 10))
        assert (spline.knots[0], spline.knots[-1]) == (0.0, 10.0)


class TestConstraint:
    def test_column_sums_and_count(self):
        block, _ = build_cr_basis(np.random.default_rng(6).uniform(4, 90, 300), 20)
        c = apply_sum_to_zero_constraint(block)
        assert c.n_cols == 19
        assert np.max(np.abs(c.design.sum(axis=0))) < 1e-10

    def test_fit_preserved_with_intercept(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(0, 1, 150)
        y = np.sin(6 * x) + rng.normal(0, 0.1, 150)
        block, _ = build_cr_basis(x, 10)
        c = apply_sum_to_zero_constraint(block)
        full = block.design @ np.linalg.lstsq(block.design, y, rcond=None)[0]
        A = np.column_stack([np.ones(150), c.design])
        constrained = A @ np.linalg.lstsq(A, y, rcond=None)[0]
        np.testing.assert_allclose(constrained, full, atol=1e-8)

    def test_penalty_congruent(self):
        block, _ = build_cr_basis(np.linspace(0, 1, 60), 8)
        c = apply_sum_to_zero_constraint(block)
        Z = c.constraint_transform
        np.testing.assert_allclose(c.penalty, Z.T @ block.penalty @ Z, atol=1e-12)


class TestVaryingCoefficient:
    def test_zero_and_one(self):
        block, _ = build_cr_basis(np.linspace(0, 1, 30), 5)
        assert not np.any(varying_coefficient(block, np.zeros(30)).design)
        np.testing.assert_array_equal(varying_coefficient(block, np.ones(30)).design, block.design)

    def test_length_mismatch(self):
        block, _ = build_cr_basis(np.linspace(0, 1, 30), 5)
        with pytest.raises(SpecError):
            varying_coefficient(block, np.ones(29))

    def test_recovers_linear_coefficient(self):
        rng = np.random.default_rng(8)
        n, sigma = 2000, 0.5
        a, z = rng.uniform(0, 1, n), rng.normal(size=n)
        y = a * z + rng.normal(0, sigma, n)
        block, spline = build_cr_basis(a, 5)
        vc = varying_coefficient(block, z)
        beta = np.linalg.lstsq(vc.design, y, rcond=None)[0]
        grid = np.linspace(0.05, 0.95, 50)
        # least squares in a 5-dim span; allow the stated 3 sigma / sqrt(n) per coefficient scale
        assert np.max(np.abs(spline.evaluate(grid) @ beta - grid)) < 3 * sigma / np.sqrt(n) * np.sqrt(5)


class TestTensor:
    def _margins(self, n=400, k=(20, 5), seed=9):
        rng = np.random.default_rng(seed)
        x, y = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
        return (build_cr_basis(x, k[0])[0], build_cr_basis(y, k[1])[0]), x, y

    def test_full_dimensions(self):
        (bx, by), _, _ = self._margins()
        te = tensor_product(bx, by, "full")
        assert te.n_cols == 100
        assert apply_sum_to_zero_constraint(te).n_cols == 99
        assert len(te.penalties) == 2

    def test_constant_product_is_ones(self):
        (bx, by), _, _ = self._margins()
        te = tensor_product(bx, by)
        np.testing.assert_allclose(te.design @ np.ones(te.n_cols), 1.0, atol=1e-12)

    def test_interaction_annihilates_additive(self):
        g = np.linspace(0, 1, 25)
        X, Y = (v.ravel() for v in np.meshgrid(g, g))
        bx, _ = build_cr_basis(X, 6)
        by, _ = build_cr_basis(Y, 5)
        ti = tensor_product(bx, by, "interaction")
        assert ti.n_cols == 5 * 4
        # additive functions built from the marginal spans
        fx = bx.design @ np.linalg.lstsq(bx.design, np.sin(3 * X), rcond=None)[0]
        fy = by.design @ np.linalg.lstsq(by.design, 0.5 * Y ** 2, rcond=None)[0]
        add = fx + fy + 1
        proj = ti.design @ np.linalg.lstsq(ti.design, add, rcond=None)[0]
        assert np.linalg.norm(proj) < 1e-8 * np.linalg.norm(add)

    def test_row_mismatch(self):
        bx, _ = build_cr_basis(np.linspace(0, 1, 30), 5)
        by, _ = build_cr_basis(np.linspace(0, 1, 31), 5)
        with pytest.raises(SpecError):
            tensor_product(bx, by)

    def test_rowwise_kron(self):
        A, B = np.arange(6.0).reshape(2, 3), np.arange(4.0).reshape(2, 2)
        np.testing.assert_array_equal(rowwise_kron(A, B)[1], np.kron(A[1], B[1]))


class TestFactorSmooths:
    def _block(self, n=90):
        return apply_sum_to_zero_constraint(build_cr_basis(np.linspace(0, 1, n), 6)[0])

    def test_three_levels(self):
        codes = np.repeat([0, 1, 2], 30)
        blocks, offsets = factor_difference_smooths(self._block(), codes, 3)
        assert len(blocks) == 2 and offsets.shape[1] == 2
        for b in blocks:
            assert not np.any(b.design[codes == 0])

    def test_single_level(self):
        blocks, offsets = factor_difference_smooths(self._block(), np.zeros(90, int), 1)
        assert blocks == [] and offsets.shape[1] == 0

    def test_all_baseline_rows_zero(self):
        blocks, _ = factor_difference_smooths(self._block(), np.zeros(90, int), 3)
        assert all(not np.any(b.design) for b in blocks)

    def test_unordered_rejected(self):
        with pytest.raises(SpecError, match="ordered"):
            factor_difference_smooths(self._block(), np.zeros(90, int), 2, ordered=False)


def test_null_space_dim_of_zero_matrix():
    assert null_space_dim(np.zeros((3, 3))) == 3
