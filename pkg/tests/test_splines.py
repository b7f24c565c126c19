import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from missoc.splines import (
    BSplineBasis,
    DegenerateDomainError,
    InvalidKnotsError,
    OutOfDomainError,
    bspline_value,
    design_matrix,
    extend_knots,
    make_basis,
    segment_poly_coeffs,
    taylor_shift,
    to_piecewise_poly,
)


def naive_bspline(x, deg, i, t):
    """Independent recursive Cox-de Boor evaluator, 0-based index i on the
    extended knot array t, seeded from the degree-0 indicator."""
    if deg == 0:
        return 1.0 if t[i] <= x < t[i + 1] else 0.0
    c1 = c2 = 0.0
    if t[i + deg] != t[i]:
        c1 = (x - t[i]) / (t[i + deg] - t[i]) * naive_bspline(x, deg - 1, i, t)
    if t[i + deg + 1] != t[i + 1]:
        c2 = (
            (t[i + deg + 1] - x)
            / (t[i + deg + 1] - t[i + 1])
            * naive_bspline(x, deg - 1, i + 1, t)
        )
    return c1 + c2


class TestExtendKnots:
    def test_uniform_d2(self):
        kv = extend_knots(np.arange(7.0), 2)
        np.testing.assert_allclose(kv.extended, np.arange(-2.0, 9.0))
        assert kv.n_basis == 8

    def test_d0_unchanged(self):
        kv = extend_knots([0.0, 1.0], 0)
        np.testing.assert_allclose(kv.extended, [0.0, 1.0])

    def test_boundary_width_replication(self):
        kv = extend_knots([0.0, 0.5, 2.0], 1)
        np.testing.assert_allclose(kv.extended, [-0.5, 0.0, 0.5, 2.0, 3.5])

    def test_alignment_invariant(self):
        kv = extend_knots([1.0, 2.5, 3.0, 4.5], 3)
        d, k = kv.degree, kv.k
        assert kv.extended[d] == kv.internal[0]
        assert kv.extended[d + k] == kv.internal[-1]
        assert len(kv.extended) == k + 2 * d + 1
        assert np.all(np.diff(kv.extended) > 0)

    def test_nonincreasing_rejected(self):
        with pytest.raises(InvalidKnotsError):
            extend_knots([0.0, 1.0, 1.0], 2)

    def test_degenerate_rejected(self):
        with pytest.raises(DegenerateDomainError):
            extend_knots([0.0], 2)


class TestBsplineValue:
    def test_degree0_indicator(self):
        basis = make_basis(0.0, 3.0, 3, 0)
        assert bspline_value(2, basis, 1.5) == 1.0
        assert bspline_value(2, basis, 0.5) == 0.0
        assert bspline_value(1, basis, 0.5) == 1.0

    def test_index_error(self):
        basis = make_basis(0.0, 1.0, 2, 1)
        with pytest.raises(IndexError):
            bspline_value(0, basis, 0.5)
        with pytest.raises(IndexError):
            bspline_value(4, basis, 0.5)

    def test_out_of_domain(self):
        basis = make_basis(0.0, 1.0, 2, 3)
        with pytest.raises(OutOfDomainError):
            basis.eval_all(1.2)

    @pytest.mark.parametrize("d,k", [(1, 3), (2, 4), (3, 5), (5, 4), (7, 3)])
    def test_against_naive_recursion(self, d, k):
        basis = make_basis(0.0, float(k), k, d)
        t = basis.knots.extended
        rng = np.random.default_rng(42)
        for x in rng.uniform(0.0, k, size=25):
            ours = basis.eval_all(x)
            for l in range(basis.n_basis):
                assert ours[l] == pytest.approx(
                    naive_bspline(x, d, l, t), abs=1e-12
                )

    def test_cubic_support_center(self):
        # uniform knots spacing 1, d=3: value at the support center of an
        # interior basis function, checked against the naive evaluator
        basis = make_basis(0.0, 8.0, 8, 3)
        t = basis.knots.extended
        l = 5  # 1-based; support [t[4], t[8]] in the extended sequence
        center = 0.5 * (t[l - 1] + t[l + 3])
        assert bspline_value(l, basis, center) == pytest.approx(
            naive_bspline(center, 3, l - 1, t), abs=1e-14
        )

    @given(
        k=st.integers(min_value=1, max_value=20),
        d=st.integers(min_value=0, max_value=7),
        u=st.floats(min_value=0.0, max_value=1.0, exclude_max=True),
    )
    @settings(max_examples=60, deadline=None)
    def test_partition_of_unity(self, k, d, u):
        basis = make_basis(-1.0, 2.0, k, d)
        x = -1.0 + 3.0 * u
        assert abs(basis.eval_all(x).sum() - 1.0) <= 1e-12

    def test_local_support(self):
        basis = make_basis(0.0, 6.0, 6, 2)
        t = basis.knots.extended
        for l in range(1, basis.n_basis + 1):
            lo, hi = t[l - 1], t[l + basis.degree]
            for x in np.linspace(0.0, 6.0, 61):
                v = bspline_value(l, basis, x)
                if x < lo or x > hi:
                    assert v == 0.0
                elif lo < x < hi:
                    assert v > 0.0


class TestSegmentPolyCoeffs:
    def test_degree0(self):
        basis = make_basis(0.0, 2.0, 2, 0)
        np.testing.assert_allclose(segment_poly_coeffs(1, basis, 0), [1.0])
        np.testing.assert_allclose(segment_poly_coeffs(1, basis, 1), [0.0])

    def test_hat_ascending_slope(self):
        h = 0.5
        basis = make_basis(0.0, 3 * h, 3, 1)
        # basis function 2 (1-based) ascends on internal interval 0
        c = segment_poly_coeffs(2, basis, 0)
        assert c[1] == pytest.approx(1.0 / h)

    def test_outside_support_zero(self):
        basis = make_basis(0.0, 6.0, 6, 2)
        np.testing.assert_allclose(segment_poly_coeffs(1, basis, 5), np.zeros(3))

    @pytest.mark.parametrize("d,k", [(1, 4), (2, 5), (3, 6), (5, 4)])
    def test_partition_of_unity_on_coeffs(self, d, k):
        basis = make_basis(0.0, 1.0, k, d)
        for q in range(k):
            total = np.zeros(d + 1)
            for l in range(1, basis.n_basis + 1):
                total += segment_poly_coeffs(l, basis, q)
            expected = np.zeros(d + 1)
            expected[0] = 1.0
            np.testing.assert_allclose(total, expected, atol=1e-12)

    def test_matches_evaluation(self):
        basis = make_basis(-1.0, 2.0, 5, 3)
        t = basis.knots.internal
        for q in range(basis.k):
            xs = np.linspace(t[q], t[q + 1], 7, endpoint=False)
            for l in range(q + 1, q + basis.degree + 2):
                c = segment_poly_coeffs(l, basis, q)
                for x in xs:
                    poly = np.polynomial.polynomial.polyval(x, c)
                    assert poly == pytest.approx(
                        bspline_value(l, basis, x), abs=1e-11
                    )


class TestTaylorShift:
    def test_simple(self):
        # x^2 = (x-1)^2 + 2(x-1) + 1
        np.testing.assert_allclose(taylor_shift([0.0, 0.0, 1.0], 1.0), [1.0, 2.0, 1.0])

    def test_roundtrip(self):
        rng = np.random.default_rng(0)
        p = rng.normal(size=6)
        shifted = taylor_shift(p, 2.5)
        for x in rng.uniform(-3, 3, 10):
            a = np.polynomial.polynomial.polyval(x, p)
            b = np.polynomial.polynomial.polyval(x - 2.5, shifted)
            assert b == pytest.approx(a, rel=1e-12, abs=1e-12)


class TestToPiecewisePoly:
    def test_zero_coeffs(self):
        basis = make_basis(0.0, 1.0, 3, 2)
        pw = to_piecewise_poly(np.zeros(basis.n_basis), basis)
        np.testing.assert_allclose(pw.coeffs, 0.0)

    def test_all_ones_is_constant_one(self):
        basis = make_basis(0.0, 4.0, 4, 3)
        pw = to_piecewise_poly(np.ones(basis.n_basis), basis)
        expected = np.zeros((4, 4))
        expected[:, 0] = 1.0
        np.testing.assert_allclose(pw.coeffs, expected, atol=1e-12)

    @pytest.mark.parametrize("d,k", [(1, 3), (2, 10), (3, 10), (5, 6), (7, 4)])
    def test_matches_basis_expansion(self, d, k):
        rng = np.random.default_rng(7)
        basis = make_basis(-2.0, 3.0, k, d)
        theta = rng.normal(size=basis.n_basis)
        pw = to_piecewise_poly(theta, basis)
        xs = np.linspace(-2.0, 3.0, 200)
        direct = np.array([basis.eval_all(x) @ theta for x in xs])
        recon = np.array([pw(x) for x in xs])
        scale = np.max(np.abs(direct)) + 1.0
        assert np.max(np.abs(recon - direct)) <= 1e-9 * scale

    def test_continuity_at_breakpoints(self):
        rng = np.random.default_rng(3)
        basis = make_basis(0.0, 5.0, 5, 3)
        theta = rng.normal(size=basis.n_basis)
        pw = to_piecewise_poly(theta, basis)
        for q in range(1, pw.k):
            t = pw.breakpoints[q]
            left = np.polynomial.polynomial.polyval(
                t - pw.breakpoints[q - 1], pw.coeffs[q - 1]
            )
            right = pw.coeffs[q, 0]
            assert right == pytest.approx(left, rel=1e-9, abs=1e-9)

    def test_derivative_continuity(self):
        rng = np.random.default_rng(4)
        for d in (2, 3, 5):
            basis = make_basis(0.0, 4.0, 8, d)
            theta = rng.normal(size=basis.n_basis)
            dpw = to_piecewise_poly(theta, basis).derivative()
            scale = max(abs(dpw(x)) for x in np.linspace(0, 4, 50)) + 1.0
            for q in range(1, dpw.k):
                t = dpw.breakpoints[q]
                left = np.polynomial.polynomial.polyval(
                    t - dpw.breakpoints[q - 1], dpw.coeffs[q - 1]
                )
                assert abs(dpw.coeffs[q, 0] - left) <= 1e-8 * scale

    def test_size_mismatch(self):
        basis = make_basis(0.0, 1.0, 3, 2)
        with pytest.raises(ValueError):
            to_piecewise_poly(np.zeros(2), basis)


class TestDesignMatrix:
    def test_shape(self):
        basis = make_basis(0.0, 1.0, 2, 1)
        B = design_matrix(np.array([[0.1], [0.5], [0.9]]), [basis])
        assert B.shape == (3, 4)

    def test_left_boundary_row_sum(self):
        basis = make_basis(0.0, 1.0, 4, 3)
        B = design_matrix(np.array([[0.0]]), [basis])
        assert B[0, 1:].sum() == pytest.approx(1.0, abs=1e-12)

    def test_unit_block_row_sums(self):
        rng = np.random.default_rng(11)
        b1 = make_basis(0.0, 1.0, 3, 2, "u")
        b2 = make_basis(-1.0, 1.0, 5, 3, "v")
        X = np.column_stack(
            [rng.uniform(0, 1, 20), rng.uniform(-1, 1, 20)]
        )
        B = design_matrix(X, [b1, b2])
        assert B.shape == (20, 1 + b1.n_basis + b2.n_basis)
        np.testing.assert_allclose(B[:, 1 : 1 + b1.n_basis].sum(axis=1), 1.0)
        np.testing.assert_allclose(B[:, 1 + b1.n_basis :].sum(axis=1), 1.0)

    def test_entries_match_elementwise(self):
        basis = make_basis(0.0, 2.0, 4, 2)
        xs = np.array([[0.3], [1.7], [2.0]])
        B = design_matrix(xs, [basis])
        for i, x in enumerate(xs[:, 0]):
            for l in range(1, basis.n_basis + 1):
                assert B[i, l] == bspline_value(l, basis, x)

    def test_out_of_domain_names_covariate(self):
        basis = make_basis(0.0, 1.0, 2, 1, label="volume")
        with pytest.raises(OutOfDomainError, match="volume"):
            design_matrix(np.array([[1.5]]), [basis])


class TestEvalMatrix:
    def test_matches_eval_all(self):
        rng = np.random.default_rng(11)
        for d in (1, 2, 3, 5):
            basis = make_basis(-1.0, 2.0, 7, d, "x")
            xs = rng.uniform(-1.0, 2.0, size=200)
            xs[:3] = [-1.0, 2.0, 0.5]
            got = basis.eval_matrix(xs)
            want = np.array([basis.eval_all(x) for x in xs])
            np.testing.assert_allclose(got, want, atol=1e-14)

    def test_rejects_out_of_domain(self):
        basis = make_basis(0.0, 1.0, 3, 3, "x")
        with pytest.raises(OutOfDomainError):
            basis.eval_matrix([0.5, 1.5])

    def test_empty_input(self):
        basis = make_basis(0.0, 1.0, 3, 2, "x")
        assert basis.eval_matrix([]).shape == (0, 5)
