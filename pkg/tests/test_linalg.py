import numpy as np
import pytest

from descent.errors import DimensionMismatch, NotPositiveDefinite
from descent.linalg import add_damping, cholesky_spd, min_quadratic, quadratic_form, spd_solve, symmetrize

A2 = np.array([[2.0, 1.0], [1.0, 2.0]])


def random_spd(rng, d, cond=None):
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    eig = rng.uniform(1.0, 10.0, d) if cond is None else np.geomspace(1.0, cond, d)
    return symmetrize(Q @ np.diag(eig) @ Q.T)


class TestCholesky:
    def test_identity(self):
        np.testing.assert_array_equal(cholesky_spd(np.eye(2)).lower, np.eye(2))

    def test_diagonal(self):
        np.testing.assert_allclose(cholesky_spd(np.diag([4.0, 9.0])).lower, np.diag([2.0, 3.0]))

    def test_reconstructs_input(self):
        L = cholesky_spd(A2).lower
        np.testing.assert_allclose(L @ L.T, A2, atol=1e-12)
        assert np.all(np.triu(L, 1) == 0)

    def test_random_spd(self):
        rng = np.random.default_rng(42)
        for d in (1, 3, 10, 40):
            M = random_spd(rng, d)
            L = cholesky_spd(M).lower
            np.testing.assert_allclose(L @ L.T, M, rtol=1e-12, atol=1e-12)

    def test_indefinite_reports_pivot(self):
        with pytest.raises(NotPositiveDefinite) as info:
            cholesky_spd(np.array([[1.0, 0.0], [0.0, -1.0]]))
        assert info.value.pivot == 1

    def test_singular(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky_spd(np.zeros((3, 3)))

    def test_non_finite(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky_spd(np.array([[np.nan, 0.0], [0.0, 1.0]]))

    def test_non_square(self):
        with pytest.raises(DimensionMismatch):
            cholesky_spd(np.ones((2, 3)))

    def test_deterministic(self):
        M = random_spd(np.random.default_rng(0), 12)
        np.testing.assert_array_equal(cholesky_spd(M).lower, cholesky_spd(M).lower)


class TestSpdSolve:
    @pytest.mark.parametrize(
        "M, b, x",
        [
            (np.eye(2), [1.0, 2.0], [1.0, 2.0]),
            (np.diag([4.0, 9.0]), [8.0, 27.0], [2.0, 3.0]),
            (A2, [3.0, 3.0], [1.0, 1.0]),
        ],
    )
    def test_examples(self, M, b, x):
        np.testing.assert_allclose(spd_solve(cholesky_spd(M), b), x, atol=1e-14)

    def test_residual_small(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            M = random_spd(rng, 8)
            b = rng.normal(size=8)
            x = spd_solve(cholesky_spd(M), b)
            assert np.linalg.norm(M @ x - b) <= 1e-10 * np.linalg.norm(b)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            spd_solve(cholesky_spd(np.eye(2)), [1.0, 2.0, 3.0])


class TestQuadraticForm:
    def test_examples(self):
        assert quadratic_form(np.eye(2), [3.0, 4.0]) == 25.0
        assert quadratic_form(A2, [1.0, 0.0]) == 2.0
        assert quadratic_form(A2, [1.0, 1.0]) == 6.0

    def test_nonnegative_on_spd(self):
        rng = np.random.default_rng(2)
        M = random_spd(rng, 5)
        for _ in range(20):
            assert quadratic_form(M, rng.normal(size=5)) >= 0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            quadratic_form(np.eye(2), [1.0])


class TestDamping:
    def test_examples(self):
        np.testing.assert_array_equal(add_damping(np.zeros((2, 2)), 1.0), np.eye(2))
        np.testing.assert_array_equal(add_damping(np.eye(2), 0.0), np.eye(2))
        np.testing.assert_array_equal(add_damping(A2, 0.5), [[2.5, 1.0], [1.0, 2.5]])

    def test_keeps_symmetry_exactly(self):
        M = random_spd(np.random.default_rng(3), 6)
        D = add_damping(M, 0.37)
        np.testing.assert_array_equal(D, D.T)

    def test_does_not_mutate(self):
        M = A2.copy()
        add_damping(M, 3.0)
        np.testing.assert_array_equal(M, A2)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            add_damping(np.eye(2), -1.0)


class TestMinQuadratic:
    def test_examples(self):
        delta, value = min_quadratic(0.0, [1.0, 1.0], np.eye(2))
        np.testing.assert_allclose(delta, [-1.0, -1.0])
        assert value == pytest.approx(-1.0)

        delta, value = min_quadratic(5.0, [0.0, 0.0], np.eye(2))
        np.testing.assert_array_equal(delta, [0.0, 0.0])
        assert value == 5.0

        delta, value = min_quadratic(0.0, [2.0, 0.0], np.diag([2.0, 1.0]))
        np.testing.assert_allclose(delta, [-1.0, 0.0])
        assert value == pytest.approx(-1.0)

    def test_is_minimum(self):
        rng = np.random.default_rng(4)
        M = random_spd(rng, 4)
        g = rng.normal(size=4)
        delta, value = min_quadratic(1.0, g, M)
        for _ in range(20):
            nearby = delta + 1e-3 * rng.normal(size=4)
            assert 1.0 + g @ nearby + 0.5 * nearby @ M @ nearby >= value

    def test_stationarity(self):
        rng = np.random.default_rng(5)
        for d in (1, 2, 7, 25):
            M = random_spd(rng, d)
            g = rng.normal(size=d) * 10.0 ** rng.uniform(-3, 3)
            delta, _ = min_quadratic(0.0, g, M)
            assert np.linalg.norm(g + M @ delta) <= 1e-9 * (1 + np.linalg.norm(g))

    def test_indefinite(self):
        with pytest.raises(NotPositiveDefinite):
            min_quadratic(0.0, [1.0, 1.0], np.diag([1.0, -1.0]))
