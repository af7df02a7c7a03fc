import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfhboot.errors import BadDimension, NotPositiveDefinite
from mfhboot.linalg import (cholesky, derive_seed, inverse_spd, log_det_spd, make_rng,
                            sample_mvn, solve_spd, standard_normal, sym_matrix)

from conftest import random_spd


def spd_matrices(max_n=6):
    return st.tuples(st.integers(1, max_n), st.integers(0, 2**32 - 1)).map(
        lambda t: random_spd(np.random.default_rng(t[1]), t[0], 0.01, 10.0))


class TestCholesky:
    def test_hand_factorization(self):
        L = cholesky([[4.0, 2.0], [2.0, 5.0]])
        np.testing.assert_array_equal(L, [[2.0, 0.0], [1.0, 2.0]])

    def test_identity(self):
        np.testing.assert_array_equal(cholesky(np.eye(3)), np.eye(3))

    def test_indefinite_raises(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky([[1.0, 2.0], [2.0, 1.0]])

    def test_pivot_tolerance_is_relative(self):
        M = np.diag([1.0, 1e-13])
        with pytest.raises(NotPositiveDefinite):
            cholesky(M)
        assert cholesky(M, tol=1e-14)[1, 1] == pytest.approx(np.sqrt(1e-13))

    def test_non_square(self):
        with pytest.raises(BadDimension):
            cholesky(np.ones((2, 3)))

    @given(spd_matrices())
    def test_reconstruction(self, M):
        L = cholesky(M)
        assert np.all(np.triu(L, 1) == 0) and np.all(np.diag(L) > 0)
        err = np.linalg.norm(L @ L.T - M) / np.linalg.norm(M)
        assert err < 1e-10


class TestInverseAndLogDet:
    def test_identity(self):
        np.testing.assert_array_equal(inverse_spd(np.eye(2)), np.eye(2))

    def test_two_by_two(self):
        np.testing.assert_allclose(inverse_spd([[4.0, 2.0], [2.0, 5.0]]),
                                   [[0.3125, -0.125], [-0.125, 0.25]], atol=1e-15)

    def test_random_multiply_back(self, rng):
        M = random_spd(rng, 5)
        assert np.linalg.norm(M @ inverse_spd(M) - np.eye(5)) < 1e-9

    @given(spd_matrices())
    def test_double_inverse(self, M):
        err = np.linalg.norm(inverse_spd(inverse_spd(M)) - M) / np.linalg.norm(M)
        assert err < 1e-8

    @pytest.mark.parametrize("M, expected", [
        (np.diag([2.0, 3.0]), np.log(6.0)),
        (np.eye(4), 0.0),
        ([[4.0, 2.0], [2.0, 5.0]], np.log(16.0)),
    ])
    def test_log_det_examples(self, M, expected):
        assert log_det_spd(M) == pytest.approx(expected, abs=1e-12)

    @given(st.lists(st.floats(0.01, 100.0), min_size=1, max_size=6), st.integers(0, 2**32 - 1))
    def test_log_det_known_spectrum(self, lam, seed):
        n = len(lam)
        Q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, n)))
        M = (Q * lam) @ Q.T
        assert log_det_spd(0.5 * (M + M.T)) == pytest.approx(np.sum(np.log(lam)), abs=1e-8)

    def test_solve(self, rng):
        M = random_spd(rng, 4)
        b = rng.standard_normal(4)
        np.testing.assert_allclose(M @ solve_spd(M, b), b, atol=1e-12)
        B = rng.standard_normal((4, 3))
        np.testing.assert_allclose(M @ solve_spd(M, B), B, atol=1e-12)


class TestSymMatrix:
    def test_mirrors_lower_triangle(self):
        S = sym_matrix([[1.0, 99.0], [2.0, 3.0]])
        np.testing.assert_array_equal(S, [[1.0, 2.0], [2.0, 3.0]])
        assert not S.flags.writeable

    def test_exact_symmetry(self, rng):
        S = sym_matrix(rng.standard_normal((5, 5)))
        assert np.array_equal(S, S.T)


class TestSampling:
    def test_determinism(self):
        a = sample_mvn(np.zeros(3), np.eye(3), make_rng(7))
        b = sample_mvn(np.zeros(3), np.eye(3), make_rng(7))
        assert np.array_equal(a, b)

    def test_streams_are_keyed(self):
        a = standard_normal(make_rng(7, 1), 5)
        b = standard_normal(make_rng(7, 2), 5)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, standard_normal(make_rng(7, 1), 5))
        assert derive_seed(7, 1) == derive_seed(7, 1) != derive_seed(7, 2)
        assert 0 <= derive_seed(7, 1) < 2**63

    def test_monte_carlo_moments(self, rng):
        n = 100_000
        mu = np.array([1.0, -2.0, 0.5])
        Sigma = random_spd(rng, 3)
        gen = make_rng(11)
        L = cholesky(Sigma)
        # same transform as sample_mvn, vectorized over draws
        draws = mu + standard_normal(gen, (n, 3)) @ L.T
        one = sample_mvn(mu, Sigma, make_rng(12))
        assert one.shape == (3,)
        se = np.sqrt(np.diag(Sigma) / n)
        assert np.all(np.abs(draws.mean(axis=0) - mu) < 4 * se)
        S = np.cov(draws, rowvar=False)
        assert np.linalg.norm(S - Sigma) / np.linalg.norm(Sigma) < 0.05

    def test_sample_mvn_matches_vectorized_transform(self):
        mu, Sigma = np.zeros(2), np.array([[2.0, 0.5], [0.5, 1.0]])
        z = standard_normal(make_rng(3), 2)
        np.testing.assert_array_equal(sample_mvn(mu, Sigma, make_rng(3)), cholesky(Sigma) @ z)

    def test_normals_are_normal(self):
        z = standard_normal(make_rng(5), 200_000)
        assert abs(z.mean()) < 0.015 and abs(z.std() - 1) < 0.01
