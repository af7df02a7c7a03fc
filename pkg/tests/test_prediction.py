import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfhboot.errors import BadDimension, DegenerateVarianceWarning, NotPositiveDefinite
from mfhboot.linalg import inverse_spd
from mfhboot.model import (CovarianceKind, CovarianceModel, Dataset, LinearTarget, ParamVector,
                           psi_from_covariance)
from mfhboot.prediction import (conditional_mean, conditional_sd, eblup, posterior_moments,
                                predict)

from conftest import random_dataset, random_spd
from oracles import posterior_draws

UN = CovarianceKind.UNSTRUCTURED


def params(beta, A):
    return ParamVector(np.asarray(beta, dtype=float), psi_from_covariance(np.asarray(A)))


def identity_design(m, s, y, D):
    return Dataset(None, y, D, np.broadcast_to(np.eye(s), (m, s, s)).copy())


class TestEblup:
    def test_half_shrinkage(self):
        ds = Dataset(None, [[2.0]], [[[1.0]]], [[[1.0]]])
        theta = eblup(ds, params([0.0], [[1.0]]), CovarianceModel(UN, 1))
        assert theta[0, 0] == pytest.approx(1.0, abs=1e-14)

    def test_no_sampling_error_means_no_shrinkage(self, rng):
        s = 2
        y = rng.standard_normal((3, s))
        ds = identity_design(3, s, y, np.broadcast_to(1e-12 * np.eye(s), (3, s, s)))
        theta = eblup(ds, params(np.zeros(s), np.eye(s)), CovarianceModel(UN, s))
        np.testing.assert_allclose(theta, y, atol=1e-10)

    def test_zero_residual(self, rng):
        ds, _ = random_dataset(rng, 8, 3)
        beta = rng.standard_normal(ds.p)
        ds0 = ds.with_y(ds.X @ beta)
        theta = eblup(ds0, params(beta, random_spd(rng, 3)), CovarianceModel(UN, 3))
        np.testing.assert_allclose(theta, ds0.y, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        ds, _ = random_dataset(rng, 5, 2)
        with pytest.raises(BadDimension):
            eblup(ds, params(np.zeros(3), np.eye(2)), CovarianceModel(UN, 2))

    def test_not_positive_definite(self):
        ds = Dataset(None, [[1.0]], [[[1.0]]], [[[1.0]]])
        with pytest.raises(NotPositiveDefinite):
            posterior_moments(ds, np.zeros(1), np.array([[-2.0]]))

    @given(st.integers(0, 10_000))
    def test_shrinkage_ordering_univariate(self, seed):
        rng = np.random.default_rng(seed)
        ds, _ = random_dataset(rng, 12, 1)
        beta = rng.standard_normal(ds.p)
        A = np.array([[rng.uniform(0.01, 5.0)]])
        theta = eblup(ds, params(beta, A), CovarianceModel(UN, 1))
        fit = (ds.X @ beta)[:, 0]
        assert np.all(np.abs(theta[:, 0] - fit) <= np.abs(ds.y[:, 0] - fit) + 1e-12)


class TestConditionalMoments:
    def test_half_shrinkage_of_first_coordinate(self):
        D = np.broadcast_to(np.eye(2), (2, 2, 2))
        ds = identity_design(2, 2, [[2.0, 4.0], [0.0, 0.0]], D)
        c = LinearTarget.unit(2, 2, 0, 0)
        assert conditional_mean(ds, params([0.0, 0.0], np.eye(2)), CovarianceModel(UN, 2), c) \
            == pytest.approx(1.0, abs=1e-14)

    def test_unit_selector_sd(self):
        D = np.broadcast_to(np.eye(2), (2, 2, 2))
        ds = identity_design(2, 2, np.zeros((2, 2)), D)
        sd = conditional_sd(ds, psi_from_covariance(np.eye(2)), CovarianceModel(UN, 2),
                            LinearTarget.unit(2, 2, 1, 1))
        assert sd == pytest.approx(np.sqrt(0.5), abs=1e-14)

    def test_linearity_and_block_additivity(self, rng):
        ds, _ = random_dataset(rng, 6, 3)
        cm = CovarianceModel(UN, 3)
        phi = params(rng.standard_normal(ds.p), random_spd(rng, 3))
        c1 = LinearTarget.unit(6, 3, 1, 0)
        c2 = LinearTarget.unit(6, 3, 4, 2)
        both = LinearTarget.from_triples(6, 3, [(1, 0, 1.0), (4, 2, 1.0)])
        assert conditional_mean(ds, phi, cm, both) == pytest.approx(
            conditional_mean(ds, phi, cm, c1) + conditional_mean(ds, phi, cm, c2), abs=1e-12)
        sd1, sd2, sd12 = (conditional_sd(ds, phi.psi, cm, c) for c in (c1, c2, both))
        assert sd12 ** 2 == pytest.approx(sd1 ** 2 + sd2 ** 2, rel=1e-12)

    @given(st.integers(0, 10_000))
    def test_mean_equals_weighted_eblup(self, seed):
        rng = np.random.default_rng(seed)
        ds, _ = random_dataset(rng, 7, 2)
        cm = CovarianceModel(UN, 2)
        phi = params(rng.standard_normal(ds.p), random_spd(rng, 2))
        c = rng.standard_normal(ds.m * ds.s)
        theta = eblup(ds, phi, cm)
        assert conditional_mean(ds, phi, cm, c) == pytest.approx(c @ theta.ravel(), abs=1e-10)

    @given(st.integers(0, 10_000))
    def test_subtraction_form_matches_inverse_form(self, seed):
        rng = np.random.default_rng(seed)
        s = int(rng.integers(1, 4))
        ds, _ = random_dataset(rng, 5, s)
        A = random_spd(rng, s, 0.5, 3.0)
        _, B = posterior_moments(ds, np.zeros(ds.p), A)
        for D_i, B_i in zip(ds.D, B):
            expected = inverse_spd(inverse_spd(A) + inverse_spd(D_i))
            np.testing.assert_allclose(B_i, expected, atol=1e-9)

    def test_sd_ignores_y_and_beta(self, rng):
        ds, _ = random_dataset(rng, 9, 3)
        cm = CovarianceModel(UN, 3)
        psi = psi_from_covariance(random_spd(rng, 3))
        c = rng.standard_normal(ds.m * ds.s)
        sd = conditional_sd(ds, psi, cm, c)
        perturbed = ds.with_y(ds.y + 10 * rng.standard_normal(ds.y.shape))
        assert conditional_sd(perturbed, psi, cm, c) == sd
        pred = predict(perturbed, ParamVector(rng.standard_normal(ds.p), psi), cm, c)
        assert pred.sigma_T == pytest.approx(sd, rel=1e-14)

    def test_near_zero_sd_warns(self):
        ds = Dataset(None, [[1.0], [2.0]], [[[1.0]], [[1.0]]], [[[1.0]], [[1.0]]])
        with pytest.warns(DegenerateVarianceWarning):
            conditional_sd(ds, psi_from_covariance(np.array([[1e-30]])),
                           CovarianceModel(UN, 1), LinearTarget.unit(2, 1, 0, 0))

    def test_positive_sd_does_not_warn(self, rng):
        ds, _ = random_dataset(rng, 4, 2)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert conditional_sd(ds, psi_from_covariance(np.eye(2)), CovarianceModel(UN, 2),
                                  LinearTarget.unit(4, 2, 0, 1)) > 0

    @pytest.mark.parametrize("seed", range(3))
    def test_against_posterior_draws(self, seed):
        rng = np.random.default_rng(500 + seed)
        ds, _ = random_dataset(rng, 4, 2)
        cm = CovarianceModel(UN, 2)
        beta, A = rng.standard_normal(ds.p), random_spd(rng, 2, 0.5, 3.0)
        c = rng.standard_normal(ds.m * ds.s)
        pred = predict(ds, params(beta, A), cm, c)
        T = posterior_draws(ds, beta, A, 1_000_000, rng) @ c
        se = T.std() / np.sqrt(len(T))
        assert abs(T.mean() - pred.mu_T) < 4 * se
        assert T.std() == pytest.approx(pred.sigma_T, rel=0.01)
