import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mfhboot.model import Dataset

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_spd(rng, n, lo=0.5, hi=2.0):
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    Q = Q * np.sign(np.diag(R))
    lam = rng.uniform(lo, hi, n)
    M = (Q * lam) @ Q.T
    return 0.5 * (M + M.T)


def random_dataset(rng, m, s, A=None, p_per=2, d_range=(0.5, 2.0)):
    """Block-diagonal (intercept, covariate) design with data drawn from the model."""
    p = p_per * s
    X = np.zeros((m, s, p))
    for j in range(s):
        X[:, j, p_per * j] = 1.0
        for k in range(1, p_per):
            X[:, j, p_per * j + k] = rng.standard_normal(m)
    D = np.array([random_spd(rng, s, *d_range) for _ in range(m)])
    if A is None:
        A = random_spd(rng, s, 1.0, 4.0)
    beta = rng.standard_normal(p)
    v = rng.standard_normal((m, s)) @ np.linalg.cholesky(A).T
    e = np.einsum("iab,ib->ia", np.linalg.cholesky(D), rng.standard_normal((m, s)))
    theta = X @ beta + v
    return Dataset(None, theta + e, D, X), theta


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)
