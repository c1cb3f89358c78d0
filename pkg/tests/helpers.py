"""Data builders shared by several test modules."""

import numpy as np

from proxmed.data import Dataset


def noiseless_dataset(n=300, seed=0, m_coef=(0.5, 0.8, -0.3, 0.4, 0.2), y_coef=(1.0, 2.0, 0.0, 0.7, -1.0, 0.5)):
    """Proxies driven by a latent U; Y is an exact linear function of (W, M, A, X).

    ``m_coef`` is (intercept, W, A, X1, X2) and M also carries unit noise;
    ``y_coef`` is (intercept, W, M, A, X1, X2).  With the default zero M
    slope every bridge equation is solved exactly, so all correction terms
    of the multiply robust estimator vanish.
    """
    rng = np.random.default_rng(seed)
    u = rng.normal(size=n)
    x = rng.normal(size=(n, 2)) + 0.3 * u[:, None]
    a = (rng.random(n) < 1 / (1 + np.exp(0.4 * u - 0.2 * x[:, 0]))).astype(float)
    a[:2] = (0.0, 1.0)
    z = u + 0.5 * a + rng.normal(size=n)
    w = u + rng.normal(size=n)
    c = m_coef
    m = c[0] + c[1] * w + c[2] * a + c[3] * x[:, 0] + c[4] * x[:, 1] + rng.normal(size=n)
    b = y_coef
    y = b[0] + b[1] * w + b[2] * m + b[3] * a + b[4] * x[:, 0] + b[5] * x[:, 1]
    return Dataset(y=y, a=a, m=m, x=x, w=w[:, None], z=z[:, None])


def shifted(d, c):
    return Dataset(y=d.y + c, a=d.a, m=d.m, x=d.x, w=d.w, z=d.z)
