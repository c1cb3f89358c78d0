"""Pure numpy implementations of the compiled kernels in ``_kernels.pyx``."""

import numpy as np
from scipy.special import expit

OK, MAX_ITER, SINGULAR, NO_DESCENT = 0, 1, 2, 3


def _solve(J, b):
    scale = np.abs(J).max()
    if scale == 0.0 or not np.isfinite(scale):
        return None
    try:
        x = np.linalg.solve(J, b)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(x)) or np.linalg.cond(J) > 1e14:
        return None
    return x


def _exp_moment(G, D, base, target, sign, gamma, clamp, want_jac):
    eta = sign * (G @ gamma)
    clamped = np.abs(eta) > clamp
    e = base * np.exp(np.clip(eta, -clamp, clamp))
    m = D.T @ (e - target) / len(e)
    J = None
    if want_jac:
        de = np.where(clamped, 0.0, sign * e)
        J = (D * de[:, None]).T @ G / len(e)
    return m, J, np.abs(m).max(), int(clamped.sum())


def exp_moment_newton(G, D, base, target, sign, gamma_init, tol=1e-10, max_iter=100,
                      max_halvings=30, clamp=50.0):
    G = np.ascontiguousarray(G, dtype=float)
    D = np.ascontiguousarray(D, dtype=float)
    base = np.asarray(base, dtype=float)
    target = np.asarray(target, dtype=float)
    if D.shape[1] != G.shape[1]:
        raise ValueError("instrument and design dimensions differ")
    gamma = np.array(gamma_init, dtype=float, copy=True)
    m, J, norm, nclamp = _exp_moment(G, D, base, target, sign, gamma, clamp, True)
    it = 0
    while True:
        if norm < tol:
            status = OK
            break
        if it >= max_iter:
            status = MAX_ITER
            break
        step = _solve(J, -m)
        if step is None:
            status = SINGULAR
            break
        t = 1.0
        for _ in range(max_halvings + 1):
            trial = gamma + t * step
            tnorm = _exp_moment(G, D, base, target, sign, trial, clamp, False)[2]
            if tnorm < norm:
                break
            t *= 0.5
        else:
            status = NO_DESCENT
            break
        gamma = trial
        it += 1
        m, J, norm, nclamp = _exp_moment(G, D, base, target, sign, gamma, clamp, True)
    return gamma, it, norm, nclamp, status


def _logit_score(L, a, theta, want_hess):
    p = expit(np.clip(L @ theta, -50.0, 50.0))
    s = L.T @ (a - p) / len(a)
    H = (L * (p * (1 - p))[:, None]).T @ L / len(a) if want_hess else None
    return s, H, np.abs(s).max()


def logistic_newton(L, a, theta_init, tol=1e-10, max_iter=100, max_halvings=30):
    L = np.ascontiguousarray(L, dtype=float)
    a = np.asarray(a, dtype=float)
    theta = np.array(theta_init, dtype=float, copy=True)
    s, H, norm = _logit_score(L, a, theta, True)
    it = 0
    while True:
        if norm < tol:
            status = OK
            break
        if it >= max_iter:
            status = MAX_ITER
            break
        step = _solve(H, s)
        if step is None:
            status = SINGULAR
            break
        t = 1.0
        for _ in range(max_halvings + 1):
            trial = theta + t * step
            if _logit_score(L, a, trial, False)[2] < norm:
                break
            t *= 0.5
        else:
            status = NO_DESCENT
            break
        theta = trial
        it += 1
        s, H, norm = _logit_score(L, a, theta, True)
    return theta, it, norm, status


def cross_moments(C, X, y, w):
    Cw = np.asarray(C, dtype=float) * np.asarray(w, dtype=float)[:, None]
    return Cw.T @ np.asarray(X, dtype=float), Cw.T @ np.asarray(y, dtype=float)


def gaussian_gram(X, Y, sigma):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape[1] != Y.shape[1]:
        raise ValueError("feature dimensions differ")
    sq = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * sigma * sigma))
