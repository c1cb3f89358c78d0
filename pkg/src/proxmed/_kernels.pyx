# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: exponential moment Newton solver, logistic IRLS,
weighted cross moments and Gaussian Gram matrices.

Signatures and return values match ``_kernels_py`` exactly.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs

cnp.import_array()

DEF OK = 0
DEF MAX_ITER = 1
DEF SINGULAR = 2
DEF NO_DESCENT = 3


cdef int _solve(double[:, ::1] J, double[::1] b, Py_ssize_t k) noexcept nogil:
    """Solve J x = b in place (x overwrites b); J is destroyed. Returns 1 if singular."""
    cdef Py_ssize_t i, j, r, piv
    cdef double amax, tmp, f, scale = 0.0
    for i in range(k):
        for j in range(k):
            if fabs(J[i, j]) > scale:
                scale = fabs(J[i, j])
    if scale == 0.0:
        return 1
    for i in range(k):
        piv = i
        amax = fabs(J[i, i])
        for r in range(i + 1, k):
            if fabs(J[r, i]) > amax:
                amax = fabs(J[r, i])
                piv = r
        if amax <= 1e-14 * scale:
            return 1
        if piv != i:
            for j in range(k):
                tmp = J[i, j]
                J[i, j] = J[piv, j]
                J[piv, j] = tmp
            tmp = b[i]
            b[i] = b[piv]
            b[piv] = tmp
        for r in range(i + 1, k):
            f = J[r, i] / J[i, i]
            if f != 0.0:
                for j in range(i, k):
                    J[r, j] -= f * J[i, j]
                b[r] -= f * b[i]
    for i in range(k - 1, -1, -1):
        tmp = b[i]
        for j in range(i + 1, k):
            tmp -= J[i, j] * b[j]
        b[i] = tmp / J[i, i]
    return 0


cdef double _exp_moment(const double[:, ::1] G, const double[:, ::1] D,
                        const double[::1] base, const double[::1] target,
                        double sign, const double[::1] gamma, double clamp,
                        double[::1] m, double[:, ::1] J, bint want_jac,
                        int* n_clamped) noexcept nogil:
    cdef Py_ssize_t n = G.shape[0], kg = G.shape[1], kd = D.shape[1]
    cdef Py_ssize_t i, j, l
    cdef double eta, e, r, de, dij, norm = 0.0
    cdef bint clamped
    n_clamped[0] = 0
    for j in range(kd):
        m[j] = 0.0
        if want_jac:
            for l in range(kg):
                J[j, l] = 0.0
    for i in range(n):
        eta = 0.0
        for l in range(kg):
            eta += G[i, l] * gamma[l]
        eta *= sign
        clamped = False
        if eta > clamp:
            eta = clamp
            clamped = True
        elif eta < -clamp:
            eta = -clamp
            clamped = True
        if clamped:
            n_clamped[0] += 1
        e = base[i] * exp(eta)
        r = e - target[i]
        if want_jac and not clamped:
            de = sign * e
            for j in range(kd):
                dij = D[i, j] * de
                m[j] += D[i, j] * r
                if dij != 0.0:
                    for l in range(kg):
                        J[j, l] += dij * G[i, l]
        else:
            for j in range(kd):
                m[j] += D[i, j] * r
    for j in range(kd):
        m[j] /= n
        if fabs(m[j]) > norm:
            norm = fabs(m[j])
        if want_jac:
            for l in range(kg):
                J[j, l] /= n
    return norm


def exp_moment_newton(G, D, base, target, double sign, gamma_init,
                      double tol=1e-10, int max_iter=100, int max_halvings=30,
                      double clamp=50.0):
    """Damped Newton root of ``D'(base * exp(sign * G @ g) - target) / n = 0``.

    Returns ``(gamma, iterations, residual_inf_norm, n_clamped, status)``.
    """
    cdef const double[:, ::1] Gv = np.ascontiguousarray(G, dtype=np.float64)
    cdef const double[:, ::1] Dv = np.ascontiguousarray(D, dtype=np.float64)
    cdef const double[::1] bv = np.ascontiguousarray(base, dtype=np.float64)
    cdef const double[::1] tv = np.ascontiguousarray(target, dtype=np.float64)
    cdef Py_ssize_t k = Gv.shape[1], j
    if Dv.shape[1] != k:
        raise ValueError("instrument and design dimensions differ")
    gamma_arr = np.array(gamma_init, dtype=np.float64, copy=True)
    trial_arr = np.empty(k)
    cdef double[::1] gamma = gamma_arr
    cdef double[::1] trial = trial_arr
    cdef double[::1] m = np.empty(k)
    cdef double[::1] mt = np.empty(k)
    cdef double[::1] step = np.empty(k)
    cdef double[:, ::1] J = np.empty((k, k))
    cdef double[:, ::1] Jt = np.empty((k, k))
    cdef int nclamp = 0, status = MAX_ITER, it = 0, h
    cdef double norm, tnorm, t
    cdef bint accepted
    with nogil:
        norm = _exp_moment(Gv, Dv, bv, tv, sign, gamma, clamp, m, J, True, &nclamp)
        while True:
            if norm < tol:
                status = OK
                break
            if it >= max_iter:
                status = MAX_ITER
                break
            for j in range(k):
                step[j] = -m[j]
            if _solve(J, step, k):
                status = SINGULAR
                break
            t = 1.0
            accepted = False
            for h in range(max_halvings + 1):
                for j in range(k):
                    trial[j] = gamma[j] + t * step[j]
                tnorm = _exp_moment(Gv, Dv, bv, tv, sign, trial, clamp, mt, Jt, False, &nclamp)
                if tnorm < norm:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                status = NO_DESCENT
                break
            for j in range(k):
                gamma[j] = trial[j]
            it += 1
            norm = _exp_moment(Gv, Dv, bv, tv, sign, gamma, clamp, m, J, True, &nclamp)
    return gamma_arr, it, norm, nclamp, status


cdef double _logit_score(const double[:, ::1] L, const double[::1] a, const double[::1] theta,
                         double[::1] s, double[:, ::1] H, bint want_hess) noexcept nogil:
    cdef Py_ssize_t n = L.shape[0], k = L.shape[1], i, j, l
    cdef double eta, p, wgt, r, norm = 0.0
    for j in range(k):
        s[j] = 0.0
        if want_hess:
            for l in range(k):
                H[j, l] = 0.0
    for i in range(n):
        eta = 0.0
        for l in range(k):
            eta += L[i, l] * theta[l]
        if eta > 50.0:
            eta = 50.0
        elif eta < -50.0:
            eta = -50.0
        p = 1.0 / (1.0 + exp(-eta))
        r = a[i] - p
        wgt = p * (1.0 - p)
        for j in range(k):
            s[j] += L[i, j] * r
            if want_hess:
                for l in range(j, k):
                    H[j, l] += L[i, j] * wgt * L[i, l]
    for j in range(k):
        s[j] /= n
        if fabs(s[j]) > norm:
            norm = fabs(s[j])
        if want_hess:
            for l in range(j, k):
                H[j, l] /= n
                H[l, j] = H[j, l]
    return norm


def logistic_newton(L, a, theta_init, double tol=1e-10, int max_iter=100, int max_halvings=30):
    """Logistic regression by Newton-Raphson with step halving on the score norm.

    Returns ``(theta, iterations, score_inf_norm, status)``.
    """
    cdef const double[:, ::1] Lv = np.ascontiguousarray(L, dtype=np.float64)
    cdef const double[::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t k = Lv.shape[1], j
    theta_arr = np.array(theta_init, dtype=np.float64, copy=True)
    cdef double[::1] theta = theta_arr
    cdef double[::1] trial = np.empty(k)
    cdef double[::1] s = np.empty(k)
    cdef double[::1] st = np.empty(k)
    cdef double[::1] step = np.empty(k)
    cdef double[:, ::1] H = np.empty((k, k))
    cdef double[:, ::1] Ht = np.empty((k, k))
    cdef int status = MAX_ITER, it = 0, h
    cdef double norm, tnorm, t
    cdef bint accepted
    with nogil:
        norm = _logit_score(Lv, av, theta, s, H, True)
        while True:
            if norm < tol:
                status = OK
                break
            if it >= max_iter:
                status = MAX_ITER
                break
            for j in range(k):
                step[j] = s[j]
            if _solve(H, step, k):
                status = SINGULAR
                break
            t = 1.0
            accepted = False
            for h in range(max_halvings + 1):
                for j in range(k):
                    trial[j] = theta[j] + t * step[j]
                tnorm = _logit_score(Lv, av, trial, st, Ht, False)
                if tnorm < norm:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                status = NO_DESCENT
                break
            for j in range(k):
                theta[j] = trial[j]
            it += 1
            norm = _logit_score(Lv, av, theta, s, H, True)
    return theta_arr, it, norm, status


def cross_moments(C, X, y, w):
    """Return ``(C' diag(w) X, C' diag(w) y)``."""
    cdef const double[:, ::1] Cv = np.ascontiguousarray(C, dtype=np.float64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t n = Cv.shape[0], kc = Cv.shape[1], kx = Xv.shape[1], i, j, l
    out_a = np.zeros((kc, kx))
    out_b = np.zeros(kc)
    cdef double[:, ::1] A = out_a
    cdef double[::1] b = out_b
    cdef double cw
    with nogil:
        for i in range(n):
            if wv[i] == 0.0:
                continue
            for j in range(kc):
                cw = Cv[i, j] * wv[i]
                b[j] += cw * yv[i]
                for l in range(kx):
                    A[j, l] += cw * Xv[i, l]
    return out_a, out_b


def gaussian_gram(X, Y, double sigma):
    """``K[i, j] = exp(-|X_i - Y_j|^2 / (2 sigma^2))``."""
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] Yv = np.ascontiguousarray(Y, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], m = Yv.shape[0], p = Xv.shape[1], i, j, l
    if Yv.shape[1] != p:
        raise ValueError("feature dimensions differ")
    out = np.empty((n, m))
    cdef double[:, ::1] K = out
    cdef double d, s, c = -0.5 / (sigma * sigma)
    with nogil:
        for i in range(n):
            for j in range(m):
                s = 0.0
                for l in range(p):
                    d = Xv[i, l] - Yv[j, l]
                    s += d * d
                K[i, j] = c * s
    # numpy's vectorised exp beats a scalar libm call per entry
    np.exp(out, out=out)
    return out
