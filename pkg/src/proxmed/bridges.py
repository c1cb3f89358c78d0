"""Parametric confounding bridge functions and their estimating-equation fits.

Outcome bridges are linear::

    h1(w, m, a, x) = b10 + b1w'w + b1m m + b1a a + b1x'x
    h0(w, a, x)    = b0a_0 + b0a_w'w + b0a_x'x        (separate vector per arm a)

Exposure bridges are log-linear::

    q0(z, x)    = exp{-(g00 + g0z'z + g0x'x)}
    q1(z, m, x) = q0(z, x) exp{g10 + g1z'z + g1m m + g1x'x}

Each family is fitted by an exactly identified system of moment equations, so
the fitted parameters zero the sample moments to solver tolerance and the
residual is reported as a certificate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import least_squares

from . import kernels
from .data import Dataset
from .errors import ConfigError, PreconditionError, RankDeficiencyError, SolverError

CLAMP = 50.0
LINEAR_TOL = 1e-8
NEWTON_TOL = 1e-10
BRIDGE_ROLES = ("h1", "h0", "q0", "q1")
ROOT_POLICIES = ("exact", "nearest")


def star_transform(x):
    """Misspecifying covariate map ``x -> sqrt(|x|) + 3`` applied elementwise."""
    return np.sqrt(np.abs(np.asarray(x, dtype=float))) + 3.0


def _clamped_exp(eta, stats=None):
    eta = np.asarray(eta, dtype=float)
    hit = np.abs(eta) > CLAMP
    if stats is not None and hit.any():
        stats["clamped"] = stats.get("clamped", 0) + int(hit.sum())
    return np.exp(np.clip(eta, -CLAMP, CLAMP))


# ----------------------------------------------------------------------------
# parameter container
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BridgeParams:
    """Parameter vectors of the four bridge functions.

    ``beta0`` stacks the two arm-specific vectors ``(beta01, beta00)``, each
    laid out as ``(intercept, w..., x...)``.  ``x_star`` names the bridges whose
    fit (and therefore evaluation) used the transformed covariates.
    """

    p_w: int
    p_x: int
    p_z: int
    beta1: Optional[np.ndarray] = None
    beta0: Optional[np.ndarray] = None
    gamma0: Optional[np.ndarray] = None
    gamma1: Optional[np.ndarray] = None
    x_star: frozenset = frozenset()
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        expected = {
            "beta1": 3 + self.p_w + self.p_x,
            "beta0": 2 * (1 + self.p_w + self.p_x),
            "gamma0": 1 + self.p_z + self.p_x,
            "gamma1": 2 + self.p_z + self.p_x,
        }
        for name, dim in expected.items():
            value = getattr(self, name)
            if value is None:
                continue
            arr = np.array(value, dtype=float).ravel()
            if arr.shape[0] != dim:
                raise ConfigError(f"{name} has length {arr.shape[0]}, expected {dim} for "
                                  f"p_w={self.p_w}, p_x={self.p_x}, p_z={self.p_z}")
            if not np.all(np.isfinite(arr)):
                raise SolverError(f"{name} contains non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "x_star", frozenset(self.x_star))
        bad = self.x_star - set(BRIDGE_ROLES)
        if bad:
            raise ConfigError(f"unknown bridge role(s) in x_star: {sorted(bad)}")

    @classmethod
    def from_compact_form(cls, p_w, p_x, p_z, beta1=None, beta0=None, gamma0=None, gamma1=None):
        """Build from a common-slope h0 vector ``(b00, b0w..., b0a, b0x...)``."""
        if beta0 is not None:
            beta0 = np.asarray(beta0, dtype=float)
            if beta0.shape[0] != 2 + p_w + p_x:
                raise ConfigError("compact beta0 must have length 2 + p_w + p_x")
            b00, bw, ba, bx = beta0[0], beta0[1 : 1 + p_w], beta0[1 + p_w], beta0[2 + p_w :]
            beta0 = np.concatenate([[b00 + ba], bw, bx, [b00], bw, bx])
        return cls(p_w, p_x, p_z, beta1=beta1, beta0=beta0, gamma0=gamma0, gamma1=gamma1)

    def replace(self, **changes) -> "BridgeParams":
        fields = dict(p_w=self.p_w, p_x=self.p_x, p_z=self.p_z, beta1=self.beta1, beta0=self.beta0,
                      gamma0=self.gamma0, gamma1=self.gamma1, x_star=self.x_star,
                      diagnostics=dict(self.diagnostics))
        fields.update(changes)
        return BridgeParams(**fields)

    def beta0_arm(self, a: int) -> np.ndarray:
        k = 1 + self.p_w + self.p_x
        return self.beta0[:k] if a == 1 else self.beta0[k:]

    # -- evaluation on a whole dataset ------------------------------------

    def _require(self, name):
        if getattr(self, name) is None:
            raise PreconditionError(f"{name} has not been fitted")

    def covariates(self, d: Dataset, role: str) -> np.ndarray:
        if role in self.x_star:
            if d.x_transformed:
                raise ConfigError("covariates are already transformed; refusing to apply the map twice")
            return star_transform(d.x)
        return d.x

    def h1(self, d: Dataset, a=None) -> np.ndarray:
        self._require("beta1")
        b = self.beta1
        pw = self.p_w
        av = d.a if a is None else np.broadcast_to(float(a), (d.n,))
        x = self.covariates(d, "h1")
        return b[0] + d.w @ b[1 : 1 + pw] + b[1 + pw] * d.m + b[2 + pw] * av + x @ b[3 + pw :]

    def h0(self, d: Dataset, a=None) -> np.ndarray:
        self._require("beta0")
        x = self.covariates(d, "h0")
        design = np.column_stack([np.ones(d.n), d.w, x])
        v1 = design @ self.beta0_arm(1)
        v0 = design @ self.beta0_arm(0)
        if a is None:
            return np.where(d.a == 1, v1, v0)
        return v1 if a == 1 else v0

    def q0(self, d: Dataset, stats=None) -> np.ndarray:
        self._require("gamma0")
        x = self.covariates(d, "q0")
        g = self.gamma0
        pz = self.p_z
        eta = -(g[0] + d.z @ g[1 : 1 + pz] + x @ g[1 + pz :])
        return _clamped_exp(eta, stats)

    def q1(self, d: Dataset, stats=None) -> np.ndarray:
        self._require("gamma1")
        q0 = self.q0(d, stats)
        x = self.covariates(d, "q1")
        g = self.gamma1
        pz = self.p_z
        eta = g[0] + d.z @ g[1 : 1 + pz] + g[1 + pz] * d.m + x @ g[2 + pz :]
        return q0 * _clamped_exp(eta, stats)

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        out = {"dimensions": {"p_w": self.p_w, "p_x": self.p_x, "p_z": self.p_z},
               "x_star": sorted(self.x_star)}
        for name in ("beta1", "beta0", "gamma0", "gamma1"):
            value = getattr(self, name)
            out[name] = None if value is None else [float(v) for v in value]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "BridgeParams":
        dims = doc["dimensions"]
        return cls(int(dims["p_w"]), int(dims["p_x"]), int(dims["p_z"]),
                   beta1=doc.get("beta1"), beta0=doc.get("beta0"),
                   gamma0=doc.get("gamma0"), gamma1=doc.get("gamma1"),
                   x_star=frozenset(doc.get("x_star", ())))

    @classmethod
    def from_json(cls, text: str) -> "BridgeParams":
        return cls.from_dict(json.loads(text))


# ----------------------------------------------------------------------------
# single-observation evaluators
# ----------------------------------------------------------------------------


def _vec(v, dim, name):
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.shape != (dim,):
        raise ConfigError(f"{name} has shape {arr.shape}, expected ({dim},)")
    return arr


def eval_h1(p: BridgeParams, w, m, a, x) -> float:
    b = p.beta1
    w = _vec(w, p.p_w, "w")
    x = _vec(x, p.p_x, "x")
    pw = p.p_w
    return float(b[0] + w @ b[1 : 1 + pw] + b[1 + pw] * m + b[2 + pw] * a + x @ b[3 + pw :])


def eval_h0(p: BridgeParams, w, a, x) -> float:
    w = _vec(w, p.p_w, "w")
    x = _vec(x, p.p_x, "x")
    return float(np.concatenate([[1.0], w, x]) @ p.beta0_arm(int(a)))


def eval_q0(p: BridgeParams, z, x, stats=None) -> float:
    z = _vec(z, p.p_z, "z")
    x = _vec(x, p.p_x, "x")
    g = p.gamma0
    eta = -(g[0] + z @ g[1 : 1 + p.p_z] + x @ g[1 + p.p_z :])
    return float(_clamped_exp(eta, stats))


def eval_q1(p: BridgeParams, z, m, x, stats=None) -> float:
    z_ = _vec(z, p.p_z, "z")
    x_ = _vec(x, p.p_x, "x")
    g = p.gamma1
    eta = g[0] + z_ @ g[1 : 1 + p.p_z] + g[1 + p.p_z] * m + x_ @ g[2 + p.p_z :]
    return eval_q0(p, z, x, stats) * float(_clamped_exp(eta, stats))


# ----------------------------------------------------------------------------
# instrument bases
# ----------------------------------------------------------------------------


def _ones(d):
    return np.ones((d.n, 1))


def default_c1(d):
    return np.column_stack([_ones(d), d.z, d.m, d.a, d.x])


def default_c0(d, a):
    return np.column_stack([_ones(d), d.z, d.x])


def default_d0(d):
    return np.column_stack([_ones(d), d.w, d.x])


def default_d1(d):
    return np.column_stack([_ones(d), d.w, d.m, d.x])


@dataclass(frozen=True)
class InstrumentBasis:
    """Instrument functions for the four estimating equations.

    Each callable maps a :class:`Dataset` to an ``n x k`` matrix whose width
    equals the dimension of the parameter it identifies.  ``c0`` also receives
    the arm ``a``.
    """

    c1: Callable = default_c1
    c0: Callable = default_c0
    d0: Callable = default_d0
    d1: Callable = default_d1


DEFAULT_BASIS = InstrumentBasis()


def _check_width(inst, dim, name):
    if inst.ndim != 2 or inst.shape[1] != dim:
        raise ConfigError(f"instrument {name} has width {inst.shape[1] if inst.ndim == 2 else '?'}, "
                          f"expected {dim} (exact identification)")


def _rank_check(A, name):
    scale = np.abs(A).max()
    if not np.isfinite(scale) or scale == 0:
        raise RankDeficiencyError(f"{name}: moment matrix is zero", dimension=0)
    u, s, _ = np.linalg.svd(A / scale)
    if s[-1] < 1e-11 * s[0]:
        bad = int(np.argmax(np.abs(u[:, -1])))
        raise RankDeficiencyError(
            f"{name}: moment matrix is singular; instrument dimension {bad} is linearly dependent "
            f"(singular values {s[0]:.3g} .. {s[-1]:.3g})",
            dimension=bad,
        )


def _linear_iv(C, X, y, weights, name):
    A, b = kernels.cross_moments(C, X, y, weights)
    _rank_check(A, name)
    coef = np.linalg.solve(A, b)
    resid = np.abs(C.T @ (weights * (y - X @ coef))).max() / len(y)
    return coef, float(resid)


# ----------------------------------------------------------------------------
# fits
# ----------------------------------------------------------------------------


def h1_design(d: Dataset, x=None) -> np.ndarray:
    return np.column_stack([_ones(d), d.w, d.m, d.a, d.x if x is None else x])


def fit_h1(d: Dataset, basis: InstrumentBasis = DEFAULT_BASIS):
    """Solve ``sum_i [Y_i - h1_i] c1_i = 0``; returns ``(beta1, diagnostics)``."""
    X = h1_design(d)
    C = np.asarray(basis.c1(d), dtype=float)
    _check_width(C, X.shape[1], "c1")
    coef, resid = _linear_iv(C, X, d.y, np.ones(d.n), "fit_h1")
    if resid >= LINEAR_TOL * max(1.0, np.abs(d.y).max()):
        raise SolverError(f"fit_h1: moment residual {resid:.3g} above tolerance", residual=resid)
    return coef, {"residual": resid}


def fit_h0(d: Dataset, beta1, basis: InstrumentBasis = DEFAULT_BASIS, h1_data: Optional[Dataset] = None,
           p_h1: Optional[BridgeParams] = None):
    """Solve the arm-specific equations for h0 on the A=0 subsample.

    ``h1`` is evaluated on ``h1_data`` (default ``d``), which lets the two
    bridges see different covariate codings.  Returns ``(beta0, diagnostics)``
    with ``beta0 = (beta01, beta00)``.
    """
    if np.all(d.a == 1):
        raise PreconditionError("fit_h0 precondition: no A=0 rows to fit h0 on")
    src = d if h1_data is None else h1_data
    p1 = p_h1 or BridgeParams(src.p_w, src.p_x, src.p_z, beta1=beta1)
    weights = 1.0 - d.a
    X = np.column_stack([_ones(d), d.w, d.x])
    parts, diag = [], {}
    for arm in (1, 0):
        C = np.asarray(basis.c0(d, arm), dtype=float)
        _check_width(C, X.shape[1], f"c0{arm}")
        target = p1.h1(src, a=arm)
        coef, resid = _linear_iv(C, X, target, weights, f"fit_h0 (arm a={arm})")
        if resid >= LINEAR_TOL * max(1.0, np.abs(target).max()):
            raise SolverError(f"fit_h0: moment residual {resid:.3g} above tolerance", residual=resid)
        parts.append(coef)
        diag[f"residual_a{arm}"] = resid
    return np.concatenate(parts), diag


def _require_both_arms(d, name):
    n1 = d.n_treated
    if n1 == 0 or n1 == d.n:
        arm = "A=1" if n1 == d.n else "A=0"
        raise PreconditionError(f"{name} precondition: both exposure arms must be present (all rows have {arm})")


def _moment_fn(G, D, base, target, sign):
    n = G.shape[0]

    def fun(gamma):
        e = base * np.exp(np.clip(sign * (G @ gamma), -CLAMP, CLAMP))
        return D.T @ (e - target) / n

    def jac(gamma):
        eta = sign * (G @ gamma)
        e = base * np.exp(np.clip(eta, -CLAMP, CLAMP))
        de = np.where(np.abs(eta) > CLAMP, 0.0, sign * e)
        return (D * de[:, None]).T @ G / n

    return fun, jac


def _nearest_root(G, D, base, target, sign, starts):
    """Least-squares minimiser of the moment vector, used when no exact root was found."""
    fun, jac = _moment_fn(G, D, base, target, sign)
    best = None
    for start in starts:
        res = least_squares(fun, start, jac=jac, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
        value = float(np.abs(fun(res.x)).max())
        if np.all(np.isfinite(res.x)) and (best is None or value < best[1]):
            best = (res.x, value)
    return best


def _solve_exp(G, D, base, target, sign, a, name, root_policy):
    """Damped Newton from zero, then from a logistic warm start; optionally the nearest root.

    With ``root_policy="exact"`` failure to reach the tolerance raises
    :class:`SolverError`.  With ``"nearest"`` the least-squares minimiser of
    the moment vector is returned instead and flagged as approximate.
    """
    if root_policy not in ROOT_POLICIES:
        raise ConfigError(f"root_policy must be one of {ROOT_POLICIES}, got {root_policy!r}")
    _rank_check(D.T @ (G * np.maximum(np.abs(base), 1e-300)[:, None]), name)
    tried = []
    for label in ("zero", "logistic"):
        if label == "zero":
            start = np.zeros(G.shape[1])
        else:
            # q0 approximates the odds exp(theta'G) while the bridge uses exp(-gamma'G)
            theta = _logistic_start(G, a)
            start = None if theta is None else -theta
        if start is None:
            continue
        gamma, it, resid, nclamp, status = kernels.exp_moment_newton(
            G, D, base, target, sign, start, NEWTON_TOL, 100, 30, CLAMP)
        info = {"residual": float(resid), "iterations": int(it), "clamped": int(nclamp),
                "start": label, "status": kernels.STATUS_TEXT[status], "approximate": 0}
        if status == kernels.OK and np.all(np.isfinite(gamma)):
            return gamma, info
        tried.append((gamma, info))
    finite = [t for t in tried if np.all(np.isfinite(t[0])) and np.isfinite(t[1]["residual"])]
    last = min(finite, key=lambda t: t[1]["residual"]) if finite else (None, {"residual": float("inf"),
                                                                              "status": "no finite iterate"})
    if root_policy == "nearest":
        starts = [np.zeros(G.shape[1])] + [t[0] for t in finite]
        found = _nearest_root(G, D, base, target, sign, starts)
        # a minimiser that needs clamped indices lies "at infinity": the bridge is degenerate there
        if found is not None and not np.any(np.abs(G @ found[0]) > CLAMP):
            gamma, value = found
            return gamma, {"residual": value, "iterations": 0, "clamped": 0, "start": "least-squares",
                           "status": "nearest root (no exact root found)", "approximate": 1}
        raise SolverError(f"{name}: no exact root, and the least-squares point diverges "
                          f"(final Newton residual {last[1]['residual']:.3g})", residual=last[1]["residual"])
    raise SolverError(f"{name}: Newton solver did not converge after multistart "
                      f"(final residual {last[1]['residual']:.3g}, {last[1]['status']})",
                      residual=last[1]["residual"])


def _logistic_start(L, a):
    theta, _, _, status = kernels.logistic_newton(L, a, np.zeros(L.shape[1]), 1e-8, 50, 30)
    return theta if status == kernels.OK and np.all(np.isfinite(theta)) else None


def fit_q0(d: Dataset, basis: InstrumentBasis = DEFAULT_BASIS, root_policy: str = "exact"):
    """Solve ``sum_i [(1-A_i) q0_i - A_i] d0_i = 0``; returns ``(gamma0, diagnostics)``.

    Newton starts at zero and then at a sign-flipped logistic fit of A.  If
    neither reaches the tolerance, ``root_policy="exact"`` raises
    :class:`SolverError`; ``"nearest"`` returns the least-squares minimiser
    of the moment vector with ``diagnostics["approximate"] = 1``.
    """
    _require_both_arms(d, "fit_q0")
    G = np.column_stack([_ones(d), d.z, d.x])
    D = np.asarray(basis.d0(d), dtype=float)
    _check_width(D, G.shape[1], "d0")
    return _solve_exp(G, D, 1.0 - d.a, d.a, -1.0, d.a, "fit_q0", root_policy)


def fit_q1(d: Dataset, gamma0, basis: InstrumentBasis = DEFAULT_BASIS, q0_data: Optional[Dataset] = None,
           p_q0: Optional[BridgeParams] = None, root_policy: str = "exact"):
    """Solve ``sum_i [A_i q1_i - (1-A_i) q0_i] d1_i = 0`` with q0 held at ``gamma0``."""
    _require_both_arms(d, "fit_q1")
    src = d if q0_data is None else q0_data
    p0 = p_q0 or BridgeParams(src.p_w, src.p_x, src.p_z, gamma0=gamma0)
    q0 = p0.q0(src)
    G = np.column_stack([_ones(d), d.z, d.m, d.x])
    D = np.asarray(basis.d1(d), dtype=float)
    _check_width(D, G.shape[1], "d1")
    return _solve_exp(G, D, d.a * q0, (1.0 - d.a) * q0, 1.0, d.a, "fit_q1", root_policy)


def fit_bridges(d: Dataset, basis: InstrumentBasis = DEFAULT_BASIS, misspecified=frozenset(),
                roles=BRIDGE_ROLES, transform=None, root_policy: str = "exact") -> BridgeParams:
    """Fit the requested bridges, using transformed covariates for ``misspecified`` ones.

    ``root_policy`` is passed to the exposure-bridge solvers (see
    :func:`fit_q0`); ``"nearest"`` accepts a least-squares point when the
    moment equations have no exact root in the sample.

    ``transform`` maps a Dataset to its copy with transformed covariates; the
    default applies :func:`star_transform` to every covariate column.  It is
    called at most once, and only if some requested bridge is misspecified.
    Exposure bridges are fitted first so that a single-arm dataset fails on
    the q0 precondition before anything else.
    """
    misspecified = frozenset(misspecified)
    roles = set(roles)
    if "q1" in roles:
        roles.add("q0")
    if "h0" in roles:
        roles.add("h1")
    if roles:
        # every bridge-based estimator needs both arms; report it against the first fit
        _require_both_arms(d, "fit_q0" if "q0" in roles else "fit_h1")
    _star = {}

    def view(role):
        if role not in misspecified:
            return d
        if "star" not in _star:
            if transform is not None:
                _star["star"] = transform(d)
            elif d.x_transformed:
                raise ConfigError("covariates are already transformed; refusing to apply the map twice")
            else:
                _star["star"] = d.with_x(star_transform(d.x), transformed=True)
        return _star["star"]

    p = BridgeParams(d.p_w, d.p_x, d.p_z, x_star=misspecified & roles)
    diag = {}
    if "q0" in roles:
        g0, diag["q0"] = fit_q0(view("q0"), basis, root_policy)
        p = p.replace(gamma0=g0)
    if "q1" in roles:
        g1, diag["q1"] = fit_q1(view("q1"), p.gamma0, basis, q0_data=d, p_q0=p,
                                   root_policy=root_policy)
        p = p.replace(gamma1=g1)
    if "h1" in roles:
        b1, diag["h1"] = fit_h1(view("h1"), basis)
        p = p.replace(beta1=b1)
    if "h0" in roles:
        b0, diag["h0"] = fit_h0(view("h0"), p.beta1, basis, h1_data=d, p_h1=p)
        p = p.replace(beta0=b0)
    return p.replace(diagnostics=diag)
