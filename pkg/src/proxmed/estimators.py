"""Proximal estimators of the mediation functional psi = E[Y(A, M(0))] and the PIIE.

All estimators take a fitted :class:`~proxmed.bridges.BridgeParams`; the
helpers :func:`point_estimates` and :func:`estimate` fit the bridges they need
and attach bootstrap inference.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import kernels
from .bridges import DEFAULT_BASIS, BridgeParams, InstrumentBasis, fit_bridges
from .data import Dataset, empirical_mean_y
from .errors import ConfigError, ProxmedError, RankDeficiencyError, SolverError

METHODS = ("P-OR", "P-HYBRID", "P-IPW", "P-MR", "DR", "DML-MR")
PARAMETRIC = ("P-OR", "P-HYBRID", "P-IPW", "P-MR", "DR")

# bridges each parametric estimator needs
REQUIRED_ROLES = {
    "P-OR": ("h1", "h0"),
    "P-HYBRID": ("h1", "q0"),
    "P-IPW": ("q0", "q1"),
    "P-MR": ("h1", "h0", "q0", "q1"),
    "DR": (),
}


def normalize_method(tag: str) -> str:
    key = str(tag).strip().upper().replace("_", "-")
    aliases = {"POR": "P-OR", "PHYBRID": "P-HYBRID", "HYBRID": "P-HYBRID", "PIPW": "P-IPW",
               "IPW": "P-IPW", "PMR": "P-MR", "MR": "P-MR", "DML": "DML-MR", "DMLMR": "DML-MR"}
    key = aliases.get(key.replace("-", ""), key)
    if key not in METHODS:
        raise ConfigError(f"unknown estimator {tag!r}; choose from {', '.join(METHODS)}")
    return key


@dataclass
class PsiEstimate:
    psi: float
    method: str
    per_obs_if: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)


class Observation(NamedTuple):
    y: float
    a: int
    m: float
    x: np.ndarray
    w: np.ndarray
    z: np.ndarray


def observation(d: Dataset, i: int) -> Observation:
    return Observation(float(d.y[i]), int(d.a[i]), float(d.m[i]), d.x[i], d.w[i], d.z[i])


def _single(obs: Observation) -> Dataset:
    return Dataset(y=[obs.y], a=[obs.a], m=[obs.m], x=np.reshape(obs.x, (1, -1)),
                   w=np.reshape(obs.w, (1, -1)), z=np.reshape(obs.z, (1, -1)))


def psi_por(d: Dataset, p: BridgeParams) -> PsiEstimate:
    return PsiEstimate(float(np.mean(p.h0(d))), "P-OR")


def psi_phybrid(d: Dataset, p: BridgeParams) -> PsiEstimate:
    terms = (1.0 - d.a) * (p.q0(d) * p.h1(d, a=1) + p.h1(d, a=0))
    return PsiEstimate(float(np.mean(terms)), "P-HYBRID")


def psi_pipw(d: Dataset, p: BridgeParams) -> PsiEstimate:
    terms = d.a * p.q1(d) * d.y + (1.0 - d.a) * d.y
    return PsiEstimate(float(np.mean(terms)), "P-IPW")


def eif_uncentered(d: Dataset, p: BridgeParams, stats=None) -> np.ndarray:
    """Per-row influence-function value plus psi (so its mean is the P-MR estimate)."""
    h1_1 = p.h1(d, a=1)
    h1_0 = p.h1(d, a=0)
    h1_obs = np.where(d.a == 1, h1_1, h1_0)
    h0_1 = p.h0(d, a=1)
    h0_0 = p.h0(d, a=0)
    h0_obs = np.where(d.a == 1, h0_1, h0_0)
    untreated = 1.0 - d.a
    q0 = p.q0(d, stats)
    q1 = p.q1(d, stats)
    return (untreated * q0 * (h1_1 - h0_1)
            + untreated * (h1_0 - h0_0)
            + (d.a * q1 + untreated) * (d.y - h1_obs)
            + h0_obs)


def eif_value(obs: Observation, p: BridgeParams, psi: float) -> float:
    """Efficient influence function of psi evaluated at one observation."""
    return float(eif_uncentered(_single(obs), p)[0]) - psi


def psi_pmr(d: Dataset, p: BridgeParams) -> PsiEstimate:
    stats = {}
    terms = eif_uncentered(d, p, stats)
    psi = float(np.mean(terms))
    centered = terms - psi
    # remove the rounding left by the subtraction so the mean is zero to machine precision
    centered -= centered.mean()
    diag = {"clamped": float(stats.get("clamped", 0))}
    return PsiEstimate(psi, "P-MR", per_obs_if=centered, diagnostics=diag)


def piie(d: Dataset, psi: PsiEstimate) -> float:
    return empirical_mean_y(d) - psi.psi


def _ols(X, y, name):
    A, b = kernels.cross_moments(X, X, y, np.ones(len(y)))
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] <= 1e-12 * s[0]:
        raise RankDeficiencyError(f"{name}: singular regression design", dimension=int(np.argmin(s)))
    return np.linalg.solve(A, b)


def dr_frontdoor(d: Dataset) -> PsiEstimate:
    """Front-door plug-in with linear outcome/mediator models and a logistic propensity on L = (X, W, Z)."""
    L = np.column_stack([d.x, d.w, d.z])
    ones = np.ones((d.n, 1))
    n0 = d.n - d.n_treated
    if n0 == 0 or d.n_treated == 0:
        raise SolverError("DR: both exposure arms are needed for the propensity and mediator models")
    out = _ols(np.column_stack([ones, d.a, d.m, L]), d.y, "DR outcome model")
    untreated = d.a == 0
    med = _ols(np.column_stack([ones, L])[untreated], d.m[untreated], "DR mediator model")
    design = np.column_stack([ones, L])
    theta, _, score, status = kernels.logistic_newton(design, d.a, np.zeros(design.shape[1]), 1e-10, 100, 30)
    if status != kernels.OK:
        raise SolverError(f"DR: propensity fit failed ({kernels.STATUS_TEXT[status]})", residual=float(score))
    p1 = 1.0 / (1.0 + np.exp(-np.clip(design @ theta, -50.0, 50.0)))
    m0 = design @ med
    base = out[0] + out[2] * m0 + L @ out[3:]
    values = base + p1 * out[1]
    return PsiEstimate(float(np.mean(values)), "DR", diagnostics={"propensity_score_norm": float(score)})


_BRIDGE_ESTIMATORS = {"P-OR": psi_por, "P-HYBRID": psi_phybrid, "P-IPW": psi_pipw, "P-MR": psi_pmr}


def required_roles(methods) -> tuple:
    roles = set()
    for method in methods:
        roles.update(REQUIRED_ROLES[method])
    return tuple(r for r in ("h1", "h0", "q0", "q1") if r in roles)


def point_estimates(d: Dataset, methods=("P-MR",), misspecified=frozenset(),
                    basis: InstrumentBasis = DEFAULT_BASIS, bridges: Optional[BridgeParams] = None,
                    transform=None, root_policy: str = "exact") -> dict:
    """Return ``{method: PsiEstimate}`` from a single bridge fit shared by all methods."""
    methods = [normalize_method(m) for m in methods]
    if "DML-MR" in methods:
        raise ConfigError("DML-MR is computed by proxmed.dml.psi_dml, not by point_estimates")
    roles = required_roles(methods)
    p = bridges
    if p is None and roles:
        p = fit_bridges(d, basis, misspecified, roles, transform, root_policy)
    out = {}
    for method in methods:
        if method == "DR":
            out[method] = dr_frontdoor(d)
        else:
            est = _BRIDGE_ESTIMATORS[method](d, p)
            est.diagnostics.update(_flatten(p.diagnostics))
            out[method] = est
    return out


FIT_ERRORS = (ProxmedError, FloatingPointError, np.linalg.LinAlgError)


def point_estimates_isolated(d: Dataset, methods, misspecified=frozenset(),
                             basis: InstrumentBasis = DEFAULT_BASIS, transform=None,
                             root_policy: str = "exact") -> tuple:
    """Like :func:`point_estimates`, but a failed bridge only removes the methods that need it.

    Returns ``(estimates, errors)``, two dicts keyed by method.  The shared
    fit is tried first; if it fails, each method is refit on its own roles.
    """
    methods = [normalize_method(m) for m in methods]
    ests, errors = {}, {}
    bridge_methods = [m for m in methods if m != "DR"]
    if bridge_methods:
        try:
            ests.update(point_estimates(d, bridge_methods, misspecified, basis, transform=transform,
                                        root_policy=root_policy))
        except FIT_ERRORS:
            for m in bridge_methods:
                try:
                    ests.update(point_estimates(d, [m], misspecified, basis, transform=transform,
                                                root_policy=root_policy))
                except FIT_ERRORS as exc:
                    errors[m] = f"{type(exc).__name__}: {exc}"
    if "DR" in methods:
        try:
            ests["DR"] = dr_frontdoor(d)
        except FIT_ERRORS as exc:
            errors["DR"] = f"{type(exc).__name__}: {exc}"
    return ests, errors


def _flatten(diag: dict) -> dict:
    flat = {}
    for role, info in diag.items():
        for key, value in info.items():
            if isinstance(value, (int, float, np.floating, np.integer)):
                flat[f"{role}_{key}"] = float(value)
    return flat


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------


@dataclass
class EstimateReport:
    method: str
    psi_hat: float
    piie_hat: float
    se: float
    ci_lo: float
    ci_hi: float
    n_boot: int
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(v):
            v = float(v)
            return v if math.isfinite(v) else None

        return {
            "method": self.method,
            "psi_hat": clean(self.psi_hat),
            "piie_hat": clean(self.piie_hat),
            "se": clean(self.se),
            "ci_lo": clean(self.ci_lo),
            "ci_hi": clean(self.ci_hi),
            "n_boot": int(self.n_boot),
            "diagnostics": {k: clean(v) for k, v in sorted(self.diagnostics.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


CSV_FIELDS = ("method", "psi", "piie", "se", "ci_lo", "ci_hi")


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in reports:
        writer.writerow([r.method] + [repr(float(v)) for v in (r.psi_hat, r.piie_hat, r.se, r.ci_lo, r.ci_hi)])
    return buf.getvalue()


def estimate(d: Dataset, methods=("P-MR",), B: int = 500, seed=0, misspecified=frozenset(),
             basis: InstrumentBasis = DEFAULT_BASIS, workers: int = 1, dml_options: Optional[dict] = None,
             root_policy: str = "exact") -> list:
    """Point estimates plus percentile bootstrap CIs for the PIIE, one report per method.

    With ``B == 0`` no bootstrap is run; the standard error then comes from
    the influence function where one is available (P-MR, DML-MR) and is NaN
    otherwise.
    """
    from .bootstrap import bootstrap_many

    methods = [normalize_method(m) for m in methods]
    param = [m for m in methods if m != "DML-MR"]
    reports = {}
    mean_y = empirical_mean_y(d)
    if param:
        points = point_estimates(d, param, misspecified, basis, root_policy=root_policy)
        boots = (bootstrap_many(d, param, B, seed, misspecified, basis, workers, root_policy=root_policy)
                 if B > 0 else {})
        for method in param:
            est = points[method]
            diag = dict(est.diagnostics)
            value = mean_y - est.psi
            if method in boots:
                res = boots[method]
                se, lo, hi = res.se, res.ci_lo, res.ci_hi
                diag["bootstrap_failed"] = float(res.n_failed)
            elif est.per_obs_if is not None:
                infl = d.y - mean_y - est.per_obs_if
                se = float(np.std(infl, ddof=1) / math.sqrt(d.n))
                lo, hi = value - 1.959963984540054 * se, value + 1.959963984540054 * se
            else:
                se = lo = hi = float("nan")
            reports[method] = EstimateReport(method, est.psi, value, se, lo, hi, B, diag)
    if "DML-MR" in methods:
        from .dml import psi_dml

        opts = dict(dml_options or {})
        est = psi_dml(d, seed=seed, **opts)
        value = mean_y - est.psi
        se = est.diagnostics["piie_se"]
        reports["DML-MR"] = EstimateReport("DML-MR", est.psi, value, se, value - 1.959963984540054 * se,
                                           value + 1.959963984540054 * se, 0, dict(est.diagnostics))
    return [reports[m] for m in methods]
