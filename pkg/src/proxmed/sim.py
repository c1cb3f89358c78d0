"""Simulation lab: data-generating process, oracle truths and Monte Carlo scenarios.

The generating chain is ``(X1, X2, U) -> A -> (Z, W, M) -> Y`` with

* ``(X1, X2, U) ~ MVN((0.25, 0.25, 0), Sigma)``
* ``A ~ Bernoulli(expit(a0 + a_x'X + a_u U))``
* ``Z, W, M, Y`` linear-Gaussian in their parents.

Scenarios misspecify subsets of the bridge models by fitting them on
``X* = sqrt(|X|) + 3`` instead of ``X``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from .bootstrap import BootstrapResult, bootstrap_many
from .bridges import BridgeParams, star_transform
from .data import Dataset
from .errors import ConfigError, DomainError
from .estimators import normalize_method, point_estimates_isolated


@dataclass(frozen=True)
class DgpCoefficients:
    mean: tuple = (0.25, 0.25, 0.0)
    cov: tuple = ((0.25, 0.0, 0.05), (0.0, 0.25, 0.05), (0.05, 0.05, 1.0))
    a_0: float = 0.0
    a_x: tuple = (-0.5, -0.5)
    a_u: float = -0.4
    z_0: float = 0.2
    z_a: float = -0.52
    z_x: tuple = (0.2, 0.2)
    z_u: float = -1.0
    z_sd: float = 1.0
    w_0: float = 0.3
    w_x: tuple = (0.2, 0.2)
    w_u: float = -0.6
    w_sd: float = 1.0
    m_0: float = 0.0
    m_a: float = -0.3
    m_x: tuple = (-0.5, -0.5)
    m_u: float = 1.5
    m_sd: float = 1.0
    y_0: float = 2.0
    y_a: float = 2.0
    y_m: float = 1.0
    y_w: float = 2.0
    y_x: tuple = (-1.0, -1.0)
    y_u: float = -1.0
    y_sd: float = 2.0

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (3, 3) or not np.allclose(cov, cov.T):
            raise ConfigError("covariance of (X1, X2, U) must be a symmetric 3x3 matrix")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ConfigError("covariance of (X1, X2, U) must be positive definite")

    def with_overrides(self, **changes) -> "DgpCoefficients":
        return replace(self, **changes)

    def _chol(self):
        return np.linalg.cholesky(np.asarray(self.cov, dtype=float))


def _latent(coef: DgpCoefficients, rng, n):
    xu = rng.standard_normal((n, 3)) @ coef._chol().T + np.asarray(coef.mean)
    x, u = xu[:, :2], xu[:, 2]
    a = (rng.random(n) < expit(coef.a_0 + x @ np.asarray(coef.a_x) + coef.a_u * u)).astype(float)
    return x, u, a


def generate(coef: DgpCoefficients, n: int, seed) -> tuple:
    """Draw ``n`` observations; returns ``(Dataset, U)``.  ``seed`` may be an int or a sequence."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    rng = np.random.default_rng(seed)
    x, u, a = _latent(coef, rng, n)
    z = coef.z_0 + coef.z_a * a + x @ np.asarray(coef.z_x) + coef.z_u * u + coef.z_sd * rng.standard_normal(n)
    w = coef.w_0 + x @ np.asarray(coef.w_x) + coef.w_u * u + coef.w_sd * rng.standard_normal(n)
    m = coef.m_0 + coef.m_a * a + x @ np.asarray(coef.m_x) + coef.m_u * u + coef.m_sd * rng.standard_normal(n)
    y = (coef.y_0 + coef.y_a * a + coef.y_m * m + coef.y_w * w + x @ np.asarray(coef.y_x) + coef.y_u * u
         + coef.y_sd * rng.standard_normal(n))
    d = Dataset(y=y, a=a, m=m, x=x, w=w, z=z, x_names=("X1", "X2"), w_names=("W",), z_names=("Z",))
    return d, u


def misspecify_x(d: Dataset) -> Dataset:
    """Copy of ``d`` with ``X`` replaced by ``(sqrt|X1| + 3, sqrt|X2| + 3)``."""
    if d.p_x != 2:
        raise DomainError(f"misspecify_x expects two covariates, found {d.p_x}")
    if d.x_transformed:
        raise ConfigError("covariates are already transformed; refusing to apply the map twice")
    return d.with_x(star_transform(d.x), transformed=True)


def true_bridge_params(coef: DgpCoefficients = DgpCoefficients()) -> BridgeParams:
    """Closed-form bridge parameters implied by the generating coefficients.

    Linear bridges follow from matching the coefficients of ``U`` in the
    conditional means.  For the exposure bridges, write the conditional log
    odds of ``A=0`` vs ``A=1`` given ``(U, X)`` as ``alpha0`` and given
    ``(U, M, X)`` as ``alpha1``; both are linear in ``U``.
    """
    ax, zx, wx = np.asarray(coef.a_x), np.asarray(coef.z_x), np.asarray(coef.w_x)
    mx, yx = np.asarray(coef.m_x), np.asarray(coef.y_x)

    b1w = coef.y_w + coef.y_u / coef.w_u
    b10 = coef.y_0 + (coef.y_w - b1w) * coef.w_0
    b1x = yx + (coef.y_w - b1w) * wx
    beta1 = np.concatenate([[b10, b1w, coef.y_m, coef.y_a], b1x])

    b0w = b1w + coef.y_m * coef.m_u / coef.w_u
    shift = b1w - b0w
    b00 = b10 + shift * coef.w_0 + coef.y_m * coef.m_0
    b0x = b1x + shift * wx + coef.y_m * mx
    beta0 = np.concatenate([[b00 + coef.y_a, b0w], b0x, [b00, b0w], b0x])

    # log f(A=0|U,X)/f(A=1|U,X)
    al0_0, al0_u, al0_x = -coef.a_0, -coef.a_u, -ax
    s2 = coef.m_sd ** 2
    # log f(A=0|U,M,X)/f(A=1|U,M,X)
    al1_0 = coef.m_a / s2 * (coef.m_a / 2 + coef.m_0) + al0_0
    al1_m = -coef.m_a / s2
    al1_u = coef.m_a * coef.m_u / s2 + al0_u
    al1_x = coef.m_a * mx / s2 + al0_x

    sz2 = coef.z_sd ** 2
    g0z = al0_u / coef.z_u
    g00 = al0_0 - g0z * (coef.z_0 - g0z * sz2 / 2)
    g0x = al0_x - g0z * zx
    gamma0 = np.concatenate([[g00, g0z], g0x])

    delta = (al1_u - al0_u) / coef.z_u
    g1z = delta + g0z
    g10 = g00 + al1_0 - al0_0 - delta * (coef.z_0 + coef.z_a) - delta ** 2 * sz2 / 2
    g1x = g0x + al1_x - al0_x - delta * zx
    gamma1 = np.concatenate([[g10, g1z, al1_m], g1x])
    return BridgeParams(1, 2, 1, beta1=beta1, beta0=beta0, gamma0=gamma0, gamma1=gamma1)


# ----------------------------------------------------------------------------
# counterfactual oracle
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleTruth:
    psi: float
    piie: float
    mean_y: float
    mean_a: float
    se_psi: float
    se_piie: float
    se_mean_y: float
    se_mean_a: float
    draws: int


def oracle_truth(coef: DgpCoefficients = DgpCoefficients(), draws: int = 10**6, seed=0,
                 chunk: int = 10**6) -> OracleTruth:
    """Monte Carlo truth for ``psi = E[Y(A, M(0))]`` and the PIIE.

    ``M(A)`` and ``M(0)`` share their noise, and both outcomes share ``W`` and
    the outcome noise, so the PIIE has a small simulation error.
    """
    if draws < 1:
        raise ConfigError("draws must be positive")
    sums = np.zeros((4, 2))  # rows: y, psi, piie, a ; cols: sum, sum of squares
    done = 0
    k = 0
    while done < draws:
        size = min(chunk, draws - done)
        rng = np.random.default_rng([int(s) for s in np.atleast_1d(seed)] + [k])
        x, u, a = _latent(coef, rng, size)
        w = coef.w_0 + x @ np.asarray(coef.w_x) + coef.w_u * u + coef.w_sd * rng.standard_normal(size)
        base_m = coef.m_0 + x @ np.asarray(coef.m_x) + coef.m_u * u + coef.m_sd * rng.standard_normal(size)
        m_obs = base_m + coef.m_a * a
        rest = (coef.y_0 + coef.y_a * a + coef.y_w * w + x @ np.asarray(coef.y_x) + coef.y_u * u
                + coef.y_sd * rng.standard_normal(size))
        y_obs = rest + coef.y_m * m_obs
        y_cf = rest + coef.y_m * base_m
        for row, v in enumerate((y_obs, y_cf, y_obs - y_cf, a)):
            sums[row, 0] += v.sum()
            sums[row, 1] += (v * v).sum()
        done += size
        k += 1
    mean = sums[:, 0] / draws
    var = np.maximum(sums[:, 1] / draws - mean ** 2, 0.0)
    se = np.sqrt(var / draws)
    return OracleTruth(psi=float(mean[1]), piie=float(mean[2]), mean_y=float(mean[0]), mean_a=float(mean[3]),
                       se_psi=float(se[1]), se_piie=float(se[2]), se_mean_y=float(se[0]),
                       se_mean_a=float(se[3]), draws=int(draws))


# ----------------------------------------------------------------------------
# scenarios
# ----------------------------------------------------------------------------

SCENARIOS = {
    1: frozenset(),
    2: frozenset({"q1", "q0"}),
    3: frozenset({"q1", "h0"}),
    4: frozenset({"h1", "h0"}),
}

ALL_ESTIMATORS = ("DR", "P-OR", "P-HYBRID", "P-IPW", "P-MR")

# Published Monte Carlo results (bias, mse, coverage, length) for n=1000, 500 replications.
PAPER_TABLE1 = {
    1: {"DR": (-0.09, 0.01, 0.332, 0.15), "P-OR": (-0.00, 0.01, 0.982, 0.37),
        "P-HYBRID": (-0.00, 0.01, 0.980, 0.40), "P-IPW": (-0.00, 0.01, 0.954, 0.38),
        "P-MR": (-0.01, 0.01, 0.964, 0.42)},
    2: {"DR": (-0.09, 0.01, 0.336, 0.15), "P-OR": (0.00, 0.01, 0.984, 0.38),
        "P-HYBRID": (0.23, 0.06, 0.098, 0.42), "P-IPW": (0.12, 0.03, 0.466, 0.39),
        "P-MR": (0.01, 0.01, 0.956, 0.44)},
    3: {"DR": (-0.09, 0.01, 0.304, 0.15), "P-OR": (0.09, 0.02, 0.508, 0.37),
        "P-HYBRID": (-0.00, 0.01, 0.974, 0.40), "P-IPW": (-0.05, 0.11, 0.414, 0.39),
        "P-MR": (0.00, 0.02, 0.950, 0.43)},
    4: {"DR": (-0.10, 0.01, 0.282, 0.15), "P-OR": (0.11, 0.02, 0.424, 0.38),
        "P-HYBRID": (0.07, 0.02, 0.722, 0.41), "P-IPW": (0.00, 0.01, 0.956, 0.40),
        "P-MR": (-0.00, 0.01, 0.952, 0.44)},
}

PRESETS = {
    "fast": {"R": 100, "B": 200, "tolerance_scale": 2.0},
    "paper": {"R": 500, "B": 500, "tolerance_scale": 1.0},
}


@dataclass(frozen=True)
class ScenarioSpec:
    id: int
    misspecified: frozenset = frozenset()
    coef: DgpCoefficients = field(default_factory=DgpCoefficients)

    @classmethod
    def from_id(cls, sid: int, coef: Optional[DgpCoefficients] = None) -> "ScenarioSpec":
        try:
            sid = int(sid)
        except (TypeError, ValueError):
            raise ConfigError(f"scenario id must be an integer 1-4, got {sid!r}") from None
        if sid not in SCENARIOS:
            raise ConfigError(f"unknown scenario {sid}; valid ids are 1, 2, 3, 4")
        return cls(sid, SCENARIOS[sid], coef or DgpCoefficients())


@dataclass(frozen=True)
class EstimatorSummary:
    bias: float
    mse: float
    coverage: float
    length: float
    n_ok: int
    n_failed: int
    n_approximate: int = 0


@dataclass
class McSummary:
    scenario: int
    R: int
    n: int
    B: int
    seed: int
    truth: float
    rows: dict
    estimates: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    invalid: bool = False
    root_policy: str = "nearest"

    def failure_fraction(self, method) -> float:
        return self.rows[method].n_failed / self.R if self.R else 0.0


def _fmt(v):
    return "nan" if not math.isfinite(v) else repr(float(v))


def _replication(spec: ScenarioSpec, n: int, B: int, seed: int, r: int, methods: tuple, transform_name: str,
                 root_policy: str = "nearest"):
    transform = misspecify_x if transform_name == "misspecify_x" else None
    d, _ = generate(spec.coef, n, [seed, r])
    points, _ = point_estimates_isolated(d, methods, spec.misspecified, transform=transform,
                                         root_policy=root_policy)
    boots = {}
    if B > 0 and points:
        boots = bootstrap_many(d, list(points), B, [seed, r, 1], spec.misspecified, transform=transform,
                               root_policy=root_policy, strict=False)
    mean_y = float(d.y.mean())
    out = {}
    for m in methods:
        est = points.get(m)
        if est is None:
            out[m] = None
            continue
        value = mean_y - est.psi
        approx = float(any(v for k, v in est.diagnostics.items() if k.endswith("_approximate")))
        if B > 0:
            res = boots.get(m)
            if not isinstance(res, BootstrapResult):
                out[m] = None
                continue
            out[m] = (value, res.ci_lo, res.ci_hi, approx)
        else:
            out[m] = (value, float("nan"), float("nan"), approx)
    return r, out


def _replications(args):
    spec, n, B, seed, rs, methods, tname, policy = args
    return [_replication(spec, n, B, seed, r, methods, tname, policy) for r in rs]


def run_scenario(s: ScenarioSpec, R: int = 500, n: int = 1000, B: int = 500, seed: int = 0,
                 estimators=ALL_ESTIMATORS, workers: int = 1, truth: Optional[float] = None,
                 oracle_draws: int = 2 * 10**6, root_policy: str = "nearest") -> McSummary:
    """Monte Carlo evaluation of the requested estimators in one scenario.

    Replication ``r`` draws its data from the stream ``(seed, r)`` and its
    bootstrap replicates from ``(seed, r, 1, b)``.  Failed replications are
    excluded per estimator; a failure fraction above 10% marks the summary
    invalid.  Exposure bridges use ``root_policy`` (default ``"nearest"``,
    because at n=1000 the q1 equations have no exact root in a few percent
    of samples); replications that needed the fallback are counted in
    ``n_approximate``.
    """
    if R < 1:
        raise ConfigError("R must be at least 1")
    methods = tuple(normalize_method(m) for m in estimators)
    if "DML-MR" in methods:
        raise ConfigError("DML-MR is not part of the scenario study")
    if truth is None:
        truth = oracle_truth(s.coef, oracle_draws, [seed, 10**9]).piie
    tname = "misspecify_x"
    rs = list(range(R))
    if workers and workers > 1:
        chunks = [(s, n, B, seed, rs[k::workers], methods, tname, root_policy) for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [x for part in pool.map(_replications, chunks) for x in part]
    else:
        results = _replications((s, n, B, seed, rs, methods, tname, root_policy))
    results.sort(key=lambda t: t[0])

    rows, estimates, failures = {}, {}, {}
    invalid = False
    for m in methods:
        vals = [res[m] for _, res in results if res[m] is not None]
        n_failed = R - len(vals)
        failures[m] = n_failed
        if n_failed > 0.1 * R:
            invalid = True
        full = np.array(vals, dtype=float).reshape(-1, 4)
        arr = full[:, :3]
        estimates[m] = arr
        if arr.shape[0] == 0:
            rows[m] = EstimatorSummary(float("nan"), float("nan"), float("nan"), float("nan"), 0, n_failed)
            continue
        err = arr[:, 0] - truth
        cover = (arr[:, 1] <= truth) & (truth <= arr[:, 2])
        rows[m] = EstimatorSummary(
            bias=float(err.mean()),
            mse=float((err ** 2).mean()),
            coverage=float(cover.mean()) if B > 0 else float("nan"),
            length=float((arr[:, 2] - arr[:, 1]).mean()) if B > 0 else float("nan"),
            n_ok=int(arr.shape[0]),
            n_failed=n_failed,
            n_approximate=int(full[:, 3].sum()),
        )
    return McSummary(s.id, R, n, B, int(seed), float(truth), rows, estimates, failures, invalid, root_policy)


# ----------------------------------------------------------------------------
# output
# ----------------------------------------------------------------------------

TABLE_FIELDS = ("scenario", "estimator", "bias", "mse", "coverage", "length", "n_ok", "n_failed",
                "n_approximate", "config_hash", "seed")


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def table_csv(summaries, chash: str) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_FIELDS)
    for s in summaries:
        for m, row in s.rows.items():
            writer.writerow([s.scenario, m, _fmt(row.bias), _fmt(row.mse), _fmt(row.coverage), _fmt(row.length),
                             row.n_ok, row.n_failed, row.n_approximate, chash, s.seed])
    return buf.getvalue()


def provenance(summaries, config: dict, chash: str, preset: Optional[str] = None) -> dict:
    scale = PRESETS[preset]["tolerance_scale"] if preset in PRESETS else 1.0
    return {
        "config_hash": chash,
        "config": config,
        "preset": preset,
        "tolerance_scale": scale,
        "widened_tolerances": scale != 1.0,
        "scenarios": [
            {"scenario": s.scenario, "R": s.R, "n": s.n, "B": s.B, "seed": s.seed, "truth_piie": s.truth,
             "failures": s.failures, "invalid": s.invalid, "root_policy": s.root_policy,
             "approximate_fits": {m: r.n_approximate for m, r in s.rows.items()}}
            for s in summaries
        ],
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def compare_to_paper(summary: McSummary, tolerance_scale: float = 1.0) -> list:
    """Rows ``(estimator, metric, observed, published, tolerance, passed)``."""
    out = []
    for m, row in summary.rows.items():
        ref = PAPER_TABLE1.get(summary.scenario, {}).get(m)
        if ref is None:
            continue
        wide = m == "DR"
        tols = {"bias": 0.03 if wide else 0.02, "coverage": 0.10 if wide else 0.04, "length": 0.06}
        observed = {"bias": row.bias, "coverage": row.coverage, "length": row.length}
        published = {"bias": ref[0], "coverage": ref[2], "length": ref[3]}
        for metric, tol in tols.items():
            if wide and metric == "length":
                continue
            tol = tol * tolerance_scale
            obs = observed[metric]
            ok = math.isfinite(obs) and abs(obs - published[metric]) <= tol + 1e-12
            out.append((m, metric, obs, published[metric], tol, ok))
    return out


def summary_to_dict(s: McSummary) -> dict:
    return {"scenario": s.scenario, "R": s.R, "n": s.n, "B": s.B, "seed": s.seed, "truth": s.truth,
            "invalid": s.invalid, "root_policy": s.root_policy, "rows": {m: asdict(r) for m, r in s.rows.items()}}
