"""Nonparametric (row-resampling) bootstrap with full-pipeline refits."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bridges import DEFAULT_BASIS, InstrumentBasis
from .data import Dataset, empirical_mean_y
from .errors import BootstrapStabilityError, ConfigError, ProxmedError

MAX_FAILED_FRACTION = 0.2


@dataclass(frozen=True)
class BootstrapResult:
    """Percentile bootstrap summary of one statistic (the PIIE for method tags)."""

    replicates: np.ndarray
    ci_lo: float
    ci_hi: float
    se: float
    n_failed: int
    n_total: int

    @property
    def n_success(self) -> int:
        return int(self.replicates.shape[0])


def _seed_tuple(seed) -> list:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def replicate_index(n: int, seed, b: int) -> np.ndarray:
    """Row indices of replicate ``b``; depends only on ``(seed, b)``."""
    rng = np.random.default_rng(_seed_tuple(seed) + [int(b)])
    return rng.integers(0, n, size=n)


def _run_chunk(d, methods, statistic, seed, misspecified, basis, indices, transform=None, root_policy="exact"):
    from .estimators import point_estimates_isolated

    out = []
    for b in indices:
        rd = d.take(replicate_index(d.n, seed, b))
        if statistic is not None:
            try:
                out.append((b, {"stat": float(statistic(rd))}))
            except (ProxmedError, FloatingPointError, np.linalg.LinAlgError):
                out.append((b, {"stat": None}))
            continue
        row = {}
        ests, _ = point_estimates_isolated(rd, methods, misspecified, basis, transform, root_policy)
        mean_y = empirical_mean_y(rd)
        for m in methods:
            est = ests.get(m)
            value = None if est is None else mean_y - est.psi
            row[m] = value if value is not None and np.isfinite(value) else None
        out.append((b, row))
    return out


def _summarize(values, n_total, label):
    reps = np.array([v for v in values if v is not None], dtype=float)
    n_failed = n_total - reps.shape[0]
    if n_failed > MAX_FAILED_FRACTION * n_total:
        raise BootstrapStabilityError(
            f"bootstrap for {label}: {n_failed} of {n_total} replicates failed bridge solving "
            f"(limit {MAX_FAILED_FRACTION:.0%}); root_policy='nearest' accepts least-squares exposure bridges",
            n_failed=n_failed, n_total=n_total)
    lo, hi = np.percentile(reps, [2.5, 97.5])
    se = float(np.std(reps, ddof=1)) if reps.shape[0] > 1 else 0.0
    reps.setflags(write=False)
    return BootstrapResult(reps, float(lo), float(hi), se, int(n_failed), int(n_total))


def _collect(d, methods, statistic, B, seed, misspecified, basis, workers, transform=None, root_policy="exact"):
    if B < 2:
        raise ConfigError(f"bootstrap needs B >= 2, got {B}")
    indices = list(range(B))
    if workers and workers > 1:
        chunks = [indices[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_chunk, d, methods, statistic, seed, misspecified, basis, c, transform,
                                   root_policy) for c in chunks if c]
            rows = [r for f in futures for r in f.result()]
    else:
        rows = _run_chunk(d, methods, statistic, seed, misspecified, basis, indices, transform, root_policy)
    rows.sort(key=lambda r: r[0])
    return [r[1] for r in rows]


def bootstrap(d: Dataset, estimator="P-MR", B: int = 500, seed=0, misspecified=frozenset(),
              basis: InstrumentBasis = DEFAULT_BASIS, workers: int = 1, root_policy: str = "exact") -> BootstrapResult:
    """Percentile bootstrap of the PIIE for a method tag, or of any callable ``statistic(Dataset)``.

    Replicate ``b`` resamples rows with the generator seeded by ``(seed, b)``,
    so results do not depend on ``workers``.
    """
    from .estimators import normalize_method

    if callable(estimator):
        rows = _collect(d, None, estimator, B, seed, misspecified, basis, workers)
        return _summarize([r["stat"] for r in rows], B, getattr(estimator, "__name__", "statistic"))
    method = normalize_method(estimator)
    return bootstrap_many(d, [method], B, seed, misspecified, basis, workers, root_policy=root_policy)[method]


def bootstrap_many(d: Dataset, methods, B: int = 500, seed=0, misspecified=frozenset(),
                   basis: InstrumentBasis = DEFAULT_BASIS, workers: int = 1, transform=None,
                   root_policy: str = "exact", strict: bool = True) -> dict:
    """Bootstrap several methods at once; every replicate fits the bridges a single time.

    A replicate whose q1 fit fails still contributes to the methods that do
    not use q1.  With ``strict`` an unstable method raises
    :class:`BootstrapStabilityError`; otherwise the exception object takes
    its place in the returned dict and the other methods are kept.
    """
    from .estimators import normalize_method

    methods = [normalize_method(m) for m in methods]
    if "DML-MR" in methods:
        raise ConfigError("DML-MR uses its influence-function standard error, not the bootstrap")
    rows = _collect(d, methods, None, B, seed, frozenset(misspecified), basis, workers, transform, root_policy)
    out = {}
    for m in methods:
        try:
            out[m] = _summarize([r[m] for r in rows], B, m)
        except BootstrapStabilityError as exc:
            if strict:
                raise
            out[m] = exc
    return out
