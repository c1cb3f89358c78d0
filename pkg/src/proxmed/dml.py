"""Cross-fitted multiply robust estimation with kernel minimax bridge learners.

Each bridge solves a conditional moment restriction ``E[t - b h(H) | G] = 0``:

=========  ======  ==============  =============  =============
role       b       t               h inputs       g inputs
=========  ======  ==============  =============  =============
h1         1       Y               (W, M, A, X)   (Z, A, M, X)
h0_a{a}    1       h1(W, M, a, X)  (W, X)         (Z, X)         (A=0 rows)
q0         1 - A   A               (Z, X)         (W, X)
q1         A       (1 - A) q0      (Z, M, X)      (W, M, X)
=========  ======  ==============  =============  =============

Both the bridge class and the adversary class are Gaussian RKHS balls spanned
by kernels centred at a common set of anchor rows.  With
``h = Phi_H alpha`` and ``g = Phi_G beta`` the penalised game::

    min_h max_g  E_n[(t - b h) g - g^2] - lam_g |g|^2 + lam_h |h|^2

has the inner maximum in closed form and the outer problem becomes the linear
system ``(S' P^-1 S / 4 + lam_h K_H) alpha = S' P^-1 u / 4``.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import kernels
from .data import Dataset
from .errors import ConditioningError, ConfigError, PreconditionError, ProxmedError, SolverError
from .estimators import PsiEstimate, eif_uncentered

ROLES = ("h1", "h0_a1", "h0_a0", "q0", "q1")
Q_FLOOR = 1e-6
DEFAULT_GRID = (1e-4, 1e-3, 1e-2, 1e-1)


@dataclass(frozen=True)
class FoldPlan:
    L: int
    assignment: np.ndarray
    seed: object = 0

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=int).copy()
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        if self.L < 2:
            raise PreconditionError("cross-fitting requires L >= 2")
        if a.size and (a.min() < 0 or a.max() >= self.L):
            raise ConfigError("fold labels must lie in [0, L)")

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.L)

    def relabel(self, perm) -> "FoldPlan":
        perm = np.asarray(perm, dtype=int)
        return FoldPlan(self.L, perm[self.assignment], self.seed)


def make_folds(n: int, L: int, seed=0) -> FoldPlan:
    """Random balanced partition of ``range(n)`` into ``L`` folds."""
    if not (2 <= L <= n):
        raise PreconditionError(f"need 2 <= L <= n, got L={L}, n={n}")
    rng = np.random.default_rng(_seed_list(seed) + [0x5F0D])
    labels = np.arange(n) % L
    return FoldPlan(L, rng.permutation(labels), seed)


def _seed_list(seed) -> list:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


# ----------------------------------------------------------------------------
# kernel bridges
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KernelBridge:
    """Finite kernel expansion ``h(v) = sum_j alpha_j K((v - c)/s, anchor_j)``."""

    role: str
    anchors: np.ndarray
    alpha: np.ndarray
    sigma: float
    lam_h: float
    lam_g: float
    center: np.ndarray
    scale: np.ndarray
    objective: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown kernel bridge role {self.role!r}")
        if self.anchors.shape[0] != self.alpha.shape[0]:
            raise ConfigError("dual weights and anchors differ in length")
        if not self.sigma > 0 or not self.lam_h > 0 or not self.lam_g > 0:
            raise ConfigError("bandwidth and regularisation must be positive")

    def __call__(self, inputs) -> np.ndarray:
        v = (np.asarray(inputs, dtype=float) - self.center) / self.scale
        return kernels.gaussian_gram(v, self.anchors, self.sigma) @ self.alpha

    def rkhs_norm(self) -> float:
        K = kernels.gaussian_gram(self.anchors, self.anchors, self.sigma)
        return float(math.sqrt(max(self.alpha @ K @ self.alpha, 0.0)))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.anchors, self.alpha, self.center, self.scale):
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        h.update(repr((self.role, self.sigma, self.lam_h, self.lam_g)).encode())
        return h.hexdigest()


def _role_inputs(d: Dataset, role: str, a=None):
    """(h inputs, g inputs) for ``role``; ``a`` overrides the exposure for h1."""
    if role == "h1":
        av = d.a if a is None else np.full(d.n, float(a))
        return np.column_stack([d.w, d.m, av, d.x]), np.column_stack([d.z, d.a, d.m, d.x])
    if role.startswith("h0"):
        return np.column_stack([d.w, d.x]), np.column_stack([d.z, d.x])
    if role == "q0":
        return np.column_stack([d.z, d.x]), np.column_stack([d.w, d.x])
    if role == "q1":
        return np.column_stack([d.z, d.m, d.x]), np.column_stack([d.w, d.m, d.x])
    raise ConfigError(f"unknown kernel bridge role {role!r}")


def median_bandwidth(v: np.ndarray, seed=0, max_rows: int = 300) -> float:
    """Median pairwise Euclidean distance (on at most ``max_rows`` rows)."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] > max_rows:
        rng = np.random.default_rng(_seed_list(seed) + [0xB0D])
        v = v[rng.choice(v.shape[0], max_rows, replace=False)]
    sq = (v * v).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * v @ v.T, 0.0)
    iu = np.triu_indices(v.shape[0], 1)
    med = float(np.sqrt(np.median(d2[iu]))) if iu[0].size else 1.0
    return med if med > 0 else 1.0


def _standardize(v):
    center = v.mean(axis=0)
    scale = v.std(axis=0)
    scale[scale == 0] = 1.0
    return center, scale


def _chol(A, name):
    A = 0.5 * (A + A.T)
    base = max(float(np.trace(A)) / A.shape[0], 1e-300)
    for k in range(8):
        jitter = 0.0 if k == 0 else base * 10.0 ** (k - 13)
        try:
            return cho_factor(A + jitter * np.eye(A.shape[0]), lower=True, check_finite=False), jitter
        except LinAlgError:
            continue
    raise ConditioningError(f"{name}: kernel system is not positive definite even after ridge repair")


class _System:
    """Gram blocks of one role's minimax problem on a given sample."""

    def __init__(self, H, G, b, t, anchor_idx, sigma_h, sigma_g, center_h, scale_h, center_g, scale_g):
        self.Hs = (H - center_h) / scale_h
        self.Gs = (G - center_g) / scale_g
        self.b = b
        self.t = t
        self.n = H.shape[0]
        self.anchors_h = self.Hs[anchor_idx]
        self.anchors_g = self.Gs[anchor_idx]
        self.sigma_h, self.sigma_g = sigma_h, sigma_g
        self.phi_h = kernels.gaussian_gram(self.Hs, self.anchors_h, sigma_h)
        self.phi_g = kernels.gaussian_gram(self.Gs, self.anchors_g, sigma_g)
        self.K_h = self.phi_h[anchor_idx]
        self.K_g = self.phi_g[anchor_idx]
        self.gg = self.phi_g.T @ self.phi_g / self.n
        self.S = self.phi_g.T @ (self.phi_h * b[:, None]) / self.n
        self.u = self.phi_g.T @ t / self.n

    def solve(self, lam_h, lam_g, name):
        P, _ = _chol(self.gg + lam_g * self.K_g, name)
        PS = cho_solve(P, self.S, check_finite=False)
        Pu = cho_solve(P, self.u, check_finite=False)
        M = self.S.T @ PS / 4.0 + lam_h * self.K_h
        rhs = self.S.T @ Pu / 4.0
        F, jitter = _chol(M, name)
        alpha = cho_solve(F, rhs, check_finite=False)
        if not np.all(np.isfinite(alpha)):
            raise ConditioningError(f"{name}: non-finite dual weights")
        resid = self.S @ alpha - self.u
        obj = float(resid @ cho_solve(P, resid, check_finite=False) / 4.0 + lam_h * alpha @ self.K_h @ alpha)
        return alpha, obj, jitter

    def projected_moment(self, h_values, lam_g):
        """sup over the adversary ball of the penalised moment game for fixed h values."""
        P, _ = _chol(self.gg + lam_g * self.K_g, "projected moment")
        r = self.phi_g.T @ (self.t - self.b * h_values) / self.n
        return float(r @ cho_solve(P, r, check_finite=False) / 4.0)


@dataclass(frozen=True)
class RoleHyper:
    """Hyperparameters for one role.

    Bandwidths left as ``None`` come from the median heuristic.  Penalties
    left as ``None`` are ``lam_*_scale / sqrt(n_train)``, unless
    ``select_lambda`` is set, in which case a tied level is chosen from
    ``grid / sqrt(n)`` on a held-out split.
    """

    sigma_h: Optional[float] = None
    sigma_g: Optional[float] = None
    lam_h: Optional[float] = None
    lam_g: Optional[float] = None
    grid: tuple = DEFAULT_GRID
    anchors: int = 200
    lam_h_scale: float = 1e-3
    lam_g_scale: float = 1e-2
    select_lambda: bool = False


def _role_problem(train: Dataset, role: str, h1=None, q0=None):
    H, G = _role_inputs(train, role)
    if role == "h1":
        return H, G, np.ones(train.n), train.y.copy(), np.arange(train.n)
    if role.startswith("h0"):
        rows = np.flatnonzero(train.a == 0)
        if rows.size == 0:
            raise PreconditionError(f"minimax_fit({role}): no A=0 rows in the training sample")
        if h1 is None:
            raise PreconditionError(f"minimax_fit({role}) needs a fitted h1 bridge")
        arm = 1 if role == "h0_a1" else 0
        target = h1(_role_inputs(train, "h1", a=arm)[0])
        return H[rows], G[rows], np.ones(rows.size), target[rows], rows
    if role == "q0":
        return H, G, 1.0 - train.a, train.a.copy(), np.arange(train.n)
    if q0 is None:
        raise PreconditionError("minimax_fit(q1) needs a fitted q0 bridge")
    q0v = np.maximum(q0(_role_inputs(train, "q0")[0]), Q_FLOOR)
    return H, G, train.a.copy(), (1.0 - train.a) * q0v, np.arange(train.n)


def minimax_fit(train: Dataset, role: str, hyper: Optional[RoleHyper] = None, seed=0,
                h1: Optional[KernelBridge] = None, q0: Optional[KernelBridge] = None) -> KernelBridge:
    """Fit one kernel bridge by the closed-form minimax reduction.

    Missing bandwidths use the median heuristic on standardised inputs.
    Missing penalties default to ``lam_*_scale * n^(-1/2)`` with ``n`` the
    training-fold size.  With ``hyper.select_lambda`` a tied level
    ``lam_h = lam_g`` is instead picked from ``grid * n^(-1/2)`` by the
    projected-moment criterion on a held-out fifth of the sample.
    """
    hyper = hyper or RoleHyper()
    if train.n < 2:
        raise PreconditionError(f"minimax_fit({role}): training set needs at least two rows")
    H, G, b, t, _ = _role_problem(train, role, h1, q0)
    n = H.shape[0]
    rid = ROLES.index(role)
    rng = np.random.default_rng(_seed_list(seed) + [rid])
    ch, sh = _standardize(H)
    cg, sg = _standardize(G)
    sigma_h = hyper.sigma_h or median_bandwidth((H - ch) / sh, _seed_list(seed) + [rid, 1])
    sigma_g = hyper.sigma_g or median_bandwidth((G - cg) / sg, _seed_list(seed) + [rid, 2])
    scale_n = 1.0 / math.sqrt(n)

    def anchors_for(m_rows):
        k = min(hyper.anchors, m_rows)
        return np.sort(rng.choice(m_rows, k, replace=False)) if k < m_rows else np.arange(m_rows)

    diag = {}
    if not hyper.select_lambda or (hyper.lam_h is not None and hyper.lam_g is not None):
        root = 1.0 / math.sqrt(train.n)
        lam_h = float(hyper.lam_h) if hyper.lam_h is not None else hyper.lam_h_scale * root
        lam_g = float(hyper.lam_g) if hyper.lam_g is not None else hyper.lam_g_scale * root
    else:
        grid = [g * scale_n for g in hyper.grid]
        perm = rng.permutation(n)
        n_val = max(n // 5, 1)
        val, fit = perm[:n_val], perm[n_val:]
        if fit.size < 2:
            lam_h = lam_g = grid[len(grid) // 2]
        else:
            sys_fit = _System(H[fit], G[fit], b[fit], t[fit], anchors_for(fit.size), sigma_h, sigma_g, ch, sh, cg, sg)
            sys_val = _System(H[val], G[val], b[val], t[val], anchors_for(val.size), sigma_h, sigma_g,
                              ch, sh, cg, sg)
            ref = grid[len(grid) // 2]
            scores = []
            for lam in grid:
                lh = hyper.lam_h if hyper.lam_h is not None else lam
                lg = hyper.lam_g if hyper.lam_g is not None else lam
                try:
                    alpha, _, _ = sys_fit.solve(lh, lg, f"minimax_fit({role})")
                except ConditioningError:
                    scores.append(float("inf"))
                    continue
                hv = kernels.gaussian_gram(sys_val.Hs, sys_fit.anchors_h, sigma_h) @ alpha
                scores.append(sys_val.projected_moment(hv, ref))
            best = int(np.argmin(scores))
            if not np.isfinite(scores[best]):
                raise ConditioningError(f"minimax_fit({role}): every regularisation level failed")
            lam_h = float(hyper.lam_h) if hyper.lam_h is not None else grid[best]
            lam_g = float(hyper.lam_g) if hyper.lam_g is not None else grid[best]
            diag["lambda_scores"] = scores
    system = _System(H, G, b, t, anchors_for(n), sigma_h, sigma_g, ch, sh, cg, sg)
    alpha, obj, jitter = system.solve(lam_h, lam_g, f"minimax_fit({role})")
    diag.update({"jitter": jitter, "n_train": n})
    return KernelBridge(role, system.anchors_h, alpha, float(sigma_h), lam_h, lam_g, ch, sh, obj, diag)


def minimax_objective(train: Dataset, role: str, h_values, sigma_g: Optional[float] = None,
                      lam_g: float = 1e-3, h1=None, q0=None, anchors: int = 400, seed=0) -> float:
    """Inner supremum of the minimax game for a fixed vector of bridge values.

    ``h_values`` are the candidate bridge evaluated on the role's sample rows
    (the A=0 rows for the h0 roles).
    """
    H, G, b, t, _ = _role_problem(train, role, h1, q0)
    h_values = np.asarray(h_values, dtype=float)
    if h_values.shape != (H.shape[0],):
        raise ConfigError(f"h_values must have length {H.shape[0]}")
    cg, sg = _standardize(G)
    ch, sh = _standardize(H)
    rid = ROLES.index(role)
    sigma_g = sigma_g or median_bandwidth((G - cg) / sg, _seed_list(seed) + [rid, 2])
    rng = np.random.default_rng(_seed_list(seed) + [rid])
    k = min(anchors, H.shape[0])
    idx = np.sort(rng.choice(H.shape[0], k, replace=False)) if k < H.shape[0] else np.arange(k)
    system = _System(H, G, b, t, idx, 1.0, sigma_g, ch, sh, cg, sg)
    return system.projected_moment(h_values, lam_g)


class KernelBridgeSet:
    """The five fitted kernel bridges, evaluated like a :class:`BridgeParams`."""

    def __init__(self, bridges: dict):
        missing = [r for r in ROLES if r not in bridges]
        if missing:
            raise ConfigError(f"missing kernel bridges: {missing}")
        self.bridges = dict(bridges)

    def h1(self, d: Dataset, a=None) -> np.ndarray:
        return self.bridges["h1"](_role_inputs(d, "h1", a)[0])

    def h0(self, d: Dataset, a=None) -> np.ndarray:
        inputs = _role_inputs(d, "h0_a1")[0]
        if a is None:
            return np.where(d.a == 1, self.bridges["h0_a1"](inputs), self.bridges["h0_a0"](inputs))
        return self.bridges["h0_a1" if a == 1 else "h0_a0"](inputs)

    def _floor(self, q, stats):
        low = q < Q_FLOOR
        if stats is not None and low.any():
            stats["clipped"] = stats.get("clipped", 0) + int(low.sum())
        return np.maximum(q, Q_FLOOR)

    def q0(self, d: Dataset, stats=None) -> np.ndarray:
        return self._floor(self.bridges["q0"](_role_inputs(d, "q0")[0]), stats)

    def q1(self, d: Dataset, stats=None) -> np.ndarray:
        return self._floor(self.bridges["q1"](_role_inputs(d, "q1")[0]), stats)

    def checksums(self) -> dict:
        return {r: b.checksum() for r, b in self.bridges.items()}


def parse_hyper(hyper) -> dict:
    """Normalise a hyperparameter spec into ``{role: RoleHyper}``."""
    if hyper is None:
        return {r: RoleHyper() for r in ROLES}
    if isinstance(hyper, RoleHyper):
        return {r: hyper for r in ROLES}
    out = {}
    for r in ROLES:
        value = hyper.get(r, hyper.get(r.split("_")[0], RoleHyper()))
        out[r] = value if isinstance(value, RoleHyper) else RoleHyper(**value)
    return out


def fit_kernel_bridges(train: Dataset, hyper=None, seed=0) -> KernelBridgeSet:
    """Fit all five bridges in nesting order: h1, then the two h0 arms, q0, then q1."""
    hyper = parse_hyper(hyper)
    fitted = {}
    for role in ROLES:
        try:
            fitted[role] = minimax_fit(train, role, hyper[role], seed, h1=fitted.get("h1"), q0=fitted.get("q0"))
        except ProxmedError as exc:
            raise type(exc)(f"role {role}: {exc}") from exc
    return KernelBridgeSet(fitted)


def fit_fold_bridges(d: Dataset, plan: FoldPlan, fold: int, hyper=None, seed=0,
                     fitter: Optional[Callable] = None):
    """Bridges trained on every fold except ``fold``.

    The learners are seeded with ``seed`` alone, not the fold label, so the
    fitted bridges depend only on the training rows: relabelling folds or
    editing the held-out fold cannot change them.
    """
    train = d.take(np.flatnonzero(plan.assignment != fold))
    if fitter is not None:
        return fitter(train)
    return fit_kernel_bridges(train, hyper, seed)


def _residual_moments(test: Dataset, bridges) -> dict:
    h1_obs = bridges.h1(test)
    untreated = 1.0 - test.a
    q0 = bridges.q0(test)
    q1 = bridges.q1(test)
    h0_res = (untreated * (bridges.h1(test, a=1) - bridges.h0(test, a=1)) ** 2
              + untreated * (bridges.h1(test, a=0) - bridges.h0(test, a=0)) ** 2)
    return {
        "h1": float(np.mean((test.y - h1_obs) ** 2)),
        "h0": float(np.mean(h0_res)),
        "q0": float(np.mean((untreated * q0 - test.a) ** 2)),
        "q1": float(np.mean((test.a * q1 - untreated * q0) ** 2)),
    }


def _fold_task(args):
    d, plan, fold, hyper, seed, fitter = args
    try:
        bridges = fit_fold_bridges(d, plan, fold, hyper, seed, fitter)
    except ProxmedError as exc:
        raise SolverError(f"fold {fold}: {exc}") from exc
    idx = np.flatnonzero(plan.assignment == fold)
    test = d.take(idx)
    stats = {}
    terms = eif_uncentered(test, bridges, stats)
    return fold, idx, terms, _residual_moments(test, bridges), stats


def psi_dml(d: Dataset, L: int = 5, hyper=None, seed=0, folds: Optional[FoldPlan] = None,
            fitter: Optional[Callable] = None, workers: int = 1, second_moment_cap: float = 1e4) -> PsiEstimate:
    """Cross-fitted P-MR estimate: fold-wise plug-in of the EIF, averaged over folds.

    ``fitter(train) -> bridges`` replaces the kernel learners, e.g. to inject
    known bridge functions.  The standard error of psi uses the sample SD of
    the influence-function values; ``diagnostics["piie_se"]`` uses the PIIE
    influence function ``Y - mean(Y) - IF_psi``.
    """
    plan = folds if folds is not None else None
    if plan is None:
        if L < 2:
            raise PreconditionError("cross-fitting requires L >= 2")
        if d.n < 10 * L:
            raise PreconditionError(f"psi_dml needs n >= 10 L (n={d.n}, L={L})")
        plan = make_folds(d.n, L, seed)
    if plan.assignment.shape[0] != d.n:
        raise ConfigError("fold plan length does not match the dataset")
    tasks = [(d, plan, k, hyper, seed, fitter) for k in range(plan.L)]
    if workers and workers > 1 and fitter is None:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fold_task, tasks))
    else:
        results = [_fold_task(t) for t in tasks]

    fold_psi = np.array([terms.mean() for _, _, terms, _, _ in results])
    psi = float(fold_psi.mean())
    per_obs = np.empty(d.n)
    diag = {}
    clipped = 0
    for fold, idx, terms, moments, stats in results:
        per_obs[idx] = terms - psi
        diag[f"fold{fold}_psi"] = float(terms.mean())
        for key, value in moments.items():
            diag[f"fold{fold}_m2_{key}"] = value
            if value > second_moment_cap:
                diag["second_moment_warning"] = 1.0
                warnings.warn(f"fold {fold}: residual second moment of {key} is {value:.3g} "
                              f"(cap {second_moment_cap:.3g})", RuntimeWarning, stacklevel=2)
        clipped += stats.get("clipped", 0)
    diag["q_clipped"] = float(clipped)
    se = float(np.std(per_obs, ddof=1) / math.sqrt(d.n))
    infl = d.y - d.y.mean() - per_obs
    diag["psi_se"] = se
    diag["piie_se"] = float(np.std(infl, ddof=1) / math.sqrt(d.n))
    return PsiEstimate(psi, "DML-MR", per_obs_if=per_obs, diagnostics=diag)
