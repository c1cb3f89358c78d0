"""Property-based checks of invariants that hold for every dataset."""

import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from proxmed.bridges import fit_bridges
from proxmed.data import Dataset, load_csv, write_csv
from proxmed.dml import make_folds
from proxmed.errors import ProxmedError
from proxmed.estimators import eif_value, observation, piie, psi_phybrid, psi_pipw, psi_pmr, psi_por
from proxmed.sim import DgpCoefficients, generate

from helpers import noiseless_dataset, shifted

COEF = DgpCoefficients()
ESTIMATORS = (psi_por, psi_phybrid, psi_pipw, psi_pmr)

sizes = st.integers(min_value=50, max_value=200)
seeds = st.integers(min_value=0, max_value=2**31 - 1)


def fitted(d, policy="exact"):
    """Bridges at an exact sample root; invariances below rely on the moment equations holding."""
    try:
        return fit_bridges(d, root_policy=policy)
    except ProxmedError:
        assume(False)


def sample(n, seed):
    d, _ = generate(COEF, n, seed)
    assume(1 < d.n_treated < d.n - 1)
    return d


def rebuild(d, **kw):
    cols = dict(y=d.y, a=d.a, m=d.m, x=d.x, w=d.w, z=d.z)
    cols.update(kw)
    return Dataset(**cols)


@settings(max_examples=50)
@given(st.integers(20, 200), seeds)
def test_eif_has_mean_zero_at_the_estimate(n, seed):
    d = sample(n, seed)
    p = fitted(d, "nearest")
    psi = psi_pmr(d, p).psi
    values = [eif_value(observation(d, i), p, psi) for i in range(d.n)]
    assert abs(np.mean(values)) < 1e-10 * max(1.0, abs(psi))


@settings(max_examples=30)
@given(sizes, seeds, st.floats(0.1, 10), st.floats(-5, 5))
def test_affine_equivariance(n, seed, scale, shift):
    d = sample(n, seed)
    p = fitted(d)
    e = rebuild(d, y=scale * d.y + shift)
    pe = fitted(e)
    for f in ESTIMATORS:
        assert f(e, pe).psi == pytest.approx(scale * f(d, p).psi + shift, rel=1e-7, abs=1e-7)


@settings(max_examples=30)
@given(sizes, seeds, st.floats(-5, 5))
def test_shift_moves_outcome_intercepts_only(n, seed, c):
    d = sample(n, seed)
    p, ps = fitted(d), fitted(shifted(d, c))
    k0 = len(p.beta0) // 2
    db1, db0 = ps.beta1 - p.beta1, ps.beta0 - p.beta0
    np.testing.assert_allclose(db1, np.eye(len(db1))[0] * c, atol=1e-7)
    np.testing.assert_allclose(db0, (np.eye(2 * k0)[0] + np.eye(2 * k0)[k0]) * c, atol=1e-7)
    np.testing.assert_array_equal(ps.gamma1, p.gamma1)
    assert piie(shifted(d, c), psi_pmr(shifted(d, c), ps)) == pytest.approx(piie(d, psi_pmr(d, p)), abs=1e-7)


@settings(max_examples=20)
@given(st.integers(40, 200), seeds)
def test_noiseless_estimators_agree(n, seed):
    d = noiseless_dataset(n, seed)
    p = fitted(d)
    values = [f(d, p).psi for f in ESTIMATORS[:2]] + [psi_pmr(d, p).psi]
    assert max(values) - min(values) < 1e-8


@settings(max_examples=30)
@given(sizes, seeds)
def test_covariate_column_order_is_irrelevant(n, seed):
    d = sample(n, seed)
    e = rebuild(d, x=d.x[:, ::-1])
    for f in ESTIMATORS:
        assert f(e, fitted(e)).psi == pytest.approx(f(d, fitted(d)).psi, rel=1e-8, abs=1e-8)


@settings(max_examples=30)
@given(sizes, seeds, st.randoms(use_true_random=False))
def test_row_order_is_irrelevant(n, seed, rnd):
    d = sample(n, seed)
    perm = list(range(d.n))
    rnd.shuffle(perm)
    e = d.take(np.array(perm))
    for f in ESTIMATORS:
        assert f(e, fitted(e)).psi == pytest.approx(f(d, fitted(d)).psi, rel=1e-8, abs=1e-8)


@settings(max_examples=30)
@given(sizes, seeds)
def test_exposure_bridges_are_positive(n, seed):
    d = sample(n, seed)
    p = fitted(d, "nearest")
    assert np.all(p.q0(d) > 0) and np.all(p.q1(d) > 0)


@settings(max_examples=20)
@given(st.integers(1, 60), seeds)
def test_csv_round_trip(n, seed):
    d, _ = generate(COEF, n, seed)
    path = Path(tempfile.mkdtemp()) / "d.csv"
    write_csv(d, path)
    e = load_csv(path, d.roles())
    for name in ("y", "a", "m", "x", "w", "z"):
        np.testing.assert_array_equal(getattr(e, name), getattr(d, name))
    path2 = path.with_name("again.csv")
    write_csv(e, path2)
    assert path.read_bytes() == path2.read_bytes()


@given(st.integers(2, 500), st.integers(2, 20), seeds)
def test_fold_balance(n, L, seed):
    assume(L <= n)
    plan = make_folds(n, L, seed)
    sizes_ = np.asarray(plan.sizes)
    assert sizes_.sum() == n and sizes_.max() - sizes_.min() <= 1
    np.testing.assert_array_equal(plan.assignment, make_folds(n, L, seed).assignment)
