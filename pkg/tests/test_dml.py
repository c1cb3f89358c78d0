import warnings

import numpy as np
import pytest

from proxmed import kernels
from proxmed.bridges import fit_h1, h1_design
from proxmed.dml import (
    FoldPlan,
    KernelBridge,
    RoleHyper,
    _role_inputs,
    _standardize,
    fit_fold_bridges,
    fit_kernel_bridges,
    make_folds,
    minimax_fit,
    minimax_objective,
    psi_dml,
)
from proxmed.errors import ConfigError, PreconditionError
from proxmed.estimators import psi_pmr
from proxmed.sim import generate, true_bridge_params

from helpers import noiseless_dataset

FAST = RoleHyper(anchors=60)


@pytest.fixture(scope="module")
def small(coef):
    d, _ = generate(coef, 300, 21)
    return d


def test_fold_sizes():
    assert sorted(make_folds(10, 5, 0).sizes) == [2] * 5
    assert sorted(make_folds(11, 5, 0).sizes) == [2, 2, 2, 2, 3]


def test_folds_are_deterministic():
    np.testing.assert_array_equal(make_folds(97, 4, 3).assignment, make_folds(97, 4, 3).assignment)
    assert not np.array_equal(make_folds(97, 4, 3).assignment, make_folds(97, 4, 4).assignment)


def test_fold_range_checks():
    with pytest.raises(PreconditionError):
        make_folds(10, 1, 0)
    with pytest.raises(PreconditionError):
        make_folds(3, 5, 0)
    with pytest.raises(ConfigError):
        FoldPlan(2, np.array([0, 1, 2]))


def test_psi_dml_preconditions(small):
    with pytest.raises(PreconditionError):
        psi_dml(small, L=1)
    with pytest.raises(PreconditionError):
        psi_dml(small.take(np.arange(40)), L=5)


def test_h1_recovers_noiseless_linear_truth():
    d = noiseless_dataset(n=500, seed=1, y_coef=(1.0, 2.0, 1.5, 0.7, -1.0, 0.5))
    beta, _ = fit_h1(d)
    linear = h1_design(d) @ beta
    kb = minimax_fit(d, "h1", RoleHyper(lam_h=1e-8, lam_g=1e-8, anchors=500))
    fitted = kb(_role_inputs(d, "h1")[0])
    assert np.sqrt(np.mean((fitted - linear) ** 2)) <= 0.05


def test_infinite_shrinkage_zeroes_the_bridge(small):
    kb = minimax_fit(small, "h1", RoleHyper(lam_h=1e12, lam_g=1e-3, anchors=60))
    assert np.abs(kb.alpha).max() < 1e-8
    assert np.abs(kb(_role_inputs(small, "h1")[0])).max() < 1e-8


def test_shrinkage_is_monotone(small):
    norms = [minimax_fit(small, "q0", RoleHyper(lam_h=lam, lam_g=1e-3, anchors=60)).rkhs_norm()
             for lam in (1e-4, 1e-3, 1e-2, 1e-1, 1.0)]
    assert all(a >= b - 1e-12 for a, b in zip(norms, norms[1:]))


@pytest.mark.parametrize("role", ["h1", "q0"])
def test_objective_is_smallest_at_true_bridge(coef, role):
    d, _ = generate(coef, 10_000, 3)
    p = true_bridge_params(coef)
    truth = p.h1(d) if role == "h1" else p.q0(d)
    H, _ = _role_inputs(d, role)
    center, scale = _standardize(H)
    Hs = (H - center) / scale
    base = minimax_objective(d, role, truth, lam_g=1e-3)
    rng = np.random.default_rng(0)
    for _ in range(4):
        # K(., v0) has unit RKHS norm
        delta = kernels.gaussian_gram(Hs, Hs[rng.integers(d.n)][None, :], 1.0)[:, 0]
        for sign in (1.0, -1.0):
            assert base <= minimax_objective(d, role, truth + sign * delta, lam_g=1e-3)


def test_kernel_bridge_invariants():
    with pytest.raises(ConfigError):
        KernelBridge("h1", np.zeros((3, 2)), np.zeros(2), 1.0, 1.0, 1.0, np.zeros(2), np.ones(2))
    with pytest.raises(ConfigError):
        KernelBridge("h1", np.zeros((2, 2)), np.zeros(2), 0.0, 1.0, 1.0, np.zeros(2), np.ones(2))
    with pytest.raises(ConfigError):
        KernelBridge("h2", np.zeros((2, 2)), np.zeros(2), 1.0, 1.0, 1.0, np.zeros(2), np.ones(2))


def test_oracle_bridges_reproduce_foldwise_pmr(coef, small):
    p = true_bridge_params(coef)
    plan = make_folds(small.n, 5, 8)
    est = psi_dml(small, folds=plan, fitter=lambda train: p)
    for k in range(5):
        test = small.take(np.flatnonzero(plan.assignment == k))
        assert est.diagnostics[f"fold{k}_psi"] == psi_pmr(test, p).psi
    assert est.psi == pytest.approx(np.mean([est.diagnostics[f"fold{k}_psi"] for k in range(5)]), abs=1e-15)


def test_fold_labels_are_exchangeable(small):
    plan = make_folds(small.n, 4, 2)
    a = psi_dml(small, folds=plan, hyper=FAST, seed=1)
    b = psi_dml(small, folds=plan.relabel([2, 0, 3, 1]), hyper=FAST, seed=1)
    assert a.psi == pytest.approx(b.psi, abs=1e-12)
    np.testing.assert_allclose(a.per_obs_if, b.per_obs_if, atol=1e-12)


def test_held_out_rows_never_reach_their_bridges(small):
    plan = make_folds(small.n, 4, 2)
    fold = 1
    before = fit_fold_bridges(small, plan, fold, FAST, seed=1).checksums()
    drop = int(np.flatnonzero(plan.assignment == fold)[3])
    keep = np.delete(np.arange(small.n), drop)
    reduced = FoldPlan(4, np.delete(plan.assignment, drop))
    after = fit_fold_bridges(small.take(keep), reduced, fold, FAST, seed=1).checksums()
    assert before == after
    other = fit_fold_bridges(small.take(keep), reduced, 0, FAST, seed=1).checksums()
    assert other != fit_fold_bridges(small, plan, 0, FAST, seed=1).checksums()


def test_dml_is_deterministic_and_reports_diagnostics(small):
    a = psi_dml(small, L=3, hyper=FAST, seed=4)
    b = psi_dml(small, L=3, hyper=FAST, seed=4)
    assert a.psi == b.psi
    assert a.diagnostics["piie_se"] > 0
    assert abs(a.per_obs_if.mean()) < 1e-10
    assert {"fold0_m2_h1", "fold0_m2_h0", "fold0_m2_q0", "fold0_m2_q1"} <= set(a.diagnostics)


def test_second_moment_cap_warns(small):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        est = psi_dml(small, L=3, hyper=FAST, seed=4, second_moment_cap=1e-9)
    assert est.diagnostics["second_moment_warning"] == 1.0
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)


def test_q_is_floored(small):
    bridges = fit_kernel_bridges(small, FAST, 0)
    assert np.all(bridges.q0(small) >= 1e-6)
    assert np.all(bridges.q1(small) >= 1e-6)


def test_lambda_selection_option(small):
    kb = minimax_fit(small, "h1", RoleHyper(anchors=60, select_lambda=True))
    assert len(kb.diagnostics["lambda_scores"]) == 4
    assert kb.lam_h == kb.lam_g
