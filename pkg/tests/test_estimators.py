import json
import math

import numpy as np
import pytest

from proxmed.bridges import BridgeParams, fit_bridges
from proxmed.data import Dataset
from proxmed.errors import BootstrapStabilityError, ConfigError, PreconditionError
from proxmed.estimators import (
    EstimateReport,
    dr_frontdoor,
    eif_value,
    estimate,
    normalize_method,
    observation,
    piie,
    point_estimates,
    psi_phybrid,
    psi_pipw,
    psi_pmr,
    psi_por,
    reports_to_csv,
    PsiEstimate,
)

from conftest import make_dataset
from helpers import noiseless_dataset


def constant_bridges(d, beta1=None, beta0=None, gamma0=None, gamma1=None):
    k1, k0 = 3 + d.p_w + d.p_x, 1 + d.p_w + d.p_x
    return BridgeParams(
        d.p_w, d.p_x, d.p_z,
        beta1=np.zeros(k1) if beta1 is None else beta1,
        beta0=np.zeros(2 * k0) if beta0 is None else beta0,
        gamma0=np.zeros(1 + d.p_z + d.p_x) if gamma0 is None else gamma0,
        gamma1=np.zeros(2 + d.p_z + d.p_x) if gamma1 is None else gamma1,
    )


def h1_only_a(d, v1, v0):
    b = np.zeros(3 + d.p_w + d.p_x)
    b[0] = v0
    b[2 + d.p_w] = v1 - v0
    return b


def test_por_constant_bridge():
    d = make_dataset()
    k0 = 1 + d.p_w + d.p_x
    beta0 = np.zeros(2 * k0)
    beta0[0] = beta0[k0] = 2.5
    assert psi_por(d, constant_bridges(d, beta0=beta0)).psi == pytest.approx(2.5)


def test_por_two_point():
    d = make_dataset(n=2)
    d = Dataset(y=[0, 0], a=[0, 1], m=[0, 0], x=np.zeros((2, 2)), w=[[0.0], [0.0]], z=[[0.0], [0.0]])
    k0 = 1 + d.p_w + d.p_x
    beta0 = np.zeros(2 * k0)
    beta0[0], beta0[k0] = 3.0, 1.0
    assert psi_por(d, constant_bridges(d, beta0=beta0)).psi == pytest.approx(2.0)


def test_hybrid_all_treated_is_zero():
    d = make_dataset()
    d1 = Dataset(y=d.y, a=np.ones(d.n), m=d.m, x=d.x, w=d.w, z=d.z)
    assert psi_phybrid(d1, constant_bridges(d1, beta1=h1_only_a(d1, 4, 1))).psi == 0.0


def test_hybrid_hand_expansion():
    d = make_dataset(n=80)
    n0 = int((d.a == 0).sum())
    p = constant_bridges(d, beta1=h1_only_a(d, 4.0, 1.5))
    assert psi_phybrid(d, p).psi == pytest.approx(n0 / d.n * 5.5, abs=1e-12)


def test_ipw_reductions():
    d = make_dataset()
    d0 = Dataset(y=d.y, a=np.zeros(d.n), m=d.m, x=d.x, w=d.w, z=d.z)
    p = constant_bridges(d, gamma0=[0.7, 0.1, 0.2, 0.3], gamma1=[0.1, 0.2, 0.3, 0.4, 0.5])
    assert psi_pipw(d0, p).psi == pytest.approx(d.y.mean())
    # q1 = q0 * exp(eta1) is identically 1 when both exponents vanish
    assert psi_pipw(d, constant_bridges(d)).psi == pytest.approx(d.y.mean())


def _eif_fixture():
    d = make_dataset(n=4)
    return constant_bridges(d, beta1=np.array([0.5, 1.0, -0.4, 0.8, 0.3, -0.2]),
                            beta0=np.array([1.0, 0.2, 0.1, -0.3, 0.4, -0.5, 0.6, 0.7]),
                            gamma0=[0.1, 0.2, 0.3, 0.4], gamma1=[0.1, -0.2, 0.3, 0.2, 0.1]), d


def test_eif_treated_observation_vanishes():
    p, d = _eif_fixture()
    w, m, x = np.array([0.3]), 0.7, np.array([0.2, -0.1])
    y = float(p.beta1 @ np.concatenate([[1.0], w, [m, 1.0], x]))
    obs = observation(Dataset(y=[y], a=[1], m=[m], x=[x], w=[w], z=[[0.5]]), 0)
    psi = float(p.beta0_arm(1) @ np.concatenate([[1.0], w, x]))
    assert eif_value(obs, p, psi) == pytest.approx(0.0, abs=1e-12)


def test_eif_untreated_observation_vanishes():
    d = make_dataset(n=4)
    w, m, x = np.array([0.3]), 0.7, np.array([0.2, -0.1])
    beta1 = np.array([0.5, 1.0, -0.4, 0.8, 0.3, -0.2])
    h1_1 = beta1 @ np.concatenate([[1.0], w, [m, 1.0], x])
    h1_0 = beta1 @ np.concatenate([[1.0], w, [m, 0.0], x])
    # choose h0 intercepts so that h0(W,a,X) equals h1(W,M,a,X) at this point
    beta0 = np.array([h1_1 - 0.2 * 0.3, 0.2, 0.0, 0.0, h1_0 - 0.2 * 0.3, 0.2, 0.0, 0.0])
    p = constant_bridges(d, beta1=beta1, beta0=beta0, gamma0=[0.3, 0.1, 0.2, 0.1])
    obs = observation(Dataset(y=[h1_0], a=[0], m=[m], x=[x], w=[w], z=[[0.5]]), 0)
    assert eif_value(obs, p, h1_0) == pytest.approx(0.0, abs=1e-12)


def test_eif_affine_in_psi():
    p, d = _eif_fixture()
    obs = observation(d, 2)
    base = eif_value(obs, p, 0.4)
    assert eif_value(obs, p, 0.4 + 1.25) == pytest.approx(base - 1.25, abs=1e-14)


def test_pmr_if_mean_zero(sim1000):
    est = psi_pmr(sim1000, fit_bridges(sim1000))
    assert abs(est.per_obs_if.mean()) < 1e-10
    assert est.per_obs_if.shape == (sim1000.n,)


def test_pmr_equals_por_when_corrections_vanish():
    d = noiseless_dataset()
    p = fit_bridges(d)
    assert psi_pmr(d, p).psi == pytest.approx(psi_por(d, p).psi, abs=1e-8)
    assert psi_phybrid(d, p).psi == pytest.approx(psi_por(d, p).psi, abs=1e-8)


def test_piie_arithmetic():
    d = Dataset(y=[4.0, 6.0], a=[0, 1], m=[0, 0], x=np.zeros((2, 0)), w=[[0.0], [1.0]], z=[[0.0], [1.0]])
    assert piie(d, PsiEstimate(4.8, "P-OR")) == pytest.approx(0.2)
    assert piie(d, PsiEstimate(5.0, "P-OR")) == 0.0


def test_dr_collapses_when_mediator_is_independent():
    rng = np.random.default_rng(3)
    n = 4000
    x = rng.normal(size=(n, 2))
    w, z = rng.normal(size=(n, 1)), rng.normal(size=(n, 1))
    a = (rng.random(n) < 1 / (1 + np.exp(-x[:, 0]))).astype(float)
    m = rng.normal(size=n)
    y = 1.0 + 2.0 * a + m + x[:, 1] + rng.normal(size=n)
    d = Dataset(y=y, a=a, m=m, x=x, w=w, z=z)
    est = dr_frontdoor(d)
    # the plug-in with a mean-zero independent mediator reduces to the fitted E[Y | a, 0, L] averaged over P(a | L)
    assert est.psi == pytest.approx(1.0 + 2.0 * a.mean() + x[:, 1].mean(), abs=0.1)


def test_dr_null_effect_piie_near_zero():
    rng = np.random.default_rng(4)
    n = 20000
    x = rng.normal(size=(n, 2))
    w, z = rng.normal(size=(n, 1)), rng.normal(size=(n, 1))
    a = (rng.random(n) < 1 / (1 + np.exp(-x[:, 0]))).astype(float)
    m = 0.5 * a + x[:, 1] + rng.normal(size=n)
    y = 1.0 + x[:, 0] + x[:, 1] + rng.normal(size=n)
    d = Dataset(y=y, a=a, m=m, x=x, w=w, z=z)
    assert piie(d, dr_frontdoor(d)) == pytest.approx(0.0, abs=0.03)


def test_point_estimates_share_one_fit(sim1000):
    out = point_estimates(sim1000, ["P-OR", "P-HYBRID", "P-IPW", "P-MR", "DR"])
    p = fit_bridges(sim1000)
    assert out["P-OR"].psi == pytest.approx(psi_por(sim1000, p).psi, abs=1e-12)
    assert out["P-IPW"].psi == pytest.approx(psi_pipw(sim1000, p).psi, abs=1e-12)
    assert out["P-OR"].diagnostics["q0_residual"] < 1e-10
    with pytest.raises(ConfigError):
        point_estimates(sim1000, ["DML-MR"])


def test_method_aliases():
    assert normalize_method("pmr") == "P-MR"
    assert normalize_method("p_hybrid") == "P-HYBRID"
    assert normalize_method("dml") == "DML-MR"
    with pytest.raises(ConfigError):
        normalize_method("tmle")


def test_estimate_with_bootstrap(sim1000):
    (rep,) = estimate(sim1000, ["P-MR"], B=30, seed=5, root_policy="nearest")
    assert rep.ci_lo <= rep.ci_hi and rep.se > 0
    assert rep.piie_hat == pytest.approx(sim1000.y.mean() - rep.psi_hat)
    assert rep.n_boot == 30


def test_exact_policy_reports_unstable_bootstrap(sim1000):
    # on this sample several resamples admit no exact root of the q1 equations
    with pytest.raises(BootstrapStabilityError, match="9 of 30"):
        estimate(sim1000, ["P-MR"], B=30, seed=5)
    (por,) = estimate(sim1000, ["P-OR"], B=30, seed=5)
    assert por.diagnostics["bootstrap_failed"] == 0


def test_estimate_without_bootstrap_uses_influence_function(sim1000):
    por, pmr = estimate(sim1000, ["P-OR", "P-MR"], B=0)
    assert math.isnan(por.se)
    assert pmr.se > 0 and pmr.ci_lo < pmr.piie_hat < pmr.ci_hi


def test_estimate_single_arm_fails_on_q0():
    d = make_dataset()
    one = Dataset(y=d.y, a=np.ones(d.n), m=d.m, x=d.x, w=d.w, z=d.z)
    with pytest.raises(PreconditionError, match="fit_q0"):
        estimate(one, ["P-MR"], B=0)


def test_report_serialization():
    rep = EstimateReport("P-OR", 1.0, 0.5, float("nan"), float("nan"), float("nan"), 0, {"x": 1})
    doc = json.loads(rep.to_json())
    assert doc["se"] is None and doc["piie_hat"] == 0.5
    text = reports_to_csv([rep])
    assert text.splitlines()[0] == "method,psi,piie,se,ci_lo,ci_hi"
    assert text.splitlines()[1].startswith("P-OR,1.0,0.5,nan")


def test_failed_q1_only_removes_methods_that_use_it(coef):
    from proxmed.estimators import point_estimates_isolated
    from proxmed.sim import generate

    d, _ = generate(coef, 1000, [35])
    ests, errors = point_estimates_isolated(d, ["P-OR", "P-HYBRID", "P-IPW", "P-MR", "DR"])
    assert set(ests) == {"P-OR", "P-HYBRID", "DR"}
    assert set(errors) == {"P-IPW", "P-MR"} and "fit_q1" in errors["P-MR"]
