import numpy as np
import pytest

from proxmed.bootstrap import bootstrap, bootstrap_many, replicate_index
from proxmed.data import Dataset, empirical_mean_y
from proxmed.errors import BootstrapStabilityError, ConfigError


def test_constant_dataset_gives_degenerate_interval():
    d = Dataset(y=[2.5] * 12, a=[1] * 12, m=[0.1] * 12, x=np.ones((12, 2)), w=[[0.3]] * 12, z=[[0.4]] * 12)
    res = bootstrap(d, empirical_mean_y, B=25, seed=1)
    assert res.ci_lo == res.ci_hi == 2.5
    assert res.se == 0.0


def test_same_seed_same_result(sim1000):
    a = bootstrap(sim1000, "P-OR", B=20, seed=9)
    b = bootstrap(sim1000, "P-OR", B=20, seed=9)
    np.testing.assert_array_equal(a.replicates, b.replicates)
    assert (a.ci_lo, a.ci_hi, a.se) == (b.ci_lo, b.ci_hi, b.se)
    c = bootstrap(sim1000, "P-OR", B=20, seed=10)
    assert not np.array_equal(a.replicates, c.replicates)


def test_result_does_not_depend_on_workers(sim1000):
    a = bootstrap_many(sim1000, ["P-OR", "DR"], B=8, seed=3, workers=1)
    b = bootstrap_many(sim1000, ["P-OR", "DR"], B=8, seed=3, workers=2)
    for m in ("P-OR", "DR"):
        np.testing.assert_array_equal(a[m].replicates, b[m].replicates)


def test_replicate_stream_is_per_index():
    first = replicate_index(50, [4, 2], 7)
    np.testing.assert_array_equal(first, replicate_index(50, [4, 2], 7))
    assert not np.array_equal(first, replicate_index(50, [4, 2], 8))


def test_interval_ordering_and_accounting(sim1000):
    res = bootstrap(sim1000, "P-MR", B=40, seed=2, root_policy="nearest")
    assert res.ci_lo <= res.ci_hi
    assert res.n_success + res.n_failed == res.n_total == 40


def test_failures_are_excluded_and_counted():
    calls = {"k": 0}

    def flaky(d):
        calls["k"] += 1
        if calls["k"] % 10 == 0:
            raise np.linalg.LinAlgError("singular")
        return float(d.y.mean())

    d = Dataset(y=np.arange(30.0), a=[0, 1] * 15, m=np.zeros(30), x=np.zeros((30, 1)), w=np.ones((30, 1)),
                z=np.ones((30, 1)))
    res = bootstrap(d, flaky, B=50, seed=0)
    assert res.n_failed == 5 and res.replicates.shape == (45,)


def test_too_many_failures_raise():
    def broken(d):
        raise np.linalg.LinAlgError("singular")

    d = Dataset(y=np.arange(6.0), a=[0, 1] * 3, m=np.zeros(6), x=np.zeros((6, 1)), w=np.ones((6, 1)),
                z=np.ones((6, 1)))
    with pytest.raises(BootstrapStabilityError) as info:
        bootstrap(d, broken, B=10, seed=0)
    assert info.value.n_failed == 10 and info.value.n_total == 10


def test_nonstrict_keeps_stable_methods(sim1000):
    out = bootstrap_many(sim1000, ["P-OR", "P-MR"], B=30, seed=5, strict=False)
    assert isinstance(out["P-MR"], BootstrapStabilityError)
    assert out["P-OR"].n_failed == 0


def test_argument_checks(sim1000):
    with pytest.raises(ConfigError):
        bootstrap(sim1000, "P-OR", B=1)
    with pytest.raises(ConfigError):
        bootstrap_many(sim1000, ["DML-MR"], B=10)
