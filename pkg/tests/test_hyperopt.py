import numpy as np
import pytest
from scipy.integrate import quad

import nestedep.hyperopt as H
from nestedep.ep import EpOptions, run_ep
from nestedep.kernel import Hyperparams, LabeledDataset


def data_1d(seed=0, n_per=5):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1, 2], n_per)
    X = rng.normal(size=(3 * n_per, 1)) * 0.6 + 1.5 * y[:, None]
    return LabeledDataset((X - X.mean()) / X.std(), y, 3)


def test_prior_scale_from_variance():
    pr = H.HyperPrior()
    assert pr.scale2 == 50.0
    total = quad(lambda x: np.exp(pr.log_density(x)), 0, np.inf)[0]
    assert total == pytest.approx(1.0, abs=1e-10)
    var = quad(lambda x: x * x * np.exp(pr.log_density(x)), 0, np.inf)[0]
    assert var == pytest.approx(100.0, rel=1e-8)


def test_prior_gradient_finite_differences():
    pr = H.HyperPrior()
    rng = np.random.default_rng(1)
    for _ in range(10):
        v = rng.normal(size=3) * 2
        _, g = pr.log_prior(v)
        for j in range(3):
            e = np.zeros(3)
            e[j] = 1e-5
            fd = (pr.log_prior(v + e)[0] - pr.log_prior(v - e)[0]) / 2e-5
            assert abs(g[j] - fd) <= 1e-8 * max(1.0, abs(fd))


def test_prior_finite_everywhere():
    v, g = H.HyperPrior().log_prior([40.0, -40.0, 30.0])
    assert np.isfinite(v) and np.all(np.isfinite(g))


@pytest.mark.parametrize("method", ["ep", "la"])
def test_optimum_is_stationary_and_improves(method):
    data = data_1d()
    init = Hyperparams(0.0, [0.0])
    res = H.optimize(data, init, method)
    assert np.max(np.abs(res.grad)) < 1e-3
    assert res.value >= H.objective(init.to_vector(), data, method)[0]


def test_restart_at_optimum_stops_immediately():
    data = data_1d()
    first = H.optimize(data, Hyperparams(0.0, [0.0]))
    again = H.optimize(data, first.theta)
    assert 1 <= again.n_evals <= 2
    assert again.value == pytest.approx(first.value, abs=1e-8)


def test_optimize_deterministic():
    data = data_1d(2)
    a = H.optimize(data, Hyperparams(1.0, [0.0]))
    b = H.optimize(data, Hyperparams(1.0, [0.0]))
    assert a.theta.to_vector().tobytes() == b.theta.to_vector().tobytes()
    assert a.trace == b.trace


def test_optimum_beats_grid():
    data = data_1d(3)
    init = Hyperparams(1.0, [0.0])
    res = H.optimize(data, init)
    grid = [H.objective(init.to_vector() + [a, b], data)[0]
            for a in np.linspace(-1, 1, 5) for b in np.linspace(-1, 1, 5)]
    assert res.value >= max(grid) - 1e-6


def test_warm_and_cold_evidence_agree():
    data = data_1d(4)
    opts = EpOptions(outer_tol=1e-9, max_outer=1000)
    prev = run_ep(data, Hyperparams(0.5, [0.3]), opts)
    th = Hyperparams(1.0, [0.0])
    warm = run_ep(data, th, opts, init=prev).log_z
    cold = run_ep(data, th, opts).log_z
    assert abs(warm - cold) < 1e-6


def test_failure_sentinel(monkeypatch):
    def boom(*a, **k):
        raise np.linalg.LinAlgError("forced")

    monkeypatch.setattr(H, "ep_evidence", boom)
    obj = H.Objective(data_1d())
    value, grad = obj([0.0, 0.0])
    assert value == -np.inf and np.all(grad == 0)
    assert not obj.trace[0].ok and "forced" in obj.trace[0].message
    with pytest.raises(RuntimeError):
        H.optimize(data_1d(), Hyperparams(0.0))


def test_default_inits():
    data = data_1d()
    inits = H.default_inits(data)
    assert [th.log_magnitude for th in inits] == [0.0, 1.0, 2.0]
    assert all(th.log_lengthscales.size == data.d for th in inits)


def test_multistart_keeps_best():
    data = data_1d(5)
    inits = [Hyperparams(0.0, [0.0]), Hyperparams(2.0, [0.5])]
    best = H.optimize_multistart(data, "la", inits)
    singles = [H.optimize(data, th, "la").value for th in inits]
    assert best.value == max(singles)


def test_unknown_method():
    with pytest.raises(ValueError):
        H.Objective(data_1d(), method="vb")
