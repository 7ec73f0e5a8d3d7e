import io
import math

import numpy as np
import pytest
from scipy.linalg import expm

from dln_lab.core import NetShape, Params, init_gaussian, loss_gradient, product_map
from dln_lab.costs import MSECost, TraceCost
from dln_lab.flow import (
    CSV_COLUMNS, FlowConfig, NeverEscaped, NonFinite, Trajectory, detect_plateaus, escape_time,
    integrate,
)
from dln_lab.escape import escape_profile


def _linear_flow_oracle(G, W1, W2, t):
    """Exact flow of Tr[G^T W2 W1]: a linear ODE solved with a matrix exponential."""
    n1, n0 = W1.shape

    def f(z):
        A, B = z[:n1 * n0].reshape(n1, n0), z[n1 * n0:].reshape(G.shape[0], n1)
        return -np.concatenate([(B.T @ G).ravel(), (G @ A.T).ravel()])

    z0 = np.concatenate([W1.ravel(), W2.ravel()])
    M = np.stack([f(e) for e in np.eye(z0.size)], axis=1)
    return expm(t * M) @ z0


@pytest.mark.parametrize("integrator,step,tol", [("rk4", 1e-3, 1e-10), ("rk45", 1e-2, 1e-8),
                                                 ("euler", 1e-4, 1e-3)])
def test_integrators_against_exact_linear_flow(rng, integrator, step, tol):
    G = rng.standard_normal((2, 3))
    theta0 = init_gaussian(NetShape((3, 4, 2)), 0.5, 1)
    cfg = FlowConfig(step_size=step, max_steps=10**6, snapshot_every=10**6, max_time=0.5,
                     integrator=integrator, rtol=1e-12, atol=1e-14)
    if integrator != "rk45":
        cfg = cfg.replace(max_steps=round(0.5 / step), max_time=None)
    traj = integrate(theta0, TraceCost(G), cfg)
    exact = _linear_flow_oracle(G, *theta0.layers, traj.time[-1])
    assert traj.time[-1] == pytest.approx(0.5)
    assert np.linalg.norm(traj.final.flat() - exact) <= tol * np.linalg.norm(exact)


def test_one_euler_step(toy_mse):
    theta0 = init_gaussian(NetShape((2, 3, 2)), 1.0, 0)
    traj = integrate(theta0, toy_mse, FlowConfig(step_size=0.1, max_steps=1))
    expected = theta0 - loss_gradient(theta0, toy_mse) * 0.1
    assert traj.final.allclose(expected, atol=1e-15)
    assert list(traj.step) == [0, 1]


def test_snapshots_and_final_row(toy_mse):
    theta0 = init_gaussian(NetShape((2, 3, 2)), 1.0, 0)
    traj = integrate(theta0, toy_mse, FlowConfig(step_size=0.01, max_steps=25, snapshot_every=10))
    assert list(traj.step) == [0, 10, 20, 25]
    assert traj.stop_reason == "max_steps"
    assert traj.loss_train[-1] == pytest.approx(toy_mse.value(product_map(traj.final)))


def test_stop_on_loss(toy_mse):
    theta0 = init_gaussian(NetShape((2, 3, 2)), 0.5, 0)
    traj = integrate(theta0, toy_mse, FlowConfig(step_size=0.05, max_steps=10**5, stop_loss=1e-6))
    assert traj.stop_reason == "stop_loss"
    assert traj.loss_train[-1] <= 1e-6


def test_test_cost_column(toy_mse):
    theta0 = init_gaussian(NetShape((2, 3, 2)), 0.5, 0)
    test = MSECost(np.eye(2), np.eye(2))
    traj = integrate(theta0, toy_mse, FlowConfig(max_steps=3), test_cost=test)
    assert traj.has_test
    assert traj.loss_test[-1] == pytest.approx(test.value(product_map(traj.final)))
    assert not integrate(theta0, toy_mse, FlowConfig(max_steps=3)).has_test


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning", "ignore:invalid:RuntimeWarning")
def test_diverging_descent_raises_with_partial_trajectory(toy_mse):
    theta0 = init_gaussian(NetShape((2, 3, 3, 2)), 2.0, 0)
    with pytest.raises(NonFinite) as info:
        integrate(theta0, toy_mse, FlowConfig(step_size=10.0, max_steps=1000))
    assert info.value.trajectory is not None and len(info.value.trajectory) >= 1
    assert np.all(np.isfinite(info.value.trajectory.loss_train))


def test_csv_format_is_fixed(toy_mse):
    theta0 = init_gaussian(NetShape((2, 3, 2)), 1.0, 0)
    cfg = FlowConfig(step_size=0.01, max_steps=20, snapshot_every=5)
    a, b = integrate(theta0, toy_mse, cfg).to_csv(), integrate(theta0, toy_mse, cfg).to_csv()
    assert a == b
    lines = a.strip().split("\n")
    assert lines[0].split(",") == list(CSV_COLUMNS)
    assert len(lines) == 1 + 5
    loss = lines[2].split(",")[2]
    assert float(loss) == float(format(float(loss), ".17g"))


@pytest.mark.parametrize("bad", [dict(step_size=0.0), dict(snapshot_every=0),
                                 dict(integrator="leapfrog"), dict(max_steps=-1),
                                 dict(rank_tol=0.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        FlowConfig(**bad)


def _synthetic(time, loss):
    n = len(time)
    z = np.zeros(n)
    return Trajectory(step=np.arange(n), time=np.asarray(time), loss_train=np.asarray(loss),
                      loss_test=np.full(n, np.nan), grad_norm=z, param_norm=z,
                      rank=np.zeros(n, int), nuclear_norm=z, balance_defect=z,
                      final=Params([np.zeros((1, 1))]))


@pytest.mark.parametrize("n_steps", [1, 2, 3, 4])
def test_plateaus_on_synthetic_staircase(n_steps):
    t = np.linspace(0, 60 * (n_steps + 1), 3000)
    loss = np.full_like(t, 1e-9)
    for k in range(n_steps):
        loss += 10.0 ** (1 - k) / (1 + np.exp(2.0 * (t - 60 * (k + 1))))
    rep = detect_plateaus(_synthetic(t, loss))
    assert rep.count == n_steps
    for k, p in enumerate(rep.intervals):
        assert p.t_start < 60 * (k + 1) < p.t_end + 60


def test_smooth_exponential_decay_has_no_plateau():
    t = np.linspace(0, 10, 500)
    assert detect_plateaus(_synthetic(t, 5.0 * np.exp(-t))).count == 0


def test_short_trajectory_has_no_plateau():
    assert detect_plateaus(_synthetic([0.0, 1.0], [1.0, 0.5])).count == 0


def _rho_star_toy():
    cost = TraceCost(-np.diag([2.0, 1.0]))
    return cost, escape_profile(cost, 2).rho_star


def test_escape_time_along_exact_direction():
    # L = 2 along rho*: the norm grows like alpha e^(s1 t) with s1 = 2
    cost, rho = _rho_star_toy()
    cfg = FlowConfig(step_size=1e-2, max_steps=10**5, integrator="rk45", rtol=1e-11, atol=1e-14)
    for alpha in (1e-2, 1e-4):
        t = escape_time(rho, cost, cfg, r=1.0, alpha=alpha)
        assert t == pytest.approx(math.log(1.0 / alpha) / 2.0, rel=1e-7)


def test_escape_time_unreached_is_inf_or_raises():
    cost, rho = _rho_star_toy()
    cfg = FlowConfig(step_size=1e-2, max_steps=50, integrator="rk4")
    assert escape_time(rho, cost, cfg, r=10.0, alpha=1e-6) == math.inf
    with pytest.raises(NeverEscaped) as info:
        escape_time(rho, cost, cfg, r=10.0, alpha=1e-6, strict=True)
    assert info.value.trajectory is not None


def test_escape_time_zero_when_already_outside():
    cost, rho = _rho_star_toy()
    assert escape_time(rho, cost, FlowConfig(), r=0.5, alpha=1.0) == 0.0
