import warnings

import numpy as np
import pytest

from dln_lab.core import NetShape, init_gaussian, loss_value, product_map
from dln_lab.costs import (
    CostDimensionError, LocalizedCost, MCCost, MSECost, TraceCost, cost_from_json, cutoff,
    cutoff_derivative, homogeneous_gradient, homogeneous_value, warn_if_zero_minimal,
)

from oracles import central_difference_gradient, mc_value, mse_value, trace_value


def test_toy_mse_values(toy_mse):
    # (1/2)(4 + 1) at the origin, gradient -Y X^T
    assert toy_mse.value(np.zeros((2, 2))) == pytest.approx(2.5)
    np.testing.assert_allclose(toy_mse.zero_gradient(), -np.diag([2.0, 1.0]))
    assert toy_mse.value(np.diag([2.0, 1.0])) == 0.0


@pytest.mark.parametrize("kind", ["mse", "mc", "trace"])
def test_matrix_gradient_matches_finite_differences(kind, rng):
    A = rng.standard_normal((3, 4))
    if kind == "mse":
        X, Y = rng.standard_normal((4, 7)), rng.standard_normal((3, 7))
        cost, ref = MSECost(X, Y), lambda a: mse_value(a, X, Y)
    elif kind == "mc":
        A_star = rng.standard_normal((3, 4))
        obs = [(0, 0), (1, 2), (2, 3), (2, 1)]
        cost, ref = MCCost(A_star, obs), lambda a: mc_value(a, A_star, obs)
    else:
        G = rng.standard_normal((3, 4))
        cost, ref = TraceCost(G), lambda a: trace_value(a, G)
    assert cost.value(A) == pytest.approx(ref(A))
    fd = central_difference_gradient(lambda x: ref(x.reshape(3, 4)), A.ravel())
    np.testing.assert_allclose(cost.gradient(A).ravel(), fd, atol=1e-8)


def test_mc_complement_partitions_entries(rng):
    mask = rng.random((4, 5)) < 0.5
    mask[0, 0], mask[1, 1] = True, False
    train = MCCost.from_mask(rng.standard_normal((4, 5)), mask)
    test = train.complement()
    assert train.n_observed + test.n_observed == 20
    assert not np.any(train.mask & test.mask)


def test_full_mask_has_no_complement():
    assert MCCost.from_mask(np.ones((2, 2)), np.ones((2, 2), bool)).complement() is None


@pytest.mark.parametrize("obs", [[], [(0, 0), (0, 0)], [(5, 0)]])
def test_mc_rejects_bad_observations(obs):
    with pytest.raises(ValueError):
        MCCost(np.ones((2, 2)), obs)


def test_shape_mismatch_raises(toy_mse):
    with pytest.raises(CostDimensionError):
        toy_mse.value(np.zeros((3, 2)))


def test_cutoff_is_smooth_at_the_joints():
    for x in (1.0, 2.0):
        assert cutoff(x - 1e-9) == pytest.approx(cutoff(x + 1e-9), abs=1e-8)
        assert cutoff_derivative(x - 1e-9) == pytest.approx(cutoff_derivative(x + 1e-9), abs=1e-6)
    assert cutoff(0.3) == 1.0 and cutoff(2.5) == 0.0
    for x in np.linspace(1.05, 1.95, 10):
        fd = (cutoff(x + 1e-6) - cutoff(x - 1e-6)) / 2e-6
        assert cutoff_derivative(x) == pytest.approx(fd, abs=1e-7)


def test_localized_cost_regions(toy_mse):
    loc = LocalizedCost.around_origin(toy_mse, r=0.5)
    shape = NetShape.rectangular(3, 2, 2, 2)
    d = init_gaussian(shape, 1.0, 3)
    d = d * (1.0 / d.norm())
    inside, outside = d * 0.4, d * 1.2
    assert loss_value(inside, loc) == pytest.approx(loss_value(inside, toy_mse), abs=1e-14)
    h = homogeneous_value(outside, toy_mse.zero_gradient())
    assert loss_value(outside, loc) == pytest.approx(2.5 + h, abs=1e-14)


@pytest.mark.parametrize("radius", [0.6, 0.75, 0.95])
def test_localized_gradient_in_the_annulus(toy_mse, radius):
    loc = LocalizedCost.around_origin(toy_mse, r=0.5)
    shape = NetShape.rectangular(3, 2, 2, 2)
    d = init_gaussian(shape, 1.0, 4)
    theta = d * (radius / d.norm())
    fd = central_difference_gradient(
        lambda x: loss_value(type(theta).from_flat(x, shape), loc), theta.flat())
    g = loc.param_value_and_grad(theta)[1].flat()
    np.testing.assert_allclose(g, fd, atol=1e-8)


def test_homogeneous_part_is_homogeneous(rng):
    G = rng.standard_normal((2, 3))
    theta = init_gaussian(NetShape((3, 4, 4, 2)), 1.0, 0)
    assert homogeneous_value(theta * 2.0, G) == pytest.approx(8 * homogeneous_value(theta, G))
    g1, g2 = homogeneous_gradient(theta, G), homogeneous_gradient(theta * 2.0, G)
    np.testing.assert_allclose(g2.flat(), 4 * g1.flat())
    assert homogeneous_value(theta, G) == pytest.approx(float(np.sum(G * product_map(theta))))


def test_localized_rejects_bad_radius(toy_mse):
    with pytest.raises(ValueError):
        LocalizedCost.around_origin(toy_mse, 0.0)


@pytest.mark.parametrize("cost", [
    MSECost(np.eye(2), np.diag([2.0, 1.0])),
    MCCost(np.ones((2, 3)), [(0, 1), (1, 2)]),
    TraceCost(np.arange(6.0).reshape(2, 3)),
    LocalizedCost.around_origin(MSECost(np.eye(2), np.eye(2)), 0.3),
])
def test_json_round_trip(cost):
    back = cost_from_json(cost.to_json())
    assert back.to_json() == cost.to_json()


def test_zero_minimal_warning():
    cost = MSECost(np.eye(2), np.zeros((2, 2)))
    with pytest.warns(RuntimeWarning):
        assert warn_if_zero_minimal(cost)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert not warn_if_zero_minimal(MSECost(np.eye(2), np.eye(2)))
