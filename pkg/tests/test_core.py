import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dln_lab.core import (
    MalformedParams, NetShape, Params, init_gaussian, loss_gradient, loss_value, make_rng,
    product_map, rank_of, sigma_for_gamma, unflatten, zeros,
)
from dln_lab.costs import MCCost, MSECost, TraceCost

from oracles import central_difference_gradient, dense_product, loss_from_flat

widths_strategy = st.lists(st.integers(1, 5), min_size=2, max_size=5)


def test_rectangular_shape():
    s = NetShape.rectangular(4, 20, 10, 3)
    assert s.widths == (10, 20, 20, 20, 3)
    assert s.depth == 4 and s.hidden_width == 20 and s.is_rectangular
    assert s.n_params == 20 * 10 + 2 * 20 * 20 + 3 * 20
    assert s.layer_shapes()[0] == (20, 10)


def test_non_rectangular_has_no_hidden_width():
    s = NetShape((3, 4, 5, 2))
    assert s.hidden_width is None and not s.is_rectangular


@pytest.mark.parametrize("widths", [(), (3,), (2, 0, 2)])
def test_bad_shapes_rejected(widths):
    with pytest.raises(ValueError):
        NetShape(widths)


def test_unchained_layers_rejected():
    with pytest.raises(MalformedParams):
        Params([np.ones((3, 2)), np.ones((2, 2))])


@settings(max_examples=40, deadline=None)
@given(widths=widths_strategy, seed=st.integers(0, 2**31))
def test_product_map_matches_left_fold(widths, seed):
    theta = init_gaussian(NetShape(tuple(widths)), 1.0, seed)
    np.testing.assert_allclose(product_map(theta), dense_product(theta.layers), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(widths=widths_strategy, seed=st.integers(0, 2**31))
def test_flat_round_trip(widths, seed):
    shape = NetShape(tuple(widths))
    theta = init_gaussian(shape, 0.7, seed)
    back = Params.from_flat(theta.flat(), shape)
    assert back.allclose(theta, atol=0.0, rtol=0.0)
    assert theta.norm() == pytest.approx(np.linalg.norm(theta.flat()))


def test_vector_space_operations():
    shape = NetShape((2, 3, 2))
    a, b = init_gaussian(shape, 1.0, 1), init_gaussian(shape, 1.0, 2)
    np.testing.assert_allclose((a + b).flat(), a.flat() + b.flat())
    np.testing.assert_allclose((a - b).flat(), a.flat() - b.flat())
    np.testing.assert_allclose((2.5 * a).flat(), 2.5 * a.flat())
    np.testing.assert_allclose((-a).flat(), -a.flat())
    assert a.dot(b) == pytest.approx(float(a.flat() @ b.flat()))


def test_numpy_scalar_times_params_stays_params():
    theta = init_gaussian(NetShape((2, 2, 2)), 1.0, 0)
    out = np.float64(0.5) * theta
    assert isinstance(out, Params)
    assert out.norm() == pytest.approx(0.5 * theta.norm())


def test_params_are_immutable():
    theta = zeros(NetShape((2, 2)))
    with pytest.raises(AttributeError):
        theta.layers = ()
    with pytest.raises(ValueError):
        theta.layers[0][0, 0] = 1.0


def test_json_round_trip():
    theta = init_gaussian(NetShape((3, 4, 2)), 1.0, 5)
    text = json.dumps(theta.to_json())
    assert Params.from_json(text).allclose(theta, rtol=0.0)


def test_unflatten_size_mismatch():
    with pytest.raises(MalformedParams):
        unflatten(np.zeros(5), NetShape((2, 2)))


def test_init_is_deterministic_and_scaled():
    shape = NetShape.rectangular(3, 200, 5, 5)
    a, b = init_gaussian(shape, 0.3, 9), init_gaussian(shape, 0.3, 9)
    assert a.allclose(b, rtol=0.0)
    assert np.std(a.flat()) == pytest.approx(0.3, rel=0.02)
    assert not a.allclose(init_gaussian(shape, 0.3, 10))


@pytest.mark.parametrize("w,gamma", [(64, 1.0), (100, 2.0), (10, 0.75)])
def test_sigma_for_gamma_variance(w, gamma):
    assert sigma_for_gamma(w, gamma) ** 2 == pytest.approx(w ** -gamma)


def test_make_rng_streams_differ():
    assert make_rng(0).standard_normal() != make_rng(1).standard_normal()


def test_rank_of_threshold():
    A = np.diag([3.0, 0.5, 0.05])
    assert rank_of(A, 0.1) == 2
    assert rank_of(A, 1e-3) == 3
    with pytest.raises(ValueError):
        rank_of(A, 0.0)


def _costs(rng, n_out, n_in):
    X = rng.standard_normal((n_in, 6))
    Y = rng.standard_normal((n_out, 6))
    A_star = rng.standard_normal((n_out, n_in))
    observed = [(i, j) for i in range(n_out) for j in range(n_in) if (i + j) % 2 == 0]
    G = rng.standard_normal((n_out, n_in))
    return [
        (MSECost(X, Y), lambda A: float(np.sum((A @ X - Y) ** 2)) / 6),
        (MCCost(A_star, observed),
         lambda A: sum((A[i, j] - A_star[i, j]) ** 2 for i, j in observed) / len(observed)),
        (TraceCost(G), lambda A: float(np.sum(G * A))),
    ]


@settings(max_examples=25, deadline=None)
@given(widths=widths_strategy, seed=st.integers(0, 2**31))
def test_loss_gradient_matches_finite_differences(widths, seed):
    rng = np.random.default_rng(seed)
    shape = NetShape(tuple(widths))
    theta = init_gaussian(shape, 0.8, seed)
    for cost, value in _costs(rng, shape.n_out, shape.n_in):
        f = lambda x: loss_from_flat(x, shape.layer_shapes(), value)
        fd = central_difference_gradient(f, theta.flat())
        g = loss_gradient(theta, cost).flat()
        assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(fd), 1.0)
        assert loss_value(theta, cost) == pytest.approx(value(dense_product(theta.layers)))
