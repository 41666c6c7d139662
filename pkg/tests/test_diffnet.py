import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import erf as sp_erf
from scipy.stats import norm

from mssmpc.diffnet import (ContractError, NumericError, ParamVector, erf, grad_wrt_params, init_mlp,
                            jacobian_wrt_input, mlp_forward, norm_cdf)


def central_diff(f, x, h=1e-6):
    x = np.asarray(x, float)
    g = np.zeros((np.size(f(x)), x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[:, i] = (np.atleast_1d(f(x + e)) - np.atleast_1d(f(x - e))) / (2 * h)
    return g


def test_erf_and_cdf_match_scipy():
    x = np.linspace(-6, 6, 241)
    np.testing.assert_allclose(np.asarray(erf(x)), sp_erf(x), atol=1e-14)
    np.testing.assert_allclose(np.asarray(norm_cdf(x)), norm.cdf(x), atol=1e-14)


def test_mlp_forward_by_hand():
    rng = np.random.default_rng(0)
    net = init_mlp(rng, [3, 4, 2])
    x = rng.standard_normal(3)
    (w0, b0), (w1, b1) = [(np.asarray(w), np.asarray(b)) for w, b in net.layers]
    expected = np.tanh(x @ w0 + b0) @ w1 + b1
    np.testing.assert_allclose(np.asarray(mlp_forward(net, x)), expected, rtol=1e-14)
    with pytest.raises(ContractError):
        mlp_forward(net, np.zeros(4))


@given(st.integers(0, 10_000))
def test_param_vector_round_trip(seed):
    rng = np.random.default_rng(seed)
    nets = {"a": init_mlp(rng, [2, 3, 1]), "b": init_mlp(rng, [1, 2])}
    pv = ParamVector.from_nets(nets)
    back = ParamVector.from_json(pv.to_json())
    np.testing.assert_array_equal(back.flat, pv.flat)
    assert back.layout == pv.layout
    rebuilt = ParamVector.from_nets(back.to_nets())
    np.testing.assert_array_equal(rebuilt.flat, pv.flat)


def test_param_vector_length_mismatch():
    pv = ParamVector.from_nets({"a": init_mlp(np.random.default_rng(0), [2, 2])})
    doc = pv.to_json()
    doc["values"] = doc["values"][:-1]
    with pytest.raises(ContractError):
        ParamVector.from_json(doc)
    with pytest.raises(ContractError):
        pv.to_nets(np.zeros(len(pv) + 1))


def test_grad_of_quadratic_is_exact():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    res = grad_wrt_params(lambda x: 0.5 * x @ A @ x, np.array([1.0, -2.0]))
    np.testing.assert_allclose(res.grad, A @ np.array([1.0, -2.0]), rtol=1e-15)
    assert res.value == pytest.approx(0.5 * np.array([1.0, -2.0]) @ A @ np.array([1.0, -2.0]))


def test_gradient_of_network_loss_matches_fd():
    rng = np.random.default_rng(1)
    nets = {"f": init_mlp(rng, [3, 5, 2])}
    pv = ParamVector.from_nets(nets)
    x = rng.standard_normal((7, 3))

    def loss(flat):
        out = mlp_forward(pv.to_nets(flat)["f"], x)
        return jnp.sum(jnp.sin(out) ** 2)

    g = grad_wrt_params(loss, pv).grad
    fd = central_diff(lambda f: float(loss(jnp.asarray(f))), pv.flat)[0]
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_jacobian_of_affine_map():
    W = np.array([[1.0, 2.0, 0.0], [0.0, -1.0, 3.0]])
    J = jacobian_wrt_input(lambda x: jnp.asarray(W) @ x, np.ones(3))
    np.testing.assert_allclose(J, W)


def test_nonfinite_values_are_reported():
    with pytest.raises(NumericError):
        grad_wrt_params(lambda x: jnp.log(x[0]), np.array([-1.0]))
    with pytest.raises(ContractError):
        jacobian_wrt_input(lambda x: x, np.array([np.nan]))
