import math
import warnings

import numpy as np
import pytest

from ddian import autodiff as ad
from ddian.autodiff import Tensor
from ddian.errors import ConfigError, DimensionError
from ddian.nn import LinearLayer, Mlp, Schedules, SgdMomentum, forward, grl_lambda_at, init_params, lr_at, step

from conftest import check_grads


def test_init_is_deterministic():
    a, b = init_params([2, 3, 2], seed=7), init_params([2, 3, 2], seed=7)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.values.tobytes() == q.values.tobytes()
    c = init_params([2, 3, 2], seed=8)
    assert not np.array_equal(a.layers[0].weight.values, c.layers[0].weight.values)


def test_init_shapes_and_zero_bias():
    net = init_params([2, 3, 2], seed=0)
    assert [l.weight.shape for l in net.layers] == [(2, 3), (3, 2)]
    assert [l.bias.shape for l in net.layers] == [(1, 3), (1, 2)]
    assert all(not l.bias.values.any() for l in net.layers)
    assert net.dims == [2, 3, 2]


@pytest.mark.parametrize("dims", [[], [4], [3, 0], [0, 2]])
def test_init_rejects_degenerate_dims(dims):
    with pytest.raises(ConfigError):
        init_params(dims, seed=0)


def test_glorot_draws_follow_the_uniform_law():
    fan_in, fan_out = 100, 100
    w = init_params([fan_in, fan_out], seed=3).layers[0].weight.values.ravel()
    limit = math.sqrt(6 / (fan_in + fan_out))
    assert np.abs(w).max() <= limit
    sigma = limit / math.sqrt(3)  # std of U(-a, a)
    assert abs(w.mean()) < 3 * sigma / math.sqrt(w.size)
    assert abs(w.std() - sigma) < 0.05 * sigma


def test_mlp_rejects_unchained_layers():
    l1 = LinearLayer(Tensor(np.zeros((2, 3))), Tensor(np.zeros((1, 3))))
    l2 = LinearLayer(Tensor(np.zeros((4, 1))), Tensor(np.zeros((1, 1))))
    with pytest.raises(DimensionError):
        Mlp([l1, l2])


def test_zero_weight_net_outputs_bias():
    net = init_params([3, 4, 2], seed=0)
    for layer in net.layers:
        layer.weight.values[...] = 0.0
    net.layers[-1].bias.values[...] = [[0.5, -1.5]]
    out = forward(net, Tensor(np.ones((3, 3)))).values
    assert np.array_equal(out, np.tile([[0.5, -1.5]], (3, 1)))


def test_single_layer_affine_by_hand():
    net = init_params([2, 2], seed=0)
    net.layers[0].weight.values[...] = [[1.0, 0.0], [0.0, 2.0]]
    net.layers[0].bias.values[...] = [[0.5, -1.0]]
    out = forward(net, Tensor([[3.0, 4.0]])).values
    assert np.array_equal(out, [[3.5, 7.0]])


def test_forward_shape_mismatch():
    with pytest.raises(DimensionError):
        forward(init_params([3, 2], seed=0), Tensor(np.zeros((1, 4))))


def test_two_layer_gradient(rng):
    net = init_params([3, 5, 2], seed=11)
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    pre = net.preactivations(x.values)[0]
    assert np.abs(pre).min() > 1e-3
    check_grads(lambda: ad.sum_all(ad.square(forward(net, x))), [x, *net.parameters()], tol=1e-4)


def test_step_zero_gradient_keeps_params_and_decays_velocity():
    p = Tensor([[1.0, -2.0]], requires_grad=True)
    opt = SgdMomentum([p], learning_rate=0.1, momentum=0.9)
    before = p.values.copy()
    step(opt)
    assert p.values.tobytes() == before.tobytes()
    opt.velocity[id(p)][...] = [[1.0, 1.0]]
    p.values[...] = 0.0
    step(opt)
    np.testing.assert_array_equal(opt.velocity[id(p)], [[0.9, 0.9]])


def test_step_two_iterations_by_hand():
    p = Tensor([[0.0]], requires_grad=True)
    opt = SgdMomentum([p], learning_rate=0.1, momentum=0.9)
    p.grad[...] = 1.0
    step(opt)
    assert p.item() == pytest.approx(-0.1, abs=1e-15)
    step(opt)
    assert p.item() == pytest.approx(-0.29, abs=1e-15)
    assert p.grad[0, 0] == 1.0  # gradients are left for the caller to clear


def test_zero_momentum_is_plain_sgd(rng):
    p = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    start = p.values.copy()
    opt = SgdMomentum([p], learning_rate=0.05, momentum=0.0)
    g1, g2 = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
    p.grad[...] = g1
    opt.step()
    p.grad[...] = g2
    opt.step()
    np.testing.assert_allclose(p.values, start - 0.05 * g1 - 0.05 * g2, rtol=0, atol=1e-15)


def test_group_multiplier_scales_the_rate():
    a = Tensor([[0.0]], requires_grad=True)
    b = Tensor([[0.0]], requires_grad=True)
    opt = SgdMomentum([([a], 1.0), ([b], 10.0)], learning_rate=0.01, momentum=0.9)
    a.grad[...] = b.grad[...] = 1.0
    opt.step()
    assert a.item() == pytest.approx(-0.01)
    assert b.item() == pytest.approx(-0.1)


def test_duplicate_registration_rejected():
    a = Tensor([[0.0]], requires_grad=True)
    with pytest.raises(ConfigError):
        SgdMomentum([([a], 1.0), ([a], 10.0)])


def test_schedules_at_endpoints():
    s = Schedules(eta0=0.01)
    assert grl_lambda_at(s, 0.0) == 0.0
    assert lr_at(s, 0.0) == 0.01
    assert grl_lambda_at(s, 1.0) == pytest.approx(2 / (1 + math.exp(-10)) - 1, abs=1e-15)
    assert grl_lambda_at(s, 1.0) == pytest.approx(0.9999092, abs=1e-7)
    assert lr_at(s, 1.0) == pytest.approx(0.01 / 11**0.75, abs=1e-15)


def test_schedules_monotone_on_grid():
    s = Schedules()
    grid = np.linspace(0, 1, 100)
    lrs = [s.lr_at(p) for p in grid]
    lams = [s.grl_lambda_at(p) for p in grid]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(a <= b for a, b in zip(lams, lams[1:]))
    assert all(0 <= v < 1 for v in lams)


def test_schedules_clamp_with_warning():
    s = Schedules()
    with pytest.warns(RuntimeWarning):
        assert s.lr_at(-0.5) == s.lr_at(0.0)
    with pytest.warns(RuntimeWarning):
        assert s.grl_lambda_at(1.5) == s.grl_lambda_at(1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        s.lr_at(0.5)
