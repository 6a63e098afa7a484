import numpy as np
import pytest

from hessix.bnn import (
    ConcreteDropoutMLP,
    HybridModel,
    LayerSpec,
    MaskSample,
    forward,
    ones_gates,
    sample_mask,
)
from hessix.core import RngStream, act_eval, Activation
from hessix.hessian import (
    HessianRequest,
    fd_gradient_oracle,
    fd_hessian_oracle,
    input_gradient,
    input_hessian,
    layer_values,
    model_batch_hessian,
)


def make_model(in_width, hidden, activation="tanh", seed=0):
    net = ConcreteDropoutMLP.create(in_width, hidden, RngStream(seed),
                                    activation=activation)
    return HybridModel(beta=np.zeros(in_width), intercept=0.0, net=net)


def full_mask(net):
    return MaskSample(gates=ones_gates(net), mode="hard")


def head_fn(model, mask, layer=0):
    """Interaction-head output as a plain function of the evaluation point."""
    def f(p):
        if layer == 0:
            full = forward(model, p, mask)
            return full - float(p @ model.beta) - model.intercept
        net = model.net
        acts = net.activations()
        value = np.asarray(p, dtype=float)[None, :]
        for l in range(layer, net.depth):
            a = value * mask.gates[l]
            s = a @ net.weights[l] + net.biases[l]
            value = act_eval(acts[l], s)[0]
        return float(value[0, 0])
    return f


def test_gradient_of_single_identity_layer_is_weights():
    model = make_model(3, [])
    w = np.array([[2.0], [-1.0], [0.5]])
    model.net.weights[0][:] = w
    req = HessianRequest(model, full_mask(model.net), np.array([0.4, 0.1, -0.2]))
    np.testing.assert_allclose(input_gradient(req), w[:, 0], atol=1e-15)


def test_gradient_zero_when_gates_zero():
    model = make_model(2, [4], seed=1)
    mask = MaskSample(gates=[np.zeros(s.in_width) for s in model.net.layers],
                      mode="hard")
    req = HessianRequest(model, mask, np.array([1.0, -1.0]))
    assert np.all(input_gradient(req) == 0.0)


def test_gradient_matches_fd_on_random_tanh_net():
    model = make_model(2, [8, 8], seed=2)
    mask = sample_mask(model.net, RngStream(5), mode="hard")
    rng = RngStream(6).generator()
    for _ in range(5):
        point = rng.normal(size=2)
        req = HessianRequest(model, mask, point)
        grad = input_gradient(req)
        fd = fd_gradient_oracle(head_fn(model, mask), point, step=1e-5)
        assert np.all(np.abs(grad - fd) <= 1e-5 * np.maximum(1.0, np.abs(fd)))


def test_gradient_can_include_linear_head():
    model = make_model(2, [4], seed=3)
    model.beta[:] = [1.5, -0.5]
    mask = full_mask(model.net)
    point = np.array([0.2, 0.3])
    bare = input_gradient(HessianRequest(model, mask, point))
    with_lin = input_gradient(HessianRequest(model, mask, point,
                                             include_linear=True))
    np.testing.assert_allclose(with_lin - bare, model.beta, atol=1e-15)


def test_hessian_of_linear_network_is_exact_zero():
    model = make_model(4, [5, 3], activation="identity", seed=4)
    mask = sample_mask(model.net, RngStream(7), mode="hard")
    req = HessianRequest(model, mask, np.array([1.0, 2.0, -3.0, 0.5]))
    assert np.all(input_hessian(req) == 0.0)


def product_net():
    """g(x) = x1*x2 built exactly as ((x1+x2)^2 - (x1-x2)^2) / 4."""
    specs = [LayerSpec(2, 2, "square"), LayerSpec(2, 1, "identity")]
    weights = [np.array([[1.0, 1.0], [1.0, -1.0]]),
               np.array([[0.25], [-0.25]])]
    biases = [np.zeros(2), np.zeros(1)]
    logits = [np.full(2, -10.0), np.full(2, -10.0)]
    net = ConcreteDropoutMLP(layers=specs, weights=weights, biases=biases,
                             gate_logits=logits)
    return HybridModel(beta=np.zeros(2), intercept=0.0, net=net)


def test_hand_built_product_network():
    model = product_net()
    mask = full_mask(model.net)
    point = np.array([0.7, -1.3])
    assert forward(model, point, mask) == pytest.approx(0.7 * -1.3, abs=1e-14)
    hess = input_hessian(HessianRequest(model, mask, point))
    assert hess[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert hess[1, 0] == pytest.approx(1.0, abs=1e-12)
    assert hess[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_hessian_matches_fd_on_random_softplus_net():
    model = make_model(3, [16], activation="softplus", seed=8)
    mask = sample_mask(model.net, RngStream(9), mode="hard")
    rng = RngStream(10).generator()
    worst = 0.0
    for _ in range(100):
        point = rng.normal(size=3)
        hess = input_hessian(HessianRequest(model, mask, point))
        fd = fd_hessian_oracle(head_fn(model, mask), point, step=1e-3)
        denom = max(1.0, np.max(np.abs(fd)))
        worst = max(worst, np.max(np.abs(hess - fd)) / denom)
    assert worst < 1e-4


def test_hessian_exact_symmetry():
    rng = RngStream(11).generator()
    for seed in range(5):
        model = make_model(4, [6, 5], seed=20 + seed)
        mask = sample_mask(model.net, RngStream(30 + seed), mode="hard")
        points = rng.normal(size=(7, 4))
        hs = model_batch_hessian(model, mask, points)
        assert np.array_equal(hs, np.transpose(hs, (0, 2, 1)))


def test_batch_matches_per_point():
    model = make_model(3, [5], seed=13)
    mask = sample_mask(model.net, RngStream(14), mode="hard")
    points = RngStream(15).generator().normal(size=(6, 3))
    hs = model_batch_hessian(model, mask, points)
    for i in range(6):
        single = input_hessian(HessianRequest(model, mask, points[i]))
        np.testing.assert_allclose(hs[i], single, atol=1e-14)


def test_hidden_layer_hessian_matches_fd():
    model = make_model(2, [6, 4], seed=16)
    mask = sample_mask(model.net, RngStream(17), mode="hard")
    point = RngStream(18).generator().normal(size=6) * 0.5
    hess = input_hessian(HessianRequest(model, mask, point, layer=1))
    fd = fd_hessian_oracle(head_fn(model, mask, layer=1), point, step=1e-3)
    denom = max(1.0, np.max(np.abs(fd)))
    assert np.max(np.abs(hess - fd)) / denom < 1e-4


def test_chain_consistency_between_layers():
    # Hessian at the inputs must equal J^T H_1 J plus the gradient-weighted
    # curvature of the first layer, J being that layer's Jacobian.
    model = make_model(2, [5], seed=19)
    mask = sample_mask(model.net, RngStream(20), mode="hard")
    net = model.net
    x = np.array([0.3, -0.8])
    h0 = input_hessian(HessianRequest(model, mask, x))

    z0 = mask.gates[0]
    s1 = (x * z0) @ net.weights[0] + net.biases[0]
    act = Activation(net.layers[0].activation)
    v1, d1, d2 = act_eval(act, s1)
    grad1 = input_gradient(HessianRequest(model, mask, v1, layer=1))
    h1 = input_hessian(HessianRequest(model, mask, v1, layer=1))

    wz = net.weights[0] * z0[:, None]  # effective input weights
    jac = d1[:, None] * wz.T  # (hidden, in)
    composed = jac.T @ h1 @ jac
    for k in range(net.layers[0].out_width):
        composed += grad1[k] * d2[k] * np.outer(wz[:, k], wz[:, k])
    np.testing.assert_allclose(h0, composed, atol=1e-10)


def test_layer_values_reference_network():
    model = make_model(2, [4, 3], seed=21)
    x = RngStream(22).generator().normal(size=(5, 2))
    v0 = layer_values(model, x, 0)
    np.testing.assert_array_equal(v0, x)
    v1 = layer_values(model, x, 1)
    s = x @ model.net.weights[0] + model.net.biases[0]
    np.testing.assert_allclose(v1, np.tanh(s), atol=1e-14)


def test_fd_oracle_bilinear():
    f = lambda p: p[0] * p[1]
    h = fd_hessian_oracle(f, np.array([3.0, -2.0]), step=1e-3)
    assert h[0, 1] == pytest.approx(1.0, abs=1e-6)


def test_fd_oracle_quartic():
    f = lambda p: p[0] ** 2 * p[1] ** 2
    h = fd_hessian_oracle(f, np.array([1.0, 1.0]), step=1e-3)
    assert h[0, 1] == pytest.approx(4.0, rel=1e-5)  # d2/dxdy = 4xy


def test_fd_oracle_constant():
    h = fd_hessian_oracle(lambda p: 7.0, np.array([1.0, 2.0, 3.0]), step=1e-3)
    assert np.all(h == 0.0)


def test_request_validation():
    model = make_model(2, [3])
    mask = full_mask(model.net)
    with pytest.raises(ValueError):
        HessianRequest(model, mask, np.zeros(2), layer=5)
    with pytest.raises(ValueError):
        HessianRequest(model, mask, np.zeros(3), layer=0)
    with pytest.raises(ValueError):
        fd_hessian_oracle(lambda p: 0.0, np.zeros(2), step=0.0)


def test_debug_dump_csv(tmp_path):
    from hessix.hessian import dump_hessians_csv

    model = make_model(2, [3], seed=40)
    mask = full_mask(model.net)
    points = RngStream(41).generator().normal(size=(3, 2))
    hs = model_batch_hessian(model, mask, points)
    path = tmp_path / "hessians.csv"
    dump_hessians_csv(hs, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "point,i,j,value"
    assert len(lines) == 1 + 3 * 2 * 2
    n, i, j, value = lines[1].split(",")
    assert float(value) == hs[0, 0, 0]
