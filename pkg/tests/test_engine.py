import numpy as np
import pytest

from linbp import tensor as T
from linbp.engine import (
    LINEAR,
    MASKED,
    STANDARD,
    BackpropPlan,
    backward,
    compute_alpha,
    gradients,
    relu_backward,
    residual_backward,
)
from linbp.errors import ConfigError, ShapeError, StaleTapeError
from linbp.nn import LayerSpec, Network, forward, loss_ce
from netgen import fd_compare, mlp_specs, positive_net, random_input, random_net, resnet_specs


def ce_grad(net, x, y, plan=None, log=None):
    logits, tape = forward(net, x)
    _, dl = loss_ce(logits, y)
    return backward(net, tape, dl, plan, log)


def test_relu_backward_examples():
    g = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(relu_backward(g, np.array([1.0, 0, 0]), MASKED), [1, 0, 0])
    np.testing.assert_array_equal(relu_backward(g, np.array([0.0, 1, 0]), LINEAR), g)
    ones = np.ones(3)
    assert np.array_equal(relu_backward(g, ones, MASKED), relu_backward(g, ones, LINEAR))
    with pytest.raises(ShapeError):
        relu_backward(g, np.ones(2), MASKED)


def test_compute_alpha_examples():
    assert compute_alpha(np.array([3.0, 4.0]), np.array([6.0, 8.0])) == 0.5
    assert compute_alpha(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 1.0
    assert compute_alpha(np.array([1.0, 2.0]), np.zeros(2)) == 1.0


def test_plan_construction():
    net = Network.build(resnet_specs(2, 3, 2), (2, 6, 6), 3)
    plan = BackpropPlan.linbp(net, 1)
    relus = [s for s in net.all_layers() if s.kind == "ReLU"]
    assert plan.mode(relus[0].id) is MASKED
    assert all(plan.mode(s.id) is LINEAR for s in relus[1:])
    assert BackpropPlan.standard().is_standard and not plan.is_standard
    assert BackpropPlan.expert({2: "linear"}).mode(2) is LINEAR
    for bad in (0.0, 1.5):
        with pytest.raises(ConfigError):
            BackpropPlan(sgm_lambda=bad)


def test_standard_backward_matches_finite_differences():
    for seed in range(12):
        net = random_net(seed)
        rng = np.random.default_rng(seed + 100)
        x = random_input(net, rng)
        y = int(rng.integers(3))
        bad, checked, skipped = fd_compare(net, x, y, ce_grad(net, x, y))
        assert bad == 0 and checked > 3 * skipped


def test_linear_plan_is_weight_product():
    net = Network.build(mlp_specs(4, (5,), 3), (4,), 3, seed=2)
    w1, w2 = net.params[0]["weight"], net.params[2]["weight"]
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.normal(size=4).astype(np.float32)
        logits, tape = forward(net, x)
        dl = rng.normal(size=3).astype(np.float32)
        g = backward(net, tape, dl, BackpropPlan.linbp(net, 0))
        np.testing.assert_allclose(g, w1.astype(np.float64) @ (w2.astype(np.float64) @ dl), atol=1e-5)


def test_all_positive_preactivations_make_linbp_bitwise_standard():
    for specs, shape in [(mlp_specs(4, (5, 6), 3), (4,)), (resnet_specs(2, 3, 2), (2, 6, 6))]:
        net = positive_net(specs, shape, 3)
        x = np.random.default_rng(1).uniform(0.1, 1, size=shape).astype(np.float32)
        _, tape = forward(net, x)
        for s in net.all_layers():
            if s.kind == "ReLU":
                assert tape.pre_activation(s.id).min() > 0
        std = ce_grad(net, x, 1)
        for k in sorted(net.boundaries()):
            log = []
            lin = ce_grad(net, x, 1, BackpropPlan.linbp(net, k), log)
            assert lin.tobytes() == std.tobytes()
            assert all(np.all(info.alpha == 1.0) for info in log)


def _dense_matrix(fn, n_in):
    """Columns are fn applied to basis vectors: the Jacobian of a linear map."""
    cols = [fn(np.eye(n_in)[i]) for i in range(n_in)]
    return np.stack([c.reshape(-1) for c in cols], axis=1)


def test_residual_branch_gradients_against_explicit_jacobians():
    net = random_net(5, "resnet")
    block = next(s for s in net.layers if s.kind == "ResidualBlock")
    conv1, bn1, relu_b, conv2, bn2, post = block.children
    x = random_input(net, np.random.default_rng(3))
    logits, tape = forward(net, x)
    shape = tape.records[conv1.id]["x_shape"][1:]
    n = int(np.prod(shape))
    p = net.params

    def conv(spec):
        w = p[spec.id]["weight"].astype(np.float64)
        return _dense_matrix(lambda v: T.conv2d(v.reshape(shape), w, None, 1, 1), n)

    def bn(spec):
        q = p[spec.id]
        s = q["gamma"] / np.sqrt(q["running_var"].astype(np.float64) + 1e-5)
        return np.diag(np.repeat(s, n // len(s)))

    mask = np.diag(tape.mask(relu_b.id).reshape(-1).astype(np.float64))
    a = bn(bn1) @ conv(conv1)
    b = bn(bn2) @ conv(conv2)
    j_masked = b @ mask @ a
    j_linear = b @ a
    g_sum = np.random.default_rng(4).normal(size=(1,) + shape).astype(np.float32)
    plan = BackpropPlan.linbp(net, 0)
    g_out, info = residual_backward(net, tape, block.id, g_sum, plan)
    gm_ref = j_masked.T @ g_sum.reshape(-1)
    gl_ref = j_linear.T @ g_sum.reshape(-1)
    np.testing.assert_allclose(info.g_masked.reshape(-1), gm_ref, rtol=1e-4, atol=1e-5)
    np.testing.assert_allclose(info.g_linear.reshape(-1), gl_ref, rtol=1e-4, atol=1e-5)
    alpha = np.linalg.norm(gm_ref) / np.linalg.norm(gl_ref)
    assert abs(info.alpha[0] - alpha) < 1e-5
    np.testing.assert_allclose(g_out.reshape(-1), g_sum.reshape(-1) + alpha * gl_ref, rtol=1e-4, atol=1e-5)
    assert abs(np.linalg.norm(info.alpha[0] * info.g_linear) - np.linalg.norm(info.g_masked)) < 1e-6


def test_residual_hand_case_alpha_half():
    # 1 channel, 1x5 image, 1x1 convs with weight 1 and identity batch norm:
    # the branch gradient is the gradient itself, masked where the input is negative.
    specs = [LayerSpec("ResidualBlock", {"channels": 1}, (
        LayerSpec.conv(1, 1, 1), LayerSpec.batchnorm(1), LayerSpec.relu("branch"),
        LayerSpec.conv(1, 1, 1), LayerSpec.batchnorm(1), LayerSpec.relu("post_add"))),
        LayerSpec.flatten(), LayerSpec.dense(5, 2)]
    net = Network.build(specs, (1, 1, 5), 2)
    for lid in (1, 4):
        net.params[lid]["weight"][:] = 1
    for lid in (2, 5):
        net.params[lid]["running_var"][:] = 1 - 1e-5
    x = np.array([[[1.0, 1.0, -1.0, -1.0, -1.0]]], np.float32)
    _, tape = forward(net, x)
    g_sum = np.array([[[[3.0, 4.0, 5.0, 5.0, 5.0]]]], np.float32)
    g_out, info = residual_backward(net, tape, 0, g_sum, BackpropPlan.linbp(net, 0))
    assert abs(np.linalg.norm(info.g_masked) - 5) < 1e-5
    assert abs(np.linalg.norm(info.g_linear) - 10) < 1e-5
    assert abs(info.alpha[0] - 0.5) < 1e-6
    np.testing.assert_allclose(g_out, g_sum + 0.5 * info.g_linear, atol=1e-6)
    # before the split the block uses the standard masked rule
    g_std, _ = residual_backward(net, tape, 0, g_sum, STANDARD, in_tail=False)
    np.testing.assert_allclose(g_std.reshape(-1), [6, 8, 5, 5, 5], atol=1e-5)


def test_norm_preservation_random_passes():
    for seed in range(20):
        net = random_net(3 * seed + 2, "resnet")
        rng = np.random.default_rng(seed)
        log = []
        ce_grad(net, random_input(net, rng), int(rng.integers(3)), BackpropPlan.linbp(net, 1), log)
        for info in log:
            lhs = np.linalg.norm(info.alpha[0] * info.g_linear.astype(np.float64))
            rhs = np.linalg.norm(info.g_masked.astype(np.float64))
            assert abs(lhs - rhs) <= 1e-6 * max(1.0, rhs)


def test_sgm_lambda_scales_branch_only():
    net = random_net(8, "resnet")
    x = random_input(net, np.random.default_rng(0))
    _, tape = forward(net, x)
    block = next(s for s in net.layers if s.kind == "ResidualBlock")
    g_sum = np.random.default_rng(1).normal(size=(1,) + tape.records[block.children[0].id]["x_shape"][1:])
    g_sum = g_sum.astype(np.float32)
    full, info = residual_backward(net, tape, block.id, g_sum, BackpropPlan.linbp(net, 0))
    half, _ = residual_backward(net, tape, block.id, g_sum, BackpropPlan.linbp(net, 0, sgm_lambda=0.5))
    np.testing.assert_allclose(half - g_sum, 0.5 * (full - g_sum), rtol=1e-5, atol=1e-7)
    tiny, _ = residual_backward(net, tape, block.id, g_sum, BackpropPlan.linbp(net, 0, sgm_lambda=1e-9))
    np.testing.assert_allclose(tiny, g_sum, atol=1e-7)


def test_batched_backward_matches_per_example():
    net = random_net(11, "resnet")
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(4,) + net.input_shape).astype(np.float32)
    y = rng.integers(0, 3, size=4)
    plan = BackpropPlan.linbp(net, 1)
    batch = ce_grad(net, x, y, plan)
    for i in range(4):
        np.testing.assert_allclose(batch[i], ce_grad(net, x[i], int(y[i]), plan), rtol=1e-5, atol=1e-7)


def test_stale_tape_rejected():
    net = random_net(0, "mlp")
    logits, tape = forward(net, random_input(net, np.random.default_rng(0)))
    with pytest.raises(StaleTapeError):
        backward(net.copy(), tape, np.zeros(3, np.float32))
    with pytest.raises(ShapeError):
        backward(net, tape, np.zeros(4, np.float32))


def test_parameter_gradients_match_finite_differences():
    net = random_net(4, "conv")
    rng = np.random.default_rng(9)
    x = rng.uniform(size=(3,) + net.input_shape)
    y = rng.integers(0, 3, size=3)

    def loss_with(lid, name):
        def fn(w):
            saved = net.params[lid][name]
            net.params[lid][name] = w
            try:
                logits, _ = forward(net, x, train_mode=True)
                return float(loss_ce(logits, y)[0].sum())
            finally:
                net.params[lid][name] = saved
        return fn

    logits, tape = forward(net, x.astype(np.float64), train_mode=True)
    _, dl = loss_ce(logits, y)
    gx, grads = gradients(net, tape, dl, need_input=True)
    for lid, name in [(8, "weight"), (0, "bias"), (1, "gamma"), (5, "beta")]:
        fd = T.finite_diff_grad(loss_with(lid, name), net.params[lid][name].astype(np.float64), 1e-4)
        np.testing.assert_allclose(grads[lid][name], fd, rtol=1e-3, atol=1e-5)
    fx = T.finite_diff_grad(lambda v: float(loss_ce(forward(net, v, train_mode=True)[0], y)[0].sum()),
                            x, 1e-4)
    np.testing.assert_allclose(gx, fx, rtol=1e-3, atol=1e-5)


def test_frozen_layers_get_no_gradients():
    net = random_net(1, "conv")
    x = random_input(net, np.random.default_rng(0))
    logits, tape = forward(net, x)
    _, grads = gradients(net, tape, loss_ce(logits, 0)[1], frozen_below=4)
    assert sorted(grads) == [4, 5, 8]
