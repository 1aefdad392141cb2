import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aad import ConfigurationError, DimensionError, FormatError, UsageError
from aad.diffcore import (AdamState, LayerSpec, NetworkParams, Tensor, adam_step, add, config_digest,
                          conv2d_forward, conv_output_size, dense_forward, forward, grad_check, leaky_relu,
                          load_checkpoint, matmul, mean, mul, relu, save_checkpoint, square, sub, tsum)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- dense ---------------------------------------------------------------------------------

def test_dense_identity_and_hand_case():
    x = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(dense_forward(Tensor(x), Tensor(np.eye(4))).data, x)
    y = dense_forward(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([3.0]))
    np.testing.assert_array_equal(y.data, [[6.0]])


def test_dense_vs_triple_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((4, 7)), rng.standard_normal((7, 3)), rng.standard_normal(3)
    oracle = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            s = b[j]
            for k in range(7):
                s += x[i, k] * w[k, j]
            oracle[i, j] = s
    np.testing.assert_allclose(dense_forward(Tensor(x), Tensor(w), Tensor(b)).data, oracle, atol=1e-6)


def test_dense_shape_errors():
    with pytest.raises(DimensionError):
        dense_forward(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(DimensionError):
        dense_forward(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))), Tensor(np.ones(3)))


# -- conv2d ----------------------------------------------------------------------------------

def _conv_oracle(x, k, stride, pad):
    B, C, H, W = x.shape
    O, _, kh, _ = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kh) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    s = 0.0
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kh):
                                s += xp[b, c, i * stride + u, j * stride + v] * k[o, c, u, v]
                    out[b, o, i, j] = s
    return out


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 1, 4, 4))
    np.testing.assert_array_equal(conv2d_forward(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)


def test_conv_downsampling_shape():
    y = conv2d_forward(Tensor(np.ones((1, 1, 64, 64))), Tensor(np.ones((1, 1, 3, 3))), 2, 1)
    assert y.shape == (1, 1, 32, 32)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_vs_nested_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, k = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    np.testing.assert_allclose(conv2d_forward(Tensor(x), Tensor(k), stride, pad).data,
                               _conv_oracle(x, k, stride, pad), atol=1e-6)


def test_conv_1x1_equals_per_pixel_dense():
    rng = np.random.default_rng(2)
    x, k = rng.standard_normal((2, 3, 6, 5)), rng.standard_normal((4, 3, 1, 1))
    y = conv2d_forward(Tensor(x), Tensor(k)).data
    pix = x.transpose(0, 2, 3, 1).reshape(-1, 3)
    dense = dense_forward(Tensor(pix), Tensor(k[:, :, 0, 0].T)).data
    np.testing.assert_allclose(y.transpose(0, 2, 3, 1).reshape(-1, 4), dense, atol=1e-6)


def test_conv_output_size_rules():
    assert conv_output_size(64, 3, 2, 1) == 32
    assert [conv_output_size(n, 3, 2, 1) for n in (32, 16, 8)] == [16, 8, 4]
    assert conv_output_size(5, 3, 2, 0) == 2
    with pytest.raises(ConfigurationError):
        conv_output_size(2, 5, 1, 0)
    with pytest.raises(DimensionError):
        conv2d_forward(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))


# -- activations -------------------------------------------------------------------------------

def test_leaky_relu_values():
    y = leaky_relu(Tensor([3.0, -5.0, 0.0]), 0.2).data
    np.testing.assert_allclose(y, [3.0, -1.0, 0.0])


def test_leaky_relu_negative_gradient_by_finite_difference():
    x = leaf([-1.3])
    leaky_relu(x, 0.2).sum().backward()
    h = 1e-5
    numeric = (leaky_relu(Tensor([-1.3 + h]), 0.2).item() - leaky_relu(Tensor([-1.3 - h]), 0.2).item()) / (2 * h)
    assert x.grad[0] == pytest.approx(0.2) and numeric == pytest.approx(0.2, abs=1e-9)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20))
def test_leaky_relu_is_max_of_x_and_slope_x(vals):
    x = np.array(vals)
    np.testing.assert_allclose(leaky_relu(Tensor(x), 0.2).data, np.maximum(x, 0.2 * x))
    np.testing.assert_allclose(relu(Tensor(x)).data, np.maximum(x, 0.0))


# -- backward --------------------------------------------------------------------------------

def test_sum_gradient_is_ones():
    x = leaf(np.random.default_rng(0).standard_normal((3, 4, 2)))
    tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4, 2)))


def test_mse_gradient_hand_derived():
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    t = np.array([[0.5, 0.0], [1.0, 2.0]])
    w = leaf([[0.3, -0.2], [0.1, 0.4]])
    loss = mean(square(sub(matmul(Tensor(x), w), Tensor(t))))
    loss.backward()
    n = t.size
    np.testing.assert_allclose(w.grad, 2 * x.T @ (x @ w.data - t) / n, atol=1e-12)


def test_backward_on_leaf_is_usage_error():
    with pytest.raises(UsageError):
        Tensor(np.ones(1)).backward()
    with pytest.raises(UsageError):
        add(leaf(np.ones(2)), 1.0).backward()  # not scalar


def test_shared_subexpression_accumulates():
    x = leaf([2.0])
    y = mul(x, x)
    tsum(add(y, y)).backward()
    assert x.grad[0] == pytest.approx(8.0)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    w = leaf(rng.standard_normal((4, 3)))
    x = Tensor(rng.standard_normal((5, 4)))

    def l1():
        return tsum(square(matmul(x, w)))

    def l2():
        return tsum(leaky_relu(matmul(x, w), 0.2))

    grads = []
    for fn in (l1, l2, lambda: add(mul(l1(), a), mul(l2(), b))):
        w.grad = None
        fn().backward()
        grads.append(w.grad.copy())
    np.testing.assert_allclose(grads[2], a * grads[0] + b * grads[1], atol=1e-10)


def test_forward_and_gradients_are_deterministic():
    layers = [LayerSpec("conv2d", 1, 4, kernel=3, stride=2, pad=1, activation="leaky_relu"),
              LayerSpec("dense", 4 * 4 * 4, 3, activation="leaky_relu")]
    x = np.random.default_rng(0).standard_normal((2, 1, 8, 8))
    runs = []
    for _ in range(2):
        p = NetworkParams.initialize(layers, 7)
        y = forward(p, x)
        tsum(square(y)).backward()
        runs.append((y.data.copy(), [t.grad.copy() for _, t in p]))
    assert np.array_equal(runs[0][0], runs[1][0])
    for a, b in zip(runs[0][1], runs[1][1]):
        assert np.array_equal(a, b)


# -- Adam ---------------------------------------------------------------------------------------

def _params(values):
    p = NetworkParams([LayerSpec("dense", 1, len(values))])
    p.tensors["layer0.weight"] = Tensor(np.array([values], dtype=np.float64), requires_grad=True)
    return p


def test_adam_first_step_is_lr_times_sign():
    p = _params([1.0, -2.0, 3.0])
    p["layer0.weight"].grad = np.array([[5.0, -0.3, 1e3]])
    adam_step(p, AdamState(lr=0.01))
    np.testing.assert_allclose(p["layer0.weight"].data, [[0.99, -1.99, 2.99]], atol=1e-8)
    assert p["layer0.weight"].grad is None


def test_adam_zero_gradient_and_zero_lr():
    p = _params([1.0, 2.0])
    st_ = AdamState(lr=0.01)
    p["layer0.weight"].grad = np.zeros((1, 2))
    adam_step(p, st_)
    np.testing.assert_array_equal(p["layer0.weight"].data, [[1.0, 2.0]])
    assert st_.t == 1
    st0 = AdamState(lr=0.0)
    for g in (3.0, -7.0, 0.5):
        p["layer0.weight"].grad = np.full((1, 2), g)
        adam_step(p, st0)
    np.testing.assert_array_equal(p["layer0.weight"].data, [[1.0, 2.0]])


def test_adam_missing_gradient():
    with pytest.raises(UsageError):
        adam_step(_params([1.0]), AdamState())


def test_adam_trajectory_vs_oracle():
    # minimize (w - 3)^2 from w = 0
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    w, m, v = 0.0, 0.0, 0.0
    oracle = []
    for t in range(1, 4):
        g = 2 * (w - 3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
        oracle.append(w)
    p = _params([0.0])
    state = AdamState(lr=lr)
    got = []
    for _ in range(3):
        wt = p["layer0.weight"]
        tsum(square(sub(wt, 3.0))).backward()
        adam_step(p, state)
        got.append(float(wt.data[0, 0]))
    np.testing.assert_allclose(got, oracle, atol=1e-10)


# -- grad_check ------------------------------------------------------------------------------------

def test_grad_check_dense_toy():
    rng = np.random.default_rng(0)
    p = NetworkParams.initialize([LayerSpec("dense", 5, 4, bias=True, activation="linear"),
                                  LayerSpec("dense", 4, 2, bias=True, activation="linear")], 0, np.float64)
    x = rng.standard_normal((6, 5))
    rep = grad_check(lambda: tsum(square(forward(p, x))), p)
    assert rep.max_error < 1e-6 and rep.checked == p.total_parameter_count() and rep.skipped == 0


def test_grad_check_conv_leaky_chain():
    layers = [LayerSpec("conv2d", 1, 3, kernel=3, stride=2, pad=1, activation="leaky_relu"),
              LayerSpec("conv2d", 3, 4, kernel=3, stride=2, pad=1, activation="leaky_relu"),
              LayerSpec("dense", 4 * 2 * 2, 2, activation="leaky_relu")]
    p = NetworkParams.initialize(layers, 1, np.float64)
    x = np.random.default_rng(1).standard_normal((3, 1, 8, 8))
    rep = grad_check(lambda: tsum(square(forward(p, x))), p)
    assert rep.passed and rep.max_error < 1e-5
    assert rep.checked >= 4 * rep.skipped


def test_grad_check_detects_corruption():
    p = NetworkParams.initialize([LayerSpec("dense", 5, 3, bias=True)], 0, np.float64)
    x = np.random.default_rng(0).standard_normal((4, 5))
    rep = grad_check(lambda: tsum(square(forward(p, x))), p, grad_hook=lambda n, g: g * 1.1)
    assert not rep.passed and rep.max_error > 1e-5


def test_grad_check_skips_kink_crossings():
    # x sits exactly on the relu kink: the stencil straddles it
    x = leaf([0.0, 1.0])
    rep = grad_check(lambda: tsum(relu(x)), {"x": x})
    assert rep.skipped == 1 and rep.checked == 1 and rep.passed


def test_grad_check_requires_float64():
    p = NetworkParams.initialize([LayerSpec("dense", 2, 2)], 0, np.float32)
    with pytest.raises(UsageError):
        grad_check(lambda: tsum(forward(p, np.ones((1, 2)))), p)


# -- params and checkpoints -----------------------------------------------------------------------------

def test_glorot_bounds_and_determinism():
    layers = [LayerSpec("dense", 300, 100, bias=True), LayerSpec("conv2d", 8, 16, kernel=3)]
    a, b = NetworkParams.initialize(layers, 3), NetworkParams.initialize(layers, 3)
    for (n, ta), (_, tb) in zip(a, b):
        assert np.array_equal(ta.data, tb.data)
    assert np.abs(a["layer0.weight"].data).max() <= np.sqrt(6 / 400)
    assert np.abs(a["layer1.weight"].data).max() <= np.sqrt(6 / (8 * 9 + 16 * 9))
    assert not np.any(a["layer0.bias"].data)
    assert a.total_parameter_count() == sum(t.size for _, t in a)
    assert a.layer_parameter_counts() == [300 * 100 + 100, 16 * 8 * 9]


def test_checkpoint_round_trip(tmp_path):
    layers = [LayerSpec("conv2d", 1, 2, kernel=3, stride=2, pad=1, activation="leaky_relu"),
              LayerSpec("dense", 8, 3, bias=True, activation="relu")]
    p = NetworkParams.initialize(layers, 5)
    meta = {"seed": 5, "init": "glorot_uniform", "digest": config_digest({"a": 1})}
    save_checkpoint(tmp_path / "m.ckpt", p, meta)
    q, meta2 = load_checkpoint(tmp_path / "m.ckpt")
    assert meta2 == meta and q.layers == p.layers and q.names() == p.names()
    for (_, a), (_, b) in zip(p, q):
        assert a.dtype == b.dtype == np.float32 and np.array_equal(a.data, b.data)
    assert (tmp_path / "m.ckpt").read_bytes()[:4] == b"AADC"


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"RIFF0000WAVE")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad")


def test_config_digest_is_order_independent():
    assert config_digest({"a": 1, "b": [1, 2]}) == config_digest({"b": [1, 2], "a": 1})
    assert config_digest({"a": 1}) != config_digest({"a": 2})
