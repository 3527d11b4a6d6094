import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinytracker import nnops
from tinytracker.nnops import Activation, Padding
from tinytracker.qtensor import (
    QuantError,
    QuantParams,
    Tensor,
    compute_quant_params,
    dequantize,
    quantize,
    quantize_weights,
)

import oracles
from fidelity import OPERATORS, run_fixture


def nhwc(rows):
    """2-D single-channel list -> (1, H, W, 1) tensor."""
    return Tensor.f32(np.asarray(rows, dtype=np.float32)[None, :, :, None])


def test_conv_hand_sum():
    out = nnops.conv2d(nhwc([[1, 2], [3, 4]]), Tensor.f32(np.ones((1, 2, 2, 1))), Tensor.f32([0.0]))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 10.0


def test_conv_identity_1x1():
    x = nhwc(np.arange(12).reshape(3, 4))
    out = nnops.conv2d(x, Tensor.f32(np.ones((1, 1, 1, 1))), Tensor.f32([0.0]))
    assert np.array_equal(out.data, x.data)


def test_conv_matches_naive_float():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 6, 5, 4))
    w = rng.normal(size=(6, 3, 3, 2))
    b = rng.normal(size=6)
    for stride, same in itertools.product([(1, 1), (2, 2), (2, 1)], [True, False]):
        got = nnops.conv2d(
            Tensor.f32(x), Tensor.f32(w), Tensor.f32(b), stride=stride,
            padding=Padding.SAME if same else Padding.VALID, groups=2,
        )
        want = oracles.naive_conv_float(
            x.astype(np.float32).tolist(), w.astype(np.float32).tolist(), b.astype(np.float32).tolist(), stride, same, 2
        )
        np.testing.assert_allclose(got.data, np.asarray(want), rtol=1e-5, atol=1e-5)


def test_conv_errors():
    x = Tensor.f32(np.zeros((1, 4, 4, 3)))
    with pytest.raises(QuantError):
        nnops.conv2d(x, Tensor.f32(np.zeros((2, 3, 3, 2))), None)
    with pytest.raises(QuantError):
        nnops.conv2d(x, Tensor.f32(np.zeros((2, 3, 3, 3))), Tensor.f32([0.0]))
    xq = quantize(x, QuantParams.per_tensor(0.1))
    wq = quantize_weights(Tensor.f32(np.ones((2, 1, 1, 3))))
    with pytest.raises(QuantError):
        nnops.conv2d(xq, wq, None)  # no output params


@pytest.mark.parametrize("k", [1, 3, 5])
@pytest.mark.parametrize("stride", [1, 2])
def test_same_padding_dims(k, stride):
    for size in range(1, 12):
        x = Tensor.f32(np.zeros((1, size, size + 1, 1)))
        out = nnops.conv2d(x, Tensor.f32(np.zeros((1, k, k, 1))), None, stride=stride, padding=Padding.SAME)
        assert out.shape[1:3] == (-(-size // stride), -(-(size + 1) // stride))


def test_valid_padding_dims():
    x = Tensor.f32(np.zeros((1, 9, 9, 1)))
    out = nnops.conv2d(x, Tensor.f32(np.zeros((1, 3, 3, 1))), None, stride=2, padding=Padding.VALID)
    assert out.shape == (1, 4, 4, 1)


def test_depthwise_identity_and_count():
    rng = np.random.default_rng(1)
    x = Tensor.f32(rng.normal(size=(1, 5, 5, 3)))
    w = np.zeros((1, 3, 3, 3))
    w[0, 1, 1, :] = 1
    out = nnops.depthwise_conv2d(x, Tensor.f32(w), None, padding=Padding.SAME)
    np.testing.assert_array_equal(out.data, x.data)
    out = nnops.depthwise_conv2d(Tensor.f32(np.ones((1, 5, 5, 2))), Tensor.f32(np.ones((1, 3, 3, 2))), None)
    assert out.shape == (1, 3, 3, 2)
    assert np.all(out.data == 9.0)


def test_depthwise_rejects_multiplier():
    with pytest.raises(QuantError):
        nnops.depthwise_conv2d(Tensor.f32(np.ones((1, 3, 3, 2))), Tensor.f32(np.ones((1, 3, 3, 4))), None)


def test_fc_examples():
    x = Tensor.f32([[1.0, 2.0, 3.0]])
    out = nnops.fully_connected(x, Tensor.f32(np.eye(3)), Tensor.f32(np.zeros(3)))
    assert np.array_equal(out.data, x.data)
    out = nnops.fully_connected(x, Tensor.f32([[1.0, 1.0, 1.0]]), Tensor.f32([0.5]))
    assert out.data.item() == 6.5
    with pytest.raises(QuantError):
        nnops.fully_connected(x, Tensor.f32(np.ones((2, 4))), None)


def test_fc_flattens_pooled_nhwc():
    x = Tensor.f32(np.arange(4, dtype=np.float32).reshape(1, 1, 1, 4))
    out = nnops.fully_connected(x, Tensor.f32(np.ones((2, 4))), None)
    assert out.shape == (1, 2) and out.data.tolist() == [[6.0, 6.0]]


def test_fused_activations_float():
    x = Tensor.f32([[-2.0, 3.0, 8.0]])
    eye = Tensor.f32(np.eye(3))
    assert nnops.fully_connected(x, eye, act=Activation.RELU).data.tolist() == [[0.0, 3.0, 8.0]]
    assert nnops.fully_connected(x, eye, act=Activation.RELU6).data.tolist() == [[0.0, 3.0, 6.0]]


def test_global_avg_pool():
    assert np.all(nnops.global_avg_pool(Tensor.f32(np.full((1, 3, 4, 2), 1.25))).data == 1.25)
    assert nnops.global_avg_pool(nhwc([[1, 2], [3, 4]])).data.item() == 2.5
    qp = QuantParams.per_tensor(0.1, 5)
    xq = Tensor.i8(np.full((1, 3, 3, 2), -37), qp)
    out = nnops.global_avg_pool(xq)
    assert out.shape == (1, 1, 1, 2) and np.all(out.data == -37) and out.qparams == qp


def test_round_div_half_away():
    assert nnops.round_div(np.array([5, -5, 3, -3, 4]), 2).tolist() == [3, -3, 2, -2, 2]


def test_hard_swish_sigmoid_values():
    x = Tensor.f32([0.0, 3.0, -3.0, 1.0, -5.0, 9.0])
    np.testing.assert_allclose(nnops.hard_swish(x).data, [0, 3, 0, 4 / 6, 0, 9], rtol=1e-6)
    assert nnops.hard_sigmoid(Tensor.f32([0.0])).data.item() == 0.5


@pytest.mark.parametrize("kind", ["hard_swish", "hard_sigmoid"])
@pytest.mark.parametrize("seed", range(5))
def test_activation_lut_exact(kind, seed):
    rng = np.random.default_rng(seed)
    in_qp = QuantParams.per_tensor(rng.uniform(0.005, 0.1), int(rng.integers(-128, 128)))
    out_qp = QuantParams.per_tensor(rng.uniform(0.005, 0.1), int(rng.integers(-128, 128)))
    lut = nnops.activation_lut(kind, in_qp, out_qp)
    ref = oracles.hard_swish if kind == "hard_swish" else oracles.hard_sigmoid
    for code in range(-128, 128):
        real = dequantize(Tensor.i8([code], in_qp))
        want = quantize(Tensor.f32([ref(float(real.data[0]))]), out_qp).data[0]
        assert lut.data[code + 128] == want
    codes = Tensor.i8(np.arange(-128, 128), in_qp)
    out = getattr(nnops, kind)(codes, lut=lut)
    assert np.array_equal(out.data, lut.data)


def test_int8_pointwise_needs_params():
    xq = Tensor.i8([1, 2], QuantParams.per_tensor(0.1))
    with pytest.raises(QuantError):
        nnops.hard_swish(xq)


def test_add_zeros_and_mul_ones_identity():
    rng = np.random.default_rng(3)
    qp = QuantParams.per_tensor(0.05, -3)
    a = Tensor.i8(rng.integers(-128, 128, (1, 4, 4, 3)), qp)
    zeros = Tensor.i8(np.full((1, 4, 4, 3), 7), QuantParams.per_tensor(0.02, 7))
    out = nnops.elementwise_add(a, zeros, out_qparams=qp)
    assert np.max(np.abs(out.data.astype(int) - a.data.astype(int))) <= 1
    one_qp = compute_quant_params(0.0, 1.0)
    ones = quantize(Tensor.f32(np.ones((1, 1, 1, 3))), one_qp)
    out = nnops.elementwise_mul_broadcast_channels(a, ones, out_qparams=qp)
    assert np.max(np.abs(out.data.astype(int) - a.data.astype(int))) <= 1


def test_add_mul_shape_errors():
    a = Tensor.f32(np.zeros((1, 2, 2, 3)))
    with pytest.raises(QuantError):
        nnops.elementwise_add(a, Tensor.f32(np.zeros((1, 2, 2, 2))))
    with pytest.raises(QuantError):
        nnops.elementwise_mul_broadcast_channels(a, Tensor.f32(np.zeros((1, 1, 1, 2))))


def test_concat_channels():
    a = Tensor.f32(np.random.default_rng(0).random((1, 112, 112, 1)))
    b = Tensor.f32(np.random.default_rng(1).random((1, 112, 112, 2)))
    assert nnops.concat_channels([a]).same_as(a)
    out = nnops.concat_channels([a, b])
    assert out.shape == (1, 112, 112, 3)
    assert out.data[0, 5, 7, 0] == a.data[0, 5, 7, 0]
    assert out.data[0, 9, 3, 2] == b.data[0, 9, 3, 1]
    with pytest.raises(QuantError):
        nnops.concat_channels([a, Tensor.f32(np.zeros((1, 56, 56, 1)))])


def test_fold_batchnorm_identity_and_scale():
    rng = np.random.default_rng(0)
    w = Tensor.f32(rng.normal(size=(2, 3, 3, 4)))
    b = Tensor.f32(rng.normal(size=2))
    w2, b2 = nnops.fold_batchnorm(w, b, [1, 1], [0, 0], [0, 0], [1, 1], eps=0.0)
    assert w2.same_as(w) and b2.same_as(b)
    w3, _ = nnops.fold_batchnorm(w, b, [2, 2], [0, 0], [0, 0], [3, 3], eps=1.0)
    np.testing.assert_array_equal(w3.data, w.data)
    with pytest.raises(QuantError):
        nnops.fold_batchnorm(w, b, [1, 1], [0, 0], [0, 0], [-1, 1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_fold_batchnorm_equivalence(seed, depthwise):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 6))
    x = Tensor.f32(rng.normal(size=(1, 6, 6, c)))
    shape = (1, 3, 3, c) if depthwise else (int(rng.integers(1, 6)), 3, 3, c)
    w = Tensor.f32(rng.normal(size=shape))
    o = c if depthwise else shape[0]
    b = Tensor.f32(rng.normal(size=o))
    gamma, beta, mean = rng.normal(size=(3, o))
    var = rng.uniform(0.1, 2.0, o)
    eps = 1e-3
    fn = nnops.depthwise_conv2d if depthwise else nnops.conv2d
    raw = fn(x, w, b, padding=Padding.SAME).data.astype(np.float64)
    two_stage = (raw - mean) / np.sqrt(var + eps) * gamma + beta
    wf, bf = nnops.fold_batchnorm(w, b, gamma, beta, mean, var, eps, axis=3 if depthwise else 0)
    folded = fn(x, wf, bf, padding=Padding.SAME).data
    assert np.max(np.abs(folded - two_stage)) <= 1e-5 * max(1.0, np.max(np.abs(two_stage)))


@pytest.mark.parametrize("op", OPERATORS)
def test_int8_matches_float_reference(op):
    for seed in range(10):
        r = run_fixture(op, seed)
        assert r.max_err <= 2 * r.s_out, r
        assert r.frac_within_1 >= 0.95, r


def test_int8_conv_acc_matches_naive_small():
    rng = np.random.default_rng(11)
    x = rng.integers(-128, 128, (1, 5, 6, 4))
    w = rng.integers(-127, 128, (4, 3, 3, 2))
    b = rng.integers(-1000, 1000, 4)
    qp = QuantParams.per_tensor(0.1, 9)
    xq = Tensor.i8(x, qp)
    wq = Tensor.i8(w, QuantParams.per_channel([0.01] * 4, 0))
    got = nnops.conv2d_acc(xq, wq, Tensor.i32(b), stride=(2, 1), padding=Padding.SAME, groups=2)
    want = oracles.naive_conv_acc(x.tolist(), w.tolist(), b.tolist(), (2, 1), True, 2, 9)
    assert got.tolist() == want


def test_float_counter():
    x = Tensor.f32(np.ones((1, 2, 2, 1)))
    with nnops.count_float_kernels() as c:
        nnops.global_avg_pool(x)
        nnops.global_avg_pool(quantize(x, QuantParams.per_tensor(0.1)))
    assert c.count == 1 and c.kinds == ["global_avg_pool"]
