import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfis.errors import ConfigError, DataError
from cfis.tensor import (
    ConvSpec,
    Tensor,
    conv2d,
    nearest_upsample,
    read_tensor,
    softmax_group,
    tensor_from_bytes,
    tensor_to_bytes,
    write_tensor,
)

from oracles import conv2d_loops, nearest_index_map, softmax_by_hand


def test_tensor_rejects_bad_input():
    with pytest.raises(ConfigError):
        Tensor(np.zeros((2, 3, 4)))
    with pytest.raises(ConfigError):
        Tensor(np.zeros((1, 0, 2, 2)))
    with pytest.raises(ConfigError):
        Tensor(np.array([[[[np.nan]]]]))
    t = Tensor(np.ones((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        t.data[0, 0, 0, 0] = 5.0


def test_conv_identity_kernel():
    x = Tensor(np.ones((1, 1, 3, 3)))
    spec = ConvSpec(1, 1, 1, [[[[1.0]]]], [0.0])
    assert conv2d(x, spec).equals(x)


def test_conv_zero_weights_gives_bias():
    x = Tensor.random((2, 3, 5, 4), seed=3)
    spec = ConvSpec.zeros(3, 2, 3, bias=0.75)
    np.testing.assert_array_equal(conv2d(x, spec).data, np.full((2, 2, 5, 4), 0.75, dtype=np.float32))


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(7)
    x = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
    spec = ConvSpec.init(2, 3, 3, rng)
    expected = conv2d_loops(x.data, spec.weight, spec.bias)
    np.testing.assert_allclose(conv2d(x, spec).data, expected, rtol=1e-6, atol=1e-6)


def test_conv_channel_mismatch():
    with pytest.raises(ConfigError):
        conv2d(Tensor.random((1, 3, 4, 4)), ConvSpec.zeros(2, 2, 1))


def test_conv_spec_validation():
    with pytest.raises(ConfigError):
        ConvSpec(2, 2, 2, np.zeros(16), np.zeros(2))
    with pytest.raises(ConfigError):
        ConvSpec(2, 2, 3, np.zeros(17), np.zeros(2))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_conv_is_linear(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    spec = ConvSpec.init(3, 4, 3, rng, bias=False)
    x = rng.uniform(-1, 1, (1, 3, 5, 5)).astype(np.float32)
    y = rng.uniform(-1, 1, (1, 3, 5, 5)).astype(np.float32)
    lhs = conv2d(Tensor(alpha * x.astype(np.float64) + beta * y), spec).data
    rhs = alpha * conv2d(Tensor(x), spec).data.astype(np.float64) + beta * conv2d(Tensor(y), spec).data
    scale = max(1.0, float(np.abs(rhs).max()))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5 * scale)


def test_softmax_examples():
    x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1))
    out = softmax_group(x, 3).data.ravel()
    np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-4)
    np.testing.assert_allclose(out, softmax_by_hand([1.0, 2.0, 3.0]), atol=1e-7)

    eq = softmax_group(Tensor.full((1, 4, 2, 2), 0.3), 4).data
    np.testing.assert_allclose(eq, 0.25, atol=1e-7)

    lim = softmax_group(Tensor(np.array([0.0, 200.0]).reshape(1, 2, 1, 1)), 2).data.ravel()
    assert lim[0] < 1e-30 and lim[1] == pytest.approx(1.0)


def test_softmax_non_divisible():
    with pytest.raises(ConfigError):
        softmax_group(Tensor.random((1, 5, 2, 2)), 2)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-20, 20), group=st.sampled_from([1, 3, 9]))
def test_softmax_unit_sum_and_shift_invariance(seed, shift, group):
    x = Tensor.random((2, 9, 3, 3), seed=seed, low=-5, high=5)
    a = softmax_group(x, group).data.astype(np.float64)
    assert np.all(a > 0)
    sums = a.reshape(2, 9 // group, group, 3, 3).sum(axis=2)
    np.testing.assert_allclose(sums, 1.0, atol=1e-6)
    b = softmax_group(Tensor(x.data.astype(np.float64) + shift), group).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_nearest_examples():
    x = Tensor.random((1, 2, 3, 3), seed=1)
    assert nearest_upsample(x, 1).equals(x)
    small = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=np.float32)
    np.testing.assert_array_equal(nearest_upsample(small, 2).data[0, 0], expected)
    x = Tensor.random((1, 3, 5, 7), seed=11)
    np.testing.assert_array_equal(nearest_upsample(x, 3).data, nearest_index_map(x.data, 3))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), scale=st.integers(1, 4))
def test_nearest_subsample_recovers_input(seed, scale):
    x = Tensor.random((1, 2, 3, 4), seed=seed)
    up = nearest_upsample(x, scale)
    np.testing.assert_array_equal(up.data[:, :, ::scale, ::scale], x.data)


def test_nearest_bad_scale():
    with pytest.raises(ConfigError):
        nearest_upsample(Tensor.random((1, 1, 2, 2)), 0)


def test_tnsr1_roundtrip(tmp_path):
    x = Tensor.random((2, 3, 4, 5), seed=5)
    raw = tensor_to_bytes(x)
    assert raw.startswith(b"TNSR1 2 3 4 5\n")
    assert len(raw) == len(b"TNSR1 2 3 4 5\n") + 4 * 120
    assert tensor_from_bytes(raw).equals(x)
    path = tmp_path / "x.tnsr"
    write_tensor(path, x)
    assert read_tensor(path).equals(x)


@pytest.mark.parametrize("raw", [
    b"TNSR2 1 1 1 1\n\x00\x00\x00\x00",
    b"TNSR1 1 1 1\n\x00\x00\x00\x00",
    b"TNSR1 1 1 1 2\n\x00\x00\x00\x00",
    b"TNSR1 1 1 1 1",
    b"TNSR1 a 1 1 1\n\x00\x00\x00\x00",
])
def test_tnsr1_bad_input(raw):
    with pytest.raises(DataError):
        tensor_from_bytes(raw)
