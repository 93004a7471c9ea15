import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from modconn import tensor as T
from modconn.errors import AdapterError, DegenerateBatchError, ShapeError
from modconn.gradcheck import op_suite
from modconn.tensor import Tensor


def naive_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    return out


@pytest.mark.parametrize("result", op_suite(), ids=lambda r: r.name)
def test_op_gradients_match_finite_differences(result):
    assert result.passed, str(result)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (1, 0, 3)])
def test_conv_matches_direct_loop(rng, stride, pad, k):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, k, k))
    got = T.conv2d(Tensor(x), Tensor(w), stride, pad).data
    np.testing.assert_allclose(got, naive_conv(x, w, stride, pad), rtol=1e-10, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))), 1, 1)


def test_float32_is_preserved(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
    w = Tensor(rng.standard_normal((2, 3, 3, 3)).astype(np.float32))
    assert T.conv2d(x, w, 1, 1).dtype == np.float32
    assert T.relu(x).dtype == np.float32
    assert T.avg_downsample(x, 2).dtype == np.float32


def test_batchnorm_running_statistics(rng):
    x = rng.standard_normal((4, 2, 3, 3)) * 3 + 1
    state = T.BatchNormState.fresh(2, np.float64)
    T.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=True)
    m = 4 * 9
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3)) * m / (m - 1)
    np.testing.assert_allclose(state.running_mean, 0.1 * mean)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * var)


def test_batchnorm_normalises_in_training(rng):
    x = rng.standard_normal((8, 3, 4, 4)) * 5 - 2
    out = T.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), T.BatchNormState.fresh(3, np.float64), True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)


def test_batchnorm_single_value_per_channel_is_rejected():
    with pytest.raises(DegenerateBatchError):
        T.batchnorm(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), T.BatchNormState.fresh(2), True)


def test_mean_of_identical_operands_is_exact(rng):
    a = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
    out = T.mean_tensors([a, a, a, a, a, a, a])
    assert np.array_equal(out.data, a.data)


def test_softmax_xent_is_stable_for_large_logits():
    logits = Tensor(np.array([[1000.0, 0.0], [0.0, 1000.0]]), requires_grad=True)
    loss = T.softmax_xent(logits, np.array([0, 0]))
    assert np.isfinite(loss.item())
    assert loss.item() == pytest.approx(500.0)
    loss.backward()
    assert np.all(np.isfinite(logits.grad))


def test_fan_out_gradients_accumulate(rng):
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    y = T.add(T.scale(x, 2.0), T.scale(x, 3.0))
    T.weighted_sum(y, np.ones((2, 3))).backward()
    np.testing.assert_allclose(x.grad, 5.0)


def test_intermediate_gradients_are_released_unless_retained(rng):
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    h = T.scale(x, 2.0)
    kept = T.scale(x, 3.0).retain_grad()
    T.weighted_sum(T.add(h, kept), np.ones((2, 3))).backward()
    assert h.grad is None
    np.testing.assert_allclose(kept.grad, 1.0)


def test_backward_needs_seed_for_non_scalars():
    with pytest.raises(ShapeError):
        Tensor(np.zeros(3), requires_grad=True).backward()


@given(arrays(np.float64, (2, 3, 4, 4), elements=st.floats(-1e3, 1e3)))
def test_ops_stay_finite_on_finite_inputs(x):
    t = Tensor(x, requires_grad=True)
    w = Tensor(np.full((2, 3, 3, 3), 0.1), requires_grad=True)
    h = T.relu(T.batchnorm(T.conv2d(t, w, 1, 1), Tensor(np.ones(2)), Tensor(np.zeros(2)), T.BatchNormState.fresh(2, np.float64), True))
    loss = T.softmax_xent(T.linear(T.global_avg_pool(h), Tensor(np.ones((3, 2))), Tensor(np.zeros(3))), np.array([0, 1]))
    loss.backward()
    assert np.isfinite(loss.item())
    assert np.all(np.isfinite(t.grad)) and np.all(np.isfinite(w.grad))


def test_adapters(rng):
    x = Tensor(rng.standard_normal((1, 2, 8, 8)))
    y = T.adapt(x, (5, 4, 4))
    assert y.shape == (1, 5, 4, 4)
    np.testing.assert_allclose(y.data[:, :2], x.data.reshape(1, 2, 4, 2, 4, 2).mean(axis=(3, 5)))
    assert np.all(y.data[:, 2:] == 0)
    assert T.adapt(x, (2, 8, 8)) is x


def test_adapter_errors(rng):
    x = Tensor(rng.standard_normal((1, 4, 6, 6)))
    with pytest.raises(AdapterError):
        T.avg_downsample(x, 4)
    with pytest.raises(AdapterError):
        T.zero_pad_channels(x, 2)


def test_no_grad_records_nothing_and_restores():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    with T.no_grad():
        y = T.relu(x)
    assert not y.requires_grad and y._parents == ()
    assert T.relu(x).requires_grad
