import numpy as np
import pytest

from frontseg import functional as F
from frontseg.attnet import AttentionGateParams, attention_gate
from frontseg.tensor import Tensor, grad_check

from conftest import project, rand_tensor

SEEDS = range(5)
TOL = 1e-3


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (1, 2, 5), (2, 0, 1), (2, 1, 3)])
def test_conv2d_gradients(seed, stride, padding, k):
    rng = np.random.default_rng(seed)
    x, w, b = rand_tensor(rng, 2, 2, 4, 4), rand_tensor(rng, 3, 2, k, k, scale=0.5), rand_tensor(rng, 3)
    assert grad_check(lambda x, w, b: project(F.conv2d(x, w, b, stride, padding), seed), [x, w, b]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_concat_and_broadcast_mul_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b, m = rand_tensor(rng, 2, 2, 3, 3), rand_tensor(rng, 2, 1, 3, 3), rand_tensor(rng, 2, 1, 3, 3)
    f = lambda a, b, m: project(F.mul(F.concat([a, b]), m), seed)
    assert grad_check(f, [a, b, m]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_batch_norm_eval_mode_gradients(seed):
    rng = np.random.default_rng(seed)
    x, g, b = rand_tensor(rng, 2, 3, 4, 4), rand_tensor(rng, 3), rand_tensor(rng, 3)
    rm, rv = rng.standard_normal(3).astype(np.float32), rng.uniform(0.5, 2, 3).astype(np.float32)
    f = lambda x, g, b: project(F.batch_norm2d(x, g, b, rm, rv, training=False), seed)
    assert grad_check(f, [x, g, b]) < TOL


def test_transposed_conv_is_adjoint_of_strided_conv(rng):
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    y = rng.standard_normal((2, 4, 3, 3)).astype(np.float32)
    w = rng.standard_normal((4, 3, 2, 2)).astype(np.float32)
    lhs = np.vdot(F.conv2d(Tensor(x), Tensor(w), stride=2).data.astype(np.float64), y)
    rhs = np.vdot(x.astype(np.float64), F.conv_transpose2d(Tensor(y), Tensor(w), stride=2).data)
    assert lhs == pytest.approx(rhs, rel=1e-5)


def test_second_backward_doubles_gradient(rng):
    x = rand_tensor(rng, 1, 1, 4, 4)
    y = project(F.sigmoid(x), 0)
    y.backward()
    first = x.grad.copy()
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * first, rtol=1e-6)


def test_shared_node_accumulates(rng):
    x = rand_tensor(rng, 1, 1, 2, 2)
    F.sum(F.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)


def test_backward_requires_scalar_seed(rng):
    x = rand_tensor(rng, 1, 1, 2, 2)
    with pytest.raises(RuntimeError):
        F.relu(x).backward()


def test_conv_channel_mismatch_message(rng):
    x = Tensor(rng.standard_normal((1, 3, 4, 4)))
    w = Tensor(rng.standard_normal((2, 4, 3, 3)))
    with pytest.raises(ValueError, match="3.*4|4.*3"):
        F.conv2d(x, w, padding=1)


def test_add_rejects_incompatible_shapes():
    with pytest.raises(ValueError, match="incompatible shapes"):
        F.add(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 2, 2))))


def test_max_pool_tie_goes_to_first_maximum():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    F.sum(F.max_pool2d(x)).backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_max_pool_rejects_odd_extent():
    with pytest.raises(ValueError):
        F.max_pool2d(Tensor(np.zeros((1, 1, 3, 4))))


def test_leaky_relu_slope_at_zero():
    x = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
    F.sum(F.leaky_relu(x, 0.1)).backward()
    assert x.grad.item() == pytest.approx(0.1)


def test_sigmoid_is_stable_for_large_inputs():
    out = F.sigmoid(Tensor(np.array([-1e4, 0.0, 1e4]))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_batch_norm_running_statistics(rng):
    x = rng.standard_normal((2, 2, 3, 3)).astype(np.float32) * 3 + 1
    rm, rv = np.zeros(2, np.float32), np.ones(2, np.float32)
    F.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(rm, 0.1 * mu, rtol=1e-5)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var, rtol=1e-5)


def test_batch_norm_training_output_is_standardized(rng):
    x = Tensor(rng.standard_normal((4, 2, 4, 4)) * 5 + 3)
    out = F.batch_norm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2, np.float32),
                         np.ones(2, np.float32), training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)


def test_bilinear_weights_rows_are_partitions_of_unity():
    for n_in, n_out in [(2, 4), (3, 7), (8, 16), (4, 4)]:
        A = F.bilinear_weights(n_in, n_out)
        assert A.shape == (n_out, n_in)
        np.testing.assert_allclose(A.sum(axis=1), 1.0)
    np.testing.assert_allclose(F.bilinear_weights(4, 4), np.eye(4))


def test_bilinear_half_pixel_convention():
    # 2 -> 4 with half-pixel centres: outer samples clamp, inner ones are 3:1 blends
    A = F.bilinear_weights(2, 4)
    np.testing.assert_allclose(A, [[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])


def test_grad_check_flags_non_finite():
    x = Tensor(np.array([[[[1.0]]]]), requires_grad=True)
    with pytest.warns(UserWarning, match="non-finite"):
        err = grad_check(lambda x: F.sum(F.scale(x, np.inf)), [x])
    assert err == np.inf


@pytest.mark.parametrize("seed", SEEDS)
def test_attention_gate_output_and_alpha_range(seed):
    rng = np.random.default_rng(seed)
    x, g = Tensor(rng.standard_normal((2, 4, 4, 4))), Tensor(rng.standard_normal((2, 6, 2, 2)))
    p = AttentionGateParams(
        Tensor(rng.standard_normal((2, 4, 1, 1))), Tensor(rng.standard_normal((2, 6, 1, 1))),
        Tensor(rng.standard_normal(2)), Tensor(rng.standard_normal((1, 2, 1, 1))), Tensor(rng.standard_normal(1)),
    )
    x_hat, alpha = attention_gate(x, g, p)
    assert alpha.shape == (2, 1, 4, 4)
    assert np.all((alpha.data > 0) & (alpha.data < 1))
    np.testing.assert_allclose(x_hat.data, x.data * alpha.data, rtol=1e-6)


def test_attention_gate_rejects_wrong_gating_size(rng):
    x, g = Tensor(rng.standard_normal((1, 2, 4, 4))), Tensor(rng.standard_normal((1, 2, 4, 4)))
    p = AttentionGateParams(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones((1, 2, 1, 1))), Tensor(np.zeros(1)),
                            Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    with pytest.raises(ValueError, match="half the spatial size"):
        attention_gate(x, g, p)
