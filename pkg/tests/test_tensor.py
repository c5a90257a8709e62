import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pixelrep import tensor as T
from pixelrep.tensor import (
    AdamState,
    Tensor,
    WarmupSchedule,
    adam_step,
    backward,
    grad_check,
    label_smoothed_targets,
    precision,
)


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def test_relu_example():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_conv_output_shape():
    x = Tensor(np.zeros((1, 1, 32, 32)))
    w = Tensor(np.zeros((1, 1, 3, 1)))
    assert T.conv2d(x, w, Tensor(np.zeros(1))).shape == (1, 1, 30, 32)


def test_batchnorm_constant_channel_is_zero():
    x = Tensor(np.full((4, 2, 3, 3), 7.0))
    rm, rv = np.zeros(2, np.float32), np.ones(2, np.float32)
    out = T.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv)
    assert np.all(out.data == 0.0)


def test_batchnorm_normalizes(rng):
    x = Tensor(rng.standard_normal((16, 3, 5, 4)) * 3 + 2, dtype=np.float64)
    out = T.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3)).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    assert np.allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)


def test_batchnorm_sample_mask_ignores_masked_stats(rng):
    x = rng.standard_normal((6, 2, 3, 3))
    sel = np.array([True, True, True, True, False, False])
    gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
    full = T.batchnorm2d(Tensor(x[:4]), gamma, beta, np.zeros(2), np.ones(2)).data
    x2 = x.copy()
    x2[4:] = 1e3
    masked = T.batchnorm2d(Tensor(x2), gamma, beta, np.zeros(2), np.ones(2), sample_mask=sel).data
    assert np.allclose(masked[:4], full, atol=1e-5)


def test_softmax_rows_sum_to_one(rng):
    s = T.softmax(Tensor(rng.standard_normal((5, 9)) * 10)).data
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-6)


def test_dropout_zero_is_identity(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    assert np.array_equal(T.dropout(x, 0.0, rng).data, x.data)


def test_square_derivative():
    x = Tensor(np.array(3.0), requires_grad=True, dtype=np.float64)
    backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_unreached_leaf_gets_zero():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = Tensor(np.array([1.0]), requires_grad=True)
    backward(T.sum_(x * x), leaves=[x, y])
    assert np.all(y.grad == 0)


def test_tape_is_cleared(rng):
    x = leaf(rng, 3)
    backward(T.sum_(x * x))
    assert len(T.get_tape()) == 0


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_label_smoothing_distribution():
    q = label_smoothed_targets([2], 5, 0.2)[0]
    assert q[2] == pytest.approx(0.84)
    assert np.allclose(np.delete(q, 2), 0.04)


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.2, 0.5])
def test_uniform_logits_give_log_v(eps):
    loss = T.cross_entropy_label_smoothed(Tensor(np.zeros((3, 7))), [0, 3, 6], eps)
    assert float(loss.data) == pytest.approx(np.log(7), rel=1e-6)


def test_eps_zero_is_plain_cross_entropy(rng):
    logits = rng.standard_normal((4, 6))
    targets = np.array([0, 5, 2, 2])
    loss = float(T.cross_entropy_label_smoothed(Tensor(logits, dtype=np.float64), targets, 0.0).data)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    assert loss == pytest.approx(-logp[np.arange(4), targets].mean())


def test_target_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        T.cross_entropy_label_smoothed(Tensor(np.zeros((1, 4))), [4])


def test_label_smoothed_ignore_index():
    logits = Tensor(np.zeros((2, 3)))
    a = T.cross_entropy_label_smoothed(logits, [1, 0], 0.1, ignore_index=0)
    b = T.cross_entropy_label_smoothed(Tensor(np.zeros((1, 3))), [1], 0.1)
    assert float(a.data) == pytest.approx(float(b.data))


# -- finite differences, one per differentiable primitive ---------------------------


def _check(f, inputs, tol=1e-6):
    with precision(np.float64):
        assert grad_check(f, inputs, h=1e-6) < tol


def test_grad_linear_function_is_exact(rng):
    x = leaf(rng, 4)
    w = rng.standard_normal(4)
    assert grad_check(lambda: T.sum_(x * Tensor(w, dtype=np.float64)), [x]) < 1e-8


def test_grad_matmul_add_mul_div(rng):
    a, b, c = leaf(rng, 3, 4), leaf(rng, 4, 2), leaf(rng, 2)
    _check(lambda: T.sum_(T.div((a @ b + c) * (a @ b), c * c + 2.0)), [a, b, c])


def test_grad_softmax_and_logsoftmax(rng):
    x, w = leaf(rng, 3, 5), rng.standard_normal((3, 5))
    W = Tensor(w, dtype=np.float64)
    _check(lambda: T.sum_(T.softmax(x) * W) + T.sum_(T.log_softmax(x) * W), [x])


def test_softmax_jacobian_rows_sum_to_zero(rng):
    x = leaf(rng, 6)
    for k in range(6):
        x.grad = None
        backward(T.softmax(x)[k])
        assert abs(x.grad.sum()) < 1e-12


def test_grad_layernorm(rng):
    x, g, b = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
    W = Tensor(rng.standard_normal((3, 6)), dtype=np.float64)
    _check(lambda: T.sum_(T.layernorm(x, g, b) * W), [x, g, b])


def test_grad_relu_reshape_transpose_slice_concat_mean(rng):
    x = leaf(rng, 2, 3, 4)
    y = leaf(rng, 2, 3, 4)

    def f():
        z = T.concat([T.relu(x), y], axis=1)
        z = T.transpose(z, (2, 0, 1))[1:3]
        return T.mean(T.reshape(z, (-1,)) ** 2) if hasattr(z, "__pow__") else T.mean(T.reshape(z * z, (-1,)))

    _check(f, [x, y])


def test_grad_embedding(rng):
    w = leaf(rng, 5, 3)
    ids = np.array([[0, 2], [2, 4]])
    W = Tensor(rng.standard_normal((2, 2, 3)), dtype=np.float64)
    _check(lambda: T.sum_(T.embedding(w, ids) * W), [w])
    w.grad = None
    backward(T.sum_(T.embedding(w, ids)))
    assert np.all(w.grad[[1, 3]] == 0) and np.all(w.grad[2] == 2)


def test_grad_dropout_fixed_mask(rng):
    x = leaf(rng, 4, 4)
    _check(lambda: T.sum_(T.dropout(x, 0.5, np.random.default_rng(7)) * x), [x])


def test_grad_conv2d(rng):
    x, w, b = leaf(rng, 2, 2, 6, 5), leaf(rng, 3, 2, 3, 2), leaf(rng, 3)
    W = Tensor(rng.standard_normal((2, 3, 2, 2)), dtype=np.float64)
    _check(lambda: T.sum_(T.conv2d(x, w, b, stride=(2, 2)) * W), [x, w, b])


def test_grad_batchnorm(rng):
    x, g, b = leaf(rng, 5, 2, 3, 3), leaf(rng, 2), leaf(rng, 2)
    W = Tensor(rng.standard_normal((5, 2, 3, 3)), dtype=np.float64)
    sel = np.array([True, False, True, True, True])

    def f():
        return T.sum_(T.batchnorm2d(x, g, b, np.zeros(2), np.ones(2), sample_mask=sel) * W)

    _check(f, [x, g, b], tol=1e-5)


def test_grad_label_smoothed_loss(rng):
    x = leaf(rng, 4, 6)
    _check(lambda: T.cross_entropy_label_smoothed(x, [0, 1, 5, 3], 0.2, ignore_index=1), [x])


@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 10**6))
def test_grad_matmul_random_shapes(m, n, seed):
    r = np.random.default_rng(seed)
    a, b = leaf(r, m, n), leaf(r, n, 3)
    with precision(np.float64):
        assert grad_check(lambda: T.sum_(T.relu(a @ b) * (a @ b)), [a, b], h=1e-6) < 1e-5


# -- optimizer --------------------------------------------------------------------------


def test_warmup_schedule():
    s = WarmupSchedule(4000, 5e-4)
    assert s(2000) == pytest.approx(2.5e-4)
    assert s(4000) == pytest.approx(5e-4)
    assert s(16000) == pytest.approx(2.5e-4)
    c = WarmupSchedule(10, 1e-3, decay="constant")
    assert c(1000) == pytest.approx(1e-3)


def test_first_adam_step_moves_by_lr():
    p = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
    state = AdamState([p], WarmupSchedule(1, 1e-2), eps=0.0)
    p.grad = np.array([0.5, -2.0, 3.0])
    adam_step(state)
    assert np.allclose(p.data, [-1e-2, 1e-2, -1e-2])
    assert state.t == 1


def test_zero_gradient_leaves_params():
    p = Tensor(np.ones(4), requires_grad=True)
    state = AdamState([p], WarmupSchedule(1, 1e-2))
    p.grad = np.zeros(4, np.float32)
    for _ in range(3):
        adam_step(state)
    assert np.all(p.data == 1.0)
