import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualrate.tensor import (
    GraphError,
    ShapeError,
    Tensor,
    add,
    affine,
    backward,
    bce_with_logits,
    clip,
    concat,
    embed_lookup,
    expand,
    gelu,
    layer_norm,
    matmul,
    mean,
    merge_heads,
    mul,
    no_grad,
    reshape,
    scale_shift,
    sigmoid,
    softmax,
    split_heads,
    sum_,
    swapaxes,
)

from helpers import check_grads, rel_err


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    out = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_hand_value():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert np.array_equal(out.data, [[17.0], [39.0]])


def test_matmul_zeros():
    out = matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.randn(3, 4)))
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_batched_matches_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 3, 4)), rng.normal(size=(4, 2))
    out = matmul(Tensor(a), Tensor(b))
    expect = np.stack([a[i] @ b for i in range(5)])
    assert np.allclose(out.data, expect, atol=1e-12)


# -- layer norm ---------------------------------------------------------------

def test_layer_norm_constant_row():
    out = layer_norm(Tensor([[3.0, 3.0, 3.0, 3.0]]), Tensor(np.ones(4)),
                     Tensor(np.zeros(4)), eps=1e-5)
    assert np.allclose(out.data, 0.0, atol=1e-9)


def test_layer_norm_hand_value():
    out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-12)


def test_layer_norm_width_one_zero_eps_rejected():
    with pytest.raises(ValueError, match="width 1"):
        layer_norm(Tensor([[1.0]]), Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=0.0)


def test_layer_norm_gradient():
    rng = np.random.default_rng(1)
    x, g, b = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
    err = check_grads(
        lambda xt, gt, bt: sum_(layer_norm(xt, gt, bt, eps=1e-5)), [x, g, b])
    assert err < 1e-5


# -- softmax ------------------------------------------------------------------

def test_softmax_uniform():
    assert np.allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, 1.0 / 3.0)


def test_softmax_hand_value():
    out = softmax(Tensor([np.log(1.0), np.log(2.0), np.log(3.0)]))
    assert np.allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def test_softmax_overflow_stable():
    out = softmax(Tensor([1000.0, 0.0]))
    assert np.isfinite(out.data).all()
    assert out.data[0] > 0.999999


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(values):
    out = softmax(Tensor(values))
    assert np.all(out.data >= 0)
    assert abs(out.data.sum() - 1.0) < 1e-12


# -- backward contracts -------------------------------------------------------

def test_backward_linear_grad_is_input():
    x = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    w = Tensor(np.random.default_rng(0).normal(size=(2, 4)), requires_grad=True)
    loss = sum_(matmul(Tensor(x), w))
    backward(loss)
    # d/dW sum(X W) = column sums of X, broadcast across output columns
    expect = np.repeat(x.sum(axis=0)[:, None], 4, axis=1)
    assert np.allclose(w.grad, expect, atol=1e-12)


def test_backward_constant_no_grad():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = sum_(Tensor(np.ones((2, 2))))
    backward(loss)
    assert w.grad is None


def test_backward_twice_errors():
    w = Tensor(np.ones(3), requires_grad=True)
    loss = sum_(mul(w, w))
    backward(loss)
    with pytest.raises(GraphError, match="already ran"):
        backward(loss)


def test_backward_needs_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError, match="scalar"):
        backward(mul(w, w))


def test_shared_subexpression_accumulates():
    # f(x) = x*x + x with shared x versus duplicated-input evaluation
    val = np.array([1.5, -2.0, 0.5])
    x = Tensor(val, requires_grad=True)
    backward(sum_(add(mul(x, x), x)))
    x1 = Tensor(val, requires_grad=True)
    x2 = Tensor(val, requires_grad=True)
    x3 = Tensor(val, requires_grad=True)
    backward(sum_(add(mul(x1, x2), x3)))
    assert np.allclose(x.grad, x1.grad + x2.grad + x3.grad, atol=1e-12)


def test_no_grad_blocks_recording():
    w = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = mul(w, 2.0)
    assert not out.requires_grad
    assert out._backward is None


# -- elementwise suite --------------------------------------------------------

def test_sigmoid_at_zero():
    assert sigmoid(Tensor([0.0])).data[0] == 0.5


def test_gelu_at_zero():
    assert gelu(Tensor([0.0])).data[0] == 0.0


def test_clip_values():
    out = clip(Tensor([-2.0, 0.3, 2.0]), -1.0, 1.0)
    assert np.array_equal(out.data, [-1.0, 0.3, 1.0])


def test_embed_lookup_rows():
    table = Tensor(np.arange(12.0).reshape(4, 3))
    out = embed_lookup(table, np.array([2, 0]))
    assert np.array_equal(out.data, [[6.0, 7.0, 8.0], [0.0, 1.0, 2.0]])


def test_embed_lookup_out_of_range():
    table = Tensor(np.zeros((4, 3)))
    with pytest.raises(IndexError, match="out of range"):
        embed_lookup(table, np.array([4]))


def test_bce_rejects_soft_targets():
    with pytest.raises(ValueError, match="0 or 1"):
        bce_with_logits(Tensor([0.5]), np.array([0.5]))


def test_bce_matches_reference():
    rng = np.random.default_rng(3)
    x = rng.normal(size=7) * 5
    y = (rng.random(7) > 0.5).astype(float)
    out = bce_with_logits(Tensor(x), y)
    s = 1 / (1 + np.exp(-x))
    ref = -(y * np.log(s) + (1 - y) * np.log(1 - s))
    assert np.allclose(out.data, ref, atol=1e-10)


def test_add_trailing_bias_and_scalar():
    x = Tensor(np.ones((2, 3, 4)))
    b = Tensor(np.arange(4.0))
    assert np.allclose(add(x, b).data, 1.0 + np.arange(4.0), atol=1e-15)
    assert np.allclose(add(x, 2.5).data, 3.5)
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_constant_mask_broadcast_add():
    x = Tensor(np.zeros((2, 2, 3, 4)), requires_grad=True)
    mask = Tensor(np.where(np.array([[False, True, False, True]]), -1e30, 0.0)[:, None, None, :])
    out = add(x, mask)
    assert out.data.shape == (2, 2, 3, 4)
    backward(sum_(out))
    assert np.allclose(x.grad, 1.0)


CASES = {
    "add": (lambda a, b: sum_(add(a, b)), [(3, 4), (3, 4)]),
    "add_bias": (lambda a, b: sum_(add(a, b)), [(3, 4), (4,)]),
    "mul": (lambda a, b: sum_(mul(a, b)), [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: sum_(matmul(a, b)), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: sum_(matmul(a, b)), [(2, 3, 4), (4, 2)]),
    "matmul_full_batched": (lambda a, b: sum_(matmul(a, b)), [(2, 3, 4), (2, 4, 3)]),
    "affine": (lambda x, w, b: sum_(affine(x, w, b)), [(2, 3, 4), (4, 5), (5,)]),
    "sigmoid": (lambda a: sum_(sigmoid(a)), [(3, 4)]),
    "gelu": (lambda a: sum_(mul(gelu(a), gelu(a))), [(3, 4)]),
    "softmax": (lambda a: sum_(mul(softmax(a), np.arange(12.0).reshape(3, 4))), [(3, 4)]),
    "sum_axis": (lambda a: sum_(mul(sum_(a, axis=1), sum_(a, axis=1))), [(3, 4)]),
    "mean": (lambda a: mul(mean(a), 3.0), [(3, 4)]),
    "concat": (lambda a, b: sum_(mul(concat([a, b], axis=1), concat([b, a], axis=1))),
               [(2, 3), (2, 3)]),
    "slice": (lambda a: sum_(mul(a[1:, :2], a[:2, 1:])), [(3, 3)]),
    "reshape": (lambda a: sum_(mul(reshape(a, (4, 3)), reshape(a, (4, 3)))), [(3, 4)]),
    "swapaxes": (lambda a: sum_(mul(swapaxes(a, 0, 1), swapaxes(a, 0, 1))), [(3, 4)]),
    "split_merge": (lambda a: sum_(mul(merge_heads(split_heads(a, 2)), a)), [(2, 3, 4)]),
    "expand": (lambda a: sum_(mul(expand(a, 1, 5), np.ones((2, 5, 3)))), [(2, 1, 3)]),
    "clip": (lambda a: sum_(clip(a, -0.5, 0.5)), [(3, 4)]),
    "scale_shift": (lambda x, g, s: sum_(mul(scale_shift(x, g, s), scale_shift(x, g, s))),
                    [(2, 3, 4), (2, 4), (2, 4)]),
    "layer_norm": (lambda x, g, b: sum_(mul(layer_norm(x, g, b, 1e-5),
                                            layer_norm(x, g, b, 1e-5))),
                   [(3, 5), (5,), (5,)]),
    "bce": (lambda a: sum_(bce_with_logits(a, np.array([[1.0, 0.0], [0.0, 1.0]]))), [(2, 2)]),
    "embed": (lambda t: sum_(mul(embed_lookup(t, np.array([0, 2, 2])),
                                 embed_lookup(t, np.array([0, 2, 2])))), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    build, shapes = CASES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for trial in range(10):
        arrays = [rng.normal(size=s) for s in shapes]
        if name == "clip":  # keep samples away from the clip kinks
            arrays = [np.where(np.abs(a) < 0.45, a + 0.6 * np.sign(a), a) for a in arrays]
        check_grads(build, arrays)


def test_determinism_same_seed_bit_identical():
    def run():
        rng = np.random.default_rng(123)
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        loss = sum_(gelu(matmul(softmax(x), w)))
        backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    first, second = run(), run()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)
