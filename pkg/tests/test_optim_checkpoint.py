import numpy as np
import pytest

from dualrate.checkpoint import (
    CheckpointError,
    load_checkpoint,
    pack_tensors,
    save_checkpoint,
)
from dualrate.optim import Adam, OptimizerError, Sgd, make_optimizer
from dualrate.tensor import Tensor, backward, mul, sum_


def test_sgd_definition():
    w = Tensor(np.array([1.0]), requires_grad=True)
    w.grad = np.array([2.0])
    Sgd([("w", w)], lr=0.1).step()
    assert np.allclose(w.data, [0.8], atol=1e-15)


def test_zero_gradient_leaves_parameters_unchanged():
    for kind in ("sgd", "adam"):
        w = Tensor(np.array([3.0, -1.0]), requires_grad=True)
        w.grad = np.zeros(2)
        opt = make_optimizer(kind, [("w", w)], lr=0.5)
        opt.step()
        assert np.array_equal(w.data, [3.0, -1.0])


def test_missing_grad_is_contract_error():
    w = Tensor(np.ones(2), requires_grad=True)
    opt = Adam([("stuck", w)], lr=0.1)
    with pytest.raises(OptimizerError, match="stuck"):
        opt.step()


def test_grads_cleared_and_step_count_increments():
    w = Tensor(np.ones(2), requires_grad=True)
    w.grad = np.ones(2)
    opt = Adam([("w", w)], lr=0.1)
    opt.step()
    assert w.grad is None
    assert opt.step_count == 1


def test_adam_converges_on_quadratic():
    # minimize (w - 3)^2; analytic minimum at 3
    w = Tensor(np.array([-5.0]), requires_grad=True)
    opt = Adam([("w", w)], lr=0.1)
    for _ in range(500):
        diff = sum_(mul(w, 1.0)) - 3.0
        loss = mul(diff, diff)
        backward(loss)
        opt.step()
    assert abs(w.data[0] - 3.0) < 1e-3


def test_unknown_optimizer_kind():
    with pytest.raises(ValueError, match="unknown optimizer"):
        make_optimizer("rmsprop", [], lr=0.1)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "planner/w": rng.normal(size=(3, 4)),
        "policy/b": rng.normal(size=(5,)),
    }
    meta = {"mode": "hierarchical", "flags": {"film": True}}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, tensors, meta)
    loaded, meta2 = load_checkpoint(path)
    assert meta2 == meta
    for k in tensors:
        assert np.array_equal(loaded[k], tensors[k])
    loaded["planner/w"][0, 0] = 99.0  # loaded copies are writable and detached


def test_checkpoint_bytes_deterministic(tmp_path):
    tensors = {"b": np.arange(6.0).reshape(2, 3), "a": np.ones(2)}
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    save_checkpoint(p1, tensors, {"k": 1})
    save_checkpoint(p2, dict(reversed(tensors.items())), {"k": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPTxxxx")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_pack_tensors_sorted_and_stable():
    a = {"x": np.ones(2), "y": np.zeros(2)}
    b = {"y": np.zeros(2), "x": np.ones(2)}
    assert pack_tensors(a) == pack_tensors(b)
