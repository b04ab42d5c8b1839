"""Shared test oracles."""

import numpy as np

from dualrate.tensor import Tensor, backward


def finite_diff(f, arrays, h=1e-5):
    """Central-difference gradients of scalar f() wrt each array, in place."""
    grads = []
    for x in arrays:
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(a, n):
    """Max elementwise relative error with a small-denominator guard."""
    a, n = np.asarray(a), np.asarray(n)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(n), 1e-6)))


def check_grads(build, arrays, h=1e-5, tol=1e-4):
    """build(tensors) -> scalar Tensor; compares autodiff to finite differences."""
    tensors = [Tensor(x, requires_grad=True) for x in arrays]
    loss = build(*tensors)
    backward(loss)
    auto = [t.grad.copy() for t in tensors]

    def f():
        with_np = [Tensor(x) for x in arrays]
        return float(build(*with_np).data)

    numeric = finite_diff(f, arrays, h=h)
    errs = [rel_err(a, n) for a, n in zip(auto, numeric)]
    assert max(errs) < tol, f"gradient mismatch: errors {errs}"
    return max(errs)
