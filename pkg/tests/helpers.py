"""Shared test utilities, chiefly the central finite-difference oracle."""

import numpy as np

from moeseg.autograd import Tensor


def numerical_grad(scalar_fn, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar_fn() w.r.t. arr, perturbed in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        hi = scalar_fn()
        flat[i] = original - h
        lo = scalar_fn()
        flat[i] = original
        grad_flat[i] = (hi - lo) / (2.0 * h)
    return grad


def assert_grads_match(build_loss, arrays, rtol=1e-4, atol=1e-6, h=1e-5):
    """Check analytic gradients of build_loss(tensors) against finite differences.

    ``build_loss`` receives a list of Tensors (one per input array) and must
    return a scalar Tensor. Fresh tensors are built per evaluation so no graph
    state leaks between the analytic and numerical passes.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(tensors)
    loss.backward()
    for k, t in enumerate(tensors):
        numeric = numerical_grad(lambda: build_loss([Tensor(x.data) for x in tensors]).item(), t.data, h=h)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        np.testing.assert_allclose(
            analytic, numeric, rtol=rtol, atol=atol,
            err_msg=f"gradient mismatch on input {k} (shape {t.data.shape})",
        )


def checksum(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr).tobytes()
