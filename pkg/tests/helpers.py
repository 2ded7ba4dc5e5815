"""Shared test utilities: finite-difference gradient checking."""

import numpy as np

from voxseg.autodiff import Tensor


def numeric_grad(f, x, step=1e-5):
    """Central finite differences of scalar f w.r.t. ndarray x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def check_gradients(fn, inputs, rtol=1e-4, step=1e-5):
    """Compare analytic and finite-difference gradients.

    fn: callable taking Tensors and returning a scalar Tensor.
    inputs: list of float64 ndarrays; each is checked.
    """
    tensors = [Tensor(x.astype(np.float64), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    out.backward()
    for t, x in zip(tensors, inputs):
        num = numeric_grad(lambda: fn(*[Tensor(u.data) for u in tensors]).data.item(), t.data, step)
        ana = t.grad
        assert ana is not None, "missing analytic gradient"
        denom = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        rel = np.abs(ana - num).max() / denom
        assert rel < rtol, f"gradient mismatch: rel error {rel:.3e}"


def rand_away_from_zero(rng, shape, margin=0.05):
    """Random values bounded away from 0 (keeps relu kinks off FD paths)."""
    x = rng.uniform(margin, 1.0, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return x * sign
