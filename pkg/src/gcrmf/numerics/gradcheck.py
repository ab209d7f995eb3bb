"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def relative_error(analytic, numeric, floor=1e-10) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_grad(f, x: np.ndarray, eps=1e-5) -> np.ndarray:
    """d f / d x by central differences; ``f`` maps an array to a float and must not keep ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def check_gradients(loss_fn, tensors: dict, eps=1e-5) -> dict:
    """Compare analytic and numeric gradients of ``loss_fn()`` for each leaf tensor.

    ``loss_fn`` takes no arguments and rebuilds the graph from the current
    ``.value`` of every tensor in ``tensors`` (a name -> :class:`Tensor` map).
    Returns name -> relative error.
    """
    for t in tensors.values():
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {n: (np.zeros_like(t.value) if t.grad is None else t.grad.copy()) for n, t in tensors.items()}
    errors = {}
    for n, t in tensors.items():
        base = t.value

        def f(arr, t=t):
            t.value = arr
            return float(loss_fn().value)

        num = numeric_grad(f, base.copy(), eps)
        t.value = base
        errors[n] = relative_error(analytic[n], num)
    return errors


def check_function(fn, *arrays, eps=1e-5, upstream_seed=0) -> list[float]:
    """Gradient-check one primitive ``fn(*tensors) -> Tensor`` at ``arrays``.

    A fixed random upstream vector turns non-scalar outputs into a scalar probe.
    """
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    probe = np.random.default_rng(upstream_seed).standard_normal(out.shape)
    out.backward(probe)
    errs = []
    for i, leaf in enumerate(leaves):
        def f(arr, i=i):
            vals = [Tensor(leaves[j].value) if j != i else Tensor(arr) for j in range(len(leaves))]
            return float(np.sum(fn(*vals).value * probe))

        num = numeric_grad(f, leaf.value.copy(), eps)
        errs.append(relative_error(leaf.grad, num))
    return errs
