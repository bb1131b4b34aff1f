"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| / max(|a|, |b|, tiny), a scale-aware relative error."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    seed: Optional[int] = 0) -> float:
    """Max relative error between analytic and numerical gradients of ``fn``.

    The output is contracted with a fixed random projection so that non-scalar
    outputs are covered too.  Inputs should be float64 leaves with
    ``requires_grad=True``.
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape) if out.data.size > 1 else np.ones(out.shape)

    def value() -> float:
        return float((fn(*inputs).data * proj).sum())

    for t in inputs:
        t.grad = None
    backward(out, proj.astype(out.dtype))
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        num = numerical_grad(value, t.data, h)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_error(ana, num))
    return worst
