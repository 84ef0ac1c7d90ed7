"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensors as T
from .tensors import Tensor


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` keeps near-zero gradients (which finite differences cannot
    resolve below rounding noise) from dominating the statistic.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_op(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-6,
             n_samples: int = 30, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error of ``d sum(fn(*x) * G) / dx`` over sampled coordinates.

    ``G`` is a fixed random cotangent so every output element contributes.
    Inputs are copied; the function must be deterministic.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    cot = rng.standard_normal(out.shape)
    T.tensor_sum(out * Tensor(cot)).backward()

    def value() -> float:
        with T.no_grad():
            return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * cot))

    worst = 0.0
    for arr, leaf in zip(arrays, leaves):
        if leaf.grad is None:
            raise AssertionError("input received no gradient")
        for _ in range(n_samples):
            idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
            v = arr[idx]
            arr[idx] = v + h
            fp = value()
            arr[idx] = v - h
            fm = value()
            arr[idx] = v
            worst = max(worst, relative_error(float(leaf.grad[idx]), (fp - fm) / (2 * h), floor))
    return worst


def check_parameters(loss_fn: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]],
                     n_samples: int = 200, h: float = 1e-7, seed: int = 0,
                     floor: float = 1e-6) -> list[tuple[float, str, tuple, float, float]]:
    """Compare parameter gradients of a scalar loss against central differences.

    Half the samples pick a tensor uniformly, half in proportion to its size,
    so small tensors (biases, norms) are covered as well as large kernels.
    Returns ``(rel_err, name, index, analytic, numeric)`` sorted worst first.
    """
    rng = np.random.default_rng(seed)
    params = list(params)
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    sizes = np.array([p.data.size for _, p in params], dtype=np.float64)
    rows = []
    for k in range(n_samples):
        i = int(rng.choice(len(params), p=sizes / sizes.sum())) if k % 2 else int(rng.integers(len(params)))
        name, p = params[i]
        idx = tuple(int(rng.integers(0, s)) for s in p.shape)
        a = 0.0 if p.grad is None else float(p.grad[idx])
        v = p.data[idx]
        with T.no_grad():
            p.data[idx] = v + h
            fp = float(loss_fn().data)
            p.data[idx] = v - h
            fm = float(loss_fn().data)
            p.data[idx] = v
        n = (fp - fm) / (2 * h)
        rows.append((relative_error(a, n, floor), name, idx, a, n))
    rows.sort(key=lambda r: -r[0])
    return rows
