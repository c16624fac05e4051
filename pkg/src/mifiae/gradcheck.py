"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                   indices: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``param``.

    ``fn`` must re-run the forward pass reading ``param.data``.  Entries not
    in ``indices`` are left at zero.
    """
    grad = np.zeros_like(param.data)
    if indices is None:
        indices = np.ndindex(*param.shape)
    with no_grad():
        for idx in indices:
            orig = param.data[idx]
            param.data[idx] = orig + h
            fp = fn().item()
            param.data[idx] = orig - h
            fm = fn().item()
            param.data[idx] = orig
            grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def analytic_grads(fn: Callable[[], Tensor], params: Iterable[Tensor]) -> list[np.ndarray]:
    params = list(params)
    for p in params:
        p.grad = None
    backward(fn())
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    diff = np.linalg.norm(analytic - numeric)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / denom)


def check_gradients(fn: Callable[[], Tensor], params: dict[str, Tensor],
                    h: float = 1e-5, floor: float = 1e-5) -> dict[str, float]:
    """Relative error per named parameter, every entry perturbed.

    ``floor`` bounds the denominator from below.  Central differences carry
    noise around ``eps * |f| / h`` (~1e-10 here), so a gradient that is
    structurally zero (e.g. a key bias under softmax) would otherwise
    compare two round-off residues and report an error near 1.
    """
    names = list(params)
    analytic = analytic_grads(fn, [params[n] for n in names])
    return {n: rel_error(a, numerical_grad(fn, params[n], h), floor)
            for n, a in zip(names, analytic)}
