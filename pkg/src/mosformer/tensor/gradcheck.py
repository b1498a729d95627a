"""Central finite-difference checks for the gradient tape."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .core import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; zero when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def numerical_gradient(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    h: float = 1e-5,
    indices: Optional[Sequence[tuple]] = None,
) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor.data``.

    Returns a full-shape array when ``indices`` is None, else a 1-D array in
    the order of ``indices``.
    """
    data = tensor.data
    if indices is None:
        indices = list(np.ndindex(data.shape))
        out = np.zeros(data.shape, dtype=np.float64)
        full = True
    else:
        out = np.zeros(len(indices), dtype=np.float64)
        full = False
    with no_grad():
        for k, idx in enumerate(indices):
            orig = data[idx]
            data[idx] = orig + h
            plus = float(fn().data)
            data[idx] = orig - h
            minus = float(fn().data)
            data[idx] = orig
            out[idx if full else k] = (plus - minus) / (2.0 * h)
    return out


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    pooled: bool = False,
) -> float:
    """Worst relative error between tape gradients and finite differences.

    ``fn`` must be a deterministic closure returning a scalar tensor. With
    ``max_coords`` set, at most that many randomly chosen entries per tensor
    are probed. ``pooled`` compares all probed entries as one vector instead
    of taking the worst tensor, which keeps tensors with near-zero gradients
    from being judged on round-off alone.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else np.array(t.grad, dtype=np.float64) for t in tensors]

    worst = 0.0
    all_a, all_n = [], []
    for t, a in zip(tensors, analytic):
        if max_coords is not None and t.size > max_coords:
            flat = rng.choice(t.size, size=max_coords, replace=False)
            indices = [np.unravel_index(i, t.shape) for i in sorted(flat)]
            numeric = numerical_gradient(fn, t, h, indices)
            a = np.array([a[idx] for idx in indices])
        else:
            numeric = numerical_gradient(fn, t, h)
        all_a.append(np.ravel(a))
        all_n.append(np.ravel(numeric))
        worst = max(worst, relative_error(a, numeric))
    if pooled:
        return relative_error(np.concatenate(all_a), np.concatenate(all_n))
    return worst


def projected(fn: Callable[[], Tensor], seed: int = 0) -> Callable[[], Tensor]:
    """Turn a tensor-valued closure into a scalar one via a fixed random projection."""
    weights = {}

    def scalar() -> Tensor:
        out = fn()
        if "w" not in weights:
            weights["w"] = np.random.default_rng(seed).standard_normal(out.shape).astype(out.dtype)
        return (out * weights["w"]).sum()

    return scalar
