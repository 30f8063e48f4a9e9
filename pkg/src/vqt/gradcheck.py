"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], Tensor], t: Tensor, index: tuple, h: float = 1e-5) -> float:
    """d f / d t[index] by central differences; ``f`` rebuilds the graph each call."""
    orig = t.data[index]
    t.data[index] = orig + h
    fp = f().item()
    t.data[index] = orig - h
    fm = f().item()
    t.data[index] = orig
    return (fp - fm) / (2 * h)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), zero when both vanish."""
    num = float(np.linalg.norm(analytic - numeric))
    den = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return 0.0 if den == 0.0 else num / den


def check_grads(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Relative error of analytic vs numeric gradients, per named tensor.

    With ``max_entries`` set, a seeded random subset of entries per tensor is
    probed instead of every entry.
    """
    for p in params.values():
        p.grad = None
    loss = f()
    loss.backward()
    rng = rng if rng is not None else np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        grad = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = list(np.ndindex(p.shape))
        if max_entries is not None and len(flat) > max_entries:
            pick = rng.choice(len(flat), size=max_entries, replace=False)
            flat = [flat[i] for i in sorted(pick)]
        analytic = np.array([grad[i] for i in flat])
        numeric = np.array([numeric_grad(f, p, i, h) for i in flat])
        errors[name] = relative_error(analytic, numeric)
    return errors
