"""Central finite-difference checks for taped operations."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, use_tape


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||)."""
    a = np.asarray(analytic, np.float64).ravel()
    b = np.asarray(numeric, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-2,
                    max_entries: Optional[int] = None, seed: int = 0) -> list[float]:
    """Compare taped gradients of a scalar ``fn()`` with central differences.

    ``fn`` must rebuild the graph from ``params`` on each call. The scalar is
    projected onto fixed random weights when ``fn`` returns a non-scalar so
    that every output element participates. ``max_entries`` spot-checks a
    random subset of each parameter's entries.

    Returns one relative error per parameter.
    """
    rng = np.random.default_rng(seed)
    probe: dict[str, np.ndarray] = {}

    def scalar() -> Tensor:
        out = fn()
        if out.size == 1:
            return out.reshape(())
        if "w" not in probe:
            probe["w"] = rng.uniform(-1, 1, out.shape).astype(out.dtype)
        return (out * probe["w"]).sum()

    for p in params:
        p.grad = None
    with use_tape():
        backward(scalar())
    analytic = [np.zeros(p.shape, np.float64) if p.grad is None else p.grad.astype(np.float64) for p in params]

    errors = []
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.zeros(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i].copy()
            flat[i] = orig + eps
            fp = float(np.asarray(scalar().data, np.float64))
            flat[i] = orig - eps
            fm = float(np.asarray(scalar().data, np.float64))
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * eps)
        errors.append(relative_error(ga.reshape(-1)[idx], numeric))
    return errors
