"""Task metrics, ParEGO scalarization and Pareto bookkeeping.

All objectives are losses to be minimized; segmentation scores enter as
``1 - dice``.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

DEFAULT_ALPHA = 0.05


def dice(a, b) -> float:
    """Dice overlap of two binary masks. Two empty masks score 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _as_vector(f) -> np.ndarray:
    if isinstance(f, Mapping):
        f = list(f.values())
    return np.asarray(f, dtype=np.float64).reshape(-1)


def parego_scalarize(losses, weights, alpha: float = DEFAULT_ALPHA) -> float:
    """Augmented Tchebycheff value ``max(w * f) + alpha * sum(w * f)``."""
    f = _as_vector(losses)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if f.shape != w.shape:
        raise ValueError(f"{f.size} losses but {w.size} weights")
    wf = w * f
    return float(wf.max() + alpha * wf.sum())


def sample_simplex_weights(m: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the probability simplex with ``m`` vertices."""
    if m < 1:
        raise ValueError("need at least one objective")
    if m == 1:
        return np.ones(1)
    e = rng.exponential(size=m)
    return e / e.sum()


def dominates(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(np.all(a <= b) and np.any(a < b))


def pareto_front(history: Sequence) -> list[int]:
    """Indices of non-dominated loss vectors; exact duplicates keep the first."""
    if len(history) == 0:
        raise ValueError("empty history")
    F = np.stack([_as_vector(f) for f in history])
    front = []
    for i, fi in enumerate(F):
        dominated = np.any(np.all(F <= fi, axis=1) & np.any(F < fi, axis=1))
        duplicate = np.any(np.all(F[:i] == fi, axis=1))
        if not dominated and not duplicate:
            front.append(i)
    return front


def select_final(front: Sequence) -> int:
    """Position (within ``front``) of the member with the lowest mean loss."""
    if len(front) == 0:
        raise ValueError("empty front")
    means = [float(_as_vector(f).mean()) for f in front]
    return int(np.argmin(means))
