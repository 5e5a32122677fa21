"""Central-difference gradient checks.

The oracle only re-evaluates the forward function, so it stays independent
of whatever backward rule it is checking.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def central_diff(loss_fn: Callable[[], float], arr: np.ndarray,
                 index: tuple, h: float = 1e-5) -> float:
    """d loss / d arr[index] by symmetric perturbation (arr edited in place
    and restored)."""
    orig = arr[index]
    arr[index] = orig + h
    up = loss_fn()
    arr[index] = orig - h
    down = loss_fn()
    arr[index] = orig
    return (up - down) / (2.0 * h)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    """|a - b| relative to the larger magnitude, floored so that near-zero
    values compare by absolute difference."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_grad(loss_fn: Callable[[], float], arr: np.ndarray,
               grad: np.ndarray, rng: np.random.Generator,
               points: int = 5, h: float = 1e-5,
               floor: float = 1e-8) -> float:
    """Worst relative error between ``grad`` and central differences at
    ``points`` random coordinates of ``arr``."""
    flat_n = arr.size
    worst = 0.0
    for _ in range(points):
        flat_idx = int(rng.integers(flat_n))
        index = np.unravel_index(flat_idx, arr.shape)
        fd = central_diff(loss_fn, arr, index, h=h)
        worst = max(worst, rel_err(fd, float(grad[index]), floor=floor))
    return worst
