"""Central finite-difference oracle, independent of the tape."""

import numpy as np


def numeric_grad(f, arr: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """d f / d arr by central differences; ``f`` must read ``arr`` in place."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.abs(a - b).max()
    den = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(num / den)
