"""Storage precisions and IEEE-754 binary16 narrowing.

Half16 tensors are stored as ``numpy.float16`` so their footprint is real;
arithmetic always widens to float32 and narrows the result again.
"""

from __future__ import annotations

import numpy as np

FULL32 = "full32"
HALF16 = "half16"
PRECISIONS = (FULL32, HALF16)

DTYPES = {FULL32: np.float32, HALF16: np.float16}

HALF16_MAX = 65504.0


class OverflowMonitor:
    """Counts finite values that saturated to infinity while narrowing."""

    def __init__(self) -> None:
        self.count = 0

    def reset(self) -> int:
        n, self.count = self.count, 0
        return n


overflow_monitor = OverflowMonitor()


def check_precision(precision: str) -> str:
    if precision not in PRECISIONS:
        raise ValueError(f"unknown precision {precision!r}; expected one of {PRECISIONS}")
    return precision


def precision_of(arr: np.ndarray) -> str:
    return HALF16 if arr.dtype == np.float16 else FULL32


def narrow(arr: np.ndarray) -> np.ndarray:
    """Round float32 values to binary16 (round-to-nearest-even, saturating to inf)."""
    with np.errstate(over="ignore"):
        out = np.asarray(arr, dtype=np.float32).astype(np.float16)
    if out.size:
        saturated = np.isinf(out) & np.isfinite(arr)
        n = int(np.count_nonzero(saturated))
        if n:
            overflow_monitor.count += n
    return out


def cast_array(arr: np.ndarray, target: str) -> np.ndarray:
    check_precision(target)
    if target == HALF16:
        if arr.dtype == np.float16:
            return arr.copy()
        return narrow(arr)
    return np.asarray(arr).astype(np.float32)
