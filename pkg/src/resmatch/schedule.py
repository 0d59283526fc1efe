"""Budget partitioning and the multi-resolution stage schedule."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError


def partition_budget(B: int, k: int) -> tuple[int, int]:
    """Steps per residual stage ``b = B // (k + 1)`` and the final residual-free stage length."""
    if k < 0 or B < k + 1:
        raise ConfigError(f"budget B={B} must be >= k+1 with k >= 0 (k={k})")
    b = B // (k + 1)
    return b, B - k * b


def mro_target(current: int, d_ds: int, d_orig: int) -> int:
    """Resolution after a stage boundary: toggle between the two resolutions."""
    if d_ds == d_orig:
        return d_orig
    if current not in (d_ds, d_orig):
        raise ConfigError(f"resolution {current} is neither D_ds={d_ds} nor D_orig={d_orig}")
    return d_orig if current == d_ds else d_ds


@dataclass(frozen=True)
class Stage:
    index: int          # 1..k for residual stages, k+1 for the final stage
    steps: int
    resolution: int
    merge_after: bool   # a resample + residual merge follows this stage


def stage_schedule(B: int, k: int, d_ds: int, d_orig: int) -> list[Stage]:
    """The k residual stages plus the final stage, with the resolution each runs at."""
    b, final = partition_budget(B, k)
    res, stages = d_ds, []
    for i in range(1, k + 1):
        stages.append(Stage(i, b, res, True))
        res = mro_target(res, d_ds, d_orig)
    stages.append(Stage(k + 1, final, res, False))
    return stages
