"""Bilinear up/down-resampling of N,C,H,W image tensors.

Source coordinates use half-pixel centers, ``src = (dst + 0.5) * H / H' - 0.5``,
clamped to ``[0, H - 1]`` so border weights remain a convex combination. The
map is separable, so a plan stores one sparse row per output line on each
axis; the dense per-axis matrices make the transpose (backward) exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Function, Tensor
from .autodiff.tensor import as_tensor
from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class AxisPlan:
    lo: np.ndarray      # floor(src), int
    hi: np.ndarray      # lo + 1 clamped to size - 1
    frac: np.ndarray    # src - lo, in [0, 1)
    size: int

    def matrix(self) -> np.ndarray:
        m = np.zeros((len(self.lo), self.size), dtype=np.float64)
        rows = np.arange(len(self.lo))
        np.add.at(m, (rows, self.lo), 1.0 - self.frac)
        np.add.at(m, (rows, self.hi), self.frac)
        return m


def _axis_plan(src: int, dst: int) -> AxisPlan:
    coord = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    coord = np.clip(coord, 0.0, src - 1)
    lo = np.floor(coord).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return AxisPlan(lo, hi, coord - lo, src)


@dataclass(frozen=True)
class ResamplePlan:
    source: tuple[int, int]
    target: tuple[int, int]
    rows: AxisPlan
    cols: AxisPlan

    @property
    def is_identity(self) -> bool:
        return self.source == self.target

    def pixel(self, i_out: int, j_out: int):
        """Source corners and the four weights w_{m,n} for one output pixel."""
        a, b = self.rows.frac[i_out], self.cols.frac[j_out]
        corners = ((self.rows.lo[i_out], self.cols.lo[j_out]), (self.rows.hi[i_out], self.cols.lo[j_out]),
                   (self.rows.lo[i_out], self.cols.hi[j_out]), (self.rows.hi[i_out], self.cols.hi[j_out]))
        weights = ((1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b)
        return corners, weights

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.rows.matrix().astype(np.float32), self.cols.matrix().astype(np.float32))


def make_plan(source: tuple[int, int], target: tuple[int, int]) -> ResamplePlan:
    h, w = (int(v) for v in source)
    th, tw = (int(v) for v in target)
    if min(h, w) < 1:
        raise ContractError(f"source extent must be >= 1, got {source}")
    if min(th, tw) < 1:
        raise ContractError(f"target extent must be >= 1, got {target}")
    return ResamplePlan((h, w), (th, tw), _axis_plan(h, th), _axis_plan(w, tw))


def _apply(arr: np.ndarray, ah: np.ndarray, aw: np.ndarray) -> np.ndarray:
    return np.matmul(ah, np.matmul(arr, aw.T))


class _Resample(Function):
    kind = "resample"

    def forward(self, x, plan=None):
        self.plan = plan
        if plan.is_identity:
            return x.copy()
        self.ah, self.aw = plan.matrices()
        return _apply(x, self.ah, self.aw)

    def backward(self, g):
        if self.plan.is_identity:
            return (g.copy(),)
        return (_apply(g, self.ah.T, self.aw.T),)


def _target_dims(target) -> tuple[int, int]:
    if isinstance(target, (int, np.integer)):
        return int(target), int(target)
    th, tw = target
    return int(th), int(tw)


def resample(image, target) -> Tensor:
    """Resample an N,C,H,W tensor to ``target`` (int for square, or (H', W'))."""
    image = as_tensor(image)
    if image.ndim != 4:
        raise DimensionError(f"resample expects N,C,H,W, got {image.dims}", axis="ndim")
    plan = make_plan(image.shape[2:], _target_dims(target))
    return _Resample.apply(image, plan=plan)


def resample_array(arr: np.ndarray, target) -> np.ndarray:
    """Plain-array convenience wrapper; same arithmetic as :func:`resample`."""
    arr = np.asarray(arr, dtype=np.float32)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    out = resample(Tensor(arr), target).data
    return out[0] if squeeze else out


def resample_backward(grad_out, plan: ResamplePlan) -> Tensor:
    """Transpose of the bilinear map: grad_in = W^T grad_out."""
    grad_out = as_tensor(grad_out)
    if grad_out.ndim != 4 or tuple(grad_out.shape[2:]) != plan.target:
        raise ContractError(
            f"grad dims {grad_out.dims} do not match plan target {plan.target}")
    g = np.asarray(grad_out.data, dtype=np.float32)
    if plan.is_identity:
        return Tensor(g.copy())
    ah, aw = plan.matrices()
    return Tensor(_apply(g, ah.T, aw.T))
