"""Diagnostics: image/feature entropy, the MRO cost model, FLOP counts, and the entropy bound."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, no_grad, softmax_np
from .errors import ContractError
from .models import ModelSpec, TrainedModel, check_resolution, forward_logits, predict
from .schedule import partition_budget, stage_schedule


def _histogram_entropy_bits(values: np.ndarray, bins: int) -> np.ndarray:
    """Shannon entropy (bits) of each row's histogram over that row's [min, max]."""
    v = values.astype(np.float64)
    lo = v.min(axis=1, keepdims=True)
    span = v.max(axis=1, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    idx = np.clip(np.floor((v - lo) / safe * bins), 0, bins - 1).astype(np.int64)
    idx[(span == 0).ravel()] = 0
    counts = np.zeros((v.shape[0], bins))
    np.add.at(counts, (np.arange(v.shape[0])[:, None], idx), 1.0)
    p = counts / v.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(p), 0.0)
    return terms.sum(axis=1)


def pixel_entropy(images, bins: int = 256) -> float:
    """Mean per-channel histogram entropy in bits, averaged over channels then images."""
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float32)
    if bins < 2:
        raise ContractError(f"bins must be >= 2, got {bins}")
    if images.ndim == 3:
        images = images[None]
    if images.size == 0 or images.shape[0] == 0:
        raise ContractError("pixel_entropy of an empty batch")
    n, c = images.shape[:2]
    per = _histogram_entropy_bits(images.reshape(n * c, -1), bins).reshape(n, c)
    return float(per.mean(axis=1).mean())


def penultimate_features(model: TrainedModel, images) -> np.ndarray:
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float32)
    feats = []
    with no_grad():
        for i in range(0, len(images), 256):
            feats.append(forward_logits(model, images[i:i + 256], "eval").features.data)
    return np.concatenate(feats).astype(np.float32)


def feature_entropy(model: TrainedModel, images, bins: int = 64) -> float:
    """Mean over penultimate dimensions of the histogram entropy (bits) across the batch."""
    feats = penultimate_features(model, images)
    return float(_histogram_entropy_bits(feats.T, bins).mean())


def mro_cost_ratio(B: int, k: int, b: int, r: float) -> float:
    """Normalized cost of the multi-resolution schedule relative to all-full-resolution."""
    if not 0 < r <= 1:
        raise ContractError(f"resolution ratio r must be in (0, 1], got {r}")
    if b * k > B:
        raise ContractError(f"b*k = {b * k} exceeds the budget {B}")
    return 1.0 - (b / B) * (math.ceil(k / 2) * (1.0 - r))


def _conv_geometry(layer) -> tuple[int, int, int]:
    # optional (kernel, stride, pad) trailing a conv entry; zoo convs are 3x3/1/1
    return tuple(layer[4:7]) if len(layer) >= 7 else (3, 1, 1)


def count_flops(model, input_dims) -> int:
    """Multiply-accumulates summed over conv and linear layers at ``input_dims``.

    ``model`` may be a TrainedModel, a ModelSpec, or a raw layer inventory
    (``("conv", name, cin, cout[, k, stride, pad])``, ``("pool", name)``,
    ``("fc", name, in, out)``).
    """
    if isinstance(model, TrainedModel):
        model = model.spec
    if isinstance(model, ModelSpec):
        check_resolution(model, input_dims[-2:])
        layers = model.layers()
    else:
        layers = list(model)
    h, w = (int(v) for v in input_dims[-2:])
    macs = 0
    for layer in layers:
        kind = layer[0]
        if kind == "conv":
            k, s, p = _conv_geometry(layer)
            h, w = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            macs += layer[2] * layer[3] * k * k * h * w
        elif kind == "pool":
            h, w = h // 2, w // 2
        elif kind == "fc":
            macs += layer[2] * layer[3]
    return macs


@dataclass
class CostReport:
    B: int
    k: int
    b: int
    r: float
    analytic_ratio: float
    measured_flops_mro: int
    measured_flops_baseline: int
    measured_ratio: float
    arch: str
    d_ds: int
    d_orig: int

    def to_dict(self) -> dict:
        return asdict(self)


def cost_report(B: int, k: int, d_ds: int, d_orig: int, spec: ModelSpec) -> CostReport:
    """Analytic ratio next to per-step MAC counts summed over the actual stage schedule."""
    b, _ = partition_budget(B, k)
    r = (d_ds / d_orig) ** 2
    channels = spec.input_dims[0]
    per_res = {}
    mro = 0
    for stage in stage_schedule(B, k, d_ds, d_orig):
        if stage.resolution not in per_res:
            per_res[stage.resolution] = count_flops(spec, (channels, stage.resolution, stage.resolution))
        mro += stage.steps * per_res[stage.resolution]
    base = B * count_flops(spec, (channels, d_orig, d_orig))
    return CostReport(B, k, b, r, mro_cost_ratio(B, k, b, r), mro, base, mro / base,
                      spec.arch, d_ds, d_orig)


def entropy_bound(model: TrainedModel, images, set_size: int) -> tuple[float, float]:
    """Max per-sample softmax entropy (nats) over ``images`` and ``set_size`` times it."""
    images = np.asarray(getattr(images, "images", images), dtype=np.float32)
    if len(images) == 0:
        raise ContractError("entropy_bound needs a nonempty dataset")
    p = softmax_np(predict(model, images)).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(p > 0, -p * np.log(p), 0.0).sum(axis=1)
    h_max = float(h.max())
    return h_max, float(set_size) * h_max
