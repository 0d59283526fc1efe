"""Residual-matching distillation driver.

For each batch of slots: initialize pixels from the real patch bank at the
downsampled resolution, then run ``k`` stages of ``b`` Adam steps, each
followed by a resolution toggle and a residual merge with the (resampled)
patch, and finish with ``B - k*b`` plain steps.
"""

from __future__ import annotations

import json
import logging
import math
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .autodiff import fdrt, no_grad, softmax_np
from .data import LabeledDataset, Normalization, export_ppm, random_resized_crop_box
from .errors import ConfigError, ContractError, DataError, NumericError
from .metrics import feature_entropy, pixel_entropy
from .models import TrainedModel, checkpoint_digest, forward_logits
from .policy import PrecisionPolicy
from .recovery import AdamState, grad_step, recovery_loss, write_trace
from .resample import make_plan, resample_array, resample_backward
from .schedule import mro_target, stage_schedule

log = logging.getLogger(__name__)

SCHEDULERS = ("cosine-budget", "cosine-stage", "constant")


@dataclass
class DistillConfig:
    B: int = 2000
    k: int = 3
    alpha: float = 0.5
    d_ds: int = 32
    d_orig: int = 32
    ipc: int = 10
    grid: str = "1x1"
    lam: float = 1.0
    lr: float = 0.25
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    precision: str = "full32"
    seed: int = 0
    n_candidates: int = 8
    crop_scale: float = 0.5
    scheduler: str = "cosine-budget"
    arc: bool = True
    aggregation: str = "mean"
    group_classes: int = 10
    batching: str = "slot"
    entropy_bins: int = 256
    bn_mode: str = "train"
    augment: bool = True
    aug_scale: float = 0.5
    dataset: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.k < 0 or self.B < self.k + 1:
            raise ConfigError(f"need B >= k+1 >= 1, got B={self.B}, k={self.k}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 1 <= self.d_ds <= self.d_orig:
            raise ConfigError(f"need 1 <= d_ds <= d_orig, got {self.d_ds}, {self.d_orig}")
        if self.ipc < 1:
            raise ConfigError("ipc must be >= 1")
        if self.grid not in ("1x1", "2x2"):
            raise ConfigError(f"grid must be 1x1 or 2x2, got {self.grid!r}")
        if self.grid == "2x2" and self.d_orig % 2:
            raise ConfigError("2x2 grids need an even d_orig")
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"scheduler must be one of {SCHEDULERS}")
        if self.aggregation != "mean":
            raise ConfigError("only mean aggregation across teachers is implemented")
        if self.n_candidates < 1:
            raise ConfigError("n_candidates must be >= 1")
        if not 0 < self.crop_scale <= 1:
            raise ConfigError("crop_scale must be in (0, 1]")
        if self.batching not in ("slot", "class"):
            raise ConfigError("batching must be 'slot' or 'class'")
        if not 0 < self.aug_scale <= 1:
            raise ConfigError("aug_scale must be in (0, 1]")
        if self.bn_mode not in ("recover", "train"):
            raise ConfigError("bn_mode must be 'recover' or 'train'")
        PrecisionPolicy.named(self.precision)

    @property
    def policy(self) -> PrecisionPolicy:
        return PrecisionPolicy.named(self.precision)

    @property
    def cells(self) -> int:
        return 1 if self.grid == "1x1" else 4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# -- primitives --------------------------------------------------------------------

def arc_merge(x: np.ndarray, patch: np.ndarray, alpha: float) -> np.ndarray:
    """Per-element fusion ``alpha * x + (1 - alpha) * resample(patch, shape(x))``."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return x.copy()
    p = resample_array(patch, x.shape[-2:])
    if alpha == 0.0:
        return p
    return (np.float32(alpha) * x + np.float32(1.0 - alpha) * p).astype(np.float32)


@dataclass
class Patch:
    cls: int
    slot: int
    image: np.ndarray          # C, d_orig, d_orig
    provenance: dict


@dataclass
class PatchBank:
    patches: dict[tuple[int, int], Patch]
    selector: str = "confidence-scored random crops (simplified RDED)"

    def slice(self, classes: Sequence[int]) -> list[Patch]:
        keep = set(classes)
        return [p for key, p in sorted(self.patches.items()) if key[0] in keep]

    def images(self, classes: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
        items = [p for _, p in sorted(self.patches.items())
                 if classes is None or p.cls in set(classes)]
        return np.stack([p.image for p in items]), np.array([p.cls for p in items])


def slot_rng(seed: int, cls: int, slot: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, cls, slot]))


def init_patches(dataset: LabeledDataset, teacher: TrainedModel, cfg: DistillConfig,
                 classes: Sequence[int] | None = None) -> PatchBank:
    """Pick, per (class, slot) and grid cell, the most confidently classified of
    ``n_candidates`` random crops; 2x2 grids tile four winners into one image."""
    classes = range(dataset.num_classes) if classes is None else classes
    need = cfg.ipc * cfg.cells
    cell = cfg.d_orig if cfg.cells == 1 else cfg.d_orig // 2
    _, h, w = dataset.input_dims
    patches = {}
    for c in classes:
        pool = dataset.class_indices(c)
        if len(pool) < need:
            raise DataError(f"class {c} has {len(pool)} images; ipc={cfg.ipc} with grid {cfg.grid} "
                            f"needs {need}")
        for slot in range(cfg.ipc):
            rng = slot_rng(cfg.seed, c, slot)
            tiles, prov = [], []
            for _ in range(cfg.cells):
                cands, meta = [], []
                for _ in range(cfg.n_candidates):
                    src = int(pool[rng.integers(len(pool))])
                    top, left, ch, cw = random_resized_crop_box(rng, h, w, (cfg.crop_scale, 1.0))
                    crop = dataset.images[src, :, top:top + ch, left:left + cw]
                    cands.append(resample_array(crop, (cell, cell)))
                    meta.append({"source_index": src, "crop_box": [top, left, ch, cw]})
                batch = np.stack(cands)
                if batch.shape[-1] != cfg.d_orig:
                    score_in = resample_array(batch, (cfg.d_orig, cfg.d_orig))
                else:
                    score_in = batch
                with no_grad():
                    logits = forward_logits(teacher, score_in, "eval").logits.data
                scores = softmax_np(logits)[:, c]
                best = int(np.argmax(scores))
                tiles.append(batch[best])
                prov.append({**meta[best], "candidate": best, "score": float(scores[best])})
            if cfg.cells == 1:
                image = tiles[0]
            else:
                top_row = np.concatenate(tiles[:2], axis=2)
                bottom_row = np.concatenate(tiles[2:], axis=2)
                image = np.concatenate([top_row, bottom_row], axis=1)
            patches[(c, slot)] = Patch(c, slot, image.astype(np.float32),
                                       {"cells": prov, "grid": cfg.grid})
    return PatchBank(patches)


# -- per-batch optimization -------------------------------------------------------------

@dataclass
class JobResult:
    classes: list[int]
    images: np.ndarray         # n, C, d_orig, d_orig (unclamped)
    labels: np.ndarray
    slots: list[int]
    trace: list[dict]
    entropy_trace: list[dict]
    grad_steps: int = 0
    arc_merges: int = 0
    stage_resolutions: list[int] = field(default_factory=list)
    resolutions_seen: list[int] = field(default_factory=list)

    @property
    def trace_name(self) -> str:
        """``<class>`` for single-class batches, ``slot<s>-<first class>`` for mixed ones."""
        if len(self.classes) == 1:
            return str(self.classes[0])
        return f"slot{min(self.slots)}-{self.classes[0]}"


def _lr_at(cfg: DistillConfig, global_step: int, stage_step: int, stage_len: int) -> float:
    if cfg.scheduler == "constant":
        return cfg.lr
    if cfg.scheduler == "cosine-stage":
        return 0.5 * cfg.lr * (1 + math.cos(math.pi * stage_step / max(stage_len, 1)))
    return 0.5 * cfg.lr * (1 + math.cos(math.pi * global_step / cfg.B))


def _augment(rng: np.random.Generator, x: np.ndarray, scale: float):
    """Per-image random-resized crop (back to the current extent) and horizontal flip."""
    n, _, h, w = x.shape
    out = np.empty_like(x)
    ops = []
    for i in range(n):
        top, left, ch, cw = random_resized_crop_box(rng, h, w, (scale, 1.0))
        flip = bool(rng.random() < 0.5)
        img = resample_array(x[i, :, top:top + ch, left:left + cw], (h, w))
        out[i] = img[:, :, ::-1] if flip else img
        ops.append((top, left, ch, cw, flip))
    return out, ops


def _augment_backward(grad: np.ndarray, ops, shape) -> np.ndarray:
    """Adjoint of :func:`_augment`: un-flip, transpose the resample, scatter into the crop box."""
    out = np.zeros(shape, np.float32)
    h, w = shape[-2:]
    for i, (top, left, ch, cw, flip) in enumerate(ops):
        g = grad[i:i + 1, :, :, ::-1] if flip else grad[i:i + 1]
        back = resample_backward(np.ascontiguousarray(g), make_plan((ch, cw), (h, w))).data
        out[i, :, top:top + ch, left:left + cw] += back[0]
    return out


def _entropy_point(step, x, teacher, cfg):
    return {"step": step, "pixel_entropy_bits": pixel_entropy(x, cfg.entropy_bins),
            "feature_entropy_bits": feature_entropy(teacher, resample_array(x, cfg.d_orig))
            if x.shape[-1] != cfg.d_orig else feature_entropy(teacher, x)}


def distill_class(cfg: DistillConfig, teachers: Sequence[TrainedModel],
                  bank_slice: Sequence[Patch]) -> JobResult:
    """Run the full stage schedule on one batch of slots (one class, or a class group)."""
    if not bank_slice:
        raise ContractError("empty patch slice")
    policy = cfg.policy
    teachers = [t.cast(policy.params) for t in teachers]
    patches = np.stack([p.image for p in bank_slice]).astype(np.float32)
    labels = np.array([p.cls for p in bank_slice], dtype=np.int64)
    result = JobResult(sorted({p.cls for p in bank_slice}), patches, labels,
                       [p.slot for p in bank_slice], [], [])

    aug_rng = np.random.default_rng(np.random.SeedSequence(
        [cfg.seed, 0xA06, *(v for p in bank_slice for v in (p.cls, p.slot))]))
    x = resample_array(patches, (cfg.d_ds, cfg.d_ds))
    state = AdamState.zeros_like(x, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps)
    result.entropy_trace.append(_entropy_point(0, x, teachers[0], cfg))
    step = 0
    for stage in stage_schedule(cfg.B, cfg.k, cfg.d_ds, cfg.d_orig):
        result.stage_resolutions.append(x.shape[-1])
        for t in range(stage.steps):
            if cfg.augment:
                x_in, ops = _augment(aug_rng, x, cfg.aug_scale)
                report, grad = _loss(cfg, teachers, x_in, labels, policy, stage.index, step + 1)
                grad = _augment_backward(grad, ops, x.shape)
            else:
                report, grad = _loss(cfg, teachers, x, labels, policy, stage.index, step + 1)
            lr = _lr_at(cfg, step, t, stage.steps)
            x, state = grad_step(x, grad, state, lr)
            step += 1
            result.grad_steps += 1
            result.resolutions_seen.append(x.shape[-1])
            result.trace.append(report.row(step))
        if stage.merge_after:
            target = mro_target(x.shape[-1], cfg.d_ds, cfg.d_orig)
            if target != x.shape[-1]:
                x = resample_array(x, (target, target))
                state = state.reset(x.shape)
            if cfg.arc:
                x = arc_merge(x, patches, cfg.alpha)
                result.arc_merges += 1
            result.entropy_trace.append(_entropy_point(step, x, teachers[0], cfg))
    if x.shape[-1] != cfg.d_orig:
        x = resample_array(x, (cfg.d_orig, cfg.d_orig))
    if result.entropy_trace[-1]["step"] != step:
        result.entropy_trace.append(_entropy_point(step, x, teachers[0], cfg))
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite pixels after optimization", term="pixels")
    result.images = x
    return result


def _loss(cfg, teachers, x, labels, policy, stage, step):
    try:
        return recovery_loss(teachers, x, labels, cfg.lam, policy, cfg.bn_mode)
    except NumericError as e:
        raise e.with_context(stage, step) from e


# -- whole-dataset driver ------------------------------------------------------------------

def _chunks(classes: list[int], size: int) -> list[list[int]]:
    size = max(2, size)
    groups = [classes[i:i + size] for i in range(0, len(classes), size)]
    if len(groups) > 1 and len(groups[-1]) < 2:
        groups[-2].extend(groups.pop())
    return groups


def job_keys(num_classes: int, cfg: DistillConfig,
             classes: Sequence[int] | None = None) -> list[list[tuple[int, int]]]:
    """(class, slot) members of each jointly optimized batch.

    ``slot`` batching puts one slot of up to ``group_classes`` different classes
    in a batch; ``class`` batching puts all ipc slots of one class in a batch
    (falling back to class groups when ipc == 1). A single class always forms
    one batch of its slots.
    """
    classes = list(range(num_classes) if classes is None else classes)
    if cfg.ipc >= 2 and (cfg.batching == "class" or len(classes) == 1):
        return [[(c, s) for s in range(cfg.ipc)] for c in classes]
    if len(classes) < 2:
        raise ConfigError(f"{cfg.batching} batching with ipc={cfg.ipc} needs at least two "
                          "classes to form a batch")
    slots = range(cfg.ipc) if cfg.batching == "slot" else [0]
    return [[(c, s) for c in group] for s in slots for group in _chunks(classes, cfg.group_classes)]


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("RESMATCH_WORKERS", "1")))
    except ValueError:
        return 1


def _run_job(args):
    cfg, teachers, bank_slice = args
    return distill_class(cfg, teachers, bank_slice)


@dataclass
class DistilledSet:
    images: np.ndarray                 # n, C, d_orig, d_orig, clamped to the normalized range
    labels: np.ndarray
    slots: np.ndarray
    normalization: Normalization
    manifest: dict = field(default_factory=dict)
    jobs: list[JobResult] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return int(self.manifest.get("num_classes", int(self.labels.max()) + 1))

    def as_dataset(self, num_classes: int | None = None) -> LabeledDataset:
        return LabeledDataset(self.images, self.labels, num_classes or self.num_classes,
                              self.normalization, "distilled", "distilled")


def clamp_normalized(images: np.ndarray, norm: Normalization) -> np.ndarray:
    lo, hi = norm.bounds()
    shape = (1, -1, 1, 1)
    return np.clip(images, lo.reshape(shape), hi.reshape(shape)).astype(np.float32)


def distill(cfg: DistillConfig, teachers: Sequence[TrainedModel], dataset: LabeledDataset,
            classes: Sequence[int] | None = None, workers: int | None = None,
            bank: PatchBank | None = None) -> DistilledSet:
    if not teachers:
        raise ContractError("at least one teacher is required")
    for t in teachers:
        if t.spec.num_classes != dataset.num_classes:
            raise ContractError(f"teacher {t.spec.arch} has {t.spec.num_classes} classes, dataset "
                                f"{dataset.num_classes}")
    start = time.time()
    keys = job_keys(dataset.num_classes, cfg, classes)
    flat = sorted({c for job in keys for c, _ in job})
    bank = bank or init_patches(dataset, teachers[0], cfg, flat)
    jobs = [(cfg, list(teachers), [bank.patches[key] for key in job]) for job in keys]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    images = np.concatenate([r.images for r in results])
    labels = np.concatenate([r.labels for r in results])
    slots = np.concatenate([np.asarray(r.slots) for r in results])
    manifest = {
        "tool": "resmatch", "version": __version__, "build": build_id(),
        "config": cfg.to_dict(), "num_classes": dataset.num_classes,
        "dataset": {"name": dataset.name, "digest": dataset.digest(), "ref": cfg.dataset},
        "teachers": [{"arch": t.spec.arch, "digest": checkpoint_digest(t),
                      "provenance": t.provenance} for t in teachers],
        "decisions": {"lambda": cfg.lam, "scheduler_horizon": cfg.scheduler,
                      "aggregation": cfg.aggregation, "patch_selector": bank.selector,
                      "soft_labels": "none (hard labels)"},
        "patches": {f"{c}/{s}": p.provenance for (c, s), p in sorted(bank.patches.items())},
        "jobs": [{"classes": r.classes, "slots": sorted(set(r.slots)), "grad_steps": r.grad_steps, "arc_merges": r.arc_merges,
                  "stage_resolutions": r.stage_resolutions, "entropy_trace": r.entropy_trace}
                 for r in results],
        "wall_time_s": round(time.time() - start, 3),
    }
    return DistilledSet(clamp_normalized(images, dataset.normalization), labels, slots,
                        dataset.normalization, manifest, results)


def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# -- persistence ----------------------------------------------------------------------------

def save_distilled(ds: DistilledSet, out: str | Path, extra_manifest: dict | None = None) -> Path:
    out = Path(out)
    for img, c, s in zip(ds.images, ds.labels, ds.slots):
        d = out / "images" / str(int(c))
        d.mkdir(parents=True, exist_ok=True)
        fdrt.save(d / f"{int(s)}.fdrt", img)
        if img.shape[0] == 3:
            export_ppm(img, ds.normalization, d / f"{int(s)}.ppm")
    for r in ds.jobs:
        write_trace(r.trace, out / "traces" / f"{r.trace_name}.csv")
    manifest = {**ds.manifest, "normalization": ds.normalization.to_dict(),
                "images": [f"images/{int(c)}/{int(s)}.fdrt" for c, s in zip(ds.labels, ds.slots)],
                **(extra_manifest or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_distilled(path: str | Path) -> DistilledSet:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"{path}: no manifest.json (not a distill output directory)") from e
    images, labels, slots = [], [], []
    for rel in manifest["images"]:
        images.append(fdrt.load(path / rel))
        c, s = Path(rel).parent.name, Path(rel).stem
        labels.append(int(c))
        slots.append(int(s))
    return DistilledSet(np.stack(images), np.array(labels), np.array(slots),
                        Normalization.from_dict(manifest["normalization"]), manifest)
