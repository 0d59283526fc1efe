"""Post-evaluation: teacher soft labels, student training on a distilled set, top-1 accuracy.

Soft labels are one whole-image teacher probability vector per distilled image
(temperature-scaled softmax, eval-mode teacher). Students train with AdamW and
a cosine multiplier on the base rate, using random-resized-crop and horizontal
flip augmentation, against KL to the soft labels or CE to the hard labels.
"""

from __future__ import annotations

import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, log_softmax_np
from .data import LabeledDataset, random_resized_crop_flip
from .errors import ContractError, DataError
from .models import ModelSpec, TrainedModel, accuracy, build_model, checkpoint_digest, predict, run_layers

log = logging.getLogger(__name__)


@dataclass
class SoftLabelSet:
    probs: np.ndarray          # N, num_classes, rows sum to 1
    teacher_id: str
    temperature: float = 1.0

    def __len__(self) -> int:
        return len(self.probs)


def generate_soft_labels(teacher: TrainedModel, images, T: float = 1.0) -> SoftLabelSet:
    """Eval-mode teacher probabilities ``softmax(z / T)`` for every image."""
    if not T > 0:
        raise ContractError(f"temperature must be positive, got {T}")
    images = getattr(images, "images", images)
    z = predict(teacher, np.asarray(images, np.float32)).astype(np.float64) / T
    probs = np.exp(log_softmax_np(z))
    probs /= probs.sum(axis=1, keepdims=True)
    return SoftLabelSet(probs, checkpoint_digest(teacher)[:16], float(T))


@dataclass(frozen=True)
class StudentHyper:
    epochs: int = 150
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 16
    eta: float = 1.0                    # cosine horizon multiplier (1 or 2)
    augment: bool = True
    crop_scale: tuple[float, float] = (0.5, 1.0)


def lr_multiplier(step: int, total: int, eta: float) -> float:
    """``0.5 * (1 + cos(pi * step / (total * eta)))``."""
    if total <= 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * step / (total * eta)))


def evaluate(model: TrainedModel, testset: LabeledDataset) -> float:
    """Top-1 accuracy of argmax eval-mode logits."""
    if testset is None:
        raise DataError("no test split to evaluate on")
    return accuracy(model, testset)


def fit_student(spec: ModelSpec, train: LabeledDataset, soft: SoftLabelSet | None,
                hyper: StudentHyper, seed: int) -> TrainedModel:
    if soft is not None and len(soft) != len(train):
        raise ContractError(f"{len(soft)} soft labels for {len(train)} images")
    model = build_model(spec, seed)
    if hyper.epochs == 0:
        return model
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(p) for k, p in model.params.items()}
    b1, b2 = hyper.betas
    n = len(train)
    steps_per_epoch = math.ceil(n / hyper.batch_size)
    total, step = hyper.epochs * steps_per_epoch, 0
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for i in range(0, n, hyper.batch_size):
            idx = order[i:i + hyper.batch_size]
            if len(idx) < 2:
                continue
            xb = train.images[idx]
            if hyper.augment:
                xb = random_resized_crop_flip(rng, xb, hyper.crop_scale)
            params = {k: Tensor(p, requires_grad=True) for k, p in model.params.items()}
            res = run_layers(model, Tensor(xb), "train", params)
            if soft is None:
                loss = ad.cross_entropy(res.logits, train.labels[idx])
            else:
                loss = ad.kl_div(res.logits, soft.probs[idx])
            ad.backward(loss)
            lr = hyper.lr * lr_multiplier(step, total, hyper.eta)
            t = step + 1
            for k, p in params.items():
                g = p.grad
                m[k] = (b1 * m[k] + (1 - b1) * g).astype(np.float32)
                v[k] = (b2 * v[k] + (1 - b2) * g * g).astype(np.float32)
                upd = (m[k] / (1 - b1 ** t)) / (np.sqrt(v[k] / (1 - b2 ** t)) + hyper.eps)
                decayed = model.params[k] * (1 - lr * hyper.weight_decay)
                model.params[k] = (decayed - lr * upd).astype(np.float32)
            for name, mu, var in res.batch_stats:
                rm, rv = model.running_stats(name)
                model.buffers[f"{name}.running_mean"] = (0.9 * rm + 0.1 * mu.data).astype(np.float32)
                model.buffers[f"{name}.running_var"] = (0.9 * rv + 0.1 * var.data).astype(np.float32)
            step += 1
    return model


@dataclass
class EvalReport:
    student: dict
    hyper: dict
    seeds: list[int]
    accuracies: list[float]
    soft_labels: str
    extra: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(statistics.fmean(self.accuracies)) if self.accuracies else 0.0

    @property
    def std(self) -> float:
        return float(statistics.pstdev(self.accuracies)) if len(self.accuracies) > 1 else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(mean=self.mean, std=self.std, top1=self.mean)
        return d


def _seed_job(args):
    spec, train, soft, hyper, seed, test = args
    return evaluate(fit_student(spec, train, soft, hyper, seed), test)


def train_student(spec: ModelSpec, distilled, soft: SoftLabelSet | None, hyper: StudentHyper,
                  seeds: Sequence[int], testset: LabeledDataset | None,
                  workers: int = 1) -> EvalReport:
    """Train one student per seed on the distilled images and report test top-1."""
    if testset is None:
        raise DataError("student evaluation needs a held-out test split")
    train = distilled.as_dataset(spec.num_classes) if hasattr(distilled, "as_dataset") else distilled
    if tuple(train.input_dims) != spec.input_dims:
        raise ContractError(f"student input {spec.input_dims} does not match distilled images "
                            f"{train.input_dims}")
    jobs = [(spec, train, soft, hyper, int(s), testset) for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            accs = list(pool.map(_seed_job, jobs))
    else:
        accs = [_seed_job(j) for j in jobs]
    label_desc = ("hard labels (CE)" if soft is None else
                  f"whole-image teacher soft labels, T={soft.temperature} (KL), teacher {soft.teacher_id}")
    hyper_d = asdict(hyper)
    hyper_d["optimizer"] = "adamw"
    return EvalReport(spec.to_dict(), hyper_d, [int(s) for s in seeds], accs, label_desc)
