"""Teacher/student CNN zoo, pretraining, and checkpoint persistence.

Three plain conv stacks stand in for the large backbones: ``cnn-s`` (2 conv
blocks), ``cnn-m`` (4) and ``cnn-l`` (6). Each block is conv3x3 -> BN -> ReLU;
2x2 max-pooling follows every block in cnn-s and every second block in the
others. Global average pooling feeds a single linear head, so any input whose
extent survives the pooling stack is accepted.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import FULL32, HALF16, Tensor, fdrt, no_grad
from .data import LabeledDataset, random_crop_flip
from .errors import ContractError, DataError, ResolutionError, SpecError
from .policy import FULL, PrecisionPolicy

log = logging.getLogger(__name__)

ARCHITECTURES = {
    # (out_channels, pool_after) per conv block
    "cnn-s": ((16, True), (32, True)),
    "cnn-m": ((16, False), (16, True), (32, False), (32, True)),
    "cnn-l": ((16, False), (16, True), (32, False), (32, True), (64, False), (64, True)),
}

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
PARAM_FIELDS = {"conv": ("weight", "bias"), "bn": ("gamma", "beta"), "fc": ("weight", "bias")}
BUFFER_FIELDS = ("running_mean", "running_var")


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_dims: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 10

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise SpecError(f"unknown architecture {self.arch!r}; choose from {sorted(ARCHITECTURES)}")
        object.__setattr__(self, "input_dims", tuple(int(v) for v in self.input_dims))
        if self.num_classes < 2:
            raise SpecError("num_classes must be >= 2")
        check_resolution(self, self.input_dims[1:])

    @property
    def pool_factor(self) -> int:
        return 2 ** sum(pool for _, pool in ARCHITECTURES[self.arch])

    def layers(self) -> list[tuple]:
        """Layer inventory: ("conv", name, cin, cout), ("bn", name, c), ("pool", name), ("fc", ...)."""
        out, cin = [], self.input_dims[0]
        for i, (cout, pool) in enumerate(ARCHITECTURES[self.arch], start=1):
            out.append(("conv", f"conv{i}", cin, cout))
            out.append(("bn", f"bn{i}", cout))
            if pool:
                out.append(("pool", f"pool{i}"))
            cin = cout
        out.append(("fc", "fc", cin, self.num_classes))
        return out

    def to_dict(self) -> dict:
        return {"arch": self.arch, "input_dims": list(self.input_dims), "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["arch"], tuple(d["input_dims"]), int(d["num_classes"]))


def check_resolution(spec: ModelSpec, hw) -> None:
    """Raise ResolutionError naming the first pooling layer that would collapse ``hw``."""
    h, w = (int(v) for v in hw)
    if h < 1 or w < 1:
        raise ResolutionError(f"input extent {h}x{w} is empty", layer="input")
    for layer in spec.layers():
        if layer[0] == "pool":
            if h < 2 or w < 2:
                raise ResolutionError(f"{layer[1]}: feature map {h}x{w} collapses under 2x2 pooling",
                                      layer=layer[1])
            if h % 2 or w % 2:
                raise ResolutionError(f"{layer[1]}: feature map {h}x{w} does not divide by 2",
                                      layer=layer[1])
            h, w = h // 2, w // 2


def param_count(spec: ModelSpec) -> int:
    total = 0
    for layer in spec.layers():
        if layer[0] == "conv":
            total += layer[3] * layer[2] * 9 + layer[3]
        elif layer[0] == "bn":
            total += 2 * layer[2]
        elif layer[0] == "fc":
            total += layer[3] * layer[2] + layer[3]
    return total


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        for k, v in self.buffers.items():
            if k.endswith("running_var") and np.any(v < 0):
                raise ContractError(f"{k} has negative entries")

    @property
    def precision(self) -> str:
        return HALF16 if any(p.dtype == np.float16 for p in self.params.values()) else FULL32

    def param_bytes(self) -> int:
        return sum(p.nbytes for p in self.params.values())

    def bn_layers(self) -> list[str]:
        return [layer[1] for layer in self.spec.layers() if layer[0] == "bn"]

    def running_stats(self, bn: str) -> tuple[np.ndarray, np.ndarray]:
        return self.buffers[f"{bn}.running_mean"], self.buffers[f"{bn}.running_var"]

    def cast(self, precision: str) -> "TrainedModel":
        """Copy with parameters narrowed or widened; BN buffers stay full32."""
        params = {k: ad.precision.cast_array(v, precision) for k, v in self.params.items()}
        return replace(self, params=params, buffers={k: v.copy() for k, v in self.buffers.items()},
                       provenance=dict(self.provenance))

    def copy(self) -> "TrainedModel":
        return self.cast(self.precision)


def build_model(spec: ModelSpec, seed: int = 0) -> TrainedModel:
    """Kaiming-uniform (fan-in) weights, zero conv biases, gamma 1, beta 0, running N(0, 1)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    params, buffers = {}, {}
    for layer in spec.layers():
        kind, name = layer[0], layer[1]
        if kind == "conv":
            cin, cout = layer[2], layer[3]
            bound = math.sqrt(6.0 / (cin * 9))
            params[f"{name}.weight"] = rng.uniform(-bound, bound, (cout, cin, 3, 3)).astype(np.float32)
            params[f"{name}.bias"] = np.zeros(cout, np.float32)
        elif kind == "bn":
            c = layer[2]
            params[f"{name}.gamma"] = np.ones(c, np.float32)
            params[f"{name}.beta"] = np.zeros(c, np.float32)
            buffers[f"{name}.running_mean"] = np.zeros(c, np.float32)
            buffers[f"{name}.running_var"] = np.ones(c, np.float32)
        elif kind == "fc":
            fan_in, out = layer[2], layer[3]
            bound = math.sqrt(6.0 / fan_in)
            params[f"{name}.weight"] = rng.uniform(-bound, bound, (out, fan_in)).astype(np.float32)
            b = 1.0 / math.sqrt(fan_in)
            params[f"{name}.bias"] = rng.uniform(-b, b, out).astype(np.float32)
    return TrainedModel(spec, params, buffers, {"trained": False}, seed)


@dataclass
class ForwardResult:
    logits: Tensor
    batch_stats: list[tuple[str, Tensor, Tensor]]   # (bn name, mean, var); empty in eval mode
    features: Tensor                                # penultimate activations


def run_layers(model: TrainedModel, x: Tensor, mode: str, params: dict[str, Tensor]) -> ForwardResult:
    check_resolution(model.spec, x.shape[2:])
    stats = []
    h = x
    for layer in model.spec.layers():
        kind, name = layer[0], layer[1]
        if kind == "conv":
            h = ad.conv2d(h, params[f"{name}.weight"], params[f"{name}.bias"], stride=1, pad=1)
        elif kind == "bn":
            rm, rv = model.running_stats(name)
            if mode == "recover":
                stats.append((name, ad.channel_mean(h), ad.channel_var(h)))
            h, bs = ad.batchnorm(h, params[f"{name}.gamma"], params[f"{name}.beta"],
                                 Tensor(rm), Tensor(rv), "eval" if mode == "recover" else mode,
                                 eps=BN_EPS)
            if bs is not None:
                stats.append((name, bs[0], bs[1]))
            h = ad.relu(h)
        elif kind == "pool":
            h = ad.maxpool2d(h, 2, layer=name)
        elif kind == "fc":
            feats = ad.global_avgpool(h)
            h = ad.linear(feats, params[f"{name}.weight"], params[f"{name}.bias"])
    return ForwardResult(h, stats, feats)


def forward_logits(model: TrainedModel, batch, mode: str = "eval",
                   precision: PrecisionPolicy = FULL) -> ForwardResult:
    """Forward a batch; train mode also returns full32 per-BN-layer batch statistics."""
    batch = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, np.float32))
    if batch.ndim != 4 or batch.shape[1] != model.spec.input_dims[0]:
        raise ContractError(f"batch dims {batch.dims} do not match input channels "
                            f"{model.spec.input_dims[0]}")
    params = {k: Tensor(ad.precision.cast_array(v, precision.params), precision.params)
              for k, v in model.params.items()}
    out = run_layers(model, batch, mode, params)
    if precision.logits_and_ce == HALF16 and out.logits.precision != HALF16:
        out.logits = ad.cast(out.logits, HALF16)
    return out


def predict(model: TrainedModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits as a float32 array."""
    outs = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(forward_logits(model, images[i:i + batch_size], "eval").logits.data
                        .astype(np.float32))
    return np.concatenate(outs) if outs else np.zeros((0, model.spec.num_classes), np.float32)


def accuracy(model: TrainedModel, dataset: LabeledDataset) -> float:
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict(model, dataset.images).argmax(axis=1) == dataset.labels))


# -- pretraining ------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainHyper:
    epochs: int = 30
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    augment: bool = True


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


def _batches(rng: np.random.Generator, n: int, batch_size: int) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def pretrain(model: TrainedModel, train: LabeledDataset, hyper: PretrainHyper = PretrainHyper(),
             test: LabeledDataset | None = None) -> TrainedModel:
    """SGD with momentum and weight decay, cosine-annealed per step, crop+flip augmentation."""
    if len(train) == 0:
        raise ContractError("cannot pretrain on an empty dataset")
    if train.num_classes != model.spec.num_classes:
        raise ContractError(f"dataset has {train.num_classes} classes, model expects "
                            f"{model.spec.num_classes}")
    if tuple(train.input_dims) != model.spec.input_dims:
        raise ContractError(f"dataset dims {train.input_dims} != model input {model.spec.input_dims}")
    if hyper.epochs == 0:
        return model.copy()
    out = model.copy()
    rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, 0x5EED]))
    velocity = {k: np.zeros_like(v) for k, v in out.params.items()}
    steps_per_epoch = math.ceil(len(train) / hyper.batch_size)
    total, step = hyper.epochs * steps_per_epoch, 0
    for epoch in range(hyper.epochs):
        for idx in _batches(rng, len(train), hyper.batch_size):
            if len(idx) < 2:
                continue
            xb = train.images[idx]
            if hyper.augment:
                xb = random_crop_flip(rng, xb)
            lr = cosine_lr(hyper.lr, step, total)
            params = {k: Tensor(v, requires_grad=True) for k, v in out.params.items()}
            res = run_layers(out, Tensor(xb), "train", params)
            loss = ad.cross_entropy(res.logits, train.labels[idx])
            ad.backward(loss)
            for k, p in params.items():
                g = p.grad + hyper.weight_decay * out.params[k]
                velocity[k] = hyper.momentum * velocity[k] + g
                out.params[k] = (out.params[k] - lr * velocity[k]).astype(np.float32)
            for name, mu, var in res.batch_stats:
                rm, rv = out.running_stats(name)
                out.buffers[f"{name}.running_mean"] = ((1 - BN_MOMENTUM) * rm + BN_MOMENTUM * mu.data).astype(np.float32)
                out.buffers[f"{name}.running_var"] = ((1 - BN_MOMENTUM) * rv + BN_MOMENTUM * var.data).astype(np.float32)
            step += 1
        log.info("pretrain %s epoch %d/%d loss %.4f", out.spec.arch, epoch + 1, hyper.epochs,
                 loss.item())
    out.provenance = {
        "trained": True, "dataset": train.name, "dataset_digest": train.digest(),
        "epochs": hyper.epochs, "seed": hyper.seed,
        "train_accuracy": accuracy(out, train),
        "test_accuracy": accuracy(out, test) if test is not None else None,
        "hyper": {k: getattr(hyper, k) for k in PretrainHyper.__dataclass_fields__},
    }
    return out


def dataset_bn_stats(model: TrainedModel, images: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Population mean/var at every BN input over ``images``, propagating in eval mode."""
    acc: dict[str, list] = {}
    params = {k: Tensor(v) for k, v in model.params.items()}
    with no_grad():
        for i in range(0, len(images), 256):
            h = Tensor(images[i:i + 256])
            for layer in model.spec.layers():
                kind, name = layer[0], layer[1]
                if kind == "conv":
                    h = ad.conv2d(h, params[f"{name}.weight"], params[f"{name}.bias"], pad=1)
                elif kind == "bn":
                    d = h.data.astype(np.float64)
                    s = acc.setdefault(name, [0.0, 0.0, 0])
                    s[0] = s[0] + d.sum(axis=(0, 2, 3))
                    s[1] = s[1] + (d ** 2).sum(axis=(0, 2, 3))
                    s[2] += d.shape[0] * d.shape[2] * d.shape[3]
                    rm, rv = model.running_stats(name)
                    h, _ = ad.batchnorm(h, params[f"{name}.gamma"], params[f"{name}.beta"],
                                        Tensor(rm), Tensor(rv), "eval", BN_EPS)
                    h = ad.relu(h)
                elif kind == "pool":
                    h = ad.maxpool2d(h, 2)
    out = {}
    for name, (s1, s2, n) in acc.items():
        mean = s1 / n
        out[name] = (mean.astype(np.float32), (s2 / n - mean ** 2).astype(np.float32))
    return out


# -- checkpoints --------------------------------------------------------------------

def save_checkpoint(model: TrainedModel, path: str | Path) -> Path:
    """Write ``<path>/manifest.json`` and ``<path>/tensors/<layer>.<field>.fdrt``."""
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    names = sorted(model.params) + sorted(model.buffers)
    for key in sorted(model.params):
        fdrt.save(path / "tensors" / f"{key}.fdrt", model.params[key])
    for key in sorted(model.buffers):
        fdrt.save(path / "tensors" / f"{key}.fdrt", model.buffers[key])
    manifest = {"spec": model.spec.to_dict(), "provenance": model.provenance, "seed": model.seed,
                "params": sorted(model.params), "buffers": sorted(model.buffers),
                "tensors": [f"tensors/{n}.fdrt" for n in names]}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> TrainedModel:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"{path}: no manifest.json (not a checkpoint directory)") from e
    params = {k: fdrt.load(path / "tensors" / f"{k}.fdrt") for k in manifest["params"]}
    buffers = {k: fdrt.load(path / "tensors" / f"{k}.fdrt") for k in manifest["buffers"]}
    return TrainedModel(ModelSpec.from_dict(manifest["spec"]), params, buffers,
                        manifest["provenance"], manifest["seed"])


def checkpoint_digest(model: TrainedModel) -> str:
    h = hashlib.sha256(json.dumps(model.spec.to_dict(), sort_keys=True).encode())
    for store in (model.params, model.buffers):
        for k in sorted(store):
            h.update(k.encode())
            h.update(fdrt.encode(store[k]))
    return h.hexdigest()
