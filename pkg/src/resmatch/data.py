"""Dataset ingestion, the built-in shapes generator, augmentation, and PPM export."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import fdrt
from .errors import ContractError, DataError, FormatError
from .resample import resample_array


@dataclass(frozen=True)
class Normalization:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def identity(cls, channels: int = 3) -> "Normalization":
        return cls((0.0,) * channels, (1.0,) * channels)

    @classmethod
    def fit(cls, images01: np.ndarray) -> "Normalization":
        mean = images01.mean(axis=(0, 2, 3), dtype=np.float64)
        std = images01.std(axis=(0, 2, 3), dtype=np.float64)
        std = np.where(std > 0, std, 1.0)
        return cls(tuple(float(np.float32(m)) for m in mean), tuple(float(np.float32(s)) for s in std))

    def _shape(self, ndim: int):
        return (-1, 1, 1) if ndim == 3 else (1, -1, 1, 1)

    def apply(self, images01: np.ndarray) -> np.ndarray:
        m = np.asarray(self.mean, np.float32).reshape(self._shape(images01.ndim))
        s = np.asarray(self.std, np.float32).reshape(self._shape(images01.ndim))
        return ((images01 - m) / s).astype(np.float32)

    def invert(self, images: np.ndarray) -> np.ndarray:
        m = np.asarray(self.mean, np.float32).reshape(self._shape(images.ndim))
        s = np.asarray(self.std, np.float32).reshape(self._shape(images.ndim))
        return (images * s + m).astype(np.float32)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Normalized images of pixel value 0 and 1, per channel."""
        zero = self.apply(np.zeros((len(self.mean), 1, 1), np.float32)).ravel()
        one = self.apply(np.ones((len(self.mean), 1, 1), np.float32)).ravel()
        return zero, one

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(tuple(float(v) for v in d["mean"]), tuple(float(v) for v in d["std"]))


@dataclass
class LabeledDataset:
    images: np.ndarray          # N,C,H,W float32, normalized
    labels: np.ndarray          # int64
    num_classes: int
    normalization: Normalization
    split: str = "train"
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ContractError(f"images must be N,C,H,W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dims(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        h.update(json.dumps(self.normalization.to_dict(), sort_keys=True).encode())
        return h.hexdigest()

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


@dataclass
class DatasetSplits:
    train: LabeledDataset
    test: LabeledDataset
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.train) + len(self.test)


# -- built-in synthetic shapes ------------------------------------------------

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ((0.85, 0.2, 0.2), (0.2, 0.35, 0.9), (0.2, 0.8, 0.3), (0.9, 0.8, 0.15))


def _shape_mask(kind: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if kind == "triangle":
        # apex up; width grows linearly toward the base
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if kind == "cross":
        arm = 0.3 * r
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    raise ValueError(kind)


def _render(rng: np.random.Generator, label: int, size: int) -> np.ndarray:
    kind = SHAPES[label % len(SHAPES)]
    color = np.asarray(COLORS[label // len(SHAPES)], np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    base = rng.uniform(0.3, 0.6)
    gy, gx = rng.uniform(-0.15, 0.15, size=2)
    bg = base + gy * (yy / size - 0.5) + gx * (xx / size - 0.5)
    img = np.repeat(bg[None], 3, axis=0) + rng.uniform(-0.05, 0.05, size=(3, 1, 1))
    for _ in range(rng.integers(1, 4)):
        # low-contrast gray clutter bars
        y0, x0 = rng.integers(0, size, size=2)
        h, w = rng.integers(1, size // 3, size=2)
        img[:, y0:y0 + h, x0:x0 + w] += rng.uniform(-0.12, 0.12)
    r = rng.uniform(0.2, 0.3) * size
    cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
    mask = _shape_mask(kind, yy, xx, cy, cx, r)
    tint = np.clip(color + rng.uniform(-0.1, 0.1, size=3), 0, 1).astype(np.float32)
    img = np.where(mask[None], tint[:, None, None], img)
    img += rng.normal(0, 0.04, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def gen_synthetic(seed: int = 0, num_classes: int = 8, per_class: int = 200,
                  size: int = 32) -> DatasetSplits:
    """Procedural shape x color classes with background clutter, split 80/20."""
    if size < 16:
        raise ContractError(f"size must be >= 16, got {size}")
    if not 1 <= num_classes <= len(SHAPES) * len(COLORS):
        raise ContractError(f"num_classes must be in [1, {len(SHAPES) * len(COLORS)}]")
    if per_class < 1:
        raise ContractError("per_class must be >= 1")
    root = np.random.SeedSequence(seed)
    tr_imgs, tr_lab, te_imgs, te_lab = [], [], [], []
    n_test = per_class // 5
    for c, child in enumerate(root.spawn(num_classes)):
        rng = np.random.default_rng(child)
        imgs = np.stack([_render(rng, c, size) for _ in range(per_class)])
        order = rng.permutation(per_class)
        te, tr = order[:n_test], order[n_test:]
        tr_imgs.append(imgs[np.sort(tr)])
        te_imgs.append(imgs[np.sort(te)])
        tr_lab += [c] * len(tr)
        te_lab += [c] * len(te)
    train01, test01 = np.concatenate(tr_imgs), np.concatenate(te_imgs)
    norm = Normalization.fit(train01)
    meta = {"generator": "shapes", "seed": seed, "num_classes": num_classes,
            "per_class": per_class, "size": size}
    return DatasetSplits(
        LabeledDataset(norm.apply(train01), tr_lab, num_classes, norm, "train", "shapes"),
        LabeledDataset(norm.apply(test01), te_lab, num_classes, norm, "test", "shapes"),
        meta)


# -- CIFAR binary batches -----------------------------------------------------------

CIFAR_PIXELS = 3 * 32 * 32


def load_cifar(path: str | Path, variant: str = "cifar10",
               normalization: Normalization | None = None, split: str = "train") -> LabeledDataset:
    """Parse a CIFAR binary batch file.

    Records are one label byte (cifar10) or coarse+fine label bytes (cifar100,
    fine label kept) followed by 3072 plane-major RGB bytes. Normalization is
    fitted on this file unless given.
    """
    if variant not in ("cifar10", "cifar100"):
        raise ContractError(f"unknown CIFAR variant {variant!r}")
    nlab = 1 if variant == "cifar10" else 2
    stride = nlab + CIFAR_PIXELS
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    if raw.size % stride:
        whole = raw.size - raw.size % stride
        raise FormatError(f"{path}: {raw.size} bytes is not a multiple of the {stride}-byte record; "
                          f"trailing partial record at byte offset {whole}", offset=whole)
    recs = raw.reshape(-1, stride)
    labels = recs[:, nlab - 1].astype(np.int64)
    images01 = recs[:, nlab:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    norm = normalization or Normalization.fit(images01)
    return LabeledDataset(norm.apply(images01), labels, 10 if variant == "cifar10" else 100,
                          norm, split, variant)


# -- persistence ------------------------------------------------------------------

def save_dataset(splits: DatasetSplits, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for ds in (splits.train, splits.test):
        fdrt.save(out / f"{ds.split}.images.fdrt", ds.images)
        fdrt.save(out / f"{ds.split}.labels.fdrt", ds.labels.astype(np.float32))
    meta = {"name": splits.train.name, "num_classes": splits.train.num_classes,
            "normalization": splits.train.normalization.to_dict(), "meta": splits.meta,
            "train_digest": splits.train.digest(), "test_digest": splits.test.digest()}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path: str | Path) -> DatasetSplits:
    path = Path(path)
    try:
        meta = json.loads((path / "dataset.json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"{path}: no dataset.json (expected a gen-data output directory)") from e
    norm = Normalization.from_dict(meta["normalization"])
    parts = {}
    for split in ("train", "test"):
        img_path = path / f"{split}.images.fdrt"
        if not img_path.exists():
            raise DataError(f"{path}: missing {split} split")
        parts[split] = LabeledDataset(fdrt.load(img_path),
                                      fdrt.load(path / f"{split}.labels.fdrt").astype(np.int64),
                                      meta["num_classes"], norm, split, meta["name"])
    return DatasetSplits(parts["train"], parts["test"], meta.get("meta", {}))


# -- augmentation -------------------------------------------------------------------

def random_crop_flip(rng: np.random.Generator, images: np.ndarray, pad: int = 4) -> np.ndarray:
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def random_resized_crop_box(rng: np.random.Generator, h: int, w: int,
                            scale=(0.5, 1.0), ratio=(3 / 4, 4 / 3)) -> tuple[int, int, int, int]:
    """Sample (top, left, height, width) covering a random area fraction and aspect."""
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            return int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw
    return 0, 0, h, w


def random_resized_crop_flip(rng: np.random.Generator, images: np.ndarray,
                             scale=(0.5, 1.0)) -> np.ndarray:
    n, _, h, w = images.shape
    out = np.empty_like(images)
    for i in range(n):
        top, left, ch, cw = random_resized_crop_box(rng, h, w, scale)
        crop = resample_array(images[i, :, top:top + ch, left:left + cw], (h, w))
        out[i] = crop[:, :, ::-1] if rng.random() < 0.5 else crop
    return out


# -- PPM export -----------------------------------------------------------------------

def quantize(image: np.ndarray, normalization: Normalization) -> np.ndarray:
    """De-normalize, clamp to [0, 1], and quantize to uint8 (H,W,3)."""
    pix = np.clip(normalization.invert(np.asarray(image, np.float32)), 0.0, 1.0)
    return np.round(pix * 255.0).astype(np.uint8).transpose(1, 2, 0)


def export_ppm(image: np.ndarray, normalization: Normalization, path: str | Path) -> Path:
    image = np.asarray(image.data if hasattr(image, "data") else image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"export_ppm needs a 3,H,W image, got {image.shape}")
    path = Path(path)
    _, h, w = image.shape
    try:
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + quantize(image, normalization).tobytes())
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e
    return path


def read_ppm(path: str | Path) -> np.ndarray:
    """Parse a binary P6 file written by :func:`export_ppm`; returns uint8 H,W,3."""
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise FormatError(f"{path}: not a P6 file", offset=0)
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise FormatError(f"{path}: only maxval 255 supported")
    pix = np.frombuffer(parts[3], dtype=np.uint8)
    if pix.size != 3 * w * h:
        raise FormatError(f"{path}: expected {3 * w * h} pixel bytes, found {pix.size}",
                          offset=len(blob) - pix.size)
    return pix.reshape(h, w, 3)
