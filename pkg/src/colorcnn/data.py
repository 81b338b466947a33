"""Dataset ingestion, normalization statistics and batch augmentation.

Images are held in memory as ``uint8`` arrays of shape ``(N, H, W, 3)``;
indexing an :class:`ImageDataset` yields :class:`LabeledImage` records with
float pixels in ``[0, 1]``.  Augmentation works on float tensors shaped
``(B, 3, H, W)`` and is differentiable, so the same code serves the
pre-quantizer stage (on raw images) and the post-quantizer stage (on the
soft quantized output, where gradients must flow back to the quantizer).
"""

from __future__ import annotations

import math
import pickle
import tarfile
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DatasetError

DATASETS = ("cifar10", "cifar100", "stl10", "voc2012-multilabel")

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)

STD_FLOOR = 1e-6


@dataclass
class LabeledImage:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: int | np.ndarray


class ImageDataset(Sequence[LabeledImage]):
    """In-memory image set backed by a uint8 array.

    ``labels`` is a vector of class indices for single-label sets and an
    ``(N, num_classes)`` binary matrix for multi-label sets.
    """

    def __init__(self, name: str, images: np.ndarray, labels: np.ndarray,
                 num_classes: int, multilabel: bool = False):
        if images.ndim != 4 or images.shape[-1] != 3 or images.dtype != np.uint8:
            raise DatasetError(f"{name}: expected uint8 (N, H, W, 3) images, got "
                               f"{images.dtype} {images.shape}")
        if len(images) != len(labels):
            raise DatasetError(f"{name}: {len(images)} images but {len(labels)} labels")
        self.name = name
        self.images = images
        self.labels = labels
        self.num_classes = num_classes
        self.multilabel = multilabel

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return self.subset(range(len(self))[idx])
        label = self.labels[idx]
        if not self.multilabel:
            label = int(label)
        return LabeledImage(self.images[idx].astype(np.float32) / 255.0, label)

    def subset(self, indices) -> "ImageDataset":
        indices = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices)
        return ImageDataset(self.name, self.images[indices], self.labels[indices],
                            self.num_classes, self.multilabel)

    def head(self, n: int | None) -> "ImageDataset":
        """First ``n`` items in file order (all of them when ``n`` is None)."""
        if n is None or n >= len(self):
            return self
        return self.subset(np.arange(n))

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.images.shape[1:3])

    def batches(self, batch_size: int, shuffle: bool = False, seed: int = 0,
                epoch: int = 0, drop_last: bool = False
                ) -> Iterator[tuple[np.ndarray, torch.Tensor, torch.Tensor]]:
        """Yield ``(indices, images, labels)`` with images as float (B, 3, H, W).

        Shuffling is seeded by ``(seed, epoch)`` so every epoch has its own
        fixed permutation.
        """
        order = np.arange(len(self))
        if shuffle:
            order = np.random.default_rng([seed, epoch]).permutation(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            yield idx, to_tensor(self.images[idx]), torch.as_tensor(self.labels[idx])


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 or float (N, H, W, 3) array -> float32 (N, 3, H, W) tensor in [0, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(images))
    if t.dtype == torch.uint8:
        t = t.float().div_(255.0)
    else:
        t = t.float()
    return t.permute(0, 3, 1, 2).contiguous()


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """float (N, 3, H, W) tensor in [0, 1] -> uint8 (N, H, W, 3) array."""
    x = images.detach().clamp(0, 1).mul(255).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).cpu().numpy()


# ---------------------------------------------------------------------------
# loaders

def load_dataset(name: str, split: str, root: str | Path, *,
                 resolution: int = 112) -> ImageDataset:
    """Read one split of a supported dataset from its official distribution.

    Args:
        name: one of ``cifar10``, ``cifar100``, ``stl10``, ``voc2012-multilabel``.
        split: ``train`` or ``test``.  For VOC 2012, ``test`` reads the
            ``val`` image set since test annotations are not public.
        root: directory holding the extracted dataset folder or its archive.
        resolution: square size VOC images are resized to.
    """
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {', '.join(DATASETS)}")
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split {split!r}; expected 'train' or 'test'")
    root = Path(root)
    if name == "cifar10":
        return _load_cifar(root, split, coarse=False)
    if name == "cifar100":
        return _load_cifar(root, split, coarse=True)
    if name == "stl10":
        return _load_stl10(root, split)
    return _load_voc(root, split, resolution)


_ARCHIVES = {
    "cifar-10-batches-py": "cifar-10-python.tar.gz",
    "cifar-100-python": "cifar-100-python.tar.gz",
    "stl10_binary": "stl10_binary.tar.gz",
    "VOCdevkit": "VOCtrainval_11-May-2012.tar",
}


def _ensure_extracted(root: Path, folder: str) -> Path:
    target = root / folder
    if target.is_dir():
        return target
    archive = root / _ARCHIVES[folder]
    if not archive.exists():
        raise DatasetError(f"dataset not found: neither {target} nor {archive} exists")
    try:
        with tarfile.open(archive) as tar:
            tar.extractall(root, filter="data")
    except (tarfile.TarError, OSError, EOFError) as exc:
        raise DatasetError(f"corrupt archive {archive}: {exc}") from exc
    if not target.is_dir():
        raise DatasetError(f"archive {archive} did not contain {folder}/")
    return target


def _unpickle(path: Path) -> dict:
    if not path.exists():
        raise DatasetError(f"missing dataset file {path}")
    try:
        with open(path, "rb") as fh:
            return pickle.load(fh, encoding="bytes")
    except Exception as exc:  # pickle raises a zoo of types on bad input
        raise DatasetError(f"corrupt dataset file {path}: {exc}") from exc


def _load_cifar(root: Path, split: str, coarse: bool) -> ImageDataset:
    if coarse:
        base = _ensure_extracted(root, "cifar-100-python")
        files = [base / ("train" if split == "train" else "test")]
        key, name, classes = b"fine_labels", "cifar100", 100
    else:
        base = _ensure_extracted(root, "cifar-10-batches-py")
        if split == "train":
            files = [base / f"data_batch_{i}" for i in range(1, 6)]
        else:
            files = [base / "test_batch"]
        key, name, classes = b"labels", "cifar10", 10
    images, labels = [], []
    for path in files:
        record = _unpickle(path)
        try:
            data = np.asarray(record[b"data"], dtype=np.uint8)
            lab = np.asarray(record[key], dtype=np.int64)
        except KeyError as exc:
            raise DatasetError(f"corrupt dataset file {path}: missing {exc}") from exc
        if data.ndim != 2 or data.shape[1] != 3072:
            raise DatasetError(f"corrupt dataset file {path}: data shape {data.shape}")
        images.append(data.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        labels.append(lab)
    labels = np.concatenate(labels)
    if labels.min() < 0 or labels.max() >= classes:
        raise DatasetError(f"{name}: label outside [0, {classes})")
    return ImageDataset(name, np.ascontiguousarray(np.concatenate(images)), labels, classes)


def _load_stl10(root: Path, split: str) -> ImageDataset:
    base = _ensure_extracted(root, "stl10_binary")
    xpath, ypath = base / f"{split}_X.bin", base / f"{split}_y.bin"
    for p in (xpath, ypath):
        if not p.exists():
            raise DatasetError(f"missing dataset file {p}")
    raw = np.fromfile(xpath, dtype=np.uint8)
    if raw.size % (3 * 96 * 96):
        raise DatasetError(f"corrupt dataset file {xpath}: size {raw.size}")
    # stored column-major per channel
    images = raw.reshape(-1, 3, 96, 96).transpose(0, 3, 2, 1)
    labels = np.fromfile(ypath, dtype=np.uint8).astype(np.int64) - 1
    if len(labels) != len(images) or labels.min() < 0 or labels.max() > 9:
        raise DatasetError(f"corrupt dataset file {ypath}")
    return ImageDataset("stl10", np.ascontiguousarray(images), labels, 10)


def _load_voc(root: Path, split: str, resolution: int) -> ImageDataset:
    from PIL import Image

    base = _ensure_extracted(root, "VOCdevkit") / "VOC2012"
    listing = base / "ImageSets" / "Main" / ("train.txt" if split == "train" else "val.txt")
    if not listing.exists():
        raise DatasetError(f"missing dataset file {listing}")
    ids = [line.strip() for line in listing.read_text().splitlines() if line.strip()]
    images = np.empty((len(ids), resolution, resolution, 3), dtype=np.uint8)
    labels = np.zeros((len(ids), len(VOC_CLASSES)), dtype=np.uint8)
    for i, image_id in enumerate(ids):
        xml_path = base / "Annotations" / f"{image_id}.xml"
        jpg_path = base / "JPEGImages" / f"{image_id}.jpg"
        try:
            tree = ET.parse(xml_path)
        except (OSError, ET.ParseError) as exc:
            raise DatasetError(f"bad annotation {xml_path}: {exc}") from exc
        for obj in tree.getroot().iter("object"):
            cls = obj.findtext("name", "").strip()
            if cls not in VOC_CLASSES:
                raise DatasetError(f"bad annotation {xml_path}: unknown class {cls!r}")
            labels[i, VOC_CLASSES.index(cls)] = 1
        if not labels[i].any():
            raise DatasetError(f"bad annotation {xml_path}: no objects")
        try:
            with Image.open(jpg_path) as im:
                im = im.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
                images[i] = np.asarray(im)
        except OSError as exc:
            raise DatasetError(f"unreadable image {jpg_path}: {exc}") from exc
    return ImageDataset("voc2012-multilabel", images, labels, len(VOC_CLASSES), multilabel=True)


# ---------------------------------------------------------------------------
# normalization

@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    std_scale: float = 1.0

    def __post_init__(self):
        if min(self.std) <= 0 or self.std_scale <= 0:
            raise ValueError("std and std_scale must be positive")

    def scaled(self, std_scale: float) -> "NormStats":
        return NormStats(self.mean, self.std, std_scale)

    def _params(self, ref: torch.Tensor):
        mean = torch.tensor(self.mean, dtype=ref.dtype, device=ref.device).view(-1, 1, 1)
        std = torch.tensor(self.std, dtype=ref.dtype, device=ref.device).view(-1, 1, 1)
        return mean, std * self.std_scale

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        """(..., 3, H, W) images in [0, 1] -> classifier input."""
        mean, std = self._params(x)
        return (x - mean) / std

    def denormalize(self, z: torch.Tensor) -> torch.Tensor:
        mean, std = self._params(z)
        return z * std + mean

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std), "std_scale": self.std_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(d["mean"]), tuple(d["std"]), d.get("std_scale", 1.0))


def compute_norm_stats(dataset) -> NormStats:
    """Per-channel mean and population std over every pixel of ``dataset``.

    Accepts an :class:`ImageDataset`, a sequence of :class:`LabeledImage`,
    or a ``(N, H, W, 3)`` array (uint8 or float in [0, 1]).
    """
    if isinstance(dataset, ImageDataset):
        arr = dataset.images
    elif isinstance(dataset, np.ndarray):
        arr = dataset
    else:
        items = list(dataset)
        if not items:
            raise ValueError("cannot compute statistics of an empty dataset")
        arr = np.stack([it.image for it in items])
    if len(arr) == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    scale = 255.0 if arr.dtype == np.uint8 else 1.0
    total = np.zeros(3)
    total_sq = np.zeros(3)
    n = 0
    # chunked to bound the float64 working set on large sets
    for start in range(0, len(arr), 4096):
        chunk = arr[start:start + 4096].reshape(-1, 3).astype(np.float64) / scale
        total += chunk.sum(0)
        total_sq += (chunk * chunk).sum(0)
        n += len(chunk)
    mean = total / n
    var = np.maximum(total_sq / n - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return NormStats(tuple(float(v) for v in mean), tuple(float(v) for v in std))


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentSpec:
    """Random augmentations applied in the order crop, erase, rotate, flip.

    ``crop_padding`` of ``None`` disables cropping; otherwise images are
    zero padded on every side and cropped back to their original size.
    """

    crop_padding: int | None = None
    erase_prob: float = 0.0
    erase_area: tuple[float, float] = (0.02, 0.33)
    erase_ratio: tuple[float, float] = (0.3, 3.3)
    rotate_degrees: float = 0.0
    hflip_prob: float = 0.0
    stage: str = "post"

    def __post_init__(self):
        for p in (self.erase_prob, self.hflip_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"augmentation probability {p} outside [0, 1]")
        if self.stage not in ("pre", "post"):
            raise ConfigError(f"augmentation stage must be 'pre' or 'post', got {self.stage!r}")
        if self.crop_padding is not None and self.crop_padding < 0:
            raise ConfigError("crop_padding must be non-negative")
        if self.rotate_degrees < 0:
            raise ConfigError("rotate_degrees must be non-negative")
        lo, hi = self.erase_area
        if not 0 < lo <= hi < 1:
            raise ConfigError("erase_area must satisfy 0 < lo <= hi < 1")

    @property
    def is_identity(self) -> bool:
        return (self.crop_padding in (None, 0) and self.erase_prob == 0
                and self.rotate_degrees == 0 and self.hflip_prob == 0)

    @property
    def is_geometric(self) -> bool:
        """True if pixels can move other than by a horizontal flip."""
        return self.crop_padding not in (None, 0) or self.erase_prob > 0 or self.rotate_degrees > 0

    def to_dict(self) -> dict:
        return {"crop_padding": self.crop_padding, "erase_prob": self.erase_prob,
                "erase_area": list(self.erase_area), "erase_ratio": list(self.erase_ratio),
                "rotate_degrees": self.rotate_degrees, "hflip_prob": self.hflip_prob,
                "stage": self.stage}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        d = dict(d)
        for key in ("erase_area", "erase_ratio"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class AugmentParams:
    flipped: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.bool))


def _generator(seed: int | None, generator: torch.Generator | None) -> torch.Generator:
    if generator is not None:
        return generator
    g = torch.Generator()
    g.manual_seed(0 if seed is None else int(seed))
    return g


def _uniform(g: torch.Generator, n: int, lo: float, hi: float) -> torch.Tensor:
    return torch.rand(n, generator=g, dtype=torch.float64) * (hi - lo) + lo


def augment(images: torch.Tensor, spec: AugmentSpec, seed: int | None = None, *,
            generator: torch.Generator | None = None, return_params: bool = False):
    """Apply ``spec`` to a ``(B, C, H, W)`` batch; differentiable w.r.t. ``images``.

    Randomness comes only from ``generator`` (or a fresh one seeded with
    ``seed``), so equal seeds give bit-identical batches.
    """
    g = _generator(seed, generator)
    b, _, h, w = images.shape
    out = images

    if spec.crop_padding:
        p = spec.crop_padding
        offs = torch.randint(0, 2 * p + 1, (b, 2), generator=g)
        padded = F.pad(out, (p, p, p, p))
        out = torch.stack([padded[i, :, oy:oy + h, ox:ox + w]
                           for i, (oy, ox) in enumerate(offs.tolist())])

    if spec.erase_prob > 0:
        apply = torch.rand(b, generator=g, dtype=torch.float64) < spec.erase_prob
        area = _uniform(g, b, *spec.erase_area)
        log_r = _uniform(g, b, math.log(spec.erase_ratio[0]), math.log(spec.erase_ratio[1]))
        pos = torch.rand(b, 2, generator=g, dtype=torch.float64)
        mask = torch.zeros(b, 1, h, w, dtype=out.dtype)
        for i in range(b):
            if not apply[i]:
                continue
            r = math.exp(log_r[i].item())
            eh = int(round(math.sqrt(area[i].item() * h * w * r)))
            ew = int(round(math.sqrt(area[i].item() * h * w / r)))
            eh, ew = min(max(eh, 1), h), min(max(ew, 1), w)
            y0 = int(pos[i, 0].item() * (h - eh + 1))
            x0 = int(pos[i, 1].item() * (w - ew + 1))
            mask[i, :, y0:y0 + eh, x0:x0 + ew] = 1
        out = out * (1 - mask)

    if spec.rotate_degrees > 0:
        theta_deg = _uniform(g, b, -spec.rotate_degrees, spec.rotate_degrees)
        rad = theta_deg * math.pi / 180
        cos, sin = torch.cos(rad), torch.sin(rad)
        mat = torch.zeros(b, 2, 3, dtype=torch.float64)
        mat[:, 0, 0], mat[:, 0, 1] = cos, -sin
        mat[:, 1, 0], mat[:, 1, 1] = sin, cos
        grid = F.affine_grid(mat.to(out.dtype), list(out.shape), align_corners=False)
        out = F.grid_sample(out, grid, mode="bilinear", padding_mode="zeros", align_corners=False)

    flipped = torch.zeros(b, dtype=torch.bool)
    if spec.hflip_prob > 0:
        flipped = torch.rand(b, generator=g, dtype=torch.float64) < spec.hflip_prob
        out = torch.where(flipped.view(b, 1, 1, 1), out.flip(-1), out)

    if return_params:
        return out, AugmentParams(flipped=flipped)
    return out


def augment_items(items: Sequence[LabeledImage], spec: AugmentSpec,
                  seed: int) -> list[LabeledImage]:
    """:func:`augment` over a list of records; labels pass through untouched."""
    if not items:
        return []
    batch = to_tensor(np.stack([it.image for it in items]).astype(np.float32))
    out = augment(batch, spec, seed).permute(0, 2, 3, 1).numpy()
    return [LabeledImage(out[i], it.label) for i, it in enumerate(items)]
