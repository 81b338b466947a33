"""Recognition accuracy of quantized images, multi-label metrics and rate-accuracy curves.

Every quantizer is evaluated on its hard (test-time) output.  The
classifier sees exactly what the indexed PNG decodes to: the index map
looked up in a palette rounded to 8 bits per channel.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .classic import QUANTIZERS, IndexedImage
from .codec import (bits_per_pixel, decode_image, encode_indexed_png, encode_rgb_png,
                    jpeg_reference, palette_to_uint8)
from .data import ImageDataset, to_tensor
from .errors import CheckpointKindError, ColorCNNError, ConfigError
from .quantnet import ColorCNNPlus, QuantNet
from .training import LoadedClassifier

log = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "bits", "accuracy", "map", "bpp", "dataset", "classifier", "seed")
METHODS = ("identity", "mediancut", "mediancut+dither", "octree", "colorcnn", "colorcnn_plus",
           "jpeg")


@dataclass
class EvalRecord:
    method: str
    bits: int  # color bits, or JPEG quality for method "jpeg"
    accuracy: float  # percent
    bpp: float
    dataset: str
    classifier: str
    map: float | None = None  # percent, multi-label only
    seed: int = 0
    colors_per_image: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 100.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 100]")
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")

    def row(self) -> dict:
        return {"method": self.method, "bits": self.bits, "accuracy": f"{self.accuracy:.4f}",
                "map": "" if self.map is None else f"{self.map:.4f}", "bpp": f"{self.bpp:.6f}",
                "dataset": self.dataset, "classifier": self.classifier, "seed": self.seed}


# ---------------------------------------------------------------------------
# quantizer adapters

class Quantizer:
    """Maps a uint8 ``(B, H, W, 3)`` batch to one :class:`IndexedImage` per image."""

    name = "quantizer"

    def quantize(self, images: np.ndarray, bits: int) -> list[IndexedImage]:
        raise NotImplementedError


class IdentityQuantizer(Quantizer):
    """Pass-through; metered as a lossless truecolor PNG."""

    name = "identity"


class ClassicQuantizer(Quantizer):
    def __init__(self, method: str):
        if method not in QUANTIZERS:
            raise ConfigError(f"unknown classical quantizer {method!r}; "
                              f"expected one of {', '.join(QUANTIZERS)}")
        self.name = method
        self._fn = QUANTIZERS[method]

    def quantize(self, images, bits):
        return [self._fn(img, 2 ** bits) for img in images]


class LearnedQuantizer(Quantizer):
    def __init__(self, model: QuantNet):
        self.model = model.eval()
        self.name = model.config.mode

    def check(self, bits: int) -> None:
        if not self.model.supports(2 ** bits):
            raise ConfigError(f"{self.name} checkpoint does not support {bits}-bit output "
                              f"(trained for {self.model.config.colors} colors)")

    @torch.no_grad()
    def quantize(self, images, bits):
        self.check(bits)
        return self.model.forward_test(to_tensor(images), 2 ** bits).to_indexed()

    @torch.no_grad()
    def quantize_multi(self, images, bits_list):
        """All bit depths from one backbone pass (ColorCNN+ only)."""
        if not isinstance(self.model, ColorCNNPlus):
            return {b: self.quantize(images, b) for b in bits_list}
        outs = self.model.forward_test_multi(to_tensor(images), [2 ** b for b in bits_list])
        return {b: outs[2 ** b].to_indexed() for b in bits_list}


class QuantizerFamily(Quantizer):
    """One fixed-C checkpoint per bit depth, loaded on first use."""

    def __init__(self, name: str, loader: Callable[[int], QuantNet]):
        self.name = name
        self._loader = loader
        self._members: dict[int, LearnedQuantizer] = {}

    def member(self, bits: int) -> LearnedQuantizer:
        if bits not in self._members:
            self._members[bits] = LearnedQuantizer(self._loader(bits))
        return self._members[bits]

    def quantize(self, images, bits):
        return self.member(bits).quantize(images, bits)


def make_quantizer(method: str, model: QuantNet | None = None) -> Quantizer:
    if method == "identity":
        return IdentityQuantizer()
    if method in QUANTIZERS:
        return ClassicQuantizer(method)
    if method in ("colorcnn", "colorcnn_plus"):
        if model is None:
            raise ConfigError(f"method {method} needs a trained quantizer checkpoint")
        if model.config.mode != method:
            raise ConfigError(f"checkpoint holds a {model.config.mode} model, not {method}")
        return LearnedQuantizer(model)
    raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


def render(ix: IndexedImage) -> np.ndarray:
    """uint8 ``(H, W, 3)`` image as decoded from the indexed PNG."""
    return palette_to_uint8(ix.palette)[ix.index_map]


# ---------------------------------------------------------------------------
# metrics

def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """All-points interpolated AP (area under the precision envelope).

    Tied scores form one operating point.  Returns NaN without positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = labels.sum()
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    tp = np.cumsum(l)
    fp = np.cumsum(~l)
    # operating points sit at the end of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    recall = tp[ends] / n_pos
    precision = tp[ends] / (tp[ends] + fp[ends])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    return float((steps * envelope).sum())


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean AP over classes that have at least one positive, in percent."""
    aps = [average_precision(scores[:, k], labels[:, k]) for k in range(labels.shape[1])]
    aps = [a for a in aps if not math.isnan(a)]
    return 100.0 * float(np.mean(aps)) if aps else float("nan")


def multilabel_accuracy(logits: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    """Percent of images whose every label is predicted correctly at ``threshold``."""
    probs = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    pred = probs > threshold
    return 100.0 * float(np.mean(np.all(pred == labels.astype(bool), axis=1)))


# ---------------------------------------------------------------------------
# evaluation loops

def _iter_quantized(quantizer: Quantizer, dataset: ImageDataset, bits: int, batch_size: int):
    """Yield ``(rendered uint8 batch, labels, bpp list, colors list)``."""
    if isinstance(quantizer, QuantizerFamily):
        quantizer = quantizer.member(bits)
    if isinstance(quantizer, LearnedQuantizer):
        quantizer.check(bits)
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        if isinstance(quantizer, IdentityQuantizer):
            rendered = images
            bpps = [bits_per_pixel(encode_rgb_png(img)) for img in images]
            colors = [len(np.unique(img.reshape(-1, 3), axis=0)) for img in images]
        else:
            ixs = quantizer.quantize(images, bits)
            rendered = np.stack([render(ix) for ix in ixs])
            bpps = [bits_per_pixel(encode_indexed_png(ix)) for ix in ixs]
            colors = [len(np.unique(r.reshape(-1, 3), axis=0)) for r in rendered]
        yield rendered, labels, bpps, colors


@torch.no_grad()
def _logits(classifier: LoadedClassifier, rendered: np.ndarray) -> torch.Tensor:
    x = to_tensor(rendered)
    return classifier.model(classifier.norm.normalize(x))


def evaluate_accuracy(quantizer: Quantizer, classifier: LoadedClassifier, dataset: ImageDataset,
                      bits: int, *, batch_size: int = 256, seed: int = 0) -> EvalRecord:
    """Top-1 accuracy of ``classifier`` on quantized ``dataset`` plus mean bpp."""
    if dataset.multilabel:
        return evaluate_multilabel(quantizer, classifier, dataset, bits,
                                   batch_size=batch_size, seed=seed)
    correct, bpps, colors = 0, [], []
    for rendered, labels, bpp, cols in _iter_quantized(quantizer, dataset, bits, batch_size):
        pred = _logits(classifier, rendered).argmax(1).numpy()
        correct += int((pred == labels).sum())
        bpps += bpp
        colors += cols
    return EvalRecord(quantizer.name, bits, 100.0 * correct / len(dataset), float(np.mean(bpps)),
                      dataset.name, classifier.arch, seed=seed,
                      colors_per_image=float(np.mean(colors)))


def evaluate_multilabel(quantizer: Quantizer, classifier: LoadedClassifier, dataset: ImageDataset,
                        bits: int, *, batch_size: int = 256, seed: int = 0) -> EvalRecord:
    """Exact-match accuracy at sigmoid 0.5 and mAP for a multi-label classifier."""
    if not classifier.multilabel:
        raise CheckpointKindError("evaluate_multilabel needs a multi-label (sigmoid) classifier")
    logits, labels, bpps, colors = [], [], [], []
    for rendered, lab, bpp, cols in _iter_quantized(quantizer, dataset, bits, batch_size):
        logits.append(_logits(classifier, rendered).numpy())
        labels.append(lab)
        bpps += bpp
        colors += cols
    logits, labels = np.concatenate(logits), np.concatenate(labels)
    return EvalRecord(quantizer.name, bits, multilabel_accuracy(logits, labels),
                      float(np.mean(bpps)), dataset.name, classifier.arch,
                      map=mean_average_precision(logits, labels), seed=seed,
                      colors_per_image=float(np.mean(colors)))


def evaluate_jpeg(classifier: LoadedClassifier, dataset: ImageDataset, quality: int, *,
                  batch_size: int = 256, seed: int = 0) -> EvalRecord:
    correct, bpps, logits_all = 0, [], []
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        blobs = [jpeg_reference(img, quality) for img in images]
        decoded = np.stack([decode_image(b) for b in blobs])
        bpps += [bits_per_pixel(b) for b in blobs]
        logits = _logits(classifier, decoded)
        if dataset.multilabel:
            logits_all.append(logits.numpy())
        else:
            correct += int((logits.argmax(1).numpy() == labels).sum())
    if dataset.multilabel:
        logits = np.concatenate(logits_all)
        return EvalRecord("jpeg", quality, multilabel_accuracy(logits, dataset.labels),
                          float(np.mean(bpps)), dataset.name, classifier.arch,
                          map=mean_average_precision(logits, dataset.labels), seed=seed)
    return EvalRecord("jpeg", quality, 100.0 * correct / len(dataset), float(np.mean(bpps)),
                      dataset.name, classifier.arch, seed=seed)


# ---------------------------------------------------------------------------
# curves

def write_records(records: Sequence[EvalRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.row())
    return path


def read_records(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_curve(csv_path: str | Path, out_prefix: str | Path) -> list[Path]:
    """Accuracy against bpp, one line per method, rendered from the CSV alone."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in read_records(csv_path) if r["accuracy"] and r["bpp"]]
    fig, ax = plt.subplots(figsize=(5, 4))
    for method in dict.fromkeys(r["method"] for r in rows):
        pts = sorted((float(r["bpp"]), float(r["accuracy"])) for r in rows if r["method"] == method)
        ax.plot(*zip(*pts), ":" if method == "jpeg" else "-", marker="o", ms=3, label=method)
    ax.set_xscale("log")
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel("accuracy (%)")
    ax.grid(alpha=0.3)
    if rows:
        ax.legend(fontsize=8)
    fig.tight_layout()
    out_prefix = Path(out_prefix)
    paths = [out_prefix.with_suffix(".png"), out_prefix.with_suffix(".svg")]
    for p in paths:
        fig.savefig(p)
    plt.close(fig)
    return paths


def rate_accuracy_curve(quantizers: dict[str, Quantizer], classifier: LoadedClassifier,
                        dataset: ImageDataset, bits_range: Sequence[int],
                        jpeg_qualities: Sequence[int], out_dir: str | Path, *,
                        seed: int = 0, batch_size: int = 256) -> list[EvalRecord]:
    """One record per (method, bits) and per JPEG quality, written to ``curve.csv``.

    A failing row is logged and written with empty metrics; the sweep goes on.
    Failures are also listed in ``curve_errors.txt``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, failed = [], []
    jobs = [(name, q, b) for name, q in quantizers.items() for b in bits_range]
    jobs += [("jpeg", None, quality) for quality in jpeg_qualities]
    for name, q, b in jobs:
        try:
            if q is None:
                rec = evaluate_jpeg(classifier, dataset, b, batch_size=batch_size, seed=seed)
            else:
                rec = evaluate_accuracy(q, classifier, dataset, b, batch_size=batch_size, seed=seed)
            rec.method = name
            records.append(rec)
            log.info("curve %s bits=%s acc=%.2f bpp=%.4f", name, b, rec.accuracy, rec.bpp)
        except (ColorCNNError, ValueError, RuntimeError) as exc:
            log.error("curve row %s/%s failed: %s", name, b, exc)
            failed.append((name, b, str(exc)))
    csv_path = out_dir / "curve.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.row())
        for name, b, _ in failed:
            writer.writerow({"method": name, "bits": b, "accuracy": "", "map": "", "bpp": "",
                             "dataset": dataset.name, "classifier": classifier.arch, "seed": seed})
    if failed:
        (out_dir / "curve_errors.txt").write_text(
            "".join(f"{n}\t{b}\t{msg}\n" for n, b, msg in failed))
    plot_curve(csv_path, out_dir / "curve")
    return records
