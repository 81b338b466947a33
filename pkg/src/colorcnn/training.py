"""Classifier pretraining and the quantizer training loop."""

from __future__ import annotations

import csv
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, state_checksum
from .classic import median_cut
from .classifiers import build_classifier
from .data import AugmentSpec, ImageDataset, NormStats, augment, compute_norm_stats
from .errors import ConfigError, InvariantError, NumericalError
from .losses import (LossWeights, classification_loss, combined_regularizer, kd_loss,
                     relationship_loss, sample_pixels, total_loss)
from .quantnet import BackboneConfig, QuantNet, build_quantnet

log = logging.getLogger(__name__)

CLASSIFIER_TRAIN_AUG = AugmentSpec(crop_padding=4, hflip_prob=0.5, stage="pre")


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 60
    batch_size: int = 128
    lr_policy: str = "onecycle"  # onecycle | cosine_warm_restart
    peak_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    restart_period: int = 20  # epochs, cosine_warm_restart only
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.lr_policy not in ("onecycle", "cosine_warm_restart"):
            raise ConfigError(f"unknown lr_policy {self.lr_policy!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TaskSelector:
    """Piecewise-constant bit-depth schedule, one uniform draw per block of batches."""

    bit_choices: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    pace: int = 20
    seed: int = 0
    arbitrary_colors: bool = False  # draw C uniformly from 1..max_colors instead
    max_colors: int = 64

    def __post_init__(self):
        if self.max_colors < 1:
            raise ConfigError("max_colors must be >= 1")
        if self.pace < 1:
            raise ConfigError("task pace must be >= 1")
        if not self.bit_choices:
            raise ConfigError("bit_choices must not be empty")
        object.__setattr__(self, "bit_choices", tuple(int(b) for b in self.bit_choices))

    def to_dict(self) -> dict:
        return {"bit_choices": list(self.bit_choices), "pace": self.pace, "seed": self.seed,
                "arbitrary_colors": self.arbitrary_colors, "max_colors": self.max_colors}


def select_task(selector: TaskSelector, batch_index: int) -> int:
    """Bit depth for ``batch_index``; the color count is ``2 ** bits``."""
    if batch_index < 0:
        raise ValueError("batch_index must be >= 0")
    if len(selector.bit_choices) == 1:
        return selector.bit_choices[0]
    block = batch_index // selector.pace
    rng = np.random.default_rng([selector.seed, block])
    return selector.bit_choices[int(rng.integers(len(selector.bit_choices)))]


def select_colors(selector: TaskSelector, batch_index: int) -> int:
    """Color-space size for ``batch_index``."""
    if not selector.arbitrary_colors:
        return 2 ** select_task(selector, batch_index)
    if batch_index < 0:
        raise ValueError("batch_index must be >= 0")
    rng = np.random.default_rng([selector.seed, batch_index // selector.pace])
    return int(rng.integers(1, selector.max_colors + 1))


@dataclass(frozen=True)
class JitterSpec:
    xi: float = 1.0

    def __post_init__(self):
        if self.xi < 0:
            raise ConfigError("jitter weight xi must be non-negative")


def apply_color_jitter(x: torch.Tensor, spec: JitterSpec,
                       generator: torch.Generator | None = None) -> torch.Tensor:
    """Add ``xi`` times standard normal noise to an already-normalized image."""
    if spec.xi == 0:
        return x
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return x + spec.xi * noise


def set_determinism(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


def _stream(seed: int, step: int, stream: int) -> torch.Generator:
    """Independent generator for one (seed, step, purpose) triple."""
    state = np.random.SeedSequence([seed, step, stream]).generate_state(1, dtype=np.uint64)[0]
    g = torch.Generator()
    g.manual_seed(int(state))
    return g


def make_optimizer(params, schedule: TrainSchedule) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=schedule.peak_lr, momentum=schedule.momentum,
                           weight_decay=schedule.weight_decay)


def make_scheduler(opt: torch.optim.Optimizer, schedule: TrainSchedule, steps_per_epoch: int):
    """Per-batch learning-rate schedule."""
    if schedule.lr_policy == "onecycle":
        return torch.optim.lr_scheduler.OneCycleLR(
            opt, max_lr=schedule.peak_lr, total_steps=schedule.epochs * steps_per_epoch)
    return torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(
        opt, T_0=max(1, schedule.restart_period * steps_per_epoch), eta_min=0.0)


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


class MetricsLog:
    """Append-only CSV of per-epoch metrics."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not self.path.exists()
        with open(self.path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row))
            if new:
                writer.writeheader()
            writer.writerow(row)


# ---------------------------------------------------------------------------
# classifiers

@dataclass
class LoadedClassifier:
    model: torch.nn.Module
    norm: NormStats
    arch: str
    num_classes: int
    multilabel: bool
    accuracy: float | None
    checksum: str


def load_classifier(ckpt: Checkpoint | str | Path) -> LoadedClassifier:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt, kind="classifier")
    elif ckpt.kind != "classifier":
        raise ConfigError(f"expected a classifier checkpoint, got {ckpt.kind}")
    cfg = ckpt.config
    model = build_classifier(cfg["arch"], cfg["num_classes"], cfg.get("width", 1.0))
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return LoadedClassifier(model, NormStats.from_dict(cfg["norm"]), cfg["arch"],
                            cfg["num_classes"], cfg.get("multilabel", False),
                            ckpt.meta.get("test_accuracy"), state_checksum(model))


@torch.no_grad()
def classifier_accuracy(model: torch.nn.Module, norm: NormStats, dataset: ImageDataset,
                        batch_size: int = 256) -> float:
    """Top-1 accuracy in percent (exact-match accuracy for multi-label sets)."""
    model.eval()
    correct = 0
    for _, x, y in dataset.batches(batch_size):
        logits = model(norm.normalize(x))
        if dataset.multilabel:
            correct += int(((logits > 0) == y.bool()).all(1).sum())
        else:
            correct += int((logits.argmax(1) == y).sum())
    return 100.0 * correct / max(1, len(dataset))


def train_classifier(arch: str, train_set: ImageDataset, test_set: ImageDataset | None,
                     schedule: TrainSchedule, *, width: float = 1.0,
                     augment_spec: AugmentSpec | None = CLASSIFIER_TRAIN_AUG,
                     checkpoint_path: str | Path | None = None,
                     metrics_path: str | Path | None = None,
                     deterministic: bool = True) -> Checkpoint:
    """Train a classifier from scratch with SGD and the configured schedule.

    Normalization statistics are computed from ``train_set`` and stored
    in the checkpoint.  A non-finite loss aborts training; the last
    completed epoch is then written to ``checkpoint_path`` before
    :class:`NumericalError` propagates.
    """
    set_determinism(schedule.seed, deterministic)
    norm = compute_norm_stats(train_set)
    model = build_classifier(arch, train_set.num_classes, width)
    opt = make_optimizer(model.parameters(), schedule)
    spe = _steps_per_epoch(len(train_set), schedule.batch_size)
    sched = make_scheduler(opt, schedule, spe)
    metrics = MetricsLog(metrics_path)
    config = {"arch": arch, "width": width, "num_classes": train_set.num_classes,
              "multilabel": train_set.multilabel, "dataset": train_set.name,
              "norm": norm.to_dict()}

    def snapshot(epoch: int, acc: float | None) -> Checkpoint:
        return Checkpoint("classifier", config,
                          {k: v.clone() for k, v in model.state_dict().items()},
                          {"epoch": epoch, "test_accuracy": acc, "seed": schedule.seed,
                           "schedule": schedule.to_dict()})

    last_good = snapshot(0, None)
    step = 0
    for epoch in range(schedule.epochs):
        model.train()
        t0, total, seen = time.time(), 0.0, 0
        for _, x, y in train_set.batches(schedule.batch_size, shuffle=True,
                                         seed=schedule.seed, epoch=epoch):
            if augment_spec is not None and not augment_spec.is_identity:
                x = augment(x, augment_spec, generator=_stream(schedule.seed, step, 0))
            loss = classification_loss(model(norm.normalize(x)), y)
            if not torch.isfinite(loss):
                if checkpoint_path:
                    save_checkpoint(last_good, checkpoint_path)
                raise NumericalError(f"classifier loss became {loss.item()} at epoch {epoch}, "
                                     f"step {step}; last good epoch {last_good.meta['epoch']}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(y)
            seen += len(y)
            step += 1
        acc = classifier_accuracy(model, norm, test_set) if test_set is not None else None
        metrics.write({"epoch": epoch + 1, "loss": total / max(1, seen), "test_accuracy": acc,
                       "lr": opt.param_groups[0]["lr"], "seconds": round(time.time() - t0, 2)})
        log.info("classifier %s epoch %d/%d loss %.4f acc %s", arch, epoch + 1,
                 schedule.epochs, total / max(1, seen), acc)
        last_good = snapshot(epoch + 1, acc)
    if checkpoint_path:
        save_checkpoint(last_good, checkpoint_path)
    return last_good


# ---------------------------------------------------------------------------
# quantizers

class TargetCache:
    """Memoized MedianCut index maps keyed by ``(image id, colors)``."""

    def __init__(self):
        self._maps: dict[tuple[int, int], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._maps)

    def index_maps(self, ids, images: np.ndarray, colors: int) -> np.ndarray:
        out = np.empty(images.shape[:3], dtype=np.int64)
        for i, (key, img) in enumerate(zip(ids, images)):
            hit = self._maps.get((int(key), colors))
            if hit is None:
                hit = median_cut(img, colors).index_map.astype(np.uint8)
                self._maps[(int(key), colors)] = hit
            out[i] = hit
        return out

    def onehot(self, ids, images: np.ndarray, colors: int,
               flipped: torch.Tensor | None = None) -> torch.Tensor:
        idx = torch.from_numpy(self.index_maps(ids, images, colors))
        if flipped is not None and flipped.any():
            idx = torch.where(flipped.view(-1, 1, 1), idx.flip(-1), idx)
        return torch.nn.functional.one_hot(idx, colors).permute(0, 3, 1, 2).float()


@dataclass
class QuantizerTrainSpec:
    """Everything that defines a quantizer training run besides the data."""

    backbone: BackboneConfig
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: TrainSchedule = field(default_factory=lambda: TrainSchedule(
        lr_policy="cosine_warm_restart", peak_lr=0.01))
    selector: TaskSelector = field(default_factory=TaskSelector)
    jitter: JitterSpec = field(default_factory=JitterSpec)
    pre_augment: AugmentSpec | None = None
    post_augment: AugmentSpec | None = None
    std_scale: float = 4.0
    pixel_ratio: float = 0.3
    use_kd: bool = False

    def __post_init__(self):
        if self.backbone.mode == "colorcnn_plus" and self.pre_augment is not None \
                and self.pre_augment.is_geometric:
            raise ConfigError("ColorCNN+ pre-quantizer augmentation may only flip; "
                              "move crop/erase/rotate to the post stage")

    def to_dict(self) -> dict:
        return {"backbone": self.backbone.to_dict(), "weights": self.weights.to_dict(),
                "schedule": self.schedule.to_dict(), "selector": self.selector.to_dict(),
                "jitter": {"xi": self.jitter.xi},
                "pre_augment": self.pre_augment.to_dict() if self.pre_augment else None,
                "post_augment": self.post_augment.to_dict() if self.post_augment else None,
                "std_scale": self.std_scale, "pixel_ratio": self.pixel_ratio,
                "use_kd": self.use_kd}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizerTrainSpec":
        return cls(
            backbone=BackboneConfig.from_dict(d["backbone"]),
            weights=LossWeights(**d["weights"]),
            schedule=TrainSchedule(**d["schedule"]),
            selector=TaskSelector(**{**d["selector"],
                                     "bit_choices": tuple(d["selector"]["bit_choices"])}),
            jitter=JitterSpec(d["jitter"]["xi"]),
            pre_augment=AugmentSpec.from_dict(d["pre_augment"]) if d.get("pre_augment") else None,
            post_augment=AugmentSpec.from_dict(d["post_augment"]) if d.get("post_augment") else None,
            std_scale=d["std_scale"], pixel_ratio=d["pixel_ratio"], use_kd=d["use_kd"])


def colorcnn_plus_defaults(**overrides) -> QuantizerTrainSpec:
    """Recipe for ColorCNN+: flips and geometry after the quantizer, K=4, D=256."""
    base = dict(
        backbone=BackboneConfig(mode="colorcnn_plus"),
        schedule=TrainSchedule(epochs=300, lr_policy="cosine_warm_restart", peak_lr=0.01),
        post_augment=AugmentSpec(crop_padding=4, erase_prob=0.5, rotate_degrees=10.0,
                                 hflip_prob=0.5, stage="post"),
        pre_augment=None,
    )
    base.update(overrides)
    return QuantizerTrainSpec(**base)


def colorcnn_defaults(colors: int, **overrides) -> QuantizerTrainSpec:
    """Recipe for the fixed-C ColorCNN: classic crop+flip before the quantizer."""
    base = dict(
        backbone=BackboneConfig(mode="colorcnn", colors=colors),
        weights=LossWeights(gamma=1.0, lambda_=0.0, alpha=0.0, beta=0.0),
        pre_augment=AugmentSpec(crop_padding=4, hflip_prob=0.5, stage="pre"),
        post_augment=None,
    )
    base.update(overrides)
    return QuantizerTrainSpec(**base)


class QuantizerTrainer:
    """One quantizer, one frozen classifier and the per-batch update rule.

    Randomness for every batch is derived from ``(seed, global step)`` so
    a run resumed at a step boundary replays exactly.
    """

    _PRE, _PIX, _JIT, _POST = range(4)

    def __init__(self, spec: QuantizerTrainSpec, classifier: LoadedClassifier,
                 model: QuantNet | None = None):
        self.spec = spec
        self.classifier = classifier
        self.model = model if model is not None else build_quantnet(spec.backbone)
        self.train_norm = classifier.norm.scaled(spec.std_scale)
        self.eval_norm = classifier.norm.scaled(1.0)
        self.targets = TargetCache()
        self.plus = spec.backbone.mode == "colorcnn_plus"

    def colors_at(self, step: int) -> int:
        if not self.plus:
            return self.spec.backbone.colors
        return select_colors(self.spec.selector, step)

    def losses(self, ids, x: torch.Tensor, y: torch.Tensor, step: int,
               raw: np.ndarray | None = None) -> dict[str, torch.Tensor]:
        """Forward pass and every loss term for one batch (no parameter update)."""
        seed = self.spec.schedule.seed
        flipped = None
        if self.spec.pre_augment is not None and not self.spec.pre_augment.is_identity:
            x, params = augment(x, self.spec.pre_augment, generator=_stream(seed, step, self._PRE),
                                return_params=True)
            flipped = params.flipped
        colors = self.colors_at(step)
        out = self.model.forward_train(x, colors)

        rp = torch.zeros(())
        if self.plus and self.spec.weights.lambda_ > 0:
            if raw is None:
                raw = (x.detach().permute(0, 2, 3, 1).clamp(0, 1) * 255).round().byte().numpy()
                flipped = None  # targets computed on the already-augmented batch
            targets = self.targets.onehot(ids, raw, colors, flipped)
            h, w = x.shape[-2:]
            sample = sample_pixels(h, w, self.spec.pixel_ratio,
                                   seed=int(np.random.SeedSequence([seed, step, self._PIX])
                                            .generate_state(1)[0]))
            rp = relationship_loss(out.prob_map, targets, sample)

        z = self.train_norm.normalize(out.image)
        z = apply_color_jitter(z, self.spec.jitter, _stream(seed, step, self._JIT))
        if self.spec.post_augment is not None and not self.spec.post_augment.is_identity:
            z = augment(z, self.spec.post_augment, generator=_stream(seed, step, self._POST))
        logits = self.classifier.model(z)
        if self.spec.use_kd:
            with torch.no_grad():
                teacher = self.classifier.model(self.eval_norm.normalize(x))
            ce = kd_loss(logits, teacher)
        else:
            ce = classification_loss(logits, y)
        mode = "colorcnn_plus" if self.plus else "colorcnn"
        reg = combined_regularizer(out.prob_map, self.spec.weights, mode)
        total = total_loss(ce, rp, reg, self.spec.weights)
        return {"total": total, "ce": ce, "rp": rp, "reg": reg, "colors": colors, "logits": logits}


def _quantizer_checkpoint(trainer: QuantizerTrainer, opt, sched, epoch: int, step: int,
                          extra: dict) -> Checkpoint:
    return Checkpoint(
        "quantizer",
        {"backbone": trainer.spec.backbone.to_dict(), "train": trainer.spec.to_dict()},
        {k: v.clone() for k, v in trainer.model.state_dict().items()},
        {"epoch": epoch, "step": step, "seed": trainer.spec.schedule.seed,
         "classifier_arch": trainer.classifier.arch,
         "classifier_checksum": trainer.classifier.checksum, **extra},
        optimizer=opt.state_dict(), scheduler=sched.state_dict())


def train_quantizer(spec: QuantizerTrainSpec, classifier: LoadedClassifier | Checkpoint | str | Path,
                    train_set: ImageDataset, *, checkpoint_path: str | Path | None = None,
                    metrics_path: str | Path | None = None, resume: Checkpoint | None = None,
                    stop_after_epochs: int | None = None, deterministic: bool = True,
                    on_step: Callable[[int, dict], None] | None = None) -> Checkpoint:
    """Train a quantizer against a frozen classifier.

    ``stop_after_epochs`` ends the run early while keeping the full-length
    learning-rate schedule, which is how resumable runs are produced.
    ``on_step`` receives ``(global_step, info)`` after every update.
    """
    if not isinstance(classifier, LoadedClassifier):
        classifier = load_classifier(classifier)
    if classifier.multilabel != train_set.multilabel:
        raise ConfigError("classifier and dataset disagree on multi-label targets")
    set_determinism(spec.schedule.seed, deterministic)
    trainer = QuantizerTrainer(spec, classifier)
    model = trainer.model
    opt = make_optimizer(model.parameters(), spec.schedule)
    spe = _steps_per_epoch(len(train_set), spec.schedule.batch_size)
    sched = make_scheduler(opt, spec.schedule, spe)
    start_epoch, step = 0, 0
    if resume is not None:
        model.load_state_dict(resume.state_dict)
        opt.load_state_dict(resume.optimizer)
        sched.load_state_dict(resume.scheduler)
        start_epoch, step = resume.meta["epoch"], resume.meta["step"]
    checksum = state_checksum(classifier.model)
    metrics = MetricsLog(metrics_path)
    end_epoch = spec.schedule.epochs if stop_after_epochs is None else \
        min(spec.schedule.epochs, start_epoch + stop_after_epochs)

    ckpt = resume
    for epoch in range(start_epoch, end_epoch):
        model.train()
        t0 = time.time()
        sums = {"total": 0.0, "ce": 0.0, "rp": 0.0, "reg": 0.0}
        correct = seen = 0
        for ids, x, y in train_set.batches(spec.schedule.batch_size, shuffle=True,
                                           seed=spec.schedule.seed, epoch=epoch):
            raw = train_set.images[ids] if trainer.plus else None
            parts = trainer.losses(ids, x, y, step, raw)
            opt.zero_grad(set_to_none=True)
            parts["total"].backward()
            opt.step()
            sched.step()
            scalars = {k: float(parts[k].detach()) for k in sums}
            for k in sums:
                sums[k] += scalars[k] * len(y)
            if not train_set.multilabel:
                correct += int((parts["logits"].argmax(1) == y).sum())
            seen += len(y)
            if on_step is not None:
                on_step(step, scalars |
                        {"colors": parts["colors"], "lr": opt.param_groups[0]["lr"]})
            step += 1
        row = {"epoch": epoch + 1, "step": step} | {k: v / max(1, seen) for k, v in sums.items()}
        row |= {"train_accuracy": 100.0 * correct / max(1, seen),
                "lr": opt.param_groups[0]["lr"], "seconds": round(time.time() - t0, 2)}
        metrics.write(row)
        log.info("quantizer %s epoch %d/%d loss %.4f ce %.4f rp %.4f reg %.4f",
                 spec.backbone.mode, epoch + 1, spec.schedule.epochs,
                 row["total"], row["ce"], row["rp"], row["reg"])
        ckpt = _quantizer_checkpoint(trainer, opt, sched, epoch + 1, step,
                                     {"classifier_accuracy": classifier.accuracy})
        if checkpoint_path:
            save_checkpoint(ckpt, checkpoint_path)

    if state_checksum(classifier.model) != checksum:
        raise InvariantError("classifier parameters changed during quantizer training")
    if ckpt is None:
        ckpt = _quantizer_checkpoint(trainer, opt, sched, start_epoch, step, {})
    return ckpt


def load_quantizer(ckpt: Checkpoint | str | Path) -> QuantNet:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt, kind="quantizer")
    elif ckpt.kind != "quantizer":
        raise ConfigError(f"expected a quantizer checkpoint, got {ckpt.kind}")
    model = build_quantnet(BackboneConfig.from_dict(ckpt.config["backbone"]))
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    return model
