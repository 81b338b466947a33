"""Command-line entry point: ``colorcnn <command> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .classic import QUANTIZERS
from .codec import bits_per_pixel, encode_indexed_png
from .config import (COMMANDS, data_root, load_config, quantizer_spec, resolve_classifier_augment,
                     resolve_schedule, save_snapshot)
from .data import ImageDataset, load_dataset
from .errors import ColorCNNError, ConfigError, FileMissingError
from .evaluation import (IdentityQuantizer, LearnedQuantizer, QuantizerFamily, evaluate_accuracy,
                         make_quantizer, rate_accuracy_curve, write_records)
from .training import load_classifier, load_quantizer, train_classifier, train_quantizer

log = logging.getLogger("colorcnn")


def _limit(ds: ImageDataset, n: int | None, seed: int) -> ImageDataset:
    if n is None or n >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(seed).permutation(len(ds))[:n])
    return ds.subset(idx)


def _dataset(cfg: dict, split: str) -> ImageDataset:
    d = cfg["dataset"]
    ds = load_dataset(d["name"], split, data_root(cfg), resolution=int(d["resolution"]))
    limit = d["train_limit"] if split == "train" else d["test_limit"]
    return _limit(ds, limit, int(d["subset_seed"]))


def _require(path, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} checkpoint path is not set")
    p = Path(path)
    if not p.exists():
        raise FileMissingError(f"{what} checkpoint not found: {p}")
    return p


def _learned(cfg: dict, method: str):
    """Quantizer object for a learned method; ``{bits}`` in the path selects per-bit files."""
    path = cfg["quantizer"]["checkpoint"]
    if path and "{bits}" in str(path):
        return QuantizerFamily(method, lambda b: _load_learned(
            _require(str(path).format(bits=b), method), method))
    return LearnedQuantizer(_load_learned(_require(path, method), method))


def _load_learned(path: Path, method: str):
    model = load_quantizer(path)
    if model.config.mode != method:
        raise ConfigError(f"{path} holds a {model.config.mode} model, not {method}")
    return model


def _quantizer(cfg: dict, method: str):
    if method in ("colorcnn", "colorcnn_plus"):
        return _learned(cfg, method)
    return make_quantizer(method)


def cmd_train_classifier(cfg: dict, out: Path) -> None:
    schedule = resolve_schedule(cfg, "train-classifier")
    aug = resolve_classifier_augment(cfg)
    train, test = _dataset(cfg, "train"), _dataset(cfg, "test")
    save_snapshot(cfg, out, "train-classifier")
    ckpt = train_classifier(cfg["classifier"]["arch"], train, test, schedule,
                            width=float(cfg["classifier"]["width"]), augment_spec=aug,
                            checkpoint_path=out / "classifier.pt",
                            metrics_path=out / "metrics.csv",
                            deterministic=bool(cfg["deterministic"]))
    print(f"test accuracy {ckpt.meta['test_accuracy']:.2f}% -> {out / 'classifier.pt'}")


def cmd_train_quantizer(cfg: dict, out: Path) -> None:
    spec = quantizer_spec(cfg)
    classifier = load_classifier(_require(cfg["classifier"]["checkpoint"], "classifier"))
    train = _dataset(cfg, "train")
    save_snapshot(cfg, out, "train-quantizer")
    ckpt_path = out / "quantizer.pt"
    resume = None
    if cfg["schedule"]["resume"] and ckpt_path.exists():
        resume = load_checkpoint(ckpt_path, kind="quantizer")
        print(f"resuming from epoch {resume.meta['epoch']}")
    ckpt = train_quantizer(spec, classifier, train, checkpoint_path=ckpt_path,
                           metrics_path=out / "metrics.csv", resume=resume,
                           stop_after_epochs=cfg["schedule"]["stop_after_epochs"],
                           deterministic=bool(cfg["deterministic"]))
    print(f"epoch {ckpt.meta['epoch']} -> {ckpt_path}")


def cmd_quantize(cfg: dict, out: Path) -> None:
    from PIL import Image

    q = cfg["quantize"]
    if not q["input"]:
        raise ConfigError("quantize.input is not set")
    src = Path(q["input"])
    if not src.exists():
        raise FileMissingError(f"input not found: {src}")
    files = sorted(p for p in src.iterdir() if p.is_file()) if src.is_dir() else [src]
    method, bits = q["method"], int(q["bits"])
    if method == "identity" or method not in (*QUANTIZERS, "colorcnn", "colorcnn_plus"):
        raise ConfigError(f"quantize.method must be one of "
                          f"{', '.join((*QUANTIZERS, 'colorcnn', 'colorcnn_plus'))}")
    quantizer = _quantizer(cfg, method)
    save_snapshot(cfg, out, "quantize")
    rows = []
    for f in files:
        try:
            img = np.asarray(Image.open(f).convert("RGB"))
        except OSError as exc:
            raise FileMissingError(f"cannot read image {f}: {exc}") from exc
        ix = quantizer.quantize(img[None], bits)[0]
        blob = encode_indexed_png(ix)
        dst = out / f"{f.stem}.png"
        dst.write_bytes(blob.data)
        rows.append({"file": f.name, "output": dst.name, "colors": ix.num_used_colors(),
                     "bpp": f"{bits_per_pixel(blob):.6f}"})
    with open(out / "quantize.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("file", "output", "colors", "bpp"))
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} indexed PNG(s) to {out}")


def cmd_evaluate(cfg: dict, out: Path) -> None:
    e = cfg["evaluate"]
    classifier = load_classifier(_require(cfg["classifier"]["checkpoint"], "classifier"))
    quantizers = {m: _quantizer(cfg, m) for m in e["methods"]}
    dataset = _dataset(cfg, e["split"])
    save_snapshot(cfg, out, "evaluate")
    records = []
    for name, q in quantizers.items():
        for bits in ([24] if isinstance(q, IdentityQuantizer) else e["bits"]):
            rec = evaluate_accuracy(q, classifier, dataset, int(bits),
                                    batch_size=int(e["batch_size"]), seed=int(cfg["seed"]))
            records.append(rec)
            extra = "" if rec.map is None else f" mAP {rec.map:.2f}%"
            print(f"{name:18s} bits={bits:<2} acc {rec.accuracy:6.2f}%{extra} "
                  f"bpp {rec.bpp:.4f}")
    write_records(records, out / "eval.csv")
    if classifier.accuracy is not None:
        print(f"classifier stored accuracy {classifier.accuracy:.2f}%")


def cmd_curve(cfg: dict, out: Path) -> None:
    e = cfg["evaluate"]
    classifier = load_classifier(_require(cfg["classifier"]["checkpoint"], "classifier"))
    quantizers = {m: _quantizer(cfg, m) for m in e["methods"] if m not in ("identity", "jpeg")}
    dataset = _dataset(cfg, e["split"])
    save_snapshot(cfg, out, "curve")
    records = rate_accuracy_curve(quantizers, classifier, dataset, [int(b) for b in e["bits"]],
                                  [int(q) for q in e["jpeg_qualities"]], out,
                                  seed=int(cfg["seed"]), batch_size=int(e["batch_size"]))
    print(f"{len(records)} rows -> {out / 'curve.csv'}")


HANDLERS = {"train-classifier": cmd_train_classifier, "train-quantizer": cmd_train_quantizer,
            "quantize": cmd_quantize, "evaluate": cmd_evaluate, "curve": cmd_curve}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="colorcnn", description="Learned and classical color "
                                "quantization: training, quantizing and evaluation.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. weights.lambda=1 (repeatable)")
    p.add_argument("--output", help="output directory (overrides output.dir)")
    p.add_argument("--seed", type=int, help="global seed (overrides seed)")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="deterministic kernels and seeded data order")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        overrides = list(args.overrides)
        if args.output is not None:
            overrides.append(f"output.dir={args.output}")
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.deterministic:
            overrides.append("deterministic=true")
        cfg = load_config(args.config, overrides)
        out = Path(cfg["output"]["dir"])
        HANDLERS[args.command](cfg, out)
    except ColorCNNError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
