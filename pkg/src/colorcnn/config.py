"""Experiment configuration: YAML sections, dotted overrides and recipe resolution.

A config file is a YAML mapping whose sections mirror :data:`DEFAULTS`.
Any key may be omitted.  ``null`` in ``schedule`` and ``augment`` means
"use the recipe default for the command and quantizer mode"; the
snapshot written next to every artifact has those filled in, so feeding
it back through ``--config`` repeats the run.
"""

from __future__ import annotations

import copy
import os
from pathlib import Path
from typing import Any, Iterable

import yaml

from .data import AugmentSpec
from .errors import ConfigError, FileMissingError
from .losses import LossWeights
from .quantnet import BackboneConfig
from .training import (CLASSIFIER_TRAIN_AUG, JitterSpec, QuantizerTrainSpec, TaskSelector,
                       TrainSchedule, colorcnn_defaults, colorcnn_plus_defaults)

DATA_ROOT_ENV = "COLORCNN_DATA_ROOT"
SNAPSHOT_NAME = "config.yaml"

DEFAULTS: dict[str, Any] = {
    "dataset": {"name": "cifar10", "root": None, "resolution": 112,
                "train_limit": None, "test_limit": None, "subset_seed": 0},
    "classifier": {"arch": "resnet18", "width": 1.0, "checkpoint": None},
    "quantizer": {"mode": "colorcnn_plus", "colors": 2, "kind": "unet", "levels": 3,
                  "base_channels": 64, "bottleneck_dim": 16, "feature_dim": 256, "top_k": 4,
                  "checkpoint": None, "std_scale": 4.0, "pixel_ratio": 0.3, "use_kd": False},
    "weights": {"gamma": 1.0, "lambda": 3.0, "alpha": 1.0, "beta": 1.0},
    "schedule": {"epochs": None, "batch_size": None, "lr_policy": None, "peak_lr": None,
                 "momentum": 0.9, "weight_decay": 5e-4, "restart_period": 20,
                 "stop_after_epochs": None, "resume": False},
    "selector": {"bit_choices": [1, 2, 3, 4, 5, 6], "pace": 20, "arbitrary_colors": False,
                 "max_colors": 64},
    "jitter": {"xi": 1.0},
    "augment": {"pre_crop_padding": None, "pre_hflip_prob": None,
                "post_crop_padding": None, "post_erase_prob": None,
                "post_rotate_degrees": None, "post_hflip_prob": None},
    "evaluate": {"methods": ["identity", "mediancut", "mediancut+dither", "octree",
                             "colorcnn_plus"],
                 "bits": [1, 2, 3, 4, 5, 6],
                 "jpeg_qualities": [1, 5, 10, 20, 40, 60, 80, 95],
                 "batch_size": 256, "split": "test"},
    "quantize": {"input": None, "method": "mediancut", "bits": 1},
    "output": {"dir": "runs/default"},
    "seed": 0,
    "deterministic": False,
}

COMMANDS = ("train-classifier", "train-quantizer", "quantize", "evaluate", "curve")


def valid_keys(tree: dict = DEFAULTS, prefix: str = "") -> list[str]:
    keys = []
    for k, v in tree.items():
        if isinstance(v, dict):
            keys += valid_keys(v, f"{prefix}{k}.")
        else:
            keys.append(f"{prefix}{k}")
    return keys


def _check_value(key: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
    elif isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool) \
                and isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key} expects an integer, got {value!r}")
    elif isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{key} expects a list, got {value!r}")
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key} expects a string, got {value!r}")
    return value


def set_key(cfg: dict, dotted: str, value) -> None:
    """Assign ``value`` at a dotted path, rejecting keys absent from :data:`DEFAULTS`."""
    parts = dotted.split(".")
    node, ref = cfg, DEFAULTS
    for i, part in enumerate(parts):
        if not isinstance(ref, dict) or part not in ref:
            scope = ".".join(parts[:i])
            choices = valid_keys(ref, f"{scope}." if scope else "") if isinstance(ref, dict) \
                else valid_keys()
            raise ConfigError(f"unknown config key {dotted!r}; valid keys: {', '.join(choices)}")
        if i == len(parts) - 1:
            if isinstance(ref[part], dict):
                raise ConfigError(f"{dotted!r} is a section; set one of: "
                                  f"{', '.join(valid_keys(ref[part], dotted + '.'))}")
            node[part] = _check_value(dotted, ref[part], value)
        else:
            node, ref = node[part], ref[part]


def _merge(cfg: dict, data: dict, prefix: str = "") -> None:
    for k, v in data.items():
        key = f"{prefix}{k}"
        ref = DEFAULTS
        for part in key.split(".")[:-1]:
            ref = ref[part]
        if isinstance(ref.get(k), dict):
            if not isinstance(v, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            _merge(cfg, v, key + ".")
        else:
            set_key(cfg, key, v)


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value of override {key}: {exc}") from exc
    return key.strip(), value


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> dict:
    """Defaults, then the YAML file, then ``key=value`` overrides in order."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileMissingError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, data)
    for text in overrides:
        set_key(cfg, *parse_override(text))
    return cfg


def save_snapshot(cfg: dict, out_dir: str | Path, command: str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / SNAPSHOT_NAME
    body = yaml.safe_dump(cfg, sort_keys=False)
    path.write_text(f"# command: {command}\n{body}")
    return path


# ---------------------------------------------------------------------------
# recipe resolution

def data_root(cfg: dict) -> Path:
    root = cfg["dataset"]["root"] or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"no dataset root: set dataset.root or ${DATA_ROOT_ENV}")
    return Path(root)


def _recipe_schedule(cfg: dict, command: str) -> TrainSchedule:
    batch = 32 if cfg["dataset"]["name"] == "stl10" else 128
    if command == "train-classifier":
        return TrainSchedule(epochs=60, batch_size=batch, lr_policy="onecycle", peak_lr=0.1)
    epochs = 300 if cfg["quantizer"]["mode"] == "colorcnn_plus" else 60
    return TrainSchedule(epochs=epochs, batch_size=batch, lr_policy="cosine_warm_restart",
                         peak_lr=0.01)


def resolve_schedule(cfg: dict, command: str) -> TrainSchedule:
    """Fill ``null`` schedule entries from the recipe and write them back into ``cfg``."""
    base = _recipe_schedule(cfg, command).to_dict()
    sec = cfg["schedule"]
    for key in ("epochs", "batch_size", "lr_policy", "peak_lr"):
        if sec[key] is None:
            sec[key] = base[key]
    return TrainSchedule(epochs=int(sec["epochs"]), batch_size=int(sec["batch_size"]),
                         lr_policy=sec["lr_policy"], peak_lr=float(sec["peak_lr"]),
                         momentum=float(sec["momentum"]),
                         weight_decay=float(sec["weight_decay"]),
                         restart_period=int(sec["restart_period"]), seed=int(cfg["seed"]))


def _fill_augment(cfg: dict, stage: str, spec: AugmentSpec | None) -> AugmentSpec | None:
    sec = cfg["augment"]
    fields = {"crop_padding": 0, "erase_prob": 0.0, "rotate_degrees": 0.0, "hflip_prob": 0.0}
    if spec is not None:
        fields |= {k: getattr(spec, k) for k in fields}
        fields["crop_padding"] = fields["crop_padding"] or 0
    out = {}
    for k, default in fields.items():
        key = f"{stage}_{k}"
        if key in sec:
            if sec[key] is None:
                sec[key] = default
            out[k] = sec[key]
        else:
            out[k] = default
    result = AugmentSpec(crop_padding=int(out["crop_padding"]) or None,
                         erase_prob=float(out["erase_prob"]),
                         rotate_degrees=float(out["rotate_degrees"]),
                         hflip_prob=float(out["hflip_prob"]), stage=stage)
    return None if result.is_identity else result


def resolve_classifier_augment(cfg: dict) -> AugmentSpec | None:
    return _fill_augment(cfg, "pre", CLASSIFIER_TRAIN_AUG)


def backbone_config(cfg: dict) -> BackboneConfig:
    q = cfg["quantizer"]
    return BackboneConfig(mode=q["mode"], kind=q["kind"], levels=int(q["levels"]),
                          base_channels=int(q["base_channels"]),
                          colors=int(q["colors"]) if q["mode"] == "colorcnn" else None,
                          bottleneck_dim=q["bottleneck_dim"], feature_dim=int(q["feature_dim"]),
                          top_k=q["top_k"])


def quantizer_spec(cfg: dict) -> QuantizerTrainSpec:
    """Resolved training spec for ``train-quantizer``; mutates ``cfg`` to the resolved values."""
    schedule = resolve_schedule(cfg, "train-quantizer")
    mode = cfg["quantizer"]["mode"]
    recipe = colorcnn_plus_defaults() if mode == "colorcnn_plus" \
        else colorcnn_defaults(int(cfg["quantizer"]["colors"]))
    w, s, q = cfg["weights"], cfg["selector"], cfg["quantizer"]
    return QuantizerTrainSpec(
        backbone=backbone_config(cfg),
        weights=LossWeights(gamma=float(w["gamma"]), lambda_=float(w["lambda"]),
                            alpha=float(w["alpha"]), beta=float(w["beta"])),
        schedule=schedule,
        selector=TaskSelector(tuple(s["bit_choices"]), int(s["pace"]), int(cfg["seed"]),
                              bool(s["arbitrary_colors"]), int(s["max_colors"])),
        jitter=JitterSpec(float(cfg["jitter"]["xi"])),
        pre_augment=_fill_augment(cfg, "pre", recipe.pre_augment),
        post_augment=_fill_augment(cfg, "post", recipe.post_augment),
        std_scale=float(q["std_scale"]), pixel_ratio=float(q["pixel_ratio"]),
        use_kd=bool(q["use_kd"]))
