"""Run configuration: one YAML file with fixed sections, unknown keys rejected."""
from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .model import NetworkConfig
from .train import TrainConfig


class RunConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "dataset": {
        "layouts": 200,
        "backgrounds": 15,
        "noise": 3,
        "min_blocks": 1,
        "max_blocks": 8,
        "distractor_every": 2,     # every k-th background carries distractors, 0 disables
        "val_backgrounds": None,   # default: last fifth
        "split": "background",
        "val_fraction": 0.2,
        "min_visible": 0.05,
        "noise_scale": 0.10,
        "noise_rot_xy_deg": 6.0,
        "noise_rot_z_deg": 10.0,
        "noise_displacement": 0.01,
    },
    "camera": {
        "image_size": [352, 198],
        "eye": [0.16, -0.24, 0.40],
        "target": [0.16, 0.17, 0.03],
        "cell_size": 0.04,
    },
    "arm": {"profile": None},
    "model": NetworkConfig().to_dict(),
    "train": {"mode": "multitask", "init": None, "multitask": TrainConfig.multitask().to_dict(),
              "detection": TrainConfig.detection().to_dict()},
    "eval": {"iou": 0.5, "score_thresh": 0.05, "nms_iou": 0.5, "max_dets": 100, "ap_mode": "all",
             "low_density_fraction": 0.5},
    "paths": {"root": ".", "dataset": "data", "out": None, "checkpoint": None},
    "seeds": {"dataset": 0, "train": 0},
}

SECTIONS = tuple(DEFAULTS)


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise RunConfigError(f"unknown config key {where}{k}")
        if isinstance(base[k], dict) and k not in ("model",):
            if not isinstance(v, dict):
                raise RunConfigError(f"config key {where}{k} must be a mapping")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        elif isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise RunConfigError(f"config key {where}{k} must be a mapping")
            out[k].update(v)
        else:
            out[k] = v
    return out


def resolve(raw: dict | None = None) -> dict:
    """Defaults overlaid with ``raw``; validates nested model/train blocks."""
    cfg = _merge(DEFAULTS, raw or {}, "")
    try:
        NetworkConfig.from_dict(cfg["model"])
        for mode in ("multitask", "detection"):
            TrainConfig.from_dict(cfg["train"][mode])
    except (ValueError, TypeError) as e:
        raise RunConfigError(str(e)) from e
    if cfg["train"]["mode"] not in ("multitask", "detection"):
        raise RunConfigError("train.mode must be multitask or detection")
    return cfg


def load(path=None) -> dict:
    if path is None:
        return resolve({})
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as e:
        raise RunConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(raw, dict):
        raise RunConfigError("config file must hold a mapping")
    return resolve(raw)


def dump(cfg: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=False))


def require(cfg: dict, dotted: str):
    """Value at ``a.b.c``; a missing or null value is a config error naming the key."""
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or node.get(part) is None:
            raise RunConfigError(f"missing config key {dotted}")
        node = node[part]
    return node


def path_in_root(cfg: dict, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else Path(cfg["paths"]["root"]) / p


def network_config(cfg: dict) -> NetworkConfig:
    return NetworkConfig.from_dict(cfg["model"])


def train_config(cfg: dict, mode: str | None = None) -> TrainConfig:
    mode = mode or cfg["train"]["mode"]
    d = dict(cfg["train"][mode])
    d["seed"] = cfg["seeds"]["train"]
    return TrainConfig.from_dict(d)
