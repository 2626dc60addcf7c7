"""Profiles and the nested key/value run configuration."""

import copy
from pathlib import Path

import yaml

from .degrade import MIXTURE_SIGMAS

_COMMON = {
    "seed": 0,
    "runtime": {"threads": 1},  # single worker: bit-reproducible CPU runs
    "data": {"root": None, "train_per_class": 60, "val_fraction": 0.2},
    "degradation": {
        "sigmas": list(MIXTURE_SIGMAS),
        "eval_sigmas": [0.1, 0.2, 0.3, 0.4, 0.5],
        "level_hi": 0.5,
        "level_lo": 0.0,
        "anchor": "anchor-low",
        "test_seed": 1234,
    },
    "calib": {
        "modules": {"spatial_mult": True, "spatial_add": True, "channel_mult": True,
                    "channel_concat": True, "residual": True, "ensemble": False},
        "fidelity_metric": "l1",
        "fidelity_source": "oracle",
        "downsampling": "bilinear",
        "fc_hidden": None,
        "estimator_init": "pretrained",
    },
}

PROFILES = {
    "desk": {
        "profile": "desk",
        "data": {"crop_size": 32, "synth": {"per_class": 100, "size_range": [36, 56]}},
        "backbone": {"arch": "desk"},
        "classifier": {"optimizer": "nag", "lr_init": 0.05, "batch_size": 64, "epochs": 30,
                       "warmup_epochs": 3, "label_smoothing_eps": 0.1},
        "restorer": {"depth": 6, "width": 32, "kernel": 3, "norm": "batch", "patch": 16,
                     "stride": 8, "lr": 1e-3, "batch_size": 128, "epochs": 20, "warmup_epochs": 2},
        "estimator": {"depth": 6, "width": 32, "kernel": 3, "norm": "batch", "patch": 16,
                      "stride": 8, "lr": 1e-3, "batch_size": 128, "epochs": 15, "warmup_epochs": 2},
        "calib": {"conv_hidden": 16,
                  "train": {"optimizer": "nag", "lr_init": 0.01, "batch_size": 64, "epochs": 30,
                            "warmup_epochs": 3, "label_smoothing_eps": 0.1}},
    },
    "paper": {
        "profile": "paper",
        "data": {"crop_size": 224, "synth": None},
        "backbone": {"arch": "resnet50", "weights": "IMAGENET1K_V1"},
        "classifier": {"optimizer": "nag", "lr_init": 0.001, "batch_size": 64, "epochs": 120,
                       "warmup_epochs": 5, "label_smoothing_eps": 0.1},
        "restorer": {"depth": 17, "width": 64, "kernel": 3, "norm": "batch", "patch": 50,
                     "stride": 25, "lr": 1e-4, "batch_size": 128, "epochs": 120, "warmup_epochs": 5},
        "estimator": {"depth": 17, "width": 64, "kernel": 3, "norm": "batch", "patch": 50,
                      "stride": 25, "lr": 1e-4, "batch_size": 128, "epochs": 120, "warmup_epochs": 5},
        "calib": {"conv_hidden": 64,
                  "train": {"optimizer": "nag", "lr_init": 0.001, "batch_size": 64, "epochs": 50,
                            "warmup_epochs": 5, "label_smoothing_eps": 0.1}},
    },
}


def deep_merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(profile="desk", path=None, overrides=()):
    """Profile defaults, then an optional YAML/JSON file, then ``key.path=value`` overrides."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = deep_merge(_COMMON, PROFILES[profile])
    if path:
        cfg = deep_merge(cfg, yaml.safe_load(Path(path).read_text()) or {})
    for item in overrides:
        key, _, raw = item.partition("=")
        if not _:
            raise ValueError(f"override {item!r} must look like key.path=value")
        set_key(cfg, key, yaml.safe_load(raw))
    return cfg


def set_key(cfg, dotted, value):
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def get_key(cfg, dotted, default=None):
    node = cfg
    for p in dotted.split("."):
        if not isinstance(node, dict) or p not in node:
            return default
        node = node[p]
    return node


def dump_config(cfg):
    return yaml.safe_dump(cfg, sort_keys=True)
