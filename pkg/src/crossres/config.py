"""JSON run configuration: defaults, file loading, CLI overrides, presets.

One file carries four sections (model, data, train, eval). Values merge as
CLI flags > config file > built-in defaults; unknown keys anywhere are
rejected. The merged effective config is echoed into every run directory so
a run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import json
from fractions import Fraction
from importlib import resources
from pathlib import Path

from .data import CropSpec, DomainStyle, SceneSpec, SynthConfig, default_source_style, \
    default_target_style
from .losses import LossWeights
from .models import ModelConfig, as_ratio
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration content; message names the key."""


def _style_dict(style: DomainStyle) -> dict:
    return {
        "class_colors": [list(c) for c in style.class_colors],
        "color_jitter": style.color_jitter,
        "noise_sigma": style.noise_sigma,
        "blur_radius": style.blur_radius,
        "tint": list(style.tint),
    }


def default_config() -> dict:
    return {
        "model": {
            "num_classes": 4,
            "scale_ratio": "2",
            "base_channels": 32,
            "aspp_dilations": [1, 2, 4, 8],
            "image_channels": 3,
        },
        "data": {
            "canvas_px": 384,
            "train_scenes": 200,
            "val_scenes": 40,
            "buildings_per_mpx": 140.0,
            "roads_min": 1,
            "roads_max": 3,
            "cars_per_road_kpx": 10.0,
            "vegetation_per_mpx": 84.0,
            "source_style": _style_dict(default_source_style()),
            "target_style": _style_dict(default_target_style()),
        },
        "train": {
            "alpha": 2.5,
            "beta": 10.0,
            "lr_pretrain": 2e-4,
            "lr_main": 1.5e-4,
            "adam_beta1": 0.9,
            "batch_size": 4,
            "pretrain_iters": 300,
            "main_iters": 1200,
            "use_pdc": True,
            "use_odc": True,
            "seed": 0,
            "checkpoint_every": 500,
            "debug_isolation": False,
            "source_crop": 160,
            "target_crop": 320,
        },
        "eval": {
            "eval_tile": 500,
            "eval_resize": 250,
            "split": "val",
            "with_psnr": True,
        },
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, optionally overlaid by a JSON file, then by explicit values."""
    cfg = default_config()
    if path is not None:
        with open(path) as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        cfg = _merge(cfg, file_cfg)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def save_config(cfg: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def preset_path(name: str) -> Path:
    candidate = resources.files("crossres").joinpath(f"presets/{name}.json")
    return Path(str(candidate))


# -- section builders -----------------------------------------------------------


def make_model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        num_classes=int(m["num_classes"]),
        scale_ratio=as_ratio(m["scale_ratio"]),
        base_channels=int(m["base_channels"]),
        aspp_dilations=tuple(m["aspp_dilations"]),
        image_channels=int(m["image_channels"]),
    )


def make_crop_spec(cfg: dict) -> CropSpec:
    return CropSpec(
        source_crop=int(cfg["train"]["source_crop"]),
        target_crop=int(cfg["train"]["target_crop"]),
        eval_tile=int(cfg["eval"]["eval_tile"]),
        eval_resize=int(cfg["eval"]["eval_resize"]),
    )


def _make_style(d: dict) -> DomainStyle:
    return DomainStyle(
        class_colors=tuple(tuple(float(v) for v in c) for c in d["class_colors"]),
        color_jitter=float(d["color_jitter"]),
        noise_sigma=float(d["noise_sigma"]),
        blur_radius=int(d["blur_radius"]),
        tint=tuple(float(v) for v in d["tint"]),
    )


def make_synth_config(cfg: dict) -> SynthConfig:
    d = cfg["data"]
    m = cfg["model"]
    scene = SceneSpec(
        canvas_px=int(d["canvas_px"]),
        num_classes=int(m["num_classes"]),
        buildings_per_mpx=float(d["buildings_per_mpx"]),
        roads_min=int(d["roads_min"]),
        roads_max=int(d["roads_max"]),
        cars_per_road_kpx=float(d["cars_per_road_kpx"]),
        vegetation_per_mpx=float(d["vegetation_per_mpx"]),
    )
    return SynthConfig(
        canvas_px=int(d["canvas_px"]),
        num_classes=int(m["num_classes"]),
        scale_ratio=as_ratio(m["scale_ratio"]),
        train_scenes=int(d["train_scenes"]),
        val_scenes=int(d["val_scenes"]),
        scene=scene,
        source_style=_make_style(d["source_style"]),
        target_style=_make_style(d["target_style"]),
    )


def make_train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        model=make_model_config(cfg),
        crop=make_crop_spec(cfg),
        weights=LossWeights(alpha=float(t["alpha"]), beta=float(t["beta"])),
        lr_pretrain=float(t["lr_pretrain"]),
        lr_main=float(t["lr_main"]),
        adam_beta1=float(t["adam_beta1"]),
        batch_size=int(t["batch_size"]),
        pretrain_iters=int(t["pretrain_iters"]),
        main_iters=int(t["main_iters"]),
        use_pdc=bool(t["use_pdc"]),
        use_odc=bool(t["use_odc"]),
        seed=int(t["seed"]),
        checkpoint_every=int(t["checkpoint_every"]),
        debug_isolation=bool(t["debug_isolation"]),
    )


# -- TrainConfig <-> dict (checkpoint header) ------------------------------------


def train_config_to_dict(tc: TrainConfig) -> dict:
    return {
        "model": {
            "num_classes": tc.model.num_classes,
            "scale_ratio": str(tc.model.scale_ratio),
            "base_channels": tc.model.base_channels,
            "aspp_dilations": list(tc.model.aspp_dilations),
            "image_channels": tc.model.image_channels,
        },
        "crop": {
            "source_crop": tc.crop.source_crop,
            "target_crop": tc.crop.target_crop,
            "eval_tile": tc.crop.eval_tile,
            "eval_resize": tc.crop.eval_resize,
        },
        "alpha": tc.weights.alpha,
        "beta": tc.weights.beta,
        "lr_pretrain": tc.lr_pretrain,
        "lr_main": tc.lr_main,
        "adam_beta1": tc.adam_beta1,
        "batch_size": tc.batch_size,
        "pretrain_iters": tc.pretrain_iters,
        "main_iters": tc.main_iters,
        "use_pdc": tc.use_pdc,
        "use_odc": tc.use_odc,
        "seed": tc.seed,
        "checkpoint_every": tc.checkpoint_every,
        "debug_isolation": tc.debug_isolation,
    }


def train_config_from_dict(d: dict) -> TrainConfig:
    m = d["model"]
    c = d["crop"]
    return TrainConfig(
        model=ModelConfig(
            num_classes=int(m["num_classes"]),
            scale_ratio=Fraction(m["scale_ratio"]),
            base_channels=int(m["base_channels"]),
            aspp_dilations=tuple(m["aspp_dilations"]),
            image_channels=int(m["image_channels"]),
        ),
        crop=CropSpec(
            source_crop=int(c["source_crop"]),
            target_crop=int(c["target_crop"]),
            eval_tile=int(c["eval_tile"]),
            eval_resize=int(c["eval_resize"]),
        ),
        weights=LossWeights(alpha=float(d["alpha"]), beta=float(d["beta"])),
        lr_pretrain=float(d["lr_pretrain"]),
        lr_main=float(d["lr_main"]),
        adam_beta1=float(d["adam_beta1"]),
        batch_size=int(d["batch_size"]),
        pretrain_iters=int(d["pretrain_iters"]),
        main_iters=int(d["main_iters"]),
        use_pdc=bool(d["use_pdc"]),
        use_odc=bool(d["use_odc"]),
        seed=int(d["seed"]),
        checkpoint_every=int(d["checkpoint_every"]),
        debug_isolation=bool(d["debug_isolation"]),
    )
