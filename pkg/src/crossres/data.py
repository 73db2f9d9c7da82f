"""Procedural two-domain datasets with a controllable resolution gap.

A scene is pure geometry (label mask + per-object brightness field) drawn at
the high-resolution target ground sampling distance. Rendering a scene under
a domain style yields the target image directly; the paired low-resolution
source sample is the same renderer followed by a bicubic downsample and the
source style. Training sets draw source and target scenes from disjoint seed
streams, so the two domains are unpaired.

On disk a dataset is PNG rasters plus a JSON manifest:

    root/source/images/*.png   8-bit RGB
    root/source/labels/*.png   8-bit single-channel class indices
    root/target/images/*.png
    root/target/labels/*.png   (used only by evaluation)
    root/manifest.json         {"gsd_source", "gsd_target", "classes", "items"}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .models import as_ratio, scaled_size
from .nnops import _apply_resize, _resize_matrix, resize_labels

IGNORE_INDEX = 255

# internal semantic ids used by the renderer, before projection onto the
# dataset's class list
_BG, _BUILDING, _ROAD, _CAR, _VEG = 0, 1, 2, 3, 4
_CLASS_NAMES = ("background", "building", "road", "car", "vegetation")


class DatasetError(ValueError):
    """Raised when an on-disk dataset fails validation; message lists paths."""


@dataclass
class SceneSpec:
    """Geometry parameters for one rendered scene at target resolution."""

    canvas_px: int = 128
    num_classes: int = 4
    seed: int = 0
    # object sizes are fixed in pixels (fixed GSD); counts scale with area
    buildings_per_mpx: float = 140.0
    roads_min: int = 1
    roads_max: int = 3
    cars_per_road_kpx: float = 10.0
    vegetation_per_mpx: float = 84.0

    def __post_init__(self):
        if self.canvas_px < 128:
            raise ValueError(f"canvas_px must be >= 128, got {self.canvas_px}")
        if not 2 <= self.num_classes <= len(_CLASS_NAMES):
            raise ValueError(f"num_classes must be in [2, {len(_CLASS_NAMES)}]")


@dataclass
class DomainStyle:
    """Appearance of one domain: palette, jitter, tint, blur, and noise."""

    class_colors: tuple = (
        (0.33, 0.36, 0.30),   # background
        (0.55, 0.44, 0.40),   # building
        (0.47, 0.47, 0.50),   # road
        (0.70, 0.18, 0.16),   # car
        (0.18, 0.40, 0.20),   # vegetation
    )
    color_jitter: float = 0.08
    noise_sigma: float = 0.02
    blur_radius: int = 0
    tint: tuple = (1.0, 1.0, 1.0)

    def palette(self) -> np.ndarray:
        return np.asarray(self.class_colors, dtype=np.float32)


def default_target_style() -> DomainStyle:
    # clean high-resolution sensor: tint only
    return DomainStyle(noise_sigma=0.0, blur_radius=0, tint=(0.82, 1.0, 1.22))


def default_source_style() -> DomainStyle:
    # warmer, noisier, slightly blurred: the cross-sensor appearance gap
    return DomainStyle(noise_sigma=0.035, blur_radius=1, tint=(1.25, 0.92, 0.66))


def class_names(num_classes: int) -> list[str]:
    return list(_CLASS_NAMES[:num_classes])


def _label_projection(num_classes: int) -> np.ndarray:
    """Map internal semantic ids onto the dataset's class indices."""
    proj = np.zeros(len(_CLASS_NAMES), dtype=np.uint8)
    proj[_BUILDING] = 1 if num_classes >= 2 else 0
    proj[_ROAD] = 2 if num_classes >= 3 else 0
    proj[_CAR] = 3 if num_classes >= 4 else proj[_ROAD]
    proj[_VEG] = 4 if num_classes >= 5 else 0
    return proj


@dataclass
class Scene:
    """Resolution-independent scene content rendered at target GSD."""

    spec: SceneSpec
    mask: np.ndarray       # (S,S) uint8 internal ids
    jitter_z: np.ndarray   # (S,S) float32 per-object brightness z-scores
    texture: np.ndarray    # (S,S) float32 fine-scale surface pattern

    def labels(self) -> np.ndarray:
        return _label_projection(self.spec.num_classes)[self.mask]


def build_scene(spec: SceneSpec) -> Scene:
    """Draw geometry for one scene; fully determined by spec.seed."""
    s = spec.canvas_px
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0xFFFFFFFFFFFF, 0xE0]))
    mask = np.zeros((s, s), dtype=np.uint8)
    jitter = np.zeros((s, s), dtype=np.float32)
    texture = np.zeros((s, s), dtype=np.float32)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float32)

    # low-frequency background modulation plus a fine 2px ground checker that
    # plain interpolation cannot carry across the resolution gap
    coarse = rng.standard_normal((8, 8)).astype(np.float32)
    bg = _apply_resize(coarse[None, None], _resize_matrix(8, s, "bicubic"),
                       _resize_matrix(8, s, "bicubic"), np.float32)[0, 0]
    jitter += 0.6 * bg
    checker = ((yy.astype(np.int64) + xx.astype(np.int64)) % 2).astype(np.float32)
    texture += 0.10 * (2.0 * checker - 1.0)

    area_scale = (s / 1024.0) ** 2

    def stamp(region: np.ndarray, cls: int, tex: np.ndarray | float = 0.0) -> None:
        mask[region] = cls
        jitter[region] = rng.normal(0.0, 1.0)
        texture[region] = tex[region] if isinstance(tex, np.ndarray) else tex

    def count_for(per_mpx: float, floor: int) -> int:
        if per_mpx <= 0:
            return 0
        return max(floor, round(per_mpx * area_scale))

    # vegetation blobs (drawn even when unlabeled, as image texture)
    for _ in range(count_for(spec.vegetation_per_mpx, 1)):
        cx, cy = rng.uniform(0, s, 2)
        ax, ay = rng.uniform(9.0, 26.0, 2)
        theta = rng.uniform(0, np.pi)
        dx, dy = xx - cx, yy - cy
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        stamp((u / ax) ** 2 + (v / ay) ** 2 <= 1.0, _VEG)

    # roads: full-width strips at random angle/offset; count scales with canvas edge
    length_scale = max(1, round(s / 128))
    n_roads = int(rng.integers(spec.roads_min, spec.roads_max + 1)) * length_scale
    for _ in range(n_roads):
        theta = rng.uniform(0, np.pi)
        px, py = rng.uniform(0.15 * s, 0.85 * s, 2)
        width = rng.uniform(7.0, 13.0)
        beside = (xx - px) * np.sin(theta) - (yy - py) * np.cos(theta)
        along = (xx - px) * np.cos(theta) + (yy - py) * np.sin(theta)
        # center line dashed at 2px period, phase-locked to the pixel grid
        dashes = ((np.abs(beside) < width / 6)
                  & (np.floor(along).astype(np.int64) % 2 == 0)).astype(np.float32)
        stamp(np.abs(beside) <= width / 2, _ROAD, tex=0.20 * dashes)

    # buildings: axis-aligned rectangles with 2px roof stripes
    for _ in range(count_for(spec.buildings_per_mpx, 2)):
        w = int(rng.uniform(18, 42))
        h = int(rng.uniform(18, 42))
        x0 = rng.integers(0, max(1, s - w))
        y0 = rng.integers(0, max(1, s - h))
        region = np.zeros_like(mask, dtype=bool)
        region[y0 : y0 + h, x0 : x0 + w] = True
        axis = yy if rng.random() < 0.5 else xx
        stripes = 0.16 * (2.0 * (axis.astype(np.int64) % 2) - 1.0)
        stamp(region, _BUILDING, tex=stripes.astype(np.float32))

    # cars: small rectangles centered on remaining road pixels
    road_ys, road_xs = np.nonzero(mask == _ROAD)
    if road_ys.size and spec.cars_per_road_kpx > 0:
        n_cars = max(2, round(spec.cars_per_road_kpx * road_ys.size / 1000.0))
        picks = rng.integers(0, road_ys.size, n_cars)
        car_h, car_w = 5, 8
        for k in picks:
            cy, cx = int(road_ys[k]), int(road_xs[k])
            if rng.random() < 0.5:
                ch, cw = car_h, car_w
            else:
                ch, cw = car_w, car_h
            y0, x0 = max(0, cy - ch // 2), max(0, cx - cw // 2)
            region = np.zeros_like(mask, dtype=bool)
            region[y0 : y0 + ch, x0 : x0 + cw] = True
            stamp(region, _CAR)

    return Scene(spec=spec, mask=mask, jitter_z=jitter, texture=texture)


def _gaussian_blur(img: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return img
    x = np.arange(-radius, radius + 1, dtype=np.float32)
    k = np.exp(-0.5 * (x / max(0.6 * radius, 0.5)) ** 2)
    k /= k.sum()
    for axis in (0, 1):
        pad = [(0, 0)] * img.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(img, pad, mode="reflect")
        out = np.zeros_like(img)
        for i, w in enumerate(k):
            sl = [slice(None)] * img.ndim
            sl[axis] = slice(i, i + img.shape[axis])
            out += w * padded[tuple(sl)]
        img = out
    return img


def render_scene(scene: Scene, style: DomainStyle, down_ratio: Fraction | None = None,
                 noise_tag: int = 0) -> np.ndarray:
    """Render to a float32 (H,W,3) image in [0,1], optionally downsampled."""
    base = style.palette()[scene.mask]
    base *= (1.0 + style.color_jitter * scene.jitter_z + scene.texture)[..., None]
    if down_ratio is not None:
        src = scaled_size(scene.spec.canvas_px, 1 / as_ratio(down_ratio))
        chw = base.transpose(2, 0, 1)[None]
        rh = _resize_matrix(chw.shape[2], src, "bicubic")
        base = _apply_resize(chw, rh, rh, np.float32)[0].transpose(1, 2, 0)
    base *= np.asarray(style.tint, dtype=np.float32)
    base = _gaussian_blur(base, style.blur_radius)
    noise_rng = np.random.default_rng(
        np.random.SeedSequence([scene.spec.seed & 0xFFFFFFFFFFFF, 0xF1, noise_tag])
    )
    base += noise_rng.normal(0.0, style.noise_sigma, base.shape).astype(np.float32)
    return np.clip(base, 0.0, 1.0)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def generate_scene(spec: SceneSpec, style: DomainStyle | None = None):
    """Target-domain sample: 8-bit (H,W,3) image and (H,W) class mask."""
    style = style or default_target_style()
    scene = build_scene(spec)
    return _quantize(render_scene(scene, style, noise_tag=1)), scene.labels()


def derive_source_sample(scene: Scene, ratio, style: DomainStyle | None = None):
    """Low-resolution source sample from a scene: styled image + nearest mask."""
    ratio = as_ratio(ratio)
    if ratio <= 1:
        raise ValueError(f"resolution ratio must be > 1, got {ratio}")
    style = style or default_source_style()
    img = _quantize(render_scene(scene, style, down_ratio=ratio, noise_tag=2))
    src = scaled_size(scene.spec.canvas_px, 1 / ratio)
    labels = resize_labels(scene.labels(), src, src)
    return img, labels


# -- on-disk layout -----------------------------------------------------------


@dataclass
class SynthConfig:
    """Whole-dataset generation parameters."""

    canvas_px: int = 128
    num_classes: int = 4
    scale_ratio: Fraction = Fraction(2)
    train_scenes: int = 200
    val_scenes: int = 40
    scene: SceneSpec = field(default_factory=SceneSpec)
    source_style: DomainStyle = field(default_factory=default_source_style)
    target_style: DomainStyle = field(default_factory=default_target_style)

    def __post_init__(self):
        self.scale_ratio = as_ratio(self.scale_ratio)


def _save_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "RGB" if arr.ndim == 3 else "L"
    Image.fromarray(arr, mode).save(path)


def build_dataset(root, synth: SynthConfig, seed: int = 0) -> Path:
    """Write a full two-domain dataset under root; returns the manifest path."""
    root = Path(root)
    items = []

    def scene_for(domain_tag: int, index: int) -> Scene:
        sseed = int(np.random.SeedSequence([seed, domain_tag, index]).generate_state(1)[0])
        spec = SceneSpec(canvas_px=synth.canvas_px, num_classes=synth.num_classes,
                         seed=sseed, **_density_kwargs(synth.scene))
        return build_scene(spec)

    counts = [("train", synth.train_scenes), ("val", synth.val_scenes)]
    idx = 0
    for split, count in counts:
        for _ in range(count):
            scene = scene_for(0x7A, idx)
            img = _quantize(render_scene(scene, synth.target_style, noise_tag=1))
            name = f"tgt_{idx:05d}.png"
            _save_png(root / "target" / "images" / name, img)
            _save_png(root / "target" / "labels" / name, scene.labels())
            items.append({"file": f"target/images/{name}", "split": split, "domain": "target"})
            idx += 1
    idx = 0
    for split, count in counts:
        for _ in range(count):
            scene = scene_for(0x50, idx)
            img, labels = derive_source_sample(scene, synth.scale_ratio, synth.source_style)
            name = f"src_{idx:05d}.png"
            _save_png(root / "source" / "images" / name, img)
            _save_png(root / "source" / "labels" / name, labels)
            items.append({"file": f"source/images/{name}", "split": split, "domain": "source"})
            idx += 1

    manifest = {
        "gsd_source": float(synth.scale_ratio),
        "gsd_target": 1.0,
        "classes": class_names(synth.num_classes),
        "items": items,
    }
    path = root / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def _density_kwargs(scene: SceneSpec) -> dict:
    return {
        "buildings_per_mpx": scene.buildings_per_mpx,
        "roads_min": scene.roads_min,
        "roads_max": scene.roads_max,
        "cars_per_road_kpx": scene.cars_per_road_kpx,
        "vegetation_per_mpx": scene.vegetation_per_mpx,
    }


@dataclass
class DatasetItem:
    image_path: Path
    label_path: Path
    split: str
    domain: str

    def load_image(self) -> np.ndarray:
        """(3,H,W) float32 in [0,1]."""
        arr = np.asarray(Image.open(self.image_path), dtype=np.float32) / 255.0
        return np.ascontiguousarray(arr.transpose(2, 0, 1))

    def load_label(self) -> np.ndarray:
        return np.asarray(Image.open(self.label_path), dtype=np.uint8)


@dataclass
class DomainDataset:
    root: Path
    classes: list[str]
    ratio: Fraction
    source: list[DatasetItem]
    target: list[DatasetItem]

    def split(self, domain: str, split: str) -> list[DatasetItem]:
        pool = self.source if domain == "source" else self.target
        return [it for it in pool if it.split == split]

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def load_dataset(root, expected_ratio=None) -> DomainDataset:
    """Load and validate a dataset directory; aggregates all errors found."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    for key in ("gsd_source", "gsd_target", "classes", "items"):
        if key not in manifest:
            raise DatasetError(f"manifest {manifest_path} missing key {key!r}")

    ratio = Fraction(manifest["gsd_source"] / manifest["gsd_target"]).limit_denominator(1000)
    if expected_ratio is not None:
        expected = as_ratio(expected_ratio)
        if abs(float(ratio) - float(expected)) > 1e-9:
            raise DatasetError(
                f"manifest GSD ratio {float(ratio):g} does not match configured "
                f"ratio {float(expected):g}"
            )

    num_classes = len(manifest["classes"])
    errors: list[str] = []
    source, target = [], []
    for entry in manifest["items"]:
        rel = Path(entry["file"])
        image_path = root / rel
        label_path = root / Path(str(rel).replace("images", "labels", 1))
        if not image_path.exists():
            errors.append(f"missing image: {image_path}")
            continue
        if not label_path.exists():
            errors.append(f"missing label: {label_path}")
            continue
        with Image.open(image_path) as im, Image.open(label_path) as lb:
            if im.size != lb.size:
                errors.append(
                    f"label size {lb.size} != image size {im.size}: {label_path}"
                )
                continue
        labels = np.asarray(Image.open(label_path))
        bad = (labels >= num_classes) & (labels != IGNORE_INDEX)
        if bad.any():
            errors.append(
                f"label value {int(labels[bad][0])} outside [0, {num_classes - 1}]: "
                f"{label_path}"
            )
            continue
        item = DatasetItem(image_path, label_path, entry["split"], entry["domain"])
        (source if entry["domain"] == "source" else target).append(item)

    if errors:
        raise DatasetError("dataset validation failed:\n  " + "\n  ".join(errors))
    return DomainDataset(root=root, classes=list(manifest["classes"]), ratio=ratio,
                         source=source, target=target)


# -- training crops -----------------------------------------------------------


@dataclass
class CropSpec:
    source_crop: int
    target_crop: int
    eval_tile: int
    eval_resize: int

    def validate(self, ratio) -> None:
        ratio = as_ratio(ratio)
        expected = scaled_size(self.source_crop, ratio)
        if abs(expected - self.target_crop) > 1:
            raise ValueError(
                f"target_crop {self.target_crop} is not source_crop x ratio "
                f"(expected ~{expected})"
            )


def _random_crop(arr: np.ndarray, size: int, rng: np.random.Generator,
                 path: Path) -> tuple[np.ndarray, int, int]:
    h, w = arr.shape[-2], arr.shape[-1]
    if h < size or w < size:
        raise ValueError(f"image {path} is {h}x{w}, smaller than crop {size}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return arr[..., y : y + size, x : x + size], y, x


def sample_training_pair(dataset: DomainDataset, crop: CropSpec,
                         rng: np.random.Generator):
    """One aligned training draw: (I_S, A_S, I_T, downsampled I_T)."""
    src_items = dataset.split("source", "train")
    tgt_items = dataset.split("target", "train")
    if not src_items or not tgt_items:
        raise DatasetError("dataset has no training items in one of the domains")
    src = src_items[int(rng.integers(0, len(src_items)))]
    tgt = tgt_items[int(rng.integers(0, len(tgt_items)))]

    img_s = src.load_image()
    lab_s = src.load_label()
    img_s, y, x = _random_crop(img_s, crop.source_crop, rng, src.image_path)
    lab_s = lab_s[y : y + crop.source_crop, x : x + crop.source_crop]

    img_t = tgt.load_image()
    img_t, _, _ = _random_crop(img_t, crop.target_crop, rng, tgt.image_path)
    rh = _resize_matrix(crop.target_crop, crop.source_crop, "bicubic")
    img_t_down = _apply_resize(img_t[None], rh, rh, np.float32)[0]
    return img_s, lab_s, img_t, np.ascontiguousarray(img_t_down)


def sample_batch(dataset: DomainDataset, crop: CropSpec, rng: np.random.Generator,
                 batch_size: int):
    """Stack batch_size training draws into (N,...) arrays."""
    imgs_s, labs_s, imgs_t, downs = [], [], [], []
    for _ in range(batch_size):
        i_s, a_s, i_t, d_t = sample_training_pair(dataset, crop, rng)
        imgs_s.append(i_s)
        labs_s.append(a_s)
        imgs_t.append(i_t)
        downs.append(d_t)
    return (np.stack(imgs_s), np.stack(labs_s), np.stack(imgs_t), np.stack(downs))
