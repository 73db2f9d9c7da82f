"""Segmentation and super-resolution evaluation: IoU, PSNR, tiled inference."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nnops
from .data import IGNORE_INDEX, CropSpec, DomainDataset
from .models import SrsModel, scaled_size
from .tensor import Tensor

PSNR_CAP_DB = 99.0


class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, truth: np.ndarray, pred: np.ndarray,
               ignore_index: int = IGNORE_INDEX) -> None:
        if truth.shape != pred.shape:
            raise ValueError(f"truth shape {truth.shape} != prediction shape {pred.shape}")
        c = self.num_classes
        valid = (truth != ignore_index) & (truth < c)
        t = truth[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        self.counts += np.bincount(c * t + p, minlength=c * c).reshape(c, c)

    def merge(self, other: "ConfusionMatrix") -> None:
        self.counts += other.counts

    def total(self) -> int:
        return int(self.counts.sum())


def iou(conf: ConfusionMatrix, k: int) -> float:
    """TP / (TP + FP + FN) for class k; NaN when the class never occurs."""
    tp = conf.counts[k, k]
    denom = conf.counts[k, :].sum() + conf.counts[:, k].sum() - tp
    if denom == 0:
        return float("nan")
    return float(tp / denom)


def miou(conf: ConfusionMatrix) -> float:
    """Mean IoU over classes present in truth or prediction."""
    vals = [iou(conf, k) for k in range(conf.num_classes)]
    present = [v for v in vals if not math.isnan(v)]
    if not present:
        return float("nan")
    return float(np.mean(present))


def pixel_accuracy(conf: ConfusionMatrix) -> float:
    total = conf.total()
    if total == 0:
        return float("nan")
    return float(np.diag(conf.counts).sum() / total)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ: {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / err)


def cap_db(value: float, cap: float = PSNR_CAP_DB) -> float:
    return min(value, cap)


def _reflect_pad_hw(arr: np.ndarray, bottom: int, right: int) -> np.ndarray:
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, bottom), (0, right)]
    return np.pad(arr, pad, mode="reflect")


def infer_tile(model: SrsModel, tile: np.ndarray, eval_resize: int) -> np.ndarray:
    """Class probabilities for one (3,t,t) tile at tile resolution."""
    t = tile.shape[-1]
    x = Tensor(tile[None])
    x = nnops.resize(x, eval_resize, eval_resize, "bicubic")
    feats = model.extract(x)
    th = scaled_size(eval_resize, model.config.scale_ratio)
    _, pyramid = model.super_resolve(feats, th, th)
    logits = model.segment(feats, pyramid, th, th)
    probs = nnops.softmax_channel(logits)
    return nnops.resize(probs, t, t, "bilinear").data[0]


def sliding_window_infer(model: SrsModel, image: np.ndarray, crop: CropSpec) -> np.ndarray:
    """Tiled no-overlap inference over a (3,H,W) image -> (H,W) labels.

    Remainder tiles on the right/bottom edge are reflection-padded to a full
    tile, then cropped back, so every output pixel is written exactly once.
    """
    tile = crop.eval_tile
    _, h, w = image.shape
    ph = (tile - h % tile) % tile if h > tile else max(0, tile - h)
    pw = (tile - w % tile) % tile if w > tile else max(0, tile - w)
    padded = _reflect_pad_hw(image, ph, pw) if (ph or pw) else image
    out = np.zeros(padded.shape[-2:], dtype=np.int64)
    for y in range(0, padded.shape[-2], tile):
        for x in range(0, padded.shape[-1], tile):
            probs = infer_tile(model, padded[:, y : y + tile, x : x + tile], crop.eval_resize)
            out[y : y + tile, x : x + tile] = probs.argmax(axis=0)
    return out[:h, :w]


def sr_reconstruction(model: SrsModel, image: np.ndarray) -> np.ndarray:
    """Super-resolve the downsampled image back to its own size: R(down(I))."""
    _, h, w = image.shape
    ratio = model.config.scale_ratio
    dh, dw = scaled_size(h, 1 / ratio), scaled_size(w, 1 / ratio)
    down = nnops.resize(Tensor(image[None]), dh, dw, "bicubic")
    feats = model.extract(down)
    sr, _ = model.super_resolve(feats, scaled_size(dh, ratio), scaled_size(dw, ratio))
    if sr.shape[2] != h or sr.shape[3] != w:
        sr = nnops.resize(sr, h, w, "bicubic")
    return sr.data[0]


@dataclass
class MetricsReport:
    class_names: list[str]
    per_class_iou: list[float]
    miou: float
    pixel_acc: float
    psnr_db: float | None = None
    psnr_bicubic_db: float | None = None
    confusion: ConfusionMatrix | None = field(default=None, repr=False)

    def to_csv(self) -> str:
        lines = ["class,iou"]
        for name, value in zip(self.class_names, self.per_class_iou):
            lines.append(f"{name},{value:.6f}" if not math.isnan(value) else f"{name},nan")
        lines.append(f"miou,{self.miou:.6f}")
        if self.psnr_db is not None:
            lines.append(f"psnr_db,{cap_db(self.psnr_db):.6f}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        width = max(len(n) for n in self.class_names + ["pixel_acc"])
        rows = [f"{n:<{width}}  {v:7.4f}" if not math.isnan(v) else f"{n:<{width}}   (absent)"
                for n, v in zip(self.class_names, self.per_class_iou)]
        rows.append(f"{'mIoU':<{width}}  {self.miou:7.4f}")
        rows.append(f"{'pixel_acc':<{width}}  {self.pixel_acc:7.4f}")
        if self.psnr_db is not None:
            rows.append(f"{'psnr_db':<{width}}  {cap_db(self.psnr_db):7.2f}")
            if self.psnr_bicubic_db is not None:
                rows.append(f"{'psnr_bicubic':<{width}}  {cap_db(self.psnr_bicubic_db):7.2f}")
        return "\n".join(rows)


def evaluate(model: SrsModel, dataset: DomainDataset, crop: CropSpec,
             split: str = "val", with_psnr: bool = True) -> MetricsReport:
    """Global-confusion metrics over a labeled target split, plus SR PSNR."""
    items = dataset.split("target", split)
    if not items:
        raise ValueError(f"no target items in split {split!r}")
    conf = ConfusionMatrix(dataset.num_classes)
    psnrs, base_psnrs = [], []
    for item in items:
        image = item.load_image()
        truth = item.load_label()
        pred = sliding_window_infer(model, image, crop)
        if pred.shape != truth.shape:
            raise ValueError(
                f"prediction {pred.shape} does not match label {truth.shape}: {item.label_path}"
            )
        conf.update(truth, pred)
        if with_psnr:
            sr = sr_reconstruction(model, image)
            psnrs.append(cap_db(psnr(sr, image)))
            _, h, w = image.shape
            ratio = model.config.scale_ratio
            down = nnops.resize(Tensor(image[None]), scaled_size(h, 1 / ratio),
                                scaled_size(w, 1 / ratio), "bicubic")
            up = nnops.resize(down, h, w, "bicubic").data[0]
            base_psnrs.append(cap_db(psnr(up, image)))
    vals = [iou(conf, k) for k in range(dataset.num_classes)]
    return MetricsReport(
        class_names=list(dataset.classes),
        per_class_iou=vals,
        miou=miou(conf),
        pixel_acc=pixel_accuracy(conf),
        psnr_db=float(np.mean(psnrs)) if psnrs else None,
        psnr_bicubic_db=float(np.mean(base_psnrs)) if base_psnrs else None,
        confusion=conf,
    )
