"""Training objectives: supervised, reconstruction, and adversarial losses.

All functions are pure: they run whatever forward passes they need and
return scalar tensors, so each can be recomputed independently to verify
the composed objectives. Image up/downsampling uses bicubic interpolation;
label maps always move by nearest-neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from . import nnops
from .models import SrsModel, scaled_size
from .tensor import (Tensor, clamp_min, concat_batch, log, mean_all, mse, l1,
                     scale, sigmoid, slice_batch, square)

LOG_CLAMP = 1e-7


@dataclass
class LossWeights:
    alpha: float = 2.5
    beta: float = 10.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossReport:
    """Scalar summary of one optimization step."""

    seg: float = 0.0
    idT: float = 0.0
    idS: float = 0.0
    fp: float = 0.0
    srs: float = 0.0
    pdc: float = 0.0
    pdc_inv: float = 0.0
    odc: float = 0.0
    odc_inv: float = 0.0
    gen_total: float = 0.0
    disc_total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def all_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.as_dict().values())


def cross_entropy_2d(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean pixel-wise cross entropy of integer labels against (N,C,H,W) logits."""
    return nnops.nll_2d(nnops.log_softmax_channel(logits), labels, ignore_index)


def _down_size(size: int, model: SrsModel) -> int:
    return scaled_size(size, 1 / model.config.scale_ratio)


def idT_loss(model: SrsModel, img_target: Tensor) -> Tensor:
    """Reconstruction MSE of the SR stream on a downsampled target crop."""
    th, tw = img_target.shape[2], img_target.shape[3]
    down = nnops.resize(img_target, _down_size(th, model), _down_size(tw, model), "bicubic")
    feats = model.extract(down)
    sr, _ = model.super_resolve(feats, th, tw)
    return mse(sr, img_target)


def perceptual_loss(phi: Callable[[Tensor], Tensor], a: Tensor, b: Tensor) -> Tensor:
    """MSE between frozen feature embeddings of two same-shape images."""
    return mse(phi(a), phi(b))


def fixpoint_loss(model: SrsModel, img_source: Tensor, sr_out: Tensor) -> Tensor:
    """L1 between extractor features of the downsampled SR output and the input."""
    h, w = img_source.shape[2], img_source.shape[3]
    down = nnops.resize(sr_out, h, w, "bicubic")
    return l1(model.extract(down), model.extract(img_source))


def idS_loss(model: SrsModel, img_source: Tensor) -> Tensor:
    """Source-side SR identity: perceptual term plus half the fixpoint term."""
    h, w = img_source.shape[2], img_source.shape[3]
    th, tw = scaled_size(h, model.config.scale_ratio), scaled_size(w, model.config.scale_ratio)
    feats = model.extract(img_source)
    sr, _ = model.super_resolve(feats, th, tw)
    up = nnops.resize(img_source, th, tw, "bicubic")
    per = perceptual_loss(model.perceptual_features, sr, up)
    fp = fixpoint_loss(model, img_source, sr)
    return per + scale(fp, 0.5)


def seg_loss(model: SrsModel, img_source: Tensor, labels_source: np.ndarray,
             ignore_index: int = 255) -> Tensor:
    """Cross entropy on the direct stream plus the resynthesized-image stream."""
    h, w = img_source.shape[2], img_source.shape[3]
    th, tw = scaled_size(h, model.config.scale_ratio), scaled_size(w, model.config.scale_ratio)
    up_labels = nnops.resize_labels(labels_source, th, tw)
    feats = model.extract(img_source)
    sr, pyramid = model.super_resolve(feats, th, tw)
    logits_direct = model.segment(feats, pyramid, th, tw)
    ce_direct = nnops.nll_2d(nnops.log_softmax_channel(logits_direct), up_labels, ignore_index)
    down_sr = nnops.resize(sr, h, w, "bicubic")
    logits_resyn = model.segment(model.extract(down_sr), [], th, tw)
    ce_resyn = nnops.nll_2d(nnops.log_softmax_channel(logits_resyn), up_labels, ignore_index)
    return ce_direct + ce_resyn


def srs_loss(weights: LossWeights, seg: Tensor, idT: Tensor, idS: Tensor) -> Tensor:
    """Weighted multi-task objective: alpha*seg + beta*(idT + idS)."""
    return scale(seg, weights.alpha) + scale(idT + idS, weights.beta)


def pdc_losses(pdc, sr_image: Tensor, img_target: Tensor) -> tuple[Tensor, Tensor]:
    """Least-squares adversarial pair on raw patch scores.

    Returns (generator-side loss, discriminator-side loss): the generator
    pushes SR patches toward the real label 1; the discriminator pushes real
    patches toward 1 and SR patches toward 0.
    """
    n = sr_image.shape[0]
    scores = pdc(concat_batch([sr_image, img_target]))
    fake = slice_batch(scores, 0, n)
    true = slice_batch(scores, n, n + img_target.shape[0])
    gen = mean_all(square(fake - 1.0)) + mean_all(square(true))
    inv = mean_all(square(true - 1.0)) + mean_all(square(fake))
    return gen, inv


def _neg_log(score: Tensor) -> Tensor:
    return scale(log(clamp_min(score, LOG_CLAMP)), -1.0)


def odc_losses(odc, p_source: Tensor, p_target: Tensor) -> tuple[Tensor, Tensor]:
    """Cross-entropy adversarial pair on sigmoid scores of softmax maps.

    Scores read as probability-of-source. The generator-side loss drives
    both maps toward the source label; the discriminator-side loss labels
    source maps 1 and target maps 0.
    """
    n = p_source.shape[0]
    scores = sigmoid(odc(concat_batch([p_source, p_target])))
    s_true = slice_batch(scores, 0, n)
    s_fake = slice_batch(scores, n, n + p_target.shape[0])
    gen = mean_all(_neg_log(s_fake)) + mean_all(_neg_log(s_true))
    inv = mean_all(_neg_log(1.0 - s_fake)) + mean_all(_neg_log(s_true))
    return gen, inv


def generator_objective(srs: Tensor, pdc: Tensor | None, odc: Tensor | None,
                        use_pdc: bool = True, use_odc: bool = True) -> Tensor:
    """Full generator loss; disabled adversarial terms are omitted entirely."""
    total = srs
    if use_pdc:
        if pdc is None:
            raise ValueError("generator_objective: use_pdc set but no pdc term given")
        total = total + pdc
    if use_odc:
        if odc is None:
            raise ValueError("generator_objective: use_odc set but no odc term given")
        total = total + odc
    return total


def discriminator_objective(pdc_inv: Tensor | None, odc_inv: Tensor | None,
                            use_pdc: bool = True, use_odc: bool = True) -> Tensor | None:
    """Joint discriminator loss; None when every branch is disabled."""
    total = None
    if use_pdc:
        if pdc_inv is None:
            raise ValueError("discriminator_objective: use_pdc set but no term given")
        total = pdc_inv
    if use_odc:
        if odc_inv is None:
            raise ValueError("discriminator_objective: use_odc set but no term given")
        total = odc_inv if total is None else total + odc_inv
    return total
