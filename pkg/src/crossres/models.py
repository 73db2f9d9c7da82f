"""Network definitions: the SR+segmentation generator and both discriminators.

The generator shares one feature extractor (stem + dilated residual blocks)
between a deconvolution SR decoder and an FPN-style segmentation head. The
pixel discriminator is a PatchGAN over RGB images; the output-space
discriminator scores softmax maps through five stride-2 convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import nnops
from .optim import ParamStore
from .tensor import (ShapeError, Tensor, concat_channels, he_uniform,
                     leaky_relu, pad2d, sigmoid)

LEAK = 0.2


def _center(x: Tensor) -> Tensor:
    """Map [0,1] image input onto [-1,1] before the first convolution."""
    return (x - 0.5) * 2.0


def as_ratio(value) -> Fraction:
    """Normalize a resolution ratio ('10/3', 2, 3.5, Fraction) to a Fraction."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        if "/" in value:
            num, den = value.split("/")
            return Fraction(int(num), int(den))
        return Fraction(value)
    if isinstance(value, int):
        return Fraction(value)
    return Fraction(value).limit_denominator(1000)


def scaled_size(size: int, ratio: Fraction) -> int:
    """Round size * ratio half-up, exactly in rational arithmetic."""
    return int(size * ratio + Fraction(1, 2))


@dataclass
class ModelConfig:
    num_classes: int
    scale_ratio: Fraction
    base_channels: int = 32
    aspp_dilations: tuple = (1, 2, 4, 8)
    image_channels: int = 3

    def __post_init__(self):
        self.scale_ratio = as_ratio(self.scale_ratio)
        if self.scale_ratio <= 1:
            raise ValueError(f"scale_ratio must be > 1, got {self.scale_ratio}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_channels < 8:
            raise ValueError(f"base_channels must be >= 8, got {self.base_channels}")
        self.aspp_dilations = tuple(int(d) for d in self.aspp_dilations)

    @property
    def upsample_stages(self) -> int:
        """Number of x2 deconvolution stages needed to reach the scale ratio."""
        n = 1
        while Fraction(2) ** n < self.scale_ratio:
            n += 1
        return n

    def decoder_channels(self) -> list[int]:
        chans = []
        ch = 4 * self.base_channels
        for _ in range(self.upsample_stages):
            ch = max(ch // 2, 16)
            chans.append(ch)
        return chans


def _add_conv(store: ParamStore, name: str, cin: int, cout: int, k: int,
              rng: np.random.Generator, trainable: bool = True) -> None:
    store.add(f"{name}.weight", he_uniform(rng, (cout, cin, k, k), fan_in=cin * k * k),
              trainable=trainable)
    store.add(f"{name}.bias", np.zeros(cout, dtype=np.float32), trainable=trainable)


def _add_deconv(store: ParamStore, name: str, cin: int, cout: int, k: int,
                rng: np.random.Generator) -> None:
    store.add(f"{name}.weight", he_uniform(rng, (cin, cout, k, k), fan_in=cin * k * k))
    store.add(f"{name}.bias", np.zeros(cout, dtype=np.float32))


def _conv(store: ParamStore, name: str, x: Tensor, stride: int = 1, padding: int = 0,
          dilation: int = 1) -> Tensor:
    return nnops.conv2d(x, store[f"{name}.weight"], store[f"{name}.bias"],
                        stride=stride, padding=padding, dilation=dilation)


def _deconv(store: ParamStore, name: str, x: Tensor, stride: int = 2,
            padding: int = 1) -> Tensor:
    return nnops.conv_transpose2d(x, store[f"{name}.weight"], store[f"{name}.bias"],
                                  stride=stride, padding=padding)


@dataclass
class SrsForward:
    """Per-batch products of the generator: SR images, logits, softmax maps."""

    sr_source: Tensor
    sr_target: Tensor
    logits_source: Tensor
    logits_target: Tensor
    p_source: Tensor
    p_target: Tensor


class SrsModel:
    """Shared extractor + SR decoder + segmentation head (+ frozen feature net)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        base = config.base_channels
        root = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x5152])
        rng_e, rng_r, rng_s, rng_p = [np.random.default_rng(s) for s in root.spawn(4)]

        e = ParamStore()
        _add_conv(e, "stem", config.image_channels, base, 3, rng_e)
        for i, _ in enumerate(config.aspp_dilations):
            _add_conv(e, f"block{i}.conv1", base, base, 3, rng_e)
            _add_conv(e, f"block{i}.conv2", base, base, 3, rng_e)
        _add_conv(e, "fuse", base * len(config.aspp_dilations), 4 * base, 1, rng_e)
        self.extractor = e

        r = ParamStore()
        ch = 4 * base
        for j, cout in enumerate(config.decoder_channels()):
            _add_deconv(r, f"up{j}", ch, cout, 4, rng_r)
            ch = cout
        _add_conv(r, "to_rgb", ch, config.image_channels, 3, rng_r)
        self.sr_decoder = r

        s = ParamStore()
        _add_conv(s, "lateral_base", 4 * base, base, 1, rng_s)
        for j, cj in enumerate(config.decoder_channels()):
            _add_conv(s, f"lateral{j}", cj, base, 1, rng_s)
        _add_conv(s, "head", base, config.num_classes, 3, rng_s)
        self.seg_head = s

        p = ParamStore()
        _add_conv(p, "c0", config.image_channels, 32, 3, rng_p, trainable=False)
        _add_conv(p, "c1", 32, 64, 3, rng_p, trainable=False)
        _add_conv(p, "c2", 64, 64, 3, rng_p, trainable=False)
        self.perceptual = p

    # -- parameter groupings ------------------------------------------------

    def generator_params(self) -> ParamStore:
        """All trainable generator parameters (extractor + SR + seg head)."""
        return ParamStore.union(self._named("extractor", self.extractor),
                                self._named("sr", self.sr_decoder),
                                self._named("seg", self.seg_head))

    def sr_branch_params(self) -> ParamStore:
        """Extractor + SR decoder, the set updated during pretraining."""
        return ParamStore.union(self._named("extractor", self.extractor),
                                self._named("sr", self.sr_decoder))

    def all_stores(self) -> dict[str, ParamStore]:
        return {"extractor": self.extractor, "sr": self.sr_decoder,
                "seg": self.seg_head, "perceptual": self.perceptual}

    @staticmethod
    def _named(prefix: str, store: ParamStore) -> ParamStore:
        out = ParamStore()
        for name, t in store.items():
            out._params[f"{prefix}.{name}"] = t
        return out

    # -- forwards -------------------------------------------------------------

    def extract(self, x: Tensor) -> Tensor:
        """Shared features at input resolution: (N, 4*base, h, w)."""
        if x.ndim != 4 or x.shape[1] != self.config.image_channels:
            raise ShapeError(
                f"extract: expected (N,{self.config.image_channels},h,w) input, got {x.shape}"
            )
        e = self.extractor
        t = leaky_relu(_conv(e, "stem", _center(x), padding=1), LEAK)
        outs = []
        for i, d in enumerate(self.config.aspp_dilations):
            u = leaky_relu(_conv(e, f"block{i}.conv1", t, padding=d, dilation=d), LEAK)
            u = _conv(e, f"block{i}.conv2", u, padding=d, dilation=d)
            t = leaky_relu(t + u, LEAK)
            outs.append(t)
        return leaky_relu(_conv(e, "fuse", concat_channels(outs)), LEAK)

    def super_resolve(self, features: Tensor, target_h: int, target_w: int):
        """SR image in (0,1) plus the decoder feature pyramid (low to high)."""
        h, w = features.shape[2], features.shape[3]
        if target_h < h or target_w < w:
            raise ValueError(
                f"super_resolve: target {target_h}x{target_w} smaller than input {h}x{w}"
            )
        r = self.sr_decoder
        t = features
        pyramid = []
        for j in range(self.config.upsample_stages):
            t = leaky_relu(_deconv(r, f"up{j}", t), LEAK)
            pyramid.append(t)
        if t.shape[2] != target_h or t.shape[3] != target_w:
            t = nnops.resize(t, target_h, target_w, "bilinear")
        img = sigmoid(_conv(r, "to_rgb", t, padding=1))
        return img, pyramid

    def segment(self, features: Tensor, pyramid: list[Tensor], target_h: int,
                target_w: int) -> Tensor:
        """Class logits at (target_h, target_w); empty pyramid skips laterals."""
        s = self.seg_head
        t = _conv(s, "lateral_base", features)
        for j, p in enumerate(pyramid):
            if p.shape[0] != t.shape[0]:
                raise ShapeError(
                    f"segment: pyramid stage {j} batch {p.shape[0]} != features {t.shape[0]}"
                )
            t = nnops.resize(t, p.shape[2], p.shape[3], "bilinear")
            t = t + _conv(s, f"lateral{j}", p)
        if t.shape[2] != target_h or t.shape[3] != target_w:
            t = nnops.resize(t, target_h, target_w, "bilinear")
        return _conv(s, "head", leaky_relu(t, LEAK), padding=1)

    def forward_pair(self, img_source: Tensor, img_target_down: Tensor) -> SrsForward:
        """Run both low-resolution crops through SR and segmentation streams."""
        if img_source.shape != img_target_down.shape:
            raise ShapeError(
                f"forward_pair: source {img_source.shape} and downsampled target "
                f"{img_target_down.shape} crops must match"
            )
        h, w = img_source.shape[2], img_source.shape[3]
        ratio = self.config.scale_ratio
        th, tw = scaled_size(h, ratio), scaled_size(w, ratio)
        feats_s = self.extract(img_source)
        sr_s, pyr_s = self.super_resolve(feats_s, th, tw)
        logits_s = self.segment(feats_s, pyr_s, th, tw)
        feats_t = self.extract(img_target_down)
        sr_t, pyr_t = self.super_resolve(feats_t, th, tw)
        logits_t = self.segment(feats_t, pyr_t, th, tw)
        return SrsForward(
            sr_source=sr_s, sr_target=sr_t,
            logits_source=logits_s, logits_target=logits_t,
            p_source=nnops.softmax_channel(logits_s),
            p_target=nnops.softmax_channel(logits_t),
        )

    def perceptual_features(self, x: Tensor) -> Tensor:
        """Frozen random-feature embedding used by the perceptual loss."""
        p = self.perceptual
        t = leaky_relu(_conv(p, "c0", _center(x), stride=2, padding=1), LEAK)
        t = leaky_relu(_conv(p, "c1", t, stride=2, padding=1), LEAK)
        return leaky_relu(_conv(p, "c2", t, stride=2, padding=1), LEAK)


class PdcModel:
    """PatchGAN image discriminator: one raw score per 16x16 input patch."""

    CHANNELS = (64, 128, 256, 512)

    def __init__(self, seed: int = 0, image_channels: int = 3):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x9DC]))
        self.params = ParamStore()
        cin = image_channels
        for i, cout in enumerate(self.CHANNELS):
            _add_conv(self.params, f"c{i}", cin, cout, 4, rng)
            cin = cout
        _add_conv(self.params, "out", cin, 1, 4, rng)
        self.image_channels = image_channels

    def __call__(self, img: Tensor) -> Tensor:
        if img.ndim != 4 or img.shape[1] != self.image_channels:
            raise ShapeError(f"pdc: expected (N,{self.image_channels},H,W), got {img.shape}")
        if img.shape[2] < 64 or img.shape[3] < 64:
            raise ShapeError(
                f"pdc: input {img.shape[2]}x{img.shape[3]} is smaller than the "
                f"64x64 receptive field"
            )
        t = _center(img)
        for i in range(len(self.CHANNELS)):
            t = _conv(self.params, f"c{i}", t, stride=2, padding=1)
            if i > 0:
                t = nnops.instance_norm(t)
            t = leaky_relu(t, LEAK)
        # even-kernel 'same' conv: pad (1,2) per axis, then k4 s1
        t = pad2d(t, (1, 2, 1, 2))
        return _conv(self.params, "out", t, stride=1, padding=0)


class OdcModel:
    """Output-space discriminator over softmax maps: 5 stride-2 convolutions."""

    CHANNELS = (64, 128, 256, 512, 1)

    def __init__(self, num_classes: int, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x0DC]))
        self.params = ParamStore()
        self.num_classes = num_classes
        cin = num_classes
        for i, cout in enumerate(self.CHANNELS):
            _add_conv(self.params, f"c{i}", cin, cout, 4, rng)
            cin = cout

    def __call__(self, p: Tensor) -> Tensor:
        if p.ndim != 4 or p.shape[1] != self.num_classes:
            raise ShapeError(
                f"odc: expected (N,{self.num_classes},H,W) softmax map, got {p.shape}"
            )
        t = p
        last = len(self.CHANNELS) - 1
        for i in range(len(self.CHANNELS)):
            t = _conv(self.params, f"c{i}", t, stride=2, padding=1)
            if i < last:
                t = leaky_relu(t, LEAK)
        return t


@dataclass
class ModelBundle:
    """Everything trained together: generator plus both discriminators."""

    srs: SrsModel
    pdc: PdcModel
    odc: OdcModel

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "ModelBundle":
        return cls(
            srs=SrsModel(config, seed=seed),
            pdc=PdcModel(seed=seed + 1),
            odc=OdcModel(config.num_classes, seed=seed + 2),
        )

    def discriminator_params(self) -> ParamStore:
        return ParamStore.union(SrsModel._named("pdc", self.pdc.params),
                                SrsModel._named("odc", self.odc.params))
