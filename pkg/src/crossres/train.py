"""Two-phase training: SR pretraining, then alternating adversarial updates.

Each iteration is one generator update (discriminators frozen) followed by
one discriminator update on detached generator outputs. Forward products are
shared across loss terms within a step, which keeps reported components
bitwise equal to their standalone recomputations.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses, nnops
from .data import CropSpec, DomainDataset, sample_batch
from .losses import LossReport, LossWeights
from .models import ModelBundle, ModelConfig, scaled_size
from .optim import AdamState, ParamStore, adam_step
from .tensor import Tape, Tensor, concat_batch, l1, mse, scale, slice_batch

METRICS_HEADER = "iter,phase,seg,idT,idS,fp,pdc,pdc_inv,odc,odc_inv,gen_total,disc_total"


class NumericalAbort(RuntimeError):
    """A loss went non-finite; carries the full component report."""

    def __init__(self, report: LossReport, iteration: int, phase: str):
        self.report = report
        self.iteration = iteration
        self.phase = phase
        parts = ", ".join(f"{k}={v:g}" for k, v in report.as_dict().items())
        super().__init__(f"non-finite loss at {phase} iteration {iteration}: {parts}")


@dataclass
class TrainConfig:
    model: ModelConfig
    crop: CropSpec
    weights: LossWeights = field(default_factory=LossWeights)
    lr_pretrain: float = 2e-4
    lr_main: float = 1.5e-4
    adam_beta1: float = 0.9
    batch_size: int = 4
    pretrain_iters: int = 300
    main_iters: int = 1200
    use_pdc: bool = True
    use_odc: bool = True
    seed: int = 0
    checkpoint_every: int = 500
    debug_isolation: bool = False

    def __post_init__(self):
        if self.lr_pretrain <= 0 or self.lr_main <= 0:
            raise ValueError("learning rates must be > 0")
        if self.pretrain_iters < 0 or self.main_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.crop.validate(self.model.scale_ratio)


@contextmanager
def frozen(*stores: ParamStore):
    """Temporarily exclude parameter stores from gradient tracking."""
    for s in stores:
        s.set_trainable(False)
    try:
        yield
    finally:
        for s in stores:
            s.set_trainable(True)


def _assert_no_grads(store: ParamStore, context: str) -> None:
    for name, p in store.items():
        if p.grad is not None:
            raise AssertionError(f"{context}: unexpected gradient on {name}")


class TrainState:
    """Models, optimizer states, and the batch RNG for one training run."""

    def __init__(self, config: TrainConfig, dataset: DomainDataset):
        if dataset.num_classes != config.model.num_classes:
            raise ValueError(
                f"dataset has {dataset.num_classes} classes but model expects "
                f"{config.model.num_classes}"
            )
        if dataset.ratio != config.model.scale_ratio:
            raise ValueError(
                f"dataset resolution ratio {dataset.ratio} does not match model "
                f"scale_ratio {config.model.scale_ratio}"
            )
        self.config = config
        self.dataset = dataset
        self.bundle = ModelBundle.create(config.model, seed=config.seed)
        self.batch_rng = np.random.default_rng(
            np.random.SeedSequence([config.seed & 0xFFFFFFFF, 0xBA7C])
        )
        self.iteration = 0
        self.phase = "pretrain" if config.pretrain_iters > 0 else "main"
        self.opt: dict[str, AdamState] = {}
        self._enter_phase(self.phase)

    # -- phase / optimizer management --------------------------------------

    def _enabled_disc_params(self) -> ParamStore | None:
        stores = []
        if self.config.use_pdc:
            stores.append(self.bundle.srs._named("pdc", self.bundle.pdc.params))
        if self.config.use_odc:
            stores.append(self.bundle.srs._named("odc", self.bundle.odc.params))
        if not stores:
            return None
        return ParamStore.union(*stores)

    def _enter_phase(self, phase: str) -> None:
        """Optimizer states are rebuilt fresh at each phase entry."""
        self.phase = phase
        cfg = self.config
        self.opt = {}
        self.disc_params = self._enabled_disc_params()
        if phase == "pretrain":
            self.opt["sr"] = AdamState(self.bundle.srs.sr_branch_params(),
                                       lr=cfg.lr_pretrain, beta1=cfg.adam_beta1)
            self.opt["pdc"] = AdamState(
                self.bundle.srs._named("pdc", self.bundle.pdc.params),
                lr=cfg.lr_pretrain, beta1=cfg.adam_beta1)
        else:
            self.opt["gen"] = AdamState(self.bundle.srs.generator_params(),
                                        lr=cfg.lr_main, beta1=cfg.adam_beta1)
            if self.disc_params is not None:
                self.opt["disc"] = AdamState(self.disc_params, lr=cfg.lr_main,
                                             beta1=cfg.adam_beta1)

    def next_batch(self):
        return sample_batch(self.dataset, self.config.crop, self.batch_rng,
                            self.config.batch_size)


def _batch_tensors(batch):
    imgs_s, labs_s, imgs_t, downs = batch
    return Tensor(imgs_s), labs_s, Tensor(imgs_t), Tensor(downs)


def pretrain_step(state: TrainState, batch) -> LossReport:
    """One SR-branch update against the frozen pixel discriminator, then one
    discriminator update on the detached SR output. The segmentation head and
    the output-space discriminator are untouched."""
    cfg = state.config
    srs, pdc = state.bundle.srs, state.bundle.pdc
    img_s, _, img_t, img_t_down = _batch_tensors(batch)
    h, w = img_s.shape[2], img_s.shape[3]
    ratio = cfg.model.scale_ratio
    th, tw = scaled_size(h, ratio), scaled_size(w, ratio)

    n = img_s.shape[0]
    with frozen(pdc.params):
        with Tape() as tape:
            both = concat_batch([img_s, img_t_down])
            feats = srs.extract(both)
            sr_both, _ = srs.super_resolve(feats, th, tw)
            sr_s = slice_batch(sr_both, 0, n)
            sr_t = slice_batch(sr_both, n, 2 * n)
            idt = mse(sr_t, img_t)
            up_s = nnops.resize(img_s, th, tw, "bicubic")
            emb = srs.perceptual_features(concat_batch([sr_s, up_s]))
            per = mse(slice_batch(emb, 0, n), slice_batch(emb, n, 2 * n))
            down_sr = nnops.resize(sr_s, h, w, "bicubic")
            fp = l1(srs.extract(down_sr), slice_batch(feats, 0, n))
            ids = per + scale(fp, 0.5)
            pdc_gen, _ = losses.pdc_losses(pdc, sr_s, img_t)
            objective = scale(idt + ids, cfg.weights.beta) + pdc_gen
            tape.backward(objective)
        if cfg.debug_isolation:
            _assert_no_grads(state.bundle.srs._named("seg", srs.seg_head),
                             "pretrain generator step")
            _assert_no_grads(state.bundle.srs._named("pdc", pdc.params),
                             "pretrain generator step")
            _assert_no_grads(state.bundle.srs._named("odc", state.bundle.odc.params),
                             "pretrain generator step")
        adam_step(state.bundle.srs.sr_branch_params(), state.opt["sr"])

    sr_detached = sr_s.detach()
    with Tape() as tape:
        _, pdc_inv = losses.pdc_losses(pdc, sr_detached, img_t)
        tape.backward(pdc_inv)
    if cfg.debug_isolation:
        _assert_no_grads(state.bundle.srs.generator_params(), "pretrain discriminator step")
    adam_step(state.bundle.srs._named("pdc", pdc.params), state.opt["pdc"])

    report = LossReport(
        idT=idt.item(), idS=ids.item(), fp=fp.item(),
        pdc=pdc_gen.item(), pdc_inv=pdc_inv.item(),
        gen_total=objective.item(), disc_total=pdc_inv.item(),
    )
    if not report.all_finite():
        raise NumericalAbort(report, state.iteration, "pretrain")
    return report


def adversarial_step(state: TrainState, batch) -> LossReport:
    """One full alternation: generator update on the joint objective with
    frozen discriminators, then a discriminator update on detached outputs."""
    cfg = state.config
    srs, pdc, odc = state.bundle.srs, state.bundle.pdc, state.bundle.odc
    img_s, labs_s, img_t, img_t_down = _batch_tensors(batch)
    h, w = img_s.shape[2], img_s.shape[3]
    ratio = cfg.model.scale_ratio
    th, tw = scaled_size(h, ratio), scaled_size(w, ratio)
    up_labels = nnops.resize_labels(labs_s, th, tw)

    disc_stores = []
    if cfg.use_pdc:
        disc_stores.append(pdc.params)
    if cfg.use_odc:
        disc_stores.append(odc.params)

    n = img_s.shape[0]
    with frozen(*disc_stores):
        with Tape() as tape:
            both = concat_batch([img_s, img_t_down])
            feats = srs.extract(both)
            sr_both, pyramid = srs.super_resolve(feats, th, tw)
            logits_both = srs.segment(feats, pyramid, th, tw)
            p_both = nnops.softmax_channel(logits_both)
            sr_s = slice_batch(sr_both, 0, n)
            sr_t = slice_batch(sr_both, n, 2 * n)
            logits_s = slice_batch(logits_both, 0, n)
            p_s = slice_batch(p_both, 0, n)
            p_t = slice_batch(p_both, n, 2 * n)

            ce_direct = nnops.nll_2d(nnops.log_softmax_channel(logits_s), up_labels)
            down_sr = nnops.resize(sr_s, h, w, "bicubic")
            feats_resyn = srs.extract(down_sr)
            logits_resyn = srs.segment(feats_resyn, [], th, tw)
            ce_resyn = nnops.nll_2d(nnops.log_softmax_channel(logits_resyn), up_labels)
            seg = ce_direct + ce_resyn

            idt = mse(sr_t, img_t)
            up_s = nnops.resize(img_s, th, tw, "bicubic")
            emb = srs.perceptual_features(concat_batch([sr_s, up_s]))
            per = mse(slice_batch(emb, 0, n), slice_batch(emb, n, 2 * n))
            fp = l1(feats_resyn, slice_batch(feats, 0, n))
            ids = per + scale(fp, 0.5)
            srs_total = losses.srs_loss(cfg.weights, seg, idt, ids)

            pdc_gen = odc_gen = None
            if cfg.use_pdc:
                pdc_gen, _ = losses.pdc_losses(pdc, sr_s, img_t)
            if cfg.use_odc:
                odc_gen, _ = losses.odc_losses(odc, p_s, p_t)
            gen_total = losses.generator_objective(srs_total, pdc_gen, odc_gen,
                                                   cfg.use_pdc, cfg.use_odc)
            tape.backward(gen_total)
        if cfg.debug_isolation:
            _assert_no_grads(state.bundle.srs._named("pdc", pdc.params),
                             "generator step")
            _assert_no_grads(state.bundle.srs._named("odc", odc.params),
                             "generator step")
        adam_step(state.bundle.srs.generator_params(), state.opt["gen"])

    pdc_inv_val = odc_inv_val = 0.0
    disc_total_val = 0.0
    if disc_stores:
        with Tape() as tape:
            pdc_inv = odc_inv = None
            if cfg.use_pdc:
                _, pdc_inv = losses.pdc_losses(pdc, sr_s.detach(), img_t)
            if cfg.use_odc:
                _, odc_inv = losses.odc_losses(odc, p_s.detach(), p_t.detach())
            disc_total = losses.discriminator_objective(pdc_inv, odc_inv,
                                                        cfg.use_pdc, cfg.use_odc)
            tape.backward(disc_total)
        if cfg.debug_isolation:
            _assert_no_grads(state.bundle.srs.generator_params(), "discriminator step")
        adam_step(state.disc_params, state.opt["disc"])
        pdc_inv_val = pdc_inv.item() if pdc_inv is not None else 0.0
        odc_inv_val = odc_inv.item() if odc_inv is not None else 0.0
        disc_total_val = disc_total.item()

    report = LossReport(
        seg=seg.item(), idT=idt.item(), idS=ids.item(), fp=fp.item(),
        srs=srs_total.item(),
        pdc=pdc_gen.item() if pdc_gen is not None else 0.0,
        pdc_inv=pdc_inv_val,
        odc=odc_gen.item() if odc_gen is not None else 0.0,
        odc_inv=odc_inv_val,
        gen_total=gen_total.item(), disc_total=disc_total_val,
    )
    if not report.all_finite():
        raise NumericalAbort(report, state.iteration, "main")
    return report


# -- checkpoints ---------------------------------------------------------------


MAGIC = b"XRCK"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint I/O failures."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointArrayError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    iteration: int
    phase: str
    arrays: dict[str, np.ndarray]
    opt_meta: dict
    version: int = VERSION


def _model_array_items(bundle: ModelBundle):
    yield from (("srs.extractor", bundle.srs.extractor),
                ("srs.sr", bundle.srs.sr_decoder),
                ("srs.seg", bundle.srs.seg_head),
                ("srs.perceptual", bundle.srs.perceptual),
                ("pdc", bundle.pdc.params),
                ("odc", bundle.odc.params))


def snapshot(state: TrainState) -> Checkpoint:
    arrays: dict[str, np.ndarray] = {}
    for prefix, store in _model_array_items(state.bundle):
        for name, t in store.items():
            arrays[f"{prefix}.{name}"] = t.data.copy()
    opt_meta = {}
    for group, adam in state.opt.items():
        opt_meta[group] = {"t": adam.t, "lr": adam.lr, "beta1": adam.beta1,
                           "beta2": adam.beta2, "eps": adam.eps}
        for pname, buf in adam.m.items():
            arrays[f"adam.{group}.m.{pname}"] = buf.copy()
        for pname, buf in adam.v.items():
            arrays[f"adam.{group}.v.{pname}"] = buf.copy()
    return Checkpoint(config=state.config, iteration=state.iteration,
                      phase=state.phase, arrays=arrays, opt_meta=opt_meta)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    from .config import train_config_to_dict

    names = sorted(ckpt.arrays)
    index = []
    for name in names:
        arr = ckpt.arrays[name]
        if arr.dtype.byteorder == ">":
            raise CheckpointFormatError("big-endian arrays are not supported")
        index.append({"name": name, "dtype": arr.dtype.str.replace(">", "<"),
                      "shape": list(arr.shape)})
    header = {
        "config": train_config_to_dict(ckpt.config),
        "iteration": ckpt.iteration,
        "phase": ckpt.phase,
        "opt_meta": ckpt.opt_meta,
        "arrays": index,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(ckpt.arrays[name]).tobytes())


def load_checkpoint(path) -> Checkpoint:
    from .config import train_config_from_dict

    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {VERSION}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointTruncatedError(
                f"{path}: truncated payload at array {entry['name']!r}"
            )
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointTruncatedError(f"{path}: {len(raw) - offset} trailing bytes")
    config = train_config_from_dict(header["config"])
    return Checkpoint(config=config, iteration=header["iteration"], phase=header["phase"],
                      arrays=arrays, opt_meta=header["opt_meta"], version=version)


def restore(state: TrainState, ckpt: Checkpoint) -> None:
    """Load checkpoint arrays into an existing state; shapes must match."""
    for prefix, store in _model_array_items(state.bundle):
        for name, t in store.items():
            key = f"{prefix}.{name}"
            if key not in ckpt.arrays:
                raise CheckpointArrayError(f"checkpoint missing array {key!r}")
            src = ckpt.arrays[key]
            if src.shape != t.data.shape:
                raise CheckpointArrayError(
                    f"array {key!r}: checkpoint shape {src.shape} does not match "
                    f"model shape {t.data.shape}"
                )
            t.data = src.astype(t.data.dtype, copy=True)
    state.iteration = ckpt.iteration
    state.phase = ckpt.phase
    state._enter_phase(ckpt.phase)
    for group, adam in state.opt.items():
        meta = ckpt.opt_meta.get(group)
        if meta is None:
            continue
        adam.t = int(meta["t"])
        for pname in list(adam.m):
            mkey = f"adam.{group}.m.{pname}"
            vkey = f"adam.{group}.v.{pname}"
            if mkey in ckpt.arrays:
                adam.m[pname] = ckpt.arrays[mkey].copy()
                adam.v[pname] = ckpt.arrays[vkey].copy()


# -- the training loop ----------------------------------------------------------


def _format_row(iteration: int, phase: str, r: LossReport) -> str:
    vals = [r.seg, r.idT, r.idS, r.fp, r.pdc, r.pdc_inv, r.odc, r.odc_inv,
            r.gen_total, r.disc_total]
    return f"{iteration},{phase}," + ",".join(f"{v:.6g}" for v in vals)


def run_training(config: TrainConfig, dataset: DomainDataset, out_dir,
                 resume_from: Checkpoint | None = None,
                 progress=None) -> tuple[Checkpoint, Path]:
    """Pretrain then adversarial phases; returns final checkpoint + metrics path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = TrainState(config, dataset)
    if resume_from is not None:
        restore(state, resume_from)
    total = config.pretrain_iters + config.main_iters
    metrics_path = out_dir / "metrics.csv"
    mode = "a" if resume_from is not None and metrics_path.exists() else "w"
    with open(metrics_path, mode) as metrics:
        if mode == "w":
            metrics.write(METRICS_HEADER + "\n")
        if state.iteration == 0:
            save_checkpoint(snapshot(state), out_dir / "ckpt_initial.bin")
        while state.iteration < total:
            pretraining = state.iteration < config.pretrain_iters
            if not pretraining and state.phase == "pretrain":
                state._enter_phase("main")
            batch = state.next_batch()
            state.iteration += 1
            if pretraining:
                report = pretrain_step(state, batch)
            else:
                report = adversarial_step(state, batch)
            metrics.write(_format_row(state.iteration, state.phase, report) + "\n")
            if progress is not None:
                progress(state.iteration, state.phase, report)
            if config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                save_checkpoint(snapshot(state), out_dir / f"ckpt_{state.iteration:06d}.bin")
    final = snapshot(state)
    save_checkpoint(final, out_dir / "ckpt_final.bin")
    return final, metrics_path


def load_models(ckpt: Checkpoint) -> ModelBundle:
    """Build a model bundle from a checkpoint's config and load its weights."""
    bundle = ModelBundle.create(ckpt.config.model, seed=ckpt.config.seed)
    for prefix, store in _model_array_items(bundle):
        for name, t in store.items():
            key = f"{prefix}.{name}"
            if key not in ckpt.arrays:
                raise CheckpointArrayError(f"checkpoint missing array {key!r}")
            src = ckpt.arrays[key]
            if src.shape != t.data.shape:
                raise CheckpointArrayError(
                    f"array {key!r}: checkpoint shape {src.shape} does not match "
                    f"model shape {t.data.shape}"
                )
            t.data = src.astype(t.data.dtype, copy=True)
    return bundle
