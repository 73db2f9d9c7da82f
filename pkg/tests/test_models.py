"""Network shape contracts, parameter counts, determinism, and isolation."""

import numpy as np
import pytest

from crossres import nnops
from crossres.losses import pdc_losses
from crossres.models import ModelConfig, OdcModel, PdcModel, SrsModel, scaled_size, as_ratio
from crossres.optim import AdamState, adam_step
from crossres.tensor import ShapeError, Tape, Tensor, mean_all, square


@pytest.fixture(scope="module")
def small_model():
    return SrsModel(ModelConfig(num_classes=4, scale_ratio="2", base_channels=8), seed=0)


def test_ratio_parsing_and_scaled_size():
    assert scaled_size(114, as_ratio("10/3")) == 380
    assert scaled_size(160, as_ratio(2)) == 320
    assert scaled_size(380, 1 / as_ratio("10/3")) == 114


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(num_classes=1, scale_ratio=2)
    with pytest.raises(ValueError):
        ModelConfig(num_classes=2, scale_ratio=1)
    with pytest.raises(ValueError):
        ModelConfig(num_classes=2, scale_ratio=2, base_channels=4)


def test_extractor_shape_contract():
    model = SrsModel(ModelConfig(num_classes=2, scale_ratio="10/3"), seed=0)
    x = Tensor(np.random.default_rng(0).random((1, 3, 114, 114)).astype(np.float32))
    feats = model.extract(x)
    assert feats.shape == (1, 128, 114, 114)


def test_extractor_rejects_wrong_channels(small_model):
    with pytest.raises(ShapeError):
        small_model.extract(Tensor(np.zeros((1, 1, 32, 32), np.float32)))


def test_forwards_are_pure(small_model):
    x = Tensor(np.random.default_rng(1).random((2, 3, 32, 32)).astype(np.float32))
    a = small_model.extract(x)
    b = small_model.extract(x)
    assert np.array_equal(a.data, b.data)


def test_same_seed_same_parameters():
    cfg = ModelConfig(num_classes=4, scale_ratio=2, base_channels=8)
    m1, m2 = SrsModel(cfg, seed=7), SrsModel(cfg, seed=7)
    for s1, s2 in zip(m1.all_stores().values(), m2.all_stores().values()):
        for (n1, t1), (n2, t2) in zip(s1.items(), s2.items()):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data)
    m3 = SrsModel(cfg, seed=8)
    assert not np.array_equal(m1.extractor["stem.weight"].data,
                              m3.extractor["stem.weight"].data)


def extractor_param_count(base: int, blocks: int, in_ch: int = 3) -> int:
    stem = base * in_ch * 9 + base
    block = 2 * (base * base * 9 + base)
    fuse = (blocks * base) * (4 * base) + 4 * base
    return stem + blocks * block + fuse


def test_extractor_parameter_count_closed_form():
    for base in (8, 32):
        cfg = ModelConfig(num_classes=4, scale_ratio=2, base_channels=base)
        model = SrsModel(cfg, seed=0)
        assert model.extractor.total_parameters() == extractor_param_count(base, 4)


def test_sr_decoder_shapes_both_protocols():
    # 10/3 ratio: 114 -> 380 with two x2 stages then rational resize
    m = SrsModel(ModelConfig(num_classes=2, scale_ratio="10/3", base_channels=8), seed=0)
    feats = m.extract(Tensor(np.random.rand(1, 3, 114, 114).astype(np.float32)))
    sr, pyramid = m.super_resolve(feats, 380, 380)
    assert sr.shape == (1, 3, 380, 380)
    assert [p.shape[2] for p in pyramid] == [228, 456]
    # 2x ratio: 160 -> 320 with one stage
    m2 = SrsModel(ModelConfig(num_classes=6, scale_ratio=2, base_channels=8), seed=0)
    feats2 = m2.extract(Tensor(np.random.rand(1, 3, 160, 160).astype(np.float32)))
    sr2, pyr2 = m2.super_resolve(feats2, 320, 320)
    assert sr2.shape == (1, 3, 320, 320)
    assert [p.shape[2] for p in pyr2] == [320]


def test_sr_output_strictly_inside_unit_interval(small_model):
    x = Tensor(np.random.default_rng(2).random((2, 3, 32, 32)).astype(np.float32))
    feats = small_model.extract(x)
    sr, _ = small_model.super_resolve(feats, 64, 64)
    assert sr.data.min() > 0.0 and sr.data.max() < 1.0


def test_sr_rejects_shrinking_target(small_model):
    feats = small_model.extract(Tensor(np.zeros((1, 3, 32, 32), np.float32)))
    with pytest.raises(ValueError):
        small_model.super_resolve(feats, 16, 16)


def test_zero_features_give_constant_image(small_model):
    feats = Tensor(np.zeros((1, 32, 16, 16), np.float32))
    sr, _ = small_model.super_resolve(feats, 32, 32)
    for c in range(3):
        channel = sr.data[0, c]
        assert np.all(channel == channel.reshape(-1)[0])
    assert 0.0 < sr.data.min() and sr.data.max() < 1.0


def test_seg_head_shapes_and_empty_pyramid():
    m = SrsModel(ModelConfig(num_classes=2, scale_ratio="10/3", base_channels=8), seed=0)
    x = Tensor(np.random.rand(1, 3, 114, 114).astype(np.float32))
    feats = m.extract(x)
    _, pyramid = m.super_resolve(feats, 380, 380)
    logits = m.segment(feats, pyramid, 380, 380)
    assert logits.shape == (1, 2, 380, 380)
    logits_alone = m.segment(feats, [], 380, 380)
    assert logits_alone.shape == (1, 2, 380, 380)


@pytest.mark.parametrize("seed", range(5))
def test_seg_logits_finite_for_unit_inputs(seed, small_model):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.random((1, 3, 24, 24)).astype(np.float32))
    feats = small_model.extract(x)
    sr, pyr = small_model.super_resolve(feats, 48, 48)
    logits = small_model.segment(feats, pyr, 48, 48)
    assert np.isfinite(logits.data).all()
    assert np.abs(logits.data).max() < 1e4


def test_forward_pair_protocol_shapes():
    m = SrsModel(ModelConfig(num_classes=6, scale_ratio=2, base_channels=8), seed=0)
    rng = np.random.default_rng(0)
    i_s = Tensor(rng.random((1, 3, 160, 160)).astype(np.float32))
    i_t = Tensor(rng.random((1, 3, 160, 160)).astype(np.float32))
    out = m.forward_pair(i_s, i_t)
    assert out.sr_source.shape == (1, 3, 320, 320)
    assert out.sr_target.shape == (1, 3, 320, 320)
    assert out.p_source.shape == (1, 6, 320, 320)
    assert out.p_target.shape == (1, 6, 320, 320)
    for p in (out.p_source, out.p_target):
        assert np.abs(p.data.sum(axis=1) - 1.0).max() < 1e-6
    labels = nnops.argmax_channel(out.p_target)
    assert labels.min() >= 0 and labels.max() <= 5


def test_forward_pair_shape_mismatch(small_model):
    a = Tensor(np.zeros((1, 3, 32, 32), np.float32))
    b = Tensor(np.zeros((1, 3, 16, 16), np.float32))
    with pytest.raises(ShapeError):
        small_model.forward_pair(a, b)


class TestPdc:
    def test_patch_grid_shape(self):
        pdc = PdcModel(seed=0)
        out = pdc(Tensor(np.random.rand(2, 3, 320, 320).astype(np.float32)))
        assert out.shape == (2, 1, 20, 20)
        out64 = pdc(Tensor(np.random.rand(1, 3, 64, 64).astype(np.float32)))
        assert out64.shape == (1, 1, 4, 4)

    def test_deterministic(self):
        pdc = PdcModel(seed=0)
        x = Tensor(np.random.default_rng(0).random((1, 3, 64, 64)).astype(np.float32))
        assert np.array_equal(pdc(x).data, pdc(x).data)

    def test_rejects_small_input(self):
        pdc = PdcModel(seed=0)
        with pytest.raises(ShapeError, match="receptive"):
            pdc(Tensor(np.zeros((1, 3, 32, 32), np.float32)))

    def test_parameter_count_closed_form(self):
        pdc = PdcModel(seed=0)
        chans = [3, 64, 128, 256, 512, 1]
        expected = sum(chans[i + 1] * chans[i] * 16 + chans[i + 1] for i in range(5))
        assert pdc.params.total_parameters() == expected

    def test_translation_covariance(self):
        """A 16px shift of content moves the patch grid by exactly one cell."""
        pdc = PdcModel(seed=3)
        rng = np.random.default_rng(5)
        content = rng.random((1, 3, 64, 64)).astype(np.float32)
        a = np.zeros((1, 3, 160, 160), np.float32)
        b = np.zeros((1, 3, 160, 160), np.float32)
        a[:, :, 32:96, 32:96] = content
        b[:, :, 48:112, 32:96] = content  # +16 rows
        ya = pdc(Tensor(a)).data
        yb = pdc(Tensor(b)).data
        # compare only cells whose ~94px receptive field stays inside the image
        assert np.abs(yb[0, 0, 4:7, 3:6] - ya[0, 0, 3:6, 3:6]).max() < 1e-4
        # and that the unshifted alignment does NOT match
        assert np.abs(yb[0, 0, 4:7, 3:6] - ya[0, 0, 4:7, 3:6]).max() > 0.1


class TestOdc:
    def test_score_grid_shape(self):
        odc = OdcModel(num_classes=6, seed=0)
        out = odc(Tensor(np.random.rand(1, 6, 320, 320).astype(np.float32)))
        assert out.shape == (1, 1, 10, 10)

    def test_uniform_map_finite(self):
        odc = OdcModel(num_classes=4, seed=0)
        p = Tensor(np.full((1, 4, 64, 64), 0.25, np.float32))
        assert np.isfinite(odc(p).data).all()

    def test_class_count_mismatch(self):
        odc = OdcModel(num_classes=4, seed=0)
        with pytest.raises(ShapeError):
            odc(Tensor(np.zeros((1, 6, 64, 64), np.float32)))

    def test_parameter_count_closed_form(self):
        for c in (2, 4, 6):
            odc = OdcModel(num_classes=c, seed=0)
            chans = [c, 64, 128, 256, 512, 1]
            expected = sum(chans[i + 1] * chans[i] * 16 + chans[i + 1] for i in range(5))
            assert odc.params.total_parameters() == expected


def test_generator_discriminator_gradient_isolation(small_model):
    """Frozen discriminator gets no grads from the generator objective, and
    the detached-generator discriminator step leaves generator grads absent."""
    pdc = PdcModel(seed=1)
    rng = np.random.default_rng(0)
    img_s = Tensor(rng.random((1, 3, 32, 32)).astype(np.float32))
    img_t = Tensor(rng.random((1, 3, 64, 64)).astype(np.float32))

    pdc.params.set_trainable(False)
    with Tape() as tape:
        feats = small_model.extract(img_s)
        sr, _ = small_model.super_resolve(feats, 64, 64)
        gen_loss, _ = pdc_losses(pdc, sr, img_t)
        tape.backward(gen_loss)
    pdc.params.set_trainable(True)
    for name, p in pdc.params.items():
        assert p.grad is None, name
    gen = small_model.generator_params()
    assert any(p.grad is not None for _, p in gen.items())
    gen.zero_grads()

    with Tape() as tape:
        _, disc_loss = pdc_losses(pdc, sr.detach(), img_t)
        tape.backward(disc_loss)
    for name, p in gen.items():
        assert p.grad is None, name
    assert all(p.grad is not None for _, p in pdc.params.items())


def test_frozen_perceptual_net_never_updates(small_model):
    x = Tensor(np.random.default_rng(3).random((1, 3, 64, 64)).astype(np.float32))
    before = {n: t.data.copy() for n, t in small_model.perceptual.items()}
    with Tape() as tape:
        emb = small_model.perceptual_features(x)
        tape.backward(mean_all(square(emb)))
    for n, t in small_model.perceptual.items():
        assert t.grad is None
        assert np.array_equal(t.data, before[n])
