"""Resize, softmax, instance norm, and pixel NLL behavior."""

import numpy as np
import pytest

from crossres import nnops
from crossres.tensor import ShapeError, Tensor


class TestResize:
    @pytest.mark.parametrize("mode", ["nearest", "bilinear", "bicubic"])
    @pytest.mark.parametrize("size", [(5, 9), (16, 16), (7, 3)])
    def test_constant_image_stays_constant(self, mode, size):
        x = Tensor(np.full((1, 2, 8, 6), 0.4375, np.float32))
        y = nnops.resize(x, *size, mode)
        assert y.shape == (1, 2, *size)
        assert np.array_equal(y.data, np.full((1, 2, *size), 0.4375, np.float32))

    def test_nearest_creates_no_new_values(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 5, (1, 1, 13, 17)).astype(np.float32)
        up = nnops.resize(Tensor(labels), 29, 31, "nearest")
        assert set(np.unique(up.data)) <= set(np.unique(labels))

    def test_label_resize_preserves_value_set(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 4, (13, 17)).astype(np.uint8)
        up = nnops.resize_labels(labels, 40, 40)
        down = nnops.resize_labels(up, 13, 17)
        assert set(np.unique(up)) <= set(np.unique(labels))
        assert set(np.unique(down)) <= set(np.unique(labels))

    def test_mass_protocol_shape(self):
        x = Tensor(np.random.rand(1, 3, 380, 380).astype(np.float32))
        y = nnops.resize(x, 114, 114, "bicubic")
        assert y.shape == (1, 3, 114, 114)

    def test_up_down_roundtrip_preserves_constant_exactly(self):
        x = Tensor(np.full((2, 3, 8, 8), 1.2345678, np.float32))
        up = nnops.resize(x, 16, 16, "bilinear")
        back = nnops.resize(up, 8, 8, "bilinear")
        assert np.array_equal(back.data, x.data)

    def test_batch_row_independence(self):
        rng = np.random.default_rng(2)
        a = rng.random((1, 3, 10, 10)).astype(np.float32)
        b = rng.random((1, 3, 10, 10)).astype(np.float32)
        both = nnops.resize(Tensor(np.concatenate([a, b])), 7, 13, "bicubic").data
        alone = nnops.resize(Tensor(a), 7, 13, "bicubic").data
        assert np.array_equal(both[:1], alone)


class TestLogSoftmax:
    def test_constant_logits_uniform(self):
        x = Tensor(np.full((1, 4, 3, 3), 2.5, np.float32))
        p = np.exp(nnops.log_softmax_channel(x).data)
        assert np.allclose(p, 0.25, atol=1e-7)

    def test_closed_form_two_class(self):
        logits = np.zeros((1, 2, 1, 1), np.float32)
        logits[0, 1] = np.log(3.0)
        p = np.exp(nnops.log_softmax_channel(Tensor(logits)).data)
        assert np.allclose(p[0, 0], 0.25, atol=1e-6)
        assert np.allclose(p[0, 1], 0.75, atol=1e-6)

    def test_normalization_random(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 6, 8, 8)).astype(np.float32))
        p = np.exp(nnops.log_softmax_channel(x).data)
        assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-6

    def test_stable_for_large_magnitude(self):
        x = Tensor(np.array([[[[1e4]], [[-1e4]]]], np.float32))
        y = nnops.log_softmax_channel(x)
        assert np.isfinite(y.data).all()

    def test_requires_two_channels(self):
        with pytest.raises(ShapeError):
            nnops.log_softmax_channel(Tensor(np.zeros((1, 1, 2, 2), np.float32)))


class TestInstanceNorm:
    def test_constant_channel_maps_to_zero(self):
        x = Tensor(np.full((1, 2, 4, 4), 3.0, np.float32))
        y = nnops.instance_norm(x)
        assert np.allclose(y.data, 0.0)

    def test_standardized_channel_fixed_point(self):
        rng = np.random.default_rng(0)
        v = rng.standard_normal((1, 1, 32, 32)).astype(np.float32)
        v = (v - v.mean()) / v.std()
        y = nnops.instance_norm(Tensor(v))
        assert np.abs(y.data - v).max() < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_two_pass_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        y = nnops.instance_norm(Tensor(x), eps=1e-5).data
        for n in range(2):
            for c in range(3):
                plane = x[n, c].astype(np.float64)
                ref = (plane - plane.mean()) / np.sqrt(plane.var() + 1e-5)
                assert np.allclose(y[n, c], ref, atol=1e-5)
        assert np.abs(y.mean(axis=(2, 3))).max() < 1e-4
        assert np.abs(y.var(axis=(2, 3)) - 1.0).max() < 1e-3

    def test_rejects_single_pixel(self):
        with pytest.raises(ShapeError):
            nnops.instance_norm(Tensor(np.zeros((1, 1, 1, 1), np.float32)))


class TestNll:
    def test_ignore_and_out_of_range(self):
        logp = nnops.log_softmax_channel(Tensor(np.zeros((1, 3, 2, 2), np.float32)))
        labels = np.array([[[0, 255], [2, 1]]])
        loss = nnops.nll_2d(logp, labels)
        assert np.isclose(loss.item(), np.log(3.0), atol=1e-6)
        with pytest.raises(ValueError, match="outside"):
            nnops.nll_2d(logp, np.array([[[0, 3], [2, 1]]]))
        with pytest.raises(ValueError, match="no valid"):
            nnops.nll_2d(logp, np.full((1, 2, 2), 255))

    def test_argmax_channel(self):
        x = np.zeros((1, 3, 2, 2), np.float32)
        x[0, 2, 0, 0] = 5.0
        x[0, 1, 1, 1] = 5.0
        am = nnops.argmax_channel(Tensor(x))
        assert am[0, 0, 0] == 2 and am[0, 1, 1] == 1
        assert am.shape == (1, 2, 2)
