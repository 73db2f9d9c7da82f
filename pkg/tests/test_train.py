"""Training steps, alternation contracts, checkpoints, and determinism."""

import numpy as np
import pytest

from crossres.config import load_config, make_synth_config, make_train_config
from crossres.data import build_dataset, load_dataset
from crossres.losses import LossWeights
from crossres.train import (Checkpoint, CheckpointArrayError,
                            CheckpointFormatError, CheckpointTruncatedError,
                            CheckpointVersionError, NumericalAbort, TrainState,
                            adversarial_step, load_checkpoint, load_models,
                            pretrain_step, restore, run_training,
                            save_checkpoint, snapshot)

BASE = {
    "model": {"num_classes": 4, "scale_ratio": "2", "base_channels": 8},
    "data": {"canvas_px": 128, "train_scenes": 6, "val_scenes": 2},
    "train": {"source_crop": 32, "target_crop": 64, "pretrain_iters": 1,
              "main_iters": 1, "batch_size": 2, "checkpoint_every": 0,
              "debug_isolation": True},
    "eval": {"eval_tile": 128, "eval_resize": 64},
}


def make_cfg(**train_overrides):
    cfg = {k: dict(v) for k, v in BASE.items()}
    cfg["train"] = {**BASE["train"], **train_overrides}
    return load_config(None, cfg)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainds")
    build_dataset(root, make_synth_config(load_config(None, BASE)), seed=0)
    return load_dataset(root)


def params_snapshot(store):
    return {n: t.data.copy() for n, t in store.items()}


def assert_params_equal(before, store):
    for n, t in store.items():
        assert np.array_equal(before[n], t.data), n


def assert_params_changed(before, store):
    assert any(not np.array_equal(before[n], t.data) for n, t in store.items())


class TestPretrainStep:
    def test_seg_head_untouched_and_sr_updates(self, dataset):
        state = TrainState(make_train_config(make_cfg()), dataset)
        seg_before = params_snapshot(state.bundle.srs.seg_head)
        odc_before = params_snapshot(state.bundle.odc.params)
        sr_before = params_snapshot(state.bundle.srs.sr_decoder)
        report = pretrain_step(state, state.next_batch())
        assert_params_equal(seg_before, state.bundle.srs.seg_head)
        assert_params_equal(odc_before, state.bundle.odc.params)
        assert_params_changed(sr_before, state.bundle.srs.sr_decoder)
        assert report.all_finite()
        assert report.seg == 0.0 and report.odc == 0.0
        assert report.gen_total == pytest.approx(
            10.0 * (report.idT + report.idS) + report.pdc, rel=1e-5)

    def test_zero_objective_leaves_sr_branch_bitwise_unchanged(self, dataset):
        """beta = 0 and zeroed discriminator weights give exactly zero grads."""
        cfg = make_train_config(make_cfg(beta=0.0))
        state = TrainState(cfg, dataset)
        for _, t in state.bundle.pdc.params.items():
            t.data[:] = 0.0
        before = params_snapshot(state.bundle.srs.sr_branch_params())
        pretrain_step(state, state.next_batch())
        assert_params_equal(before, state.bundle.srs.sr_branch_params())

    def test_fifty_steps_halve_reconstruction_loss(self, dataset):
        cfg = make_train_config(make_cfg(batch_size=1))
        state = TrainState(cfg, dataset)
        batch = state.next_batch()
        first = pretrain_step(state, batch)
        start = first.idT + first.idS
        last = first
        for _ in range(49):
            last = pretrain_step(state, batch)
        assert (last.idT + last.idS) <= 0.5 * start


class TestAdversarialStep:
    def test_alternation_contract(self, dataset):
        state = TrainState(make_train_config(make_cfg(pretrain_iters=0)), dataset)
        gen_before = params_snapshot(state.bundle.srs.generator_params())
        disc_before = params_snapshot(state.bundle.discriminator_params())
        report = adversarial_step(state, state.next_batch())
        # debug_isolation already asserts the sub-step invariants internally
        assert_params_changed(gen_before, state.bundle.srs.generator_params())
        assert_params_changed(disc_before, state.bundle.discriminator_params())
        assert report.all_finite()

    def test_flags_off_is_pure_supervised_step(self, dataset):
        cfg = make_train_config(make_cfg(use_pdc=False, use_odc=False,
                                         pretrain_iters=0))
        state = TrainState(cfg, dataset)
        disc_before = params_snapshot(state.bundle.discriminator_params())
        report = adversarial_step(state, state.next_batch())
        assert_params_equal(disc_before, state.bundle.discriminator_params())
        assert report.pdc == 0.0 and report.odc == 0.0
        assert report.disc_total == 0.0
        assert report.gen_total == pytest.approx(report.srs, rel=1e-6)

    def test_report_totals_equal_component_sums(self, dataset):
        state = TrainState(make_train_config(make_cfg(pretrain_iters=0)), dataset)
        r = adversarial_step(state, state.next_batch())
        assert r.gen_total == pytest.approx(r.srs + r.pdc + r.odc, rel=1e-6)
        assert r.disc_total == pytest.approx(r.pdc_inv + r.odc_inv, rel=1e-6)
        assert r.srs == pytest.approx(
            2.5 * r.seg + 10.0 * (r.idT + r.idS), rel=1e-5)

    def test_single_ablation_updates_only_enabled_discriminator(self, dataset):
        cfg = make_train_config(make_cfg(use_pdc=True, use_odc=False,
                                         pretrain_iters=0))
        state = TrainState(cfg, dataset)
        odc_before = params_snapshot(state.bundle.odc.params)
        pdc_before = params_snapshot(state.bundle.pdc.params)
        r = adversarial_step(state, state.next_batch())
        assert_params_equal(odc_before, state.bundle.odc.params)
        assert_params_changed(pdc_before, state.bundle.pdc.params)
        assert r.odc == 0.0 and r.odc_inv == 0.0

    def test_nan_batch_aborts_with_report(self, dataset):
        state = TrainState(make_train_config(make_cfg(pretrain_iters=0)), dataset)
        i_s, a_s, i_t, d_t = state.next_batch()
        i_s = i_s.copy()
        i_s[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericalAbort) as exc:
            adversarial_step(state, (i_s, a_s, i_t, d_t))
        assert not exc.value.report.all_finite()


def test_overfit_single_batch_reaches_low_seg_loss(dataset):
    """Supervised-only training overfits one micro-batch within 500 steps."""
    cfg = make_train_config(make_cfg(use_pdc=False, use_odc=False,
                                     pretrain_iters=0, main_iters=500,
                                     batch_size=1, lr_main=1e-3,
                                     source_crop=16, target_crop=32))
    state = TrainState(cfg, dataset)
    batch = state.next_batch()
    seg = None
    for i in range(500):
        seg = adversarial_step(state, batch).seg
        if seg < 0.05:
            break
    assert seg < 0.05, f"seg loss stuck at {seg:.4f}"


class TestCheckpoint:
    def test_round_trip_bitwise(self, dataset, tmp_path):
        state = TrainState(make_train_config(make_cfg()), dataset)
        pretrain_step(state, state.next_batch())
        ckpt = snapshot(state)
        path = tmp_path / "ck.bin"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.iteration == ckpt.iteration
        assert loaded.phase == ckpt.phase
        assert set(loaded.arrays) == set(ckpt.arrays)
        for name, arr in ckpt.arrays.items():
            assert loaded.arrays[name].dtype == arr.dtype
            assert np.array_equal(loaded.arrays[name], arr), name
        assert loaded.config.seed == state.config.seed

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPEnonsense" * 4)
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_version_mismatch(self, dataset, tmp_path):
        state = TrainState(make_train_config(make_cfg()), dataset)
        path = tmp_path / "ck.bin"
        save_checkpoint(snapshot(state), path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_truncation(self, dataset, tmp_path):
        state = TrainState(make_train_config(make_cfg()), dataset)
        path = tmp_path / "ck.bin"
        save_checkpoint(snapshot(state), path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 512])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(path)

    def test_class_count_mismatch_names_array(self, dataset, tmp_path):
        state = TrainState(make_train_config(make_cfg()), dataset)
        path = tmp_path / "ck.bin"
        save_checkpoint(snapshot(state), path)
        ckpt = load_checkpoint(path)
        ckpt.config.model.num_classes = 6
        with pytest.raises(CheckpointArrayError, match="seg.head"):
            load_models(ckpt)

    def test_restore_resumes_iteration(self, dataset, tmp_path):
        state = TrainState(make_train_config(make_cfg()), dataset)
        pretrain_step(state, state.next_batch())
        state.iteration = 1
        ckpt = snapshot(state)
        fresh = TrainState(make_train_config(make_cfg()), dataset)
        restore(fresh, ckpt)
        assert fresh.iteration == 1
        for name, t in fresh.bundle.srs.sr_decoder.items():
            assert np.array_equal(t.data, state.bundle.srs.sr_decoder[name].data)


class TestRunTraining:
    def test_zero_iterations_emit_initial_checkpoint_only(self, dataset, tmp_path):
        cfg = make_train_config(make_cfg(pretrain_iters=0, main_iters=0))
        final, metrics = run_training(cfg, dataset, tmp_path)
        assert (tmp_path / "ckpt_initial.bin").exists()
        assert (tmp_path / "ckpt_final.bin").exists()
        assert metrics.read_text().strip() == (
            "iter,phase,seg,idT,idS,fp,pdc,pdc_inv,odc,odc_inv,gen_total,disc_total")
        assert final.iteration == 0

    def test_metrics_csv_deterministic_across_runs(self, dataset, tmp_path):
        cfg_dict = make_cfg(pretrain_iters=2, main_iters=2, seed=3)
        a, _ = run_training(make_train_config(cfg_dict), dataset, tmp_path / "a")
        b, _ = run_training(make_train_config(cfg_dict), dataset, tmp_path / "b")
        csv_a = (tmp_path / "a" / "metrics.csv").read_bytes()
        csv_b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert csv_a == csv_b
        for name, arr in a.arrays.items():
            assert np.array_equal(arr, b.arrays[name]), name

    def test_phase_column_and_rows(self, dataset, tmp_path):
        cfg = make_train_config(make_cfg(pretrain_iters=2, main_iters=3))
        _, metrics = run_training(cfg, dataset, tmp_path)
        rows = metrics.read_text().strip().split("\n")
        assert len(rows) == 6
        assert rows[1].split(",")[1] == "pretrain"
        assert rows[3].split(",")[1] == "main"
        assert [r.split(",")[0] for r in rows[1:]] == ["1", "2", "3", "4", "5"]

    def test_resume_continues_to_total(self, dataset, tmp_path):
        cfg = make_train_config(make_cfg(pretrain_iters=1, main_iters=3,
                                         checkpoint_every=2))
        final, _ = run_training(cfg, dataset, tmp_path / "x")
        mid = load_checkpoint(tmp_path / "x" / "ckpt_000002.bin")
        resumed, _ = run_training(cfg, dataset, tmp_path / "y", resume_from=mid)
        assert resumed.iteration == 4
