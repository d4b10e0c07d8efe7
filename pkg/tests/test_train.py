"""Trainer tests: schedule endpoints, decoupled decay, clipping, counter-based
augmentation, bit-exact determinism, and the logging/checkpoint surface."""

import math

import numpy as np
import pytest

from glottisnet import data as D
from glottisnet import network as N
from glottisnet import train as TR
from glottisnet.assign import AssignerConfig
from glottisnet.errors import ConfigError, NumericError
from glottisnet.rng import counter_stream, substream
from glottisnet.tensor import Tensor, set_debug_checks

MICRO = N.ModelConfig(base_channels=4, neck_channels=16, num_classes=4, mask_protos=4)
ACFG = AssignerConfig()


def tiny_dataset(count=4, seed=5):
    spec = D.SyntheticSceneSpec(
        seed=seed, area_fraction_range=(0.05, 0.3), illumination_range=(0.5, 1.0)
    )
    records, images = [], []
    for i in range(count):
        img, insts = D.generate_scene(spec, substream(spec.seed, f"scene:{i}"))
        records.append(D.SceneRecord(i, f"{i:06d}.ppm", spec.height, spec.width, insts))
        images.append((img.astype(np.float32) / 255.0).transpose(2, 0, 1))
    return records, images


class TestCosineSchedule:
    def test_endpoints(self):
        assert TR.cosine_lr(5e-4, 0, 100) == pytest.approx(5e-4)
        assert TR.cosine_lr(5e-4, 100, 100) == pytest.approx(0.0, abs=1e-20)

    def test_midpoint(self):
        assert TR.cosine_lr(1.0, 50, 100) == pytest.approx(0.5)

    def test_monotone_nonincreasing(self):
        values = [TR.cosine_lr(5e-4, t, 200) for t in range(201)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestAdamW:
    def test_untouched_parameter_shrinks_by_decay_factor(self):
        p = Tensor(np.full(3, 2.0), requires_grad=True)
        opt = TR.AdamW([("p", p)], weight_decay=0.05)
        lr = 1e-3
        opt.step(lr)
        assert np.allclose(p.data, 2.0 * (1 - lr * 0.05), rtol=0, atol=0)
        opt.step(lr)
        assert np.allclose(p.data, 2.0 * (1 - lr * 0.05) ** 2, rtol=0, atol=0)

    def test_gradient_drives_update(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = TR.AdamW([("p", p)], weight_decay=0.0)
        p.grad = np.array([1.0, -1.0])
        opt.step(0.01)
        assert p.data[0] < 0 < p.data[1]

    def test_zero_grad_clears(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = TR.AdamW([("p", p)], weight_decay=0.0)
        p.grad = np.ones(2)
        opt.zero_grad()
        assert p.grad is None


class TestGradClip:
    def test_large_norm_scaled_down(self):
        p = Tensor(np.zeros(4), requires_grad=True)
        p.grad = np.full(4, 100.0)
        norm = TR.clip_grad_norm([("p", p)], max_norm=35.0)
        assert norm == pytest.approx(200.0)
        assert np.linalg.norm(p.grad) == pytest.approx(35.0)

    def test_small_norm_untouched(self):
        p = Tensor(np.zeros(4), requires_grad=True)
        p.grad = np.full(4, 0.1)
        TR.clip_grad_norm([("p", p)], max_norm=35.0)
        assert np.allclose(p.grad, 0.1)


class TestAugmentation:
    def test_counter_stream_reproducible(self):
        img = np.random.default_rng(0).uniform(0, 1, (3, 16, 16)).astype(np.float32)
        cfg = TR.TrainConfig()
        a = TR.photometric_distortion(img, counter_stream(7, "augment", 42), cfg)
        b = TR.photometric_distortion(img, counter_stream(7, "augment", 42), cfg)
        assert np.array_equal(a, b)
        c = TR.photometric_distortion(img, counter_stream(7, "augment", 43), cfg)
        assert not np.array_equal(a, c)

    def test_output_range_and_dtype(self):
        img = np.random.default_rng(1).uniform(0, 1, (3, 16, 16)).astype(np.float32)
        cfg = TR.TrainConfig(aug_prob=1.0)
        out = TR.photometric_distortion(img, counter_stream(1, "augment", 0), cfg)
        assert out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_prob_zero_is_identity(self):
        img = np.random.default_rng(2).uniform(0, 1, (3, 8, 8)).astype(np.float32)
        cfg = TR.TrainConfig(aug_prob=0.0)
        out = TR.photometric_distortion(img, counter_stream(1, "augment", 0), cfg)
        assert np.array_equal(out, img)


class TestTrainStep:
    def test_losses_finite_and_logged(self):
        records, images = tiny_dataset(2)
        model = N.build_model(MICRO, seed=1)
        opt = TR.AdamW(model.trainable_tensors(), weight_decay=0.05)
        parts = TR.train_step(
            model, opt, np.stack(images), [r.instances for r in records],
            ACFG, TR.TrainConfig(), lr=5e-4,
        )
        for key in ("cls", "box", "mask", "total", "grad_norm", "lr"):
            assert key in parts
            assert math.isfinite(parts[key])
        assert parts["total"] >= 0

    def test_bit_identical_trajectory_for_same_seed(self):
        records, images = tiny_dataset(4)
        insts = [r.instances for r in records]

        def run():
            model = N.build_model(MICRO, seed=9)
            opt = TR.AdamW(model.trainable_tensors(), weight_decay=0.05)
            out = []
            for step in range(3):
                parts = TR.train_step(
                    model, opt, np.stack(images), insts, ACFG, TR.TrainConfig(), lr=5e-4
                )
                out.append(parts["total"])
            return out

        assert run() == run()

    def test_nonfinite_loss_aborts_with_diagnostic(self):
        records, images = tiny_dataset(2)
        model = N.build_model(MICRO, seed=1)
        model.stem.weight.data[:] = np.nan
        opt = TR.AdamW(model.trainable_tensors(), weight_decay=0.05)
        set_debug_checks(False)  # reach train_step's own finiteness check
        try:
            with pytest.raises(NumericError):
                TR.train_step(
                    model, opt, np.stack(images), [r.instances for r in records],
                    ACFG, TR.TrainConfig(), lr=5e-4,
                )
        finally:
            set_debug_checks(True)

    def test_images_not_modified(self):
        records, images = tiny_dataset(2)
        batch = np.stack(images)
        snapshot = batch.copy()
        model = N.build_model(MICRO, seed=2)
        opt = TR.AdamW(model.trainable_tensors(), weight_decay=0.05)
        TR.train_step(model, opt, batch, [r.instances for r in records], ACFG, TR.TrainConfig(), lr=5e-4)
        assert np.array_equal(batch, snapshot)


class TestTrainLoop:
    def test_log_checkpoint_and_history(self, tmp_path):
        records, images = tiny_dataset(4)
        model = N.build_model(MICRO, seed=3)
        tcfg = TR.TrainConfig(epochs=2, batch_size=2, seed=3)
        history = TR.train_model(
            model, records, images, records, images, ACFG, tcfg, out_dir=tmp_path
        )
        log = (tmp_path / "training_log.tsv").read_text().splitlines()
        assert log[0] == TR.LOG_HEADER
        assert len(log) == 3  # header + one line per epoch
        assert (tmp_path / "best.ckpt").exists()
        assert len(history["epochs"]) == 2
        loaded = N.load_checkpoint(tmp_path / "best.ckpt")
        assert loaded.cfg == model.cfg

    def test_early_stop_on_targets(self, tmp_path):
        records, images = tiny_dataset(4)
        model = N.build_model(MICRO, seed=4)
        tcfg = TR.TrainConfig(
            epochs=50, batch_size=2, seed=4, target_mdice=-1.0, target_ap50=-1.0
        )
        history = TR.train_model(
            model, records, images, records, images, ACFG, tcfg, out_dir=tmp_path
        )
        assert len(history["epochs"]) == 1  # targets met at the first eval

    def test_empty_training_set_rejected(self):
        model = N.build_model(MICRO, seed=5)
        with pytest.raises(ConfigError):
            TR.train_model(model, [], [], [], [], ACFG, TR.TrainConfig())


class TestEvaluate:
    def test_report_fields_in_range(self):
        records, images = tiny_dataset(4)
        model = N.build_model(MICRO, seed=6)
        report = TR.evaluate_model(model, records, images, full=True)
        assert report.num_classes == 4
        assert 0 <= report.mdice <= 1
        assert 0 <= report.miou <= 1
        assert math.isnan(report.det_map) or 0 <= report.det_map <= 1
