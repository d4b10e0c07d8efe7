"""Network assembly tests: seeded determinism, shape contracts, decode
behavior, an independent parameter ledger, structural head constraints, and
checkpoint round trips."""

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glottisnet import network as N
from glottisnet import tensor as T
from glottisnet.errors import ConfigError, DataError
from glottisnet.gradcheck import max_relative_error
from glottisnet.tensor import Tensor

FIXTURES = Path(__file__).parent / "fixtures"

MICRO = N.ModelConfig(base_channels=4, neck_channels=8, num_classes=2, mask_protos=4)


def random_image(rng, n=1, size=64, dtype=np.float32):
    return Tensor(rng.uniform(0, 1, (n, 3, size, size)).astype(dtype))


class TestBuild:
    def test_same_seed_bit_identical(self):
        m1 = N.build_model(MICRO, seed=7)
        m2 = N.build_model(MICRO, seed=7)
        for (n1, t1), (n2, t2) in zip(m1.named_tensors(), m2.named_tensors()):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data), n1

    def test_different_seed_differs(self):
        m1 = N.build_model(MICRO, seed=7)
        m2 = N.build_model(MICRO, seed=8)
        assert not np.array_equal(m1.stem.weight.data, m2.stem.weight.data)

    def test_heads_are_1x1_only(self):
        model = N.build_model(N.ModelConfig(), seed=0)
        assert model.head_kernel_sizes() == [(1, 1)] * 5

    def test_cls_bias_encodes_low_foreground_prior(self):
        model = N.build_model(MICRO, seed=0)
        p = 1.0 / (1.0 + np.exp(-model.head_cls.bias.data))
        assert np.allclose(p, 0.01, atol=1e-6)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigError):
            N.ModelConfig(stage_multipliers=(1, 2, 3))
        with pytest.raises(ConfigError):
            N.ModelConfig(strides=(4, 8, 16))
        with pytest.raises(ConfigError):
            N.ModelConfig(score_thresh=1.5)


class TestForward:
    def test_grid_shapes_64(self):
        rng = np.random.default_rng(0)
        model = N.build_model(MICRO, seed=1)
        preds = model(random_image(rng, n=1, size=64))
        assert [t.shape for t in preds.cls_logits] == [
            (1, 2, 8, 8), (1, 2, 4, 4), (1, 2, 2, 2)]
        assert [t.shape for t in preds.box_offsets] == [
            (1, 4, 8, 8), (1, 4, 4, 4), (1, 4, 2, 2)]
        assert preds.prototypes.shape == (1, 4, 8, 8)

    def test_neck_outputs_share_channel_width(self):
        model = N.build_model(MICRO, seed=1)
        record = {}
        rng = np.random.default_rng(1)
        model(random_image(rng), record=record)
        widths = {t.shape[1] for t in record.values()}
        assert widths == {MICRO.neck_channels}
        assert len(record) == 4  # one map per neck block

    def test_box_offsets_nonnegative(self):
        rng = np.random.default_rng(2)
        model = N.build_model(MICRO, seed=2)
        preds = model(random_image(rng))
        for t in preds.box_offsets:
            assert t.data.min() >= 0.0

    def test_eval_forward_deterministic(self):
        rng = np.random.default_rng(3)
        model = N.build_model(MICRO, seed=3)
        img = random_image(rng)
        a = model(img).cls_logits[0].data
        b = model(img).cls_logits[0].data
        assert np.array_equal(a, b)

    def test_bad_divisibility_rejected(self):
        model = N.build_model(MICRO, seed=4)
        with pytest.raises(ConfigError):
            model(Tensor(np.zeros((1, 3, 60, 64), dtype=np.float32)))

    @settings(max_examples=8, deadline=None)
    @given(size=st.sampled_from([64, 96, 128, 160, 192, 224, 256]))
    def test_shape_contract_across_sizes(self, size):
        rng = np.random.default_rng(size)
        model = N.build_model(MICRO, seed=5)
        preds = model(random_image(rng, size=size))
        for level, s in enumerate(MICRO.strides):
            assert preds.cls_logits[level].shape == (1, 2, size // s, size // s)
        assert preds.prototypes.shape == (1, 4, size // 8, size // 8)

    def test_golden_fixture_forward(self):
        img = T.load_tensor(FIXTURES / "model_in.gnt")
        cfg = N.ModelConfig(base_channels=8, num_classes=4, mask_protos=4, neck_channels=16)
        model = N.build_model(cfg, seed=999)
        preds = model(img)
        for name, got in [
            ("model_cls_p3.gnt", preds.cls_logits[0]),
            ("model_box_p5.gnt", preds.box_offsets[2]),
            ("model_protos.gnt", preds.prototypes),
        ]:
            expected = T.load_tensor(FIXTURES / name)
            assert np.allclose(got.data, expected.data, atol=1e-12), name


class TestPriors:
    def test_priors_align_with_flattened_maps(self):
        pts = N.prior_points(MICRO, 64, 64)
        assert len(pts) == 8 * 8 + 4 * 4 + 2 * 2
        assert (pts[0].x, pts[0].y, pts[0].stride) == (4.0, 4.0, 8)
        assert (pts[1].x, pts[1].y) == (12.0, 4.0)  # row-major: x advances first
        assert pts[64].stride == 16
        assert pts[-1].stride == 32

    def test_decode_boxes_round_trip(self):
        priors = N.prior_arrays(MICRO, 64, 64)
        offs = np.ones((84, 4))
        boxes = N.decode_boxes_np(offs, priors)
        assert np.allclose(boxes[0], [4 - 8, 4 - 8, 4 + 8, 4 + 8])
        t_boxes = N.decode_boxes_tensor(Tensor(offs), priors)
        assert np.allclose(t_boxes.data, boxes)


def crafted_predictions(cfg, hot=None, coef_hot=None, big_boxes=False):
    """Minimal RawPredictions with every logit at -10 except requested spots."""
    levels = [(64 // s, 64 // s) for s in cfg.strides]
    cls_maps, box_maps, coef_maps = [], [], []
    for hl, wl in levels:
        cls_maps.append(np.full((1, cfg.num_classes, hl, wl), -10.0, dtype=np.float32))
        box_maps.append(np.full((1, 4, hl, wl), 16.0 if big_boxes else 1.2, dtype=np.float32))
        coef_maps.append(np.zeros((1, cfg.mask_protos, hl, wl), dtype=np.float32))
    for level, cls_idx, i, j, value in hot or []:
        cls_maps[level][0, cls_idx, i, j] = value
    rng = np.random.default_rng(123)
    protos = rng.uniform(0.5, 2.0, (1, cfg.mask_protos, 8, 8))
    protos[:, :, ::2, ::3] *= -1  # sign structure, bounded away from zero
    for level, k, i, j, value in coef_hot or []:
        coef_maps[level][0, k, i, j] = value
    return N.RawPredictions(
        [Tensor(m) for m in cls_maps],
        [Tensor(m) for m in box_maps],
        [Tensor(m) for m in coef_maps],
        Tensor(protos.astype(np.float32)),
        cfg.strides,
    )


class TestDecodeDetections:
    def test_duplicate_boxes_one_survives_nms(self):
        # two adjacent priors with identical decoded boxes and high scores
        preds = crafted_predictions(MICRO, hot=[(0, 0, 3, 3, 8.0), (0, 0, 3, 4, 7.0)])
        # same decoded box: give both priors box offsets meeting at same xyxy
        preds.box_offsets[0].data[0, :, 3, 3] = [2.0, 2.0, 2.0, 2.0]
        preds.box_offsets[0].data[0, :, 3, 4] = [3.0, 2.0, 1.0, 2.0]
        dets = N.decode_detections(preds, MICRO, (64, 64))[0]
        assert len(dets) == 1
        assert dets[0].score == pytest.approx(1 / (1 + np.exp(-8.0)), abs=1e-6)

    def test_all_below_threshold_empty(self):
        preds = crafted_predictions(MICRO)
        dets = N.decode_detections(preds, MICRO, (64, 64))[0]
        assert dets == []

    def test_one_hot_coefficient_reproduces_prototype(self):
        k = 2
        preds = crafted_predictions(
            MICRO, hot=[(0, 1, 4, 4, 9.0)], coef_hot=[(0, k, 4, 4, 1000.0)], big_boxes=True
        )
        dets = N.decode_detections(preds, MICRO, (64, 64))[0]
        assert len(dets) == 1
        proto = preds.prototypes.data[0, k]
        expected = N.bilinear_resize((proto > 0).astype(np.float64), 64, 64) > 0.5
        assert np.array_equal(dets[0].mask, expected)

    @pytest.mark.parametrize("seed", range(5))
    def test_decoded_boxes_always_valid(self, seed):
        rng = np.random.default_rng(seed)
        model = N.build_model(MICRO, seed=seed)
        preds = model(random_image(rng))
        dets = N.decode_detections(preds, MICRO, (64, 64), score_thresh=0.0)[0]
        for d in dets:
            x1, y1, x2, y2 = d.box
            assert 0 <= x1 < x2 <= 64
            assert 0 <= y1 < y2 <= 64

    def test_detections_sorted_and_capped(self):
        cfg = N.ModelConfig(
            base_channels=4, neck_channels=8, num_classes=2, mask_protos=4, max_detections=3
        )
        hot = [(0, 0, i, j, 5.0) for i in range(4) for j in range(4)]
        preds = crafted_predictions(cfg, hot=hot)
        dets = N.decode_detections(preds, cfg, (64, 64))[0]
        assert len(dets) <= 3
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)


def ledger_param_count(cfg: N.ModelConfig) -> int:
    """Independent closed-form parameter ledger for the architecture."""

    def conv(i, o, k, norm=True, groups=1):
        return o * (i // groups) * k * k + (2 * o if norm else o)

    def dwsep(i, o, k):
        return conv(i, i, k, groups=i) + conv(i, o, 1)

    def attention(c, r=4):
        h = max(1, c // r)
        return (h * c + h) + (c * h + c)

    def srm(i, o, with_shortcut=True, dw=True):
        m = max(1, o // 2)
        total = conv(i, m, 3) + 2 * conv(m, m, 3)
        if with_shortcut:
            total += dwsep(i, o - m, 5) if dw else conv(i, o - m, 5)
            merged = o
        else:
            merged = m
        return total + attention(merged, cfg.attention_reduction) + conv(merged, o, 1)

    def sppf(i, o):
        return conv(i, i // 2, 1) + conv(4 * (i // 2), o, 1)

    c = cfg.base_channels
    s = [c * m for m in cfg.stage_multipliers]
    w = cfg.neck_channels
    dw = cfg.depthwise_neck
    total = conv(3, c, 3)
    total += conv(c, s[0], 3) + srm(s[0], s[0], dw=dw)
    total += conv(s[0], s[1], 3) + srm(s[1], s[1], dw=dw)
    total += conv(s[1], s[2], 3) + srm(s[2], s[2], dw=dw)
    total += conv(s[2], s[3], 3) + srm(s[3], s[3], dw=dw) + sppf(s[3], s[3])
    total += conv(s[1], w, 1) + conv(s[2], w, 1) + conv(s[3], w, 1)
    total += 2 * srm(2 * w, w, dw=dw)
    total += 2 * srm(2 * w, w, with_shortcut=not cfg.reduced_shortcut, dw=dw)
    if dw:
        total += 2 * dwsep(w, w, 3) + 3 * dwsep(w, w, 3)
    else:
        total += 2 * conv(w, w, 3) + 3 * conv(w, w, 3)
    total += conv(w, cfg.num_classes, 1, norm=False)
    total += conv(w, 4, 1, norm=False)
    total += conv(w, cfg.mask_protos, 1, norm=False)
    total += conv(w, w, 1, norm=False) + conv(w, cfg.mask_protos, 1, norm=False)
    return total


class TestAccounting:
    @pytest.mark.parametrize(
        "cfg",
        [
            MICRO,
            N.ModelConfig(),
            N.ModelConfig(depthwise_neck=False),
            N.ModelConfig(reduced_shortcut=False),
            N.ModelConfig(base_channels=8, num_classes=3, mask_protos=6, neck_channels=24),
        ],
        ids=["micro", "default", "standard-conv", "full-shortcut", "odd"],
    )
    def test_param_count_matches_independent_ledger(self, cfg):
        model = N.build_model(cfg, seed=0)
        assert model.param_count() == ledger_param_count(cfg)

    def test_param_count_excludes_running_stats(self):
        model = N.build_model(MICRO, seed=0)
        trainable = sum(t.size for _, t in model.named_tensors() if t.requires_grad)
        assert model.param_count() == trainable

    def test_depthwise_neck_strictly_cheaper(self):
        a = N.count_params_flops(N.ModelConfig(depthwise_neck=True))
        b = N.count_params_flops(N.ModelConfig(depthwise_neck=False))
        assert a["params"] < b["params"]
        assert a["flops"] < b["flops"]

    def test_flops_scale_with_area(self):
        cfg = MICRO
        f1 = N.count_params_flops(cfg, 64, 64)["flops"]
        f2 = N.count_params_flops(cfg, 128, 128)["flops"]
        assert f2 == 4 * f1


class TestEndToEndGradients:
    def test_summed_logits_finite_difference(self):
        # Through ~25 stacked nonlinear layers the FD residual is pure O(h^2)
        # truncation; assert a tight bound at small h plus the quadratic decay
        # that certifies the tape gradient is the h->0 limit.
        rng = np.random.default_rng(99)
        model = N.GlottisNet(MICRO, np.random.default_rng(1), dtype=np.float64)
        img = Tensor(rng.uniform(0.2, 0.8, (1, 3, 32, 32)))
        probes = [model.stem.weight, model.head_cls.bias, model.out3.pointwise.scale]

        def loss_fn(*_):
            preds = model(img, training=True)
            return sum((t.sum() for t in preds.cls_logits), preds.prototypes.sum() * 0.1)

        err_coarse = max_relative_error(loss_fn, probes, h=1e-5)
        err_fine = max_relative_error(loss_fn, probes, h=1e-6)
        assert err_fine < 1e-4
        assert err_fine < err_coarse / 10


class TestActivationDump:
    def test_one_file_per_neck_block_and_deterministic(self, tmp_path):
        rng = np.random.default_rng(11)
        model = N.build_model(MICRO, seed=11)
        img = random_image(rng)
        paths1 = N.dump_activations(model, img, tmp_path / "a")
        paths2 = N.dump_activations(model, img, tmp_path / "b")
        assert len(paths1) == 4
        for p1, p2 in zip(paths1, paths2):
            assert p1.read_bytes() == p2.read_bytes()

    def test_minmax_normalized_to_full_range(self, tmp_path):
        from glottisnet.data import read_pgm

        rng = np.random.default_rng(12)
        model = N.build_model(MICRO, seed=12)
        paths = N.dump_activations(model, random_image(rng), tmp_path)
        img = read_pgm(paths[0])
        assert img.min() == 0 and img.max() == 255


class TestCheckpoint:
    def test_round_trip_identical_forward(self, tmp_path):
        rng = np.random.default_rng(21)
        model = N.build_model(MICRO, seed=21)
        img = random_image(rng)
        # perturb running stats so buffers round-trip too
        model(img, training=True)
        before = model(img).cls_logits[0].data
        path = tmp_path / "model.ckpt"
        N.save_checkpoint(model, path)
        loaded = N.load_checkpoint(path)
        after = loaded(img).cls_logits[0].data
        assert np.array_equal(before, after)
        assert loaded.cfg == model.cfg

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 100)
        with pytest.raises(DataError):
            N.load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        model = N.build_model(MICRO, seed=1)
        path = tmp_path / "model.ckpt"
        N.save_checkpoint(model, path)
        path.write_bytes(path.read_bytes()[:-64])
        with pytest.raises(Exception):
            N.load_checkpoint(path)

    def test_corrupt_config_rejected(self, tmp_path):
        model = N.build_model(MICRO, seed=1)
        path = tmp_path / "model.ckpt"
        N.save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[16] ^= 0xFF  # inside the config JSON blob
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError):
            N.load_checkpoint(path)
