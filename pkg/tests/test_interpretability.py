import numpy as np
import numpy.testing as npt
import pytest
import torch
import torch.nn.functional as F

from semattn.errors import FormatError, ShapeError
from semattn.interpretability import (
    ObjectSceneCorrelation,
    accumulate_object_attention,
    cam_weighted_sum,
    compute_cam,
    emit_correlation_report,
    normalize_cam,
    read_cam_binary,
    write_cam_binary,
)
from semattn.score_tensor import sparsify


def one_hot_semantics(label_map, L):
    h, w = label_map.shape
    dense = np.zeros((h, w, L), dtype=np.float32)
    rows, cols = np.mgrid[0:h, 0:w]
    dense[rows, cols, label_map] = 1.0
    return sparsify(dense)


class TestComputeCam:
    def test_single_channel_identity_weighting(self):
        rng = np.random.default_rng(0)
        feats = rng.standard_normal((1, 7, 7))
        cam = compute_cam(feats, np.array([[1.0]]), 0)
        expected = F.interpolate(
            torch.from_numpy(feats[None]).float(), size=(224, 224),
            mode="bilinear", align_corners=False,
        )[0, 0].numpy()
        npt.assert_allclose(cam.values, normalize_cam(expected), atol=1e-6)
        assert cam.values.min() == 0.0 and cam.values.max() == 1.0

    def test_constant_features_collapse_to_zeros(self):
        cam = compute_cam(np.full((3, 5, 5), 2.0), np.ones((2, 3)), 1)
        assert (cam.values == 0).all()

    def test_two_channel_hand_computed_weighted_sum(self):
        f0 = np.array([[1.0, 2.0], [3.0, 4.0]])
        f1 = np.array([[0.5, 0.5], [1.0, 0.0]])
        raw = cam_weighted_sum(np.stack([f0, f1]), np.array([1.0, -1.0]))
        npt.assert_allclose(raw, [[0.5, 1.5], [2.0, 4.0]])

    def test_class_index_range_checked(self):
        with pytest.raises(ValueError):
            compute_cam(np.zeros((2, 3, 3)), np.ones((4, 2)), 4)

    def test_top3_from_log_probs(self):
        lp = np.log([0.5, 0.3, 0.15, 0.05])
        cam = compute_cam(
            np.random.default_rng(1).random((2, 3, 3)), np.ones((4, 2)), 0, log_probs=lp
        )
        assert cam.predicted_class == 0
        assert [t[0] for t in cam.top3] == [0, 1, 2]

    def test_range_invariant_on_random_maps(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            cam = compute_cam(rng.standard_normal((4, 6, 6)), rng.standard_normal((3, 4)), 1)
            assert cam.values.min() == 0.0
            assert cam.values.max() == 1.0
            assert cam.values.shape == (224, 224)


class TestAccumulation:
    def test_zero_cam_leaves_accumulator_unchanged(self):
        acc = ObjectSceneCorrelation(6)
        sem = one_hot_semantics(np.zeros((8, 8), dtype=np.int64), 6)
        accumulate_object_attention(np.zeros((8, 8)), sem, acc)
        assert acc.attention.sum() == 0.0
        assert acc.sample_count == 1

    def test_uniform_cam_counts_pixels(self):
        acc = ObjectSceneCorrelation(9)
        sem = one_hot_semantics(np.full((224, 224), 7, dtype=np.int64), 9)
        accumulate_object_attention(np.ones((224, 224)), sem, acc)
        assert acc.attention[7] == pytest.approx(224 * 224)
        assert acc.attention.sum() == pytest.approx(224 * 224)

    def test_matches_per_pixel_loop_oracle(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 4, size=(6, 5))
        sem = one_hot_semantics(labels, 4)
        cam = rng.random((6, 5))
        acc = accumulate_object_attention(cam, sem, ObjectSceneCorrelation(4))
        expected = np.zeros(4)
        for i in range(6):
            for j in range(5):
                expected[labels[i, j]] += cam[i, j]
        npt.assert_allclose(acc.attention, expected, rtol=1e-12)

    def test_misaligned_shapes_rejected(self):
        sem = one_hot_semantics(np.zeros((4, 4), dtype=np.int64), 3)
        with pytest.raises(ShapeError):
            accumulate_object_attention(np.zeros((5, 4)), sem, ObjectSceneCorrelation(3))

    def test_mass_conservation_over_many_samples(self):
        rng = np.random.default_rng(11)
        acc = ObjectSceneCorrelation(5)
        total = 0.0
        for _ in range(20):
            labels = rng.integers(0, 5, size=(10, 10))
            cam = rng.random((10, 10))
            accumulate_object_attention(cam, one_hot_semantics(labels, 5), acc)
            total += cam.sum()
        assert acc.attention.sum() == pytest.approx(total, abs=1e-9)

    def test_order_independence(self):
        rng = np.random.default_rng(13)
        items = [
            (rng.random((4, 4)), one_hot_semantics(rng.integers(0, 3, (4, 4)), 3))
            for _ in range(6)
        ]
        a, b = ObjectSceneCorrelation(3), ObjectSceneCorrelation(3)
        for cam, sem in items:
            accumulate_object_attention(cam, sem, a)
        for cam, sem in reversed(items):
            accumulate_object_attention(cam, sem, b)
        npt.assert_allclose(a.attention, b.attention, rtol=1e-12)

    def test_sharded_accumulation_merges(self):
        rng = np.random.default_rng(17)
        items = [
            (rng.random((5, 5)), one_hot_semantics(rng.integers(0, 4, (5, 5)), 4))
            for _ in range(8)
        ]
        whole = ObjectSceneCorrelation(4)
        for cam, sem in items:
            accumulate_object_attention(cam, sem, whole)
        shard_a, shard_b = ObjectSceneCorrelation(4), ObjectSceneCorrelation(4)
        for cam, sem in items[:3]:
            accumulate_object_attention(cam, sem, shard_a)
        for cam, sem in items[3:]:
            accumulate_object_attention(cam, sem, shard_b)
        merged = shard_a.merge(shard_b)
        npt.assert_allclose(merged.attention, whole.attention, rtol=1e-12)
        assert merged.sample_count == whole.sample_count == 8


class TestCorrelationReport:
    def test_single_nonzero_bin(self):
        acc = ObjectSceneCorrelation(3)
        acc.attention[1] = 4.2
        acc.sample_count = 1
        rows = emit_correlation_report(acc, {0: "both", 1: "indoor", 2: "outdoor"})
        assert rows[0] == {
            "label": 1, "label_name": "1", "group": "indoor", "weight": 1.0,
        }

    def test_tie_breaks_by_label_index(self):
        acc = ObjectSceneCorrelation(3)
        acc.attention[:] = [2.0, 2.0, 1.0]
        acc.sample_count = 1
        rows = emit_correlation_report(acc, ["both"] * 3)
        assert [r["label"] for r in rows] == [0, 1, 2]

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(2)
        acc = ObjectSceneCorrelation(8)
        acc.attention[:] = rng.random(8) + 0.1
        acc.sample_count = 3
        rows = emit_correlation_report(acc, ["indoor"] * 8)
        assert sum(r["weight"] for r in rows) == pytest.approx(1.0, abs=1e-9)

    def test_empty_accumulation_rejected(self):
        with pytest.raises(ValueError):
            emit_correlation_report(ObjectSceneCorrelation(2), ["both", "both"])

    def test_unknown_group_rejected(self):
        acc = ObjectSceneCorrelation(1)
        acc.attention[0] = 1.0
        acc.sample_count = 1
        with pytest.raises(ValueError):
            emit_correlation_report(acc, {0: "space"})


class TestCamBinary:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        grid = rng.random((224, 224)).astype(np.float32)
        path = tmp_path / "m.cam"
        write_cam_binary(path, grid)
        npt.assert_array_equal(read_cam_binary(path), grid)
        raw = path.read_bytes()
        assert raw[:4] == b"CAM1"
        assert len(raw) == 16 + 4 * 224 * 224

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "m.cam"
        write_cam_binary(path, np.zeros((4, 4), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            read_cam_binary(path)

    def test_overlay_png_written(self, tmp_path):
        from semattn.interpretability import render_cam_overlay

        img = np.random.default_rng(0).random((224, 224, 3)).astype(np.float32)
        cam = np.random.default_rng(1).random((224, 224))
        out = tmp_path / "overlay.png"
        render_cam_overlay(img, cam, out)
        assert out.exists() and out.stat().st_size > 0
