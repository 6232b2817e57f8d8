"""Synthetic data generator checks: determinism, class balance, and the IoU
contracts each sample kind must satisfy."""

import numpy as np

from cascadeface import boxes as bx
from cascadeface import synth
from cascadeface.train import SampleKind


def crop_truth_iou(y_box):
    """Reconstruct the crop-vs-truth IoU from a normalized box target.

    In crop-relative units the crop is the unit square and the truth box is
    (dx1, dy1, 1 + dx2, 1 + dy2); IoU is scale-invariant.
    """
    truth = np.array([y_box[0], y_box[1], 1.0 + y_box[2], 1.0 + y_box[3]])
    return bx.iou(np.array([0.0, 0.0, 1.0, 1.0]), truth)


def _patch_bytes(samples):
    return b"".join(s.patch.tobytes() for s in samples)


def test_same_seed_identical_bytes():
    a = synth.synth_dataset(60, 12, rng_seed=7)
    b = synth.synth_dataset(60, 12, rng_seed=7)
    assert len(a) == len(b) == 60
    assert _patch_bytes(a) == _patch_bytes(b)
    for sa, sb in zip(a, b):
        assert sa.kind == sb.kind


def test_different_seed_differs():
    a = synth.synth_dataset(40, 12, rng_seed=1)
    b = synth.synth_dataset(40, 12, rng_seed=2)
    assert _patch_bytes(a) != _patch_bytes(b)


def test_patch_shapes_and_normalization():
    for size in (12, 24, 48):
        samples = synth.synth_dataset(30, size, rng_seed=3)
        for s in samples:
            assert s.patch.shape == (3, size, size)
            assert s.patch.dtype == np.float32
            assert s.patch.min() >= -1.0 and s.patch.max() <= 1.0


def test_class_balance_roughly_1_3_1_2():
    samples = synth.synth_dataset(700, 12, rng_seed=4)
    counts = {k: 0 for k in SampleKind}
    for s in samples:
        counts[s.kind] += 1
    assert abs(counts[SampleKind.POSITIVE] - 100) <= 2
    assert abs(counts[SampleKind.PART] - 100) <= 2
    assert abs(counts[SampleKind.LANDMARK] - 200) <= 2
    assert abs(counts[SampleKind.NEGATIVE] - 300) <= 4


def test_target_presence_per_kind():
    samples = synth.synth_dataset(120, 12, rng_seed=5)
    for s in samples:
        if s.kind is SampleKind.POSITIVE:
            assert s.y_det == 1 and s.y_box is not None and s.y_landmark is None
        elif s.kind is SampleKind.NEGATIVE:
            assert s.y_det == 0 and s.y_box is None and s.y_landmark is None
        elif s.kind is SampleKind.PART:
            assert s.y_det is None and s.y_box is not None
        else:
            assert s.y_landmark is not None and s.y_landmark.shape == (10,)


def test_part_box_targets_bounded():
    # offsets are normalized by crop size, so magnitudes stay moderate
    samples = synth.synth_dataset(200, 12, rng_seed=6)
    for s in samples:
        if s.y_box is not None:
            assert np.abs(s.y_box).max() < 1.0
        if s.y_landmark is not None:
            assert s.y_landmark.min() > -0.5 and s.y_landmark.max() < 1.5


def test_positive_crops_have_iou_at_least_065():
    samples = synth.synth_dataset(300, 12, rng_seed=11)
    checked = 0
    for s in samples:
        if s.kind is SampleKind.POSITIVE:
            assert crop_truth_iou(s.y_box) >= 0.65
            checked += 1
    assert checked >= 30


def test_part_crops_have_iou_in_part_range():
    samples = synth.synth_dataset(300, 12, rng_seed=12)
    checked = 0
    for s in samples:
        if s.kind is SampleKind.PART:
            overlap = crop_truth_iou(s.y_box)
            assert 0.4 <= overlap < 0.65
            checked += 1
    assert checked >= 30


def test_offface_crops_have_iou_below_03():
    rng = np.random.default_rng(13)
    for _ in range(100):
        scene, box, _lmk, size = synth._face_scene(rng)
        h, w = scene.shape[:2]
        crop = synth._offface_crop(rng, box, size, w, h)
        assert bx.iou(crop, box) < 0.3


def test_scene_truth_boxes_inside_image():
    scenes = synth.synth_scene_set(8, rng_seed=7, width=120, height=100)
    for img, boxes, lmks in scenes:
        assert img.shape == (100, 120, 3)
        assert img.dtype == np.uint8
        for b in boxes:
            assert 0 <= b[0] < b[2] <= 120
            assert 0 <= b[1] < b[3] <= 100
        assert len(lmks) == len(boxes)


def test_scene_set_deterministic():
    a = synth.synth_scene_set(3, rng_seed=8)
    b = synth.synth_scene_set(3, rng_seed=8)
    for (ia, ba, _), (ib, bb, _) in zip(a, b):
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_array_equal(ba, bb)


def test_faces_brighter_than_background():
    # the face ellipse interior should be clearly brighter than the scene
    rng = np.random.default_rng(9)
    img, boxes, _ = synth.render_scene(rng, 80, 80, n_faces=1, distractor_prob=0)
    assert len(boxes) == 1
    x1, y1, x2, y2 = (int(v) for v in boxes[0])
    cx, cy = (x1 + x2) // 2, (y1 + y2) // 2
    face_mean = img[cy - 2:cy + 2, cx - 2:cx + 2].mean()
    corner_mean = np.concatenate([img[:8, :8].ravel(), img[-8:, -8:].ravel()]).mean()
    assert face_mean > corner_mean + 30
