"""Haar baseline tests: integral images, feature values, AdaBoost, cascade
construction, serialization, and scanning."""

import numpy as np
import pytest

from cascadeface import haar
from cascadeface.haar import (CascadeStage, FeatureKind, HaarCascadeModel,
                              HaarFeature, Stump)

# ---------------------------------------------------------------------------
# integral images


def rect_sum_loops(image, x1, y1, x2, y2):
    total = 0
    for y in range(y1, y2):
        for x in range(x1, x2):
            total += int(image[y, x])
    return total


def test_integral_all_ones():
    img = np.ones((4, 4), np.uint8)
    ii, sq = haar.integral(img)
    assert ii.shape == (5, 5)
    assert haar.rect_sum(ii, 0, 0, 4, 4) == 16
    assert haar.rect_sum(sq, 0, 0, 4, 4) == 16


def test_integral_zero_image():
    ii, sq = haar.integral(np.zeros((6, 3), np.uint8))
    assert (ii == 0).all() and (sq == 0).all()


def test_integral_first_row_col_zero():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (5, 7), dtype=np.uint8)
    ii, sq = haar.integral(img)
    assert (ii[0, :] == 0).all() and (ii[:, 0] == 0).all()
    assert (sq[0, :] == 0).all() and (sq[:, 0] == 0).all()


def test_integral_monotone_for_nonnegative():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (9, 9), dtype=np.uint8)
    ii, _ = haar.integral(img)
    assert (np.diff(ii.astype(np.int64), axis=0) >= 0).all()
    assert (np.diff(ii.astype(np.int64), axis=1) >= 0).all()


def test_rectangle_sums_match_loops_exactly():
    rng = np.random.default_rng(2)
    for _ in range(20):
        h = int(rng.integers(4, 30))
        w = int(rng.integers(4, 30))
        img = rng.integers(0, 256, (h, w), dtype=np.uint8)
        ii, sq = haar.integral(img)
        for _ in range(10):
            x1 = int(rng.integers(0, w))
            x2 = int(rng.integers(x1 + 1, w + 1))
            y1 = int(rng.integers(0, h))
            y2 = int(rng.integers(y1 + 1, h + 1))
            assert haar.rect_sum(ii, x1, y1, x2, y2) == rect_sum_loops(img, x1, y1, x2, y2)
            sq_want = sum(int(img[y, x]) ** 2 for y in range(y1, y2)
                          for x in range(x1, x2))
            assert haar.rect_sum(sq, x1, y1, x2, y2) == sq_want


# ---------------------------------------------------------------------------
# features


def test_feature_pool_counts():
    pool = haar.feature_pool()
    by_kind = {}
    for f in pool:
        by_kind[f.kind] = by_kind.get(f.kind, 0) + 1
    assert by_kind[FeatureKind.TWO_RECT_H] == 2808
    assert by_kind[FeatureKind.TWO_RECT_V] == 2808
    assert by_kind[FeatureKind.THREE_RECT_H] == 1716
    assert by_kind[FeatureKind.FOUR_RECT] == 1296
    assert len(pool) == 8628


def test_feature_rects_fit_window():
    for f in haar.feature_pool():
        for _w, x1, y1, x2, y2 in f.rects():
            assert 0 <= x1 < x2 <= 24
            assert 0 <= y1 < y2 <= 24


def test_feature_weighted_areas_balance():
    # white and black weighted areas cancel, so constant regions score zero
    for f in haar.feature_pool():
        total = sum(w * (x2 - x1) * (y2 - y1) for w, x1, y1, x2, y2 in f.rects())
        assert total == 0


def test_feature_value_constant_window_zero():
    img = np.full((24, 24), 150, np.uint8)
    ii, sq = haar.integral(img)
    feat = HaarFeature(FeatureKind.TWO_RECT_H, 0, 0, 12, 24)
    assert haar.feature_value(ii, sq, feat, variance_norm=False) == 0.0
    # zero-variance window: normalized value defined as 0
    assert haar.feature_value(ii, sq, feat, variance_norm=True) == 0.0


def test_feature_value_half_bright_window():
    img = np.zeros((24, 24), np.uint8)
    img[:, :12] = 255
    ii, sq = haar.integral(img)
    feat = HaarFeature(FeatureKind.TWO_RECT_H, 0, 0, 12, 24)
    sigma = haar.window_sigma(ii, sq, 0, 0, 24)
    want = 255.0 * (12 * 24) / sigma
    got = haar.feature_value(ii, sq, feat)
    assert abs(got - want) < 1e-9
    assert got > 0
    assert abs(sigma - 127.5) < 1e-9


def test_feature_value_brightness_invariance():
    rng = np.random.default_rng(3)
    base = rng.integers(40, 120, (24, 24)).astype(np.float64)
    feats = [HaarFeature(FeatureKind.TWO_RECT_H, 0, 4, 6, 8),
             HaarFeature(FeatureKind.TWO_RECT_V, 4, 0, 10, 6),
             HaarFeature(FeatureKind.THREE_RECT_H, 0, 0, 8, 12),
             HaarFeature(FeatureKind.FOUR_RECT, 2, 2, 8, 8)]
    img_a = np.clip(base, 0, 255).astype(np.uint8)
    img_b = np.clip(1.6 * base + 30, 0, 255).astype(np.uint8)
    ia, sa = haar.integral(img_a)
    ib, sb = haar.integral(img_b)
    for f in feats:
        va = haar.feature_value(ia, sa, f)
        vb = haar.feature_value(ib, sb, f)
        assert abs(va - vb) / max(abs(va), 1.0) < 1e-1  # u8 quantization noise


def test_feature_value_brightness_invariance_exact_floats():
    # with exact arithmetic (values that survive u8 clipping untouched) the
    # affine invariance is tight
    rng = np.random.default_rng(4)
    base = rng.integers(30, 100, (24, 24)).astype(np.uint8)
    doubled = (base.astype(np.uint16) * 2).astype(np.uint8)  # stays < 256
    feats = [HaarFeature(FeatureKind.TWO_RECT_H, 0, 4, 6, 8),
             HaarFeature(FeatureKind.THREE_RECT_H, 0, 0, 8, 12)]
    ia, sa = haar.integral(base)
    ib, sb = haar.integral(doubled)
    for f in feats:
        va = haar.feature_value(ia, sa, f)
        vb = haar.feature_value(ib, sb, f)
        assert abs(va - vb) <= 1e-4 * max(abs(va), 1.0)


def test_feature_scaling_keeps_rects_adjacent():
    feat = HaarFeature(FeatureKind.THREE_RECT_H, 2, 2, 4, 6)
    for scale in (1.0, 1.25, 1.5625, 2.0, 2.44140625):
        rects = haar._scale_rects(feat.rects(), scale)
        (_, ax1, ay1, ax2, ay2), (_, bx1, by1, bx2, by2), (_, cx1, cy1, cx2, cy2) = rects
        assert ax2 == bx1 and bx2 == cx1  # shared edges stay shared
        assert ay1 == by1 == cy1 and ay2 == by2 == cy2


# ---------------------------------------------------------------------------
# adaboost


def separable_windows():
    """Positives bright on the left half, negatives uniform: one TwoRectH
    feature separates them perfectly."""
    rng = np.random.default_rng(5)
    pos = np.zeros((20, 24, 24), np.uint8)
    pos[:, :, :12] = 200
    pos += rng.integers(0, 20, pos.shape).astype(np.uint8)
    neg = rng.integers(90, 110, (30, 24, 24)).astype(np.uint8)
    windows = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(20, np.int64), np.zeros(30, np.int64)])
    return windows, labels


def test_adaboost_separable_zero_error_after_one_round():
    windows, labels = separable_windows()
    stumps = haar.train_adaboost(windows, labels, rounds=1)
    assert len(stumps) == 1
    values = haar.pool_value_matrix(windows, [stumps[0].feature])[0]
    pred = (stumps[0].polarity * values < stumps[0].polarity * stumps[0].threshold)
    assert (pred == labels.astype(bool)).all()


def test_adaboost_alpha_formula():
    # weighted error 0.1 -> alpha = 0.5 ln 9
    assert abs(0.5 * np.log((1 - 0.1) / 0.1) - 1.09861229) < 1e-7


def test_adaboost_weights_sum_to_one_every_round():
    windows, labels = separable_windows()
    values = haar.pool_value_matrix(windows, haar.feature_pool()[:500])
    booster = haar._Booster(values, labels, haar.feature_pool()[:500])
    for _ in range(5):
        if booster.step() is None:
            break
        assert abs(booster.weights.sum() - 1.0) < 1e-9


def test_adaboost_training_error_non_increasing():
    rng = np.random.default_rng(6)
    windows = rng.integers(0, 256, (60, 24, 24), dtype=np.uint8)
    # noisy but learnable: label by overall brightness
    labels = (windows.mean(axis=(1, 2)) > 128).astype(np.int64)
    if labels.all() or not labels.any():
        labels[0] = 1 - labels[0]
    pool = haar.feature_pool()[::9]
    values = haar.pool_value_matrix(windows, pool)
    booster = haar._Booster(values, labels, pool)
    errors = []
    for _ in range(8):
        if booster.step() is None:
            break
        scores = booster.stump_scores()
        half = sum(s.alpha for s in booster.stumps) / 2
        pred = scores >= half
        errors.append((pred != labels.astype(bool)).mean())
    assert len(errors) >= 3
    assert errors[-1] <= errors[0] + 1e-9


def test_adaboost_needs_both_classes():
    windows = np.zeros((5, 24, 24), np.uint8)
    with pytest.raises(ValueError):
        haar.train_adaboost(windows, np.ones(5, np.int64), rounds=1)


# ---------------------------------------------------------------------------
# cascade construction


def test_cascade_trivially_separable_single_stage():
    windows, labels = separable_windows()
    model = haar.build_cascade(windows[labels == 1], windows[labels == 0],
                               stage_targets=(0.99, 0.4), max_stages=5,
                               max_rounds=10, min_rounds=1)
    assert len(model.stages) == 1


def test_cascade_stage_detection_rates_meet_target():
    windows, labels = separable_windows()
    pos, neg = windows[labels == 1], windows[labels == 0]
    d = 0.95
    model = haar.build_cascade(pos, neg, stage_targets=(d, 0.5), max_stages=4,
                               max_rounds=8, min_rounds=2)
    alive = np.ones(len(pos), bool)
    for stage in model.stages:
        sub = HaarCascadeModel(stages=[stage])
        passed, _ = haar.cascade_scores(sub, pos)
        assert passed.mean() >= d
        alive &= passed
    # overall detection ≥ product of stage rates bound
    assert alive.mean() >= d ** len(model.stages) - 1e-9


def test_cascade_false_positive_rate_bounded_on_training_data():
    windows, labels = separable_windows()
    pos, neg = windows[labels == 1], windows[labels == 0]
    f = 0.5
    model = haar.build_cascade(pos, neg, stage_targets=(0.95, f), max_stages=4,
                               max_rounds=8, min_rounds=2)
    passed, _ = haar.cascade_scores(model, neg)
    assert passed.mean() <= f ** len(model.stages) + 1e-9


def test_cascade_model_requires_stages():
    with pytest.raises(ValueError):
        HaarCascadeModel(stages=[])


# ---------------------------------------------------------------------------
# detection scan


def manual_model(threshold):
    """One-stump model voting on a left-right brightness difference."""
    feat = HaarFeature(FeatureKind.TWO_RECT_H, 0, 0, 12, 24)
    stump = Stump(feat, threshold=-50.0, polarity=-1, alpha=2.0)  # face if value > -50
    return HaarCascadeModel(stages=[CascadeStage([stump], threshold)])


def test_detect_blank_image_empty_when_threshold_unreachable():
    img = np.full((60, 60), 128, np.uint8)
    model = manual_model(threshold=5.0)  # max vote is 2.0 < 5.0
    assert haar.detect_haar(img, model) == []


def test_detect_boxes_inside_image_bounds():
    rng = np.random.default_rng(7)
    img = rng.integers(0, 256, (70, 50), dtype=np.uint8)
    model = manual_model(threshold=1.0)  # passes many windows
    dets = haar.detect_haar(img, model)
    assert dets  # sanity: something passes
    for d in dets:
        x1, y1, x2, y2 = d.box
        assert 0 <= x1 < x2 <= 50
        assert 0 <= y1 < y2 <= 70
        assert 0.0 <= d.score <= 1.0


def test_detect_short_circuits_rejected_windows():
    rng = np.random.default_rng(8)
    img = rng.integers(0, 256, (60, 60), dtype=np.uint8)
    reject_all = Stump(HaarFeature(FeatureKind.TWO_RECT_H, 0, 0, 12, 24),
                       threshold=1e9, polarity=-1, alpha=1.0)  # never votes
    accept = Stump(HaarFeature(FeatureKind.TWO_RECT_H, 0, 0, 12, 24),
                   threshold=1e9, polarity=1, alpha=1.0)  # always votes
    model = HaarCascadeModel(stages=[
        CascadeStage([accept], threshold=0.5),
        CascadeStage([reject_all], threshold=0.5),
        CascadeStage([accept], threshold=0.5),
    ])
    stats = {}
    dets = haar.detect_haar(img, model, stats=stats)
    evals = stats["stage_evals"]
    assert evals[0] > 0
    assert evals[1] == evals[0]  # stage 1 passes everything
    assert evals[2] == 0         # stage 2 rejected every window
    assert dets == []


def test_detect_stage_eval_counts_non_increasing():
    rng = np.random.default_rng(9)
    img = rng.integers(0, 256, (80, 80), dtype=np.uint8)
    feat = HaarFeature(FeatureKind.TWO_RECT_V, 0, 0, 24, 12)
    model = HaarCascadeModel(stages=[
        CascadeStage([Stump(feat, 0.0, 1, 1.0)], threshold=0.5),
        CascadeStage([Stump(feat, 0.0, -1, 1.0)], threshold=0.5),
    ])
    stats = {}
    haar.detect_haar(img, model, stats=stats)
    assert stats["stage_evals"][1] <= stats["stage_evals"][0]


# ---------------------------------------------------------------------------
# serialization


def test_cascade_round_trip_text(tmp_path):
    windows, labels = separable_windows()
    model = haar.build_cascade(windows[labels == 1], windows[labels == 0],
                               stage_targets=(0.95, 0.5), max_stages=3,
                               max_rounds=4, min_rounds=2)
    path = tmp_path / "model.txt"
    haar.save_cascade(model, path)
    loaded = haar.load_cascade(path)
    path2 = tmp_path / "model2.txt"
    haar.save_cascade(loaded, path2)
    assert path.read_text() == path2.read_text()
    assert len(loaded.stages) == len(model.stages)
    for sa, sb in zip(model.stages, loaded.stages):
        assert len(sa.stumps) == len(sb.stumps)
        for a, b in zip(sa.stumps, sb.stumps):
            assert a.feature == b.feature
            assert a.polarity == b.polarity
            # values agree to 9 significant digits (half-ulp of the format)
            assert abs(a.threshold - b.threshold) <= 1e-8 * max(abs(a.threshold), 1)
            assert abs(a.alpha - b.alpha) <= 1e-8 * max(abs(a.alpha), 1)


def test_cascade_bad_header(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("NOTACASCADE\n")
    with pytest.raises(haar.CascadeFormatError):
        haar.load_cascade(path)


def test_cascade_malformed_stump(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("HAARCASCADE1\nwindow 24\nstages 1\nstage 1 0.5\n"
                    "stump nope 0 0 4 4 1.0 1 0.5\n")
    with pytest.raises(haar.CascadeFormatError):
        haar.load_cascade(path)
