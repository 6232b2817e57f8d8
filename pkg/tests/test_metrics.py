"""Evaluation tests: matching rules, metric arithmetic, report rendering,
and manifest parsing."""

import numpy as np
import pytest

from cascadeface import metrics
from cascadeface.boxes import Detection
from cascadeface.metrics import ConfusionMatrix

# ---------------------------------------------------------------------------
# matching


def test_exact_match_counts():
    dets = np.array([[0, 0, 10, 10]], np.float32)
    scores = np.array([0.9], np.float32)
    truths = np.array([[0, 0, 10, 10]], np.float32)
    assert metrics.match_detections(dets, scores, truths) == (1, 0, 0)


def test_low_overlap_is_fp_and_fn():
    dets = np.array([[0, 0, 10, 10]], np.float32)
    scores = np.array([0.9], np.float32)
    truths = np.array([[6, 6, 16, 16]], np.float32)
    assert metrics.match_detections(dets, scores, truths, 0.5) == (0, 1, 1)


def test_no_detections_all_fn():
    truths = np.array([[0, 0, 5, 5], [10, 10, 15, 15], [20, 20, 30, 30]], np.float32)
    assert metrics.match_detections(np.zeros((0, 4), np.float32),
                                    np.zeros(0, np.float32), truths) == (0, 0, 3)


def test_truth_matched_once():
    dets = np.array([[0, 0, 10, 10], [1, 1, 11, 11]], np.float32)
    scores = np.array([0.9, 0.8], np.float32)
    truths = np.array([[0, 0, 10, 10]], np.float32)
    tp, fp, fn = metrics.match_detections(dets, scores, truths)
    assert (tp, fp, fn) == (1, 1, 0)


def test_counts_partition_inputs():
    rng = np.random.default_rng(0)
    for _ in range(50):
        nd = int(rng.integers(0, 12))
        nt = int(rng.integers(0, 8))
        dets = np.stack([rng.uniform(0, 40, nd), rng.uniform(0, 40, nd),
                         rng.uniform(41, 80, nd), rng.uniform(41, 80, nd)],
                        axis=1).astype(np.float32) if nd else np.zeros((0, 4), np.float32)
        truths = np.stack([rng.uniform(0, 40, nt), rng.uniform(0, 40, nt),
                           rng.uniform(41, 80, nt), rng.uniform(41, 80, nt)],
                          axis=1).astype(np.float32) if nt else np.zeros((0, 4), np.float32)
        scores = rng.uniform(0, 1, nd).astype(np.float32)
        tp, fp, fn = metrics.match_detections(dets, scores, truths)
        assert tp + fp == nd
        assert tp + fn == nt


def test_equal_scores_permutation_invariant_counts():
    boxes = np.array([[0, 0, 10, 10], [20, 20, 30, 30], [1, 1, 11, 11]], np.float32)
    scores = np.array([0.5, 0.5, 0.5], np.float32)
    truths = np.array([[0, 0, 10, 10], [20, 20, 30, 30]], np.float32)
    base = metrics.match_detections(boxes, scores, truths)
    for perm in ([1, 0, 2], [2, 1, 0], [1, 2, 0]):
        got = metrics.match_detections(boxes[perm], scores[perm], truths)
        assert got == base


def test_match_detection_list():
    dets = [Detection([0, 0, 10, 10], 0.8)]
    truths = np.array([[0, 0, 10, 10]], np.float32)
    assert metrics.match_detection_list(dets, truths) == (1, 0, 0)


# ---------------------------------------------------------------------------
# metric arithmetic


def test_confusion_matrix_table_values():
    report = metrics.compute_metrics(ConfusionMatrix(17620, 335, 30, 280))
    assert abs(report.precision - 98.13) < 0.01
    assert abs(report.recall - 99.83) < 0.01
    assert abs(report.specificity - 45.53) < 0.01
    assert abs(report.f1 - 98.97) < 0.01
    assert abs(report.accuracy - 98.00) < 0.01


def test_perfect_single_counts():
    report = metrics.compute_metrics(ConfusionMatrix(1, 0, 0, 1))
    assert report.precision == report.recall == 100.0
    assert report.specificity == report.f1 == report.accuracy == 100.0


def test_all_zero_matrix_everything_undefined():
    report = metrics.compute_metrics(ConfusionMatrix(0, 0, 0, 0))
    assert report.precision is None
    assert report.recall is None
    assert report.specificity is None
    assert report.f1 is None
    assert report.accuracy is None


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        ConfusionMatrix(-1, 0, 0, 0)


def test_matrix_addition():
    cm = ConfusionMatrix(1, 2, 3, 4) + ConfusionMatrix(10, 20, 30, 40)
    assert (cm.tp, cm.fp, cm.fn, cm.tn) == (11, 22, 33, 44)


# ---------------------------------------------------------------------------
# rendering


def test_compare_report_accuracy_table():
    text = metrics.compare_report([
        ("Viola-Jones", 74.38), ("Haar Cascade", 94.0), ("MTCNN", 99.95)])
    lines = text.strip().split("\n")
    assert lines[0].split() == ["Algorithm", "Accuracy"]
    assert lines[1].startswith("Viola-Jones") and "74.38%" in lines[1]
    assert lines[2].startswith("Haar Cascade") and "94.00%" in lines[2]
    assert lines[3].startswith("MTCNN") and "99.95%" in lines[3]
    # aligned columns: accuracy values start at one column
    starts = {ln.index(v) for ln, v in zip(lines[1:], ["74.38%", "94.00%", "99.95%"])}
    assert len(starts) == 1


def test_compare_report_second_table_shape():
    text = metrics.compare_report([
        ("Haar Cascade", 68.16), ("MTCNN", 98.0), ("Viola-Jones", 61.81)])
    lines = text.strip().split("\n")
    assert len(lines) == 4
    assert "68.16%" in lines[1] and "98.00%" in lines[2] and "61.81%" in lines[3]


def test_compare_report_empty_header_only():
    text = metrics.compare_report([])
    assert text.strip().split("\n") == ["Algorithm  Accuracy"]


def test_compare_report_full_metrics_rows():
    rep = metrics.compute_metrics(ConfusionMatrix(8, 2, 2, 8))
    text = metrics.compare_report([("det", rep), ("plain", 50.0)])
    lines = text.strip().split("\n")
    assert lines[0].split() == ["Algorithm", "Precision", "Recall",
                                "Specificity", "F1", "Accuracy"]
    assert "80.00%" in lines[1]
    assert "50.00%" in lines[2]


def test_compare_report_csv():
    text = metrics.compare_report([("a", 10.0)], fmt="csv")
    assert text == "Algorithm,Accuracy\na,10.00%\n"


def test_metrics_text_marks_undefined():
    text = metrics.metrics_text(metrics.compute_metrics(ConfusionMatrix(0, 0, 3, 0)))
    assert "undefined" in text
    assert "0.00%" in text  # recall = 0/3


def test_metrics_csv_shape():
    text = metrics.metrics_csv(metrics.compute_metrics(ConfusionMatrix(1, 1, 1, 1)))
    lines = text.strip().split("\n")
    assert lines[0] == "metric,value_pct"
    assert len(lines) == 6


# ---------------------------------------------------------------------------
# manifests


def test_manifest_round_trip(tmp_path):
    entries = [("a.ppm", np.array([[1, 2, 11, 22]], np.float32)),
               ("b.ppm", np.array([[0, 0, 5, 5], [10, 10, 30, 40]], np.float32))]
    path = tmp_path / "manifest.txt"
    path.write_text(metrics.manifest_text(entries))
    back = metrics.load_manifest(path)
    assert [name for name, _ in back] == ["a.ppm", "b.ppm"]
    np.testing.assert_allclose(back[0][1], entries[0][1])
    np.testing.assert_allclose(back[1][1], entries[1][1])


def test_manifest_rejects_partial_boxes(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("a.ppm 1 2 3\n")
    with pytest.raises(ValueError, match="multiple of 4"):
        metrics.load_manifest(path)


def test_manifest_skips_comments_and_blanks(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("# comment\n\na.ppm 0 0 5 5\n")
    assert len(metrics.load_manifest(path)) == 1
