"""Viola-Jones-style baseline detector: integral images, Haar-like features,
AdaBoost decision stumps, an attentional cascade, and sliding-window
detection.

Features live on a 24x24 base window. The three-rectangle kind weights its
center rectangle by two so white and black areas balance; together with
variance normalization this makes feature values invariant to affine
brightness changes. Integral tables use integer accumulation so rectangle
sums are exact.
"""

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import List

import numpy as np

from . import boxes as bx
from .boxes import Detection
from .fileutil import atomic_write_text

WINDOW = 24
EPS_ERR = 1e-10
_SIGMA_MIN = 1e-6


class FeatureKind(Enum):
    TWO_RECT_H = "two_h"
    TWO_RECT_V = "two_v"
    THREE_RECT_H = "three_h"
    FOUR_RECT = "four"


# (x span, y span) of each kind in units of the base rectangle
_SPANS = {
    FeatureKind.TWO_RECT_H: (2, 1),
    FeatureKind.TWO_RECT_V: (1, 2),
    FeatureKind.THREE_RECT_H: (3, 1),
    FeatureKind.FOUR_RECT: (2, 2),
}


@dataclass(frozen=True)
class HaarFeature:
    """One Haar-like feature: base rectangle (x, y, w, h) inside the 24x24
    window, replicated horizontally/vertically according to its kind."""

    kind: FeatureKind
    x: int
    y: int
    w: int
    h: int

    def rects(self):
        """Signed rectangles (weight, x1, y1, x2, y2); weights sum to zero
        over equal areas so constant regions cancel."""
        x, y, w, h = self.x, self.y, self.w, self.h
        if self.kind is FeatureKind.TWO_RECT_H:
            return ((1, x, y, x + w, y + h),
                    (-1, x + w, y, x + 2 * w, y + h))
        if self.kind is FeatureKind.TWO_RECT_V:
            return ((1, x, y, x + w, y + h),
                    (-1, x, y + h, x + w, y + 2 * h))
        if self.kind is FeatureKind.THREE_RECT_H:
            return ((1, x, y, x + w, y + h),
                    (-2, x + w, y, x + 2 * w, y + h),
                    (1, x + 2 * w, y, x + 3 * w, y + h))
        return ((1, x, y, x + w, y + h),
                (-1, x + w, y, x + 2 * w, y + h),
                (-1, x, y + h, x + w, y + 2 * h),
                (1, x + w, y + h, x + 2 * w, y + 2 * h))


@dataclass
class Stump:
    """Weak classifier: predicts face when polarity * value < polarity *
    threshold; votes with weight alpha."""

    feature: HaarFeature
    threshold: float
    polarity: int
    alpha: float


@dataclass
class CascadeStage:
    stumps: List[Stump]
    threshold: float


@dataclass
class HaarCascadeModel:
    stages: List[CascadeStage]
    window: int = WINDOW

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a cascade needs at least one stage")


def to_gray(image):
    """Rec.601 luma of an (H, W, C) uint8 image."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.uint8)
    if image.shape[2] == 1:
        return image[:, :, 0].astype(np.uint8)
    lum = (0.299 * image[:, :, 0] + 0.587 * image[:, :, 1]
           + 0.114 * image[:, :, 2])
    return np.clip(np.floor(lum + 0.5), 0, 255).astype(np.uint8)


def integral(image):
    """Cumulative-sum tables with a zero first row/column.

    Returns (ii, sq): (H+1, W+1) uint32 sums and uint64 squared sums. The
    rectangle sum over [x1, x2) x [y1, y2) is
    ii[y2, x2] - ii[y1, x2] - ii[y2, x1] + ii[y1, x1].
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"integral expects a grayscale (H, W) image, got {image.shape}")
    h, w = image.shape
    ii = np.zeros((h + 1, w + 1), dtype=np.uint32)
    sq = np.zeros((h + 1, w + 1), dtype=np.uint64)
    np.cumsum(np.cumsum(image.astype(np.uint32), axis=0), axis=1, out=ii[1:, 1:])
    big = image.astype(np.uint64) ** 2
    np.cumsum(np.cumsum(big, axis=0), axis=1, out=sq[1:, 1:])
    return ii, sq


def rect_sum(table, x1, y1, x2, y2):
    """O(1) rectangle sum over [x1, x2) x [y1, y2)."""
    t = table.astype(np.int64)
    return int(t[y2, x2] - t[y1, x2] - t[y2, x1] + t[y1, x1])


def _scale_rects(rects, scale):
    """Scale each rectangle corner and round; shared edges round identically
    so adjacent rectangles never gap or overlap."""
    out = []
    for wgt, x1, y1, x2, y2 in rects:
        out.append((wgt,
                    int(np.floor(x1 * scale + 0.5)),
                    int(np.floor(y1 * scale + 0.5)),
                    int(np.floor(x2 * scale + 0.5)),
                    int(np.floor(y2 * scale + 0.5))))
    return out


def window_sigma(ii, sq, ox, oy, side):
    """Standard deviation of the pixel values inside one window."""
    area = side * side
    s1 = rect_sum(ii, ox, oy, ox + side, oy + side)
    s2 = rect_sum(sq, ox, oy, ox + side, oy + side)
    mean = s1 / area
    var = s2 / area - mean * mean
    return float(np.sqrt(max(var, 0.0)))


def feature_value(ii, sq, feature, ox=0, oy=0, scale=1.0, variance_norm=True):
    """White-minus-black rectangle sum of one feature at a window origin;
    divided by the window standard deviation when variance_norm. Zero-variance
    windows yield 0."""
    raw = 0.0
    for wgt, x1, y1, x2, y2 in _scale_rects(feature.rects(), scale):
        raw += wgt * rect_sum(ii, ox + x1, oy + y1, ox + x2, oy + y2)
    if not variance_norm:
        return float(raw)
    side = int(np.floor(WINDOW * scale + 0.5))
    sigma = window_sigma(ii, sq, ox, oy, side)
    if sigma < _SIGMA_MIN:
        return 0.0
    return float(raw / sigma)


def feature_pool(window=WINDOW, pos_stride=2, size_step=2):
    """Every feature of the four kinds at the given position stride and base
    rectangle size step."""
    feats = []
    for kind in FeatureKind:
        mx, my = _SPANS[kind]
        w = size_step
        while mx * w <= window:
            h = size_step
            while my * h <= window:
                for x in range(0, window - mx * w + 1, pos_stride):
                    for y in range(0, window - my * h + 1, pos_stride):
                        feats.append(HaarFeature(kind, x, y, w, h))
                h += size_step
            w += size_step
    return feats


def _integral_batch(windows):
    """Integral tables for a stack of (n, S, S) windows."""
    windows = np.asarray(windows)
    n, h, w = windows.shape
    ii = np.zeros((n, h + 1, w + 1), dtype=np.int64)
    np.cumsum(np.cumsum(windows.astype(np.int64), axis=1), axis=2, out=ii[:, 1:, 1:])
    sq = np.zeros((n, h + 1, w + 1), dtype=np.int64)
    np.cumsum(np.cumsum(windows.astype(np.int64) ** 2, axis=1), axis=2,
              out=sq[:, 1:, 1:])
    return ii, sq


def _batch_rect_sums(ii, x1, y1, x2, y2):
    """Rectangle sums over every window: ii is (n, S+1, S+1); the rectangle
    arrays are (F,). Returns (F, n)."""
    return (ii[:, y2, x2] - ii[:, y1, x2] - ii[:, y2, x1] + ii[:, y1, x1]).T


def _inv_sigma(ii, sq, side):
    area = side * side
    s1 = ii[:, side, side].astype(np.float64)
    s2 = sq[:, side, side].astype(np.float64)
    var = s2 / area - (s1 / area) ** 2
    sigma = np.sqrt(np.maximum(var, 0.0))
    inv = np.zeros_like(sigma)
    np.divide(1.0, sigma, out=inv, where=sigma >= _SIGMA_MIN)
    return inv


def pool_value_matrix(windows, pool):
    """Variance-normalized feature values for every (feature, window) pair;
    returns float32 (F, n)."""
    ii, sq = _integral_batch(windows)
    n = len(windows)
    inv = _inv_sigma(ii, sq, windows.shape[1]).astype(np.float32)
    values = np.zeros((len(pool), n), dtype=np.float32)
    by_kind = {}
    for idx, f in enumerate(pool):
        by_kind.setdefault(f.kind, []).append(idx)
    for kind, idxs in by_kind.items():
        idxs = np.asarray(idxs)
        feats = [pool[i] for i in idxs]
        rect_lists = [f.rects() for f in feats]
        acc = np.zeros((len(feats), n), dtype=np.float32)
        for r in range(len(rect_lists[0])):
            wgt = rect_lists[0][r][0]
            x1 = np.array([rl[r][1] for rl in rect_lists])
            y1 = np.array([rl[r][2] for rl in rect_lists])
            x2 = np.array([rl[r][3] for rl in rect_lists])
            y2 = np.array([rl[r][4] for rl in rect_lists])
            acc += wgt * _batch_rect_sums(ii, x1, y1, x2, y2).astype(np.float32)
        values[idxs] = acc * inv[None, :]
    return values


class _Booster:
    """Incremental discrete AdaBoost over a fixed sample set."""

    def __init__(self, values, labels, pool):
        self.values = values                       # (F, n) float32
        self.labels = labels.astype(np.float32)    # (n,) in {0, 1}
        self.pool = pool
        self.order = np.argsort(values, axis=1, kind="stable").astype(np.int32)
        n = len(labels)
        self.weights = np.full(n, 1.0 / n, dtype=np.float64)
        self.stumps: List[Stump] = []
        self.scores = np.zeros(n, dtype=np.float64)  # running weighted votes
        self.stopped = False

    def _best_stump(self):
        F, n = self.values.shape
        best = (np.inf, 0, 0.0, 1)  # err, feature, threshold, polarity
        chunk = 1024
        for start in range(0, F, chunk):
            order = self.order[start:start + chunk]
            vals = np.take_along_axis(self.values[start:start + chunk], order, axis=1)
            w = self.weights[order]
            y = self.labels[order]
            wp = np.cumsum(w * y, axis=1)
            wn = np.cumsum(w * (1.0 - y), axis=1)
            tp = wp[:, -1:]
            tn = wn[:, -1:]
            err_pos = wn + tp - wp   # polarity +1: face when value < theta
            err_neg = wp + tn - wn   # polarity -1: face when value > theta
            # cuts between equal adjacent values are not realizable
            dup = np.zeros_like(err_pos, dtype=bool)
            dup[:, :-1] = vals[:, 1:] == vals[:, :-1]
            err_pos[dup] = np.inf
            err_neg[dup] = np.inf
            for errs, polarity in ((err_pos, 1), (err_neg, -1)):
                flat = np.argmin(errs)
                fi, cut = np.unravel_index(flat, errs.shape)
                err = errs[fi, cut]
                if err < best[0]:
                    if cut < n - 1:
                        theta = 0.5 * (vals[fi, cut] + vals[fi, cut + 1])
                    else:
                        theta = vals[fi, cut] + 1.0
                    best = (float(err), start + int(fi), float(theta), polarity)
        return best

    def step(self):
        """Train one stump; returns it, or None once boosting must stop."""
        if self.stopped:
            return None
        err, fi, theta, polarity = self._best_stump()
        err = max(err, EPS_ERR)
        if err >= 0.5:
            warnings.warn(f"weak learner error {err:.3f} >= 0.5; stopping early")
            self.stopped = True
            return None
        alpha = 0.5 * np.log((1.0 - err) / err)
        stump = Stump(self.pool[fi], theta, polarity, float(alpha))
        self.stumps.append(stump)

        vals = self.values[fi]
        pred = (polarity * vals < polarity * theta)
        self.scores += alpha * pred
        y_pm = 2.0 * self.labels - 1.0
        h_pm = 2.0 * pred - 1.0
        self.weights *= np.exp(-alpha * y_pm * h_pm)
        self.weights /= self.weights.sum()
        return stump

    def stump_scores(self):
        """Current weighted vote-sum per sample."""
        return self.scores.copy()


def train_adaboost(windows, labels, rounds, pool=None):
    """Classic discrete AdaBoost over the feature pool; returns the trained
    stumps (possibly fewer than `rounds` if a weak learner fails)."""
    windows = np.asarray(windows)
    labels = np.asarray(labels)
    if not ((labels == 1).any() and (labels == 0).any()):
        raise ValueError("training needs both classes present")
    if pool is None:
        pool = feature_pool()
    values = pool_value_matrix(windows, pool)
    booster = _Booster(values, labels, pool)
    for _ in range(rounds):
        if booster.step() is None:
            break
    return booster.stumps


def stage_vote(stage, values_by_stump):
    """Weighted vote sum given per-stump feature values (any shape)."""
    total = None
    for stump, vals in zip(stage.stumps, values_by_stump):
        pred = (stump.polarity * vals < stump.polarity * stump.threshold)
        term = stump.alpha * pred
        total = term if total is None else total + term
    return total


def _eval_stumps_on_windows(stumps, windows):
    """Feature values of given stumps over (n, 24, 24) windows: (k, n)."""
    ii, sq = _integral_batch(windows)
    inv = _inv_sigma(ii, sq, windows.shape[1])
    out = np.zeros((len(stumps), len(windows)), dtype=np.float64)
    for si, stump in enumerate(stumps):
        acc = np.zeros(len(windows), dtype=np.float64)
        for wgt, x1, y1, x2, y2 in stump.feature.rects():
            acc += wgt * (ii[:, y2, x2] - ii[:, y1, x2]
                          - ii[:, y2, x1] + ii[:, y1, x1])
        out[si] = acc * inv
    return out


def cascade_scores(model, windows):
    """Per-stage vote sums for windows that reach each stage; windows failing
    a stage get -inf from there on. Returns (final pass mask, last margins)."""
    n = len(windows)
    alive = np.ones(n, dtype=bool)
    margins = np.full(n, -np.inf)
    for stage in model.stages:
        if not alive.any():
            break
        idx = np.nonzero(alive)[0]
        vals = _eval_stumps_on_windows(stage.stumps, windows[idx])
        votes = stage_vote(stage, vals)
        margins[idx] = votes - stage.threshold
        passed = votes >= stage.threshold
        alive[idx[~passed]] = False
    return alive, margins


class CascadeTargetError(RuntimeError):
    """A cascade stage could not reach its detection-rate target."""


def training_pool(min_feature_size=4):
    """Default training pool: features with base rectangles at least
    min_feature_size px on a side. Tiny rectangles distort badly when the
    detector scales them to non-integer window sizes, so they make fragile
    stumps."""
    return [f for f in feature_pool()
            if f.w >= min_feature_size and f.h >= min_feature_size]


def build_cascade(pos_windows, neg_windows, stage_targets=(0.995, 0.25),
                  max_stages=10, max_rounds=60, pool=None, neg_cap=4000,
                  min_rounds=12):
    """Train an attentional cascade.

    Each stage boosts stumps until, with its threshold lowered to keep at
    least `d` of the training positives, its false-positive rate on the
    current negatives is at most `f`. Negatives for the next stage are the
    false positives of the cascade so far; building stops when negatives run
    out or max_stages is reached. Stages train on at most `neg_cap`
    negatives (the full pool is still filtered for bootstrapping) and keep
    boosting to `min_rounds` stumps so stage votes carry usable margins.
    """
    d_min, f_max = stage_targets
    pos_windows = np.asarray(pos_windows)
    neg_windows = np.asarray(neg_windows)
    if pool is None:
        pool = training_pool()
    stages = []
    cur_neg = neg_windows
    for _stage_i in range(max_stages):
        if not len(cur_neg):
            break
        train_neg = cur_neg[:neg_cap]
        windows = np.concatenate([pos_windows, train_neg])
        labels = np.concatenate([np.ones(len(pos_windows), dtype=np.int64),
                                 np.zeros(len(train_neg), dtype=np.int64)])
        values = pool_value_matrix(windows, pool)
        booster = _Booster(values, labels, pool)
        n_pos = len(pos_windows)
        stage = None
        for round_i in range(max_rounds):
            if booster.step() is None:
                break
            if round_i + 1 < min_rounds:
                continue
            scores = booster.stump_scores()
            pos_scores = np.sort(scores[:n_pos])[::-1]
            keep = int(np.ceil(d_min * n_pos))
            threshold = float(pos_scores[keep - 1])
            fp_rate = float((scores[n_pos:] >= threshold).mean())
            det_rate = float((scores[:n_pos] >= threshold).mean())
            if det_rate >= d_min and fp_rate <= f_max:
                stage = CascadeStage(list(booster.stumps), threshold)
                break
        if stage is None:
            # max rounds exhausted: accept the stage if it meets d, else fail
            if not booster.stumps:
                raise CascadeTargetError("boosting produced no usable stump")
            scores = booster.stump_scores()
            pos_scores = np.sort(scores[:n_pos])[::-1]
            keep = int(np.ceil(d_min * n_pos))
            threshold = float(pos_scores[keep - 1])
            det_rate = float((scores[:n_pos] >= threshold).mean())
            if det_rate < d_min:
                raise CascadeTargetError(
                    f"stage reached detection rate {det_rate:.4f} < {d_min}")
            stage = CascadeStage(list(booster.stumps), threshold)
        stages.append(stage)
        model = HaarCascadeModel(stages=list(stages))
        alive, _ = cascade_scores(model, cur_neg)
        cur_neg = cur_neg[alive]
    if not stages:
        raise CascadeTargetError("no cascade stage could be built")
    return HaarCascadeModel(stages=stages)


def detect_haar(image, model, scale_step=1.25, window_stride=2, stats=None):
    """Slide the detector window over the image at geometric scales.

    Feature values are corrected for window area so stump thresholds learned
    at the base scale transfer to larger windows. Survivors of every stage
    become detections scored by the logistic of the final-stage margin;
    overlaps are merged with NMS (0.3, union). `stats`, when given, collects
    per-stage window evaluation counts under "stage_evals".
    """
    gray = to_gray(image)
    h, w = gray.shape
    ii32, sq64 = integral(gray)
    ii = ii32.astype(np.int64)
    sq = sq64.astype(np.int64)
    if stats is not None:
        stats.setdefault("stage_evals", [0] * len(model.stages))

    det_boxes, det_scores = [], []
    scale = 1.0
    while True:
        side = int(np.floor(model.window * scale + 0.5))
        if side > min(h, w):
            break
        stride = max(1, int(np.floor(window_stride * scale + 0.5)))
        oxs = np.arange(0, w - side + 1, stride)
        oys = np.arange(0, h - side + 1, stride)
        gx, gy = np.meshgrid(oxs, oys)
        ox = gx.ravel()
        oy = gy.ravel()

        area = float(side * side)
        s1 = (ii[oy + side, ox + side] - ii[oy, ox + side]
              - ii[oy + side, ox] + ii[oy, ox]).astype(np.float64)
        s2 = (sq[oy + side, ox + side] - sq[oy, ox + side]
              - sq[oy + side, ox] + sq[oy, ox]).astype(np.float64)
        var = s2 / area - (s1 / area) ** 2
        sigma = np.sqrt(np.maximum(var, 0.0))
        inv = np.zeros_like(sigma)
        np.divide(1.0, sigma, out=inv, where=sigma >= _SIGMA_MIN)
        inv *= (model.window / side) ** 2  # area correction across scales

        alive = np.arange(len(ox))
        margins = None
        for stage_i, stage in enumerate(model.stages):
            if not len(alive):
                break
            if stats is not None:
                stats["stage_evals"][stage_i] += len(alive)
            votes = np.zeros(len(alive), dtype=np.float64)
            axs, ays = ox[alive], oy[alive]
            for stump in stage.stumps:
                raw = np.zeros(len(alive), dtype=np.float64)
                for wgt, x1, y1, x2, y2 in _scale_rects(stump.feature.rects(), scale):
                    raw += wgt * (ii[ays + y2, axs + x2] - ii[ays + y1, axs + x2]
                                  - ii[ays + y2, axs + x1] + ii[ays + y1, axs + x1])
                vals = raw * inv[alive]
                votes += stump.alpha * (stump.polarity * vals
                                        < stump.polarity * stump.threshold)
            margins = votes - stage.threshold
            passed = margins >= 0.0
            margins = margins[passed]
            alive = alive[passed]
        for k, win_i in enumerate(alive):
            det_boxes.append([ox[win_i], oy[win_i],
                              ox[win_i] + side, oy[win_i] + side])
            det_scores.append(1.0 / (1.0 + np.exp(-margins[k])))
        scale *= scale_step

    if not det_boxes:
        return []
    det_boxes = np.asarray(det_boxes, dtype=np.float32)
    det_scores = np.asarray(det_scores, dtype=np.float32)
    keep = bx.nms(det_boxes, det_scores, 0.3, "union")
    return [Detection(det_boxes[i], det_scores[i]) for i in keep]


_KIND_NAMES = {k.value: k for k in FeatureKind}


def save_cascade(model, path):
    """Serialize a cascade as documented text, floats at 9 significant
    digits."""
    lines = ["HAARCASCADE1", f"window {model.window}", f"stages {len(model.stages)}"]
    for stage in model.stages:
        lines.append(f"stage {len(stage.stumps)} {stage.threshold:.9g}")
        for s in stage.stumps:
            f = s.feature
            lines.append(f"stump {f.kind.value} {f.x} {f.y} {f.w} {f.h} "
                         f"{s.threshold:.9g} {s.polarity} {s.alpha:.9g}")
    atomic_write_text(path, "\n".join(lines) + "\n")


class CascadeFormatError(ValueError):
    pass


def load_cascade(path):
    """Parse a cascade saved by save_cascade."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "HAARCASCADE1":
        raise CascadeFormatError("bad cascade header")
    try:
        window = int(lines[1].split()[1])
        n_stages = int(lines[2].split()[1])
        pos = 3
        stages = []
        for _ in range(n_stages):
            _, n_stumps, threshold = lines[pos].split()
            pos += 1
            stumps = []
            for _ in range(int(n_stumps)):
                parts = lines[pos].split()
                pos += 1
                kind = _KIND_NAMES[parts[1]]
                feat = HaarFeature(kind, int(parts[2]), int(parts[3]),
                                   int(parts[4]), int(parts[5]))
                stumps.append(Stump(feat, float(parts[6]), int(parts[7]),
                                    float(parts[8])))
            stages.append(CascadeStage(stumps, float(threshold)))
    except (IndexError, KeyError, ValueError) as exc:
        raise CascadeFormatError(f"malformed cascade file: {exc}") from exc
    return HaarCascadeModel(stages=stages, window=window)
