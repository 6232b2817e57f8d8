"""Box arithmetic: IoU, non-maximum suppression, offset regression, square
conversion, proposal-map decoding, and crop geometry.

Boxes are (x1, y1, x2, y2) float32 rows with x2 > x1 and y2 > y1, origin at
the top-left; width is x2 - x1 (no half-open pixel convention). Coordinates
stay continuous; rounding to pixels happens only inside crop geometry.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

PNET_CELL = 12   # receptive field of one pnet output cell
PNET_STRIDE = 2  # input stride between adjacent pnet output cells


@dataclass
class Detection:
    """One detector output: a box, its confidence, and optional landmarks
    (5 (x, y) points: eyes, nose tip, mouth corners)."""

    box: np.ndarray
    score: float
    landmarks: Optional[np.ndarray] = None

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float32).reshape(4)
        self.score = float(self.score)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")
        if self.landmarks is not None:
            self.landmarks = np.asarray(self.landmarks, dtype=np.float32).reshape(5, 2)


def boxes_array(dets):
    if not dets:
        return np.zeros((0, 4), dtype=np.float32)
    return np.stack([d.box for d in dets]).astype(np.float32)


def scores_array(dets):
    return np.array([d.score for d in dets], dtype=np.float32)


def _areas(boxes):
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def _intersections(box, boxes):
    ix1 = np.maximum(box[0], boxes[:, 0])
    iy1 = np.maximum(box[1], boxes[:, 1])
    ix2 = np.minimum(box[2], boxes[:, 2])
    iy2 = np.minimum(box[3], boxes[:, 3])
    return np.maximum(0.0, ix2 - ix1) * np.maximum(0.0, iy2 - iy1)


def iou_one_to_many(box, boxes, mode="union"):
    """IoU of one box against rows of boxes; mode 'min' normalizes by the
    smaller area instead of the union."""
    box = np.asarray(box, dtype=np.float32)
    boxes = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
    inter = _intersections(box, boxes)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = _areas(boxes)
    if mode == "union":
        denom = area + areas - inter
    elif mode == "min":
        denom = np.minimum(area, areas)
    else:
        raise ValueError(f"unknown IoU mode {mode!r}")
    out = np.zeros_like(inter)
    np.divide(inter, denom, out=out, where=denom > 0)
    return out


def iou(a, b, mode="union"):
    """Overlap ratio of two boxes, in [0, 1]."""
    return float(iou_one_to_many(np.asarray(a, dtype=np.float32),
                                 np.asarray(b, dtype=np.float32).reshape(1, 4),
                                 mode)[0])


def nms(boxes, scores, threshold, mode="union"):
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-scoring remaining box and discards all others
    overlapping it with IoU > threshold. Equal scores are ordered by ascending
    original index. Returns kept indices in descending score order.
    """
    boxes = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float32).reshape(-1)
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(n), -scores))
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        if not rest.size:
            break
        overlaps = iou_one_to_many(boxes[i], boxes[rest], mode)
        order = rest[overlaps <= threshold]
    return np.asarray(keep, dtype=np.int64)


def nms_detections(dets, threshold, mode="union"):
    """nms over a list of Detection; returns kept indices."""
    return nms(boxes_array(dets), scores_array(dets), threshold, mode)


def apply_regression(boxes, offsets):
    """Shift box corners by offsets normalized to box width/height:
    x1' = x1 + dx1*w, y1' = y1 + dy1*h, and likewise for the far corner."""
    boxes = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
    offsets = np.asarray(offsets, dtype=np.float32).reshape(-1, 4)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    scale = np.stack([w, h, w, h], axis=1)
    return boxes + offsets * scale


def valid_mask(boxes):
    """Rows with positive width and height and finite coordinates."""
    boxes = np.asarray(boxes).reshape(-1, 4)
    return (np.isfinite(boxes).all(axis=1)
            & (boxes[:, 2] > boxes[:, 0])
            & (boxes[:, 3] > boxes[:, 1]))


def to_square(boxes):
    """Expand each box to a square of side max(w, h) about its center."""
    boxes = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    side = np.maximum(w, h)
    cx = (boxes[:, 0] + boxes[:, 2]) * 0.5
    cy = (boxes[:, 1] + boxes[:, 3]) * 0.5
    half = side * 0.5
    return np.stack([cx - half, cy - half, cx + half, cy + half], axis=1)


def decode_pnet_map(prob_map, offset_map, scale, threshold):
    """Turn pnet's dense output maps into candidate boxes.

    Each qualifying cell (i, j) maps to the 12x12 input window at stride-2
    offset (2j, 2i), divided by the pyramid scale. Returns (boxes, scores,
    offsets); offsets are carried along to be applied after suppression.
    """
    prob_map = np.asarray(prob_map)
    offset_map = np.asarray(offset_map)
    if prob_map.shape != offset_map.shape[1:]:
        raise ValueError(
            f"map extents differ: probabilities {prob_map.shape}, "
            f"offsets {offset_map.shape}")
    ii, jj = np.nonzero(prob_map >= threshold)
    if ii.size == 0:
        return (np.zeros((0, 4), dtype=np.float32),
                np.zeros(0, dtype=np.float32),
                np.zeros((0, 4), dtype=np.float32))
    x1 = PNET_STRIDE * jj / scale
    y1 = PNET_STRIDE * ii / scale
    x2 = (PNET_STRIDE * jj + PNET_CELL) / scale
    y2 = (PNET_STRIDE * ii + PNET_CELL) / scale
    boxes = np.stack([x1, y1, x2, y2], axis=1).astype(np.float32)
    scores = prob_map[ii, jj].astype(np.float32)
    offsets = offset_map[:, ii, jj].T.astype(np.float32)
    return boxes, scores, offsets


class BoxOutsideImageError(ValueError):
    """The requested crop lies entirely outside the image."""


@dataclass
class CropPlan:
    """Pixel-space plan for cropping a (possibly out-of-bounds) box: copy the
    clamped source rectangle to (dst_x, dst_y) of a zero-filled out_w x out_h
    destination."""

    src_x1: int
    src_y1: int
    src_x2: int
    src_y2: int
    dst_x: int
    dst_y: int
    out_w: int
    out_h: int


def _round_away(v):
    return int(np.floor(v + 0.5)) if v >= 0 else int(np.ceil(v - 0.5))


def crop_geometry(box, image_w, image_h):
    """Plan a zero-padded crop of `box` from an image_w x image_h image.

    Coordinates are rounded half away from zero; the destination extent equals
    the rounded box extent.
    """
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image extents must be positive")
    x1, y1, x2, y2 = (float(v) for v in np.asarray(box).reshape(4))
    ix1, iy1, ix2, iy2 = (_round_away(v) for v in (x1, y1, x2, y2))
    out_w = ix2 - ix1
    out_h = iy2 - iy1
    if out_w <= 0 or out_h <= 0:
        raise ValueError(f"box {(x1, y1, x2, y2)} collapses to zero pixels")
    sx1 = max(ix1, 0)
    sy1 = max(iy1, 0)
    sx2 = min(ix2, image_w)
    sy2 = min(iy2, image_h)
    if sx1 >= sx2 or sy1 >= sy2:
        raise BoxOutsideImageError(
            f"box {(x1, y1, x2, y2)} lies outside the {image_w}x{image_h} image")
    return CropPlan(sx1, sy1, sx2, sy2, sx1 - ix1, sy1 - iy1, out_w, out_h)


def extract_crop(image, box):
    """Crop `box` from an (H, W, C) image, zero-filling out-of-bounds areas."""
    h, w = image.shape[:2]
    plan = crop_geometry(box, w, h)
    out = np.zeros((plan.out_h, plan.out_w) + image.shape[2:], dtype=image.dtype)
    src = image[plan.src_y1:plan.src_y2, plan.src_x1:plan.src_x2]
    out[plan.dst_y:plan.dst_y + src.shape[0],
        plan.dst_x:plan.dst_x + src.shape[1]] = src
    return out
