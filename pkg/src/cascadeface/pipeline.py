"""End-to-end coarse-to-fine detection: image pyramid -> proposal stage
(pnet) -> refinement stage (rnet) -> output stage with landmarks (onet)."""

import time
from dataclasses import dataclass, field
from typing import List

import numpy as np

from . import boxes as bx
from . import nets
from .boxes import Detection


@dataclass
class PyramidConfig:
    """Pyramid geometry: the first scale maps min_face_size to the 12-px
    proposal window; later scales shrink geometrically by scale_factor."""

    min_face_size: float = 20.0
    scale_factor: float = 0.709

    def __post_init__(self):
        if self.min_face_size < 12:
            raise ValueError("min_face_size must be at least 12 px")
        if not 0.0 < self.scale_factor < 1.0:
            raise ValueError("scale_factor must lie in (0, 1)")


@dataclass
class NmsPass:
    threshold: float
    mode: str


@dataclass
class CascadeConfig:
    """Stage score thresholds, per-pass NMS settings, and pyramid geometry."""

    thresholds: tuple = (0.6, 0.7, 0.7)
    nms_per_scale: NmsPass = field(default_factory=lambda: NmsPass(0.5, "union"))
    nms_cross_scale: NmsPass = field(default_factory=lambda: NmsPass(0.7, "union"))
    nms_refine: NmsPass = field(default_factory=lambda: NmsPass(0.7, "union"))
    nms_output: NmsPass = field(default_factory=lambda: NmsPass(0.7, "min"))
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)

    def __post_init__(self):
        for t in self.thresholds:
            if not 0.0 < t < 1.0:
                raise ValueError("stage thresholds must lie in (0, 1)")


@dataclass
class PipelineResult:
    """Final detections plus per-stage candidate counts and wall times."""

    detections: List[Detection]
    stage_counts: dict
    stage_times: dict


def ensure_rgb(image):
    """Promote (H, W) or (H, W, 1) images to (H, W, 3) by replication."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {image.shape}")
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    return image


def resize_bilinear(image, out_h, out_w):
    """Bilinear resample with half-pixel-centered sampling
    (src = (dst + 0.5) * in/out - 0.5, clamped). uint8 in, uint8 out."""
    image = np.asarray(image)
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be positive")
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()

    sy = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0).astype(np.float32)[:, None]
    fx = (sx - x0).astype(np.float32)[None, :]

    img = image.astype(np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
        squeeze = True
    else:
        squeeze = False
    fy3 = fy[:, :, None]
    fx3 = fx[:, :, None]
    top = img[y0][:, x0] * (1 - fx3) + img[y0][:, x1] * fx3
    bot = img[y1][:, x0] * (1 - fx3) + img[y1][:, x1] * fx3
    out = top * (1 - fy3) + bot * fy3
    if squeeze:
        out = out[:, :, 0]
    if image.dtype == np.uint8:
        return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out.astype(image.dtype)


def normalize(image):
    """Map a uint8 (H, W, C) image to a (1, C, H, W) float32 tensor with
    pixel values (v - 127.5) / 128."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    arr = (image.astype(np.float32) - 127.5) / 128.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))[None]


def normalize_batch(crops):
    """Stack uint8 (H, W, C) crops into one normalized (N, C, H, W) tensor."""
    return np.concatenate([normalize(c) for c in crops], axis=0)


def build_pyramid(image, cfg):
    """Scaled copies of the image, largest first; every emitted level keeps a
    minimum extent of 12 px."""
    image = ensure_rgb(image)
    h, w = image.shape[:2]
    if min(h, w) < 12:
        raise ValueError(f"image must be at least 12x12, got {h}x{w}")
    levels = []
    scale = 12.0 / cfg.min_face_size
    while min(h, w) * scale >= 12.0:
        oh = int(np.floor(h * scale + 0.5))
        ow = int(np.floor(w * scale + 0.5))
        levels.append((scale, resize_bilinear(image, oh, ow)))
        scale *= cfg.scale_factor
    return levels


def _empty():
    return np.zeros((0, 4), dtype=np.float32), np.zeros(0, dtype=np.float32)


def stage1(image, store, cfg):
    """Proposal stage: pnet over the pyramid, per-scale then cross-scale NMS,
    offset regression, square conversion. Returns (boxes, scores)."""
    pnet = nets.build_pnet()
    level_boxes, level_scores, level_offsets = [], [], []
    for scale, scaled in build_pyramid(image, cfg.pyramid):
        out = nets.forward(pnet, store, normalize(scaled))
        b, s, o = bx.decode_pnet_map(out.face_prob[0, 0], out.box_offsets[0],
                                     scale, cfg.thresholds[0])
        if not len(b):
            continue
        keep = bx.nms(b, s, cfg.nms_per_scale.threshold, cfg.nms_per_scale.mode)
        level_boxes.append(b[keep])
        level_scores.append(s[keep])
        level_offsets.append(o[keep])
    if not level_boxes:
        return _empty()
    all_boxes = np.concatenate(level_boxes)
    all_scores = np.concatenate(level_scores)
    all_offsets = np.concatenate(level_offsets)
    keep = bx.nms(all_boxes, all_scores, cfg.nms_cross_scale.threshold,
                  cfg.nms_cross_scale.mode)
    regressed = bx.apply_regression(all_boxes[keep], all_offsets[keep])
    scores = all_scores[keep]
    ok = bx.valid_mask(regressed)
    return bx.to_square(regressed[ok]), scores[ok]


def _crop_batch(image, candidate_boxes, size):
    crops = [resize_bilinear(bx.extract_crop(image, b), size, size)
             for b in candidate_boxes]
    return normalize_batch(crops)


def stage2(image, candidate_boxes, candidate_scores, store, cfg):
    """Refinement stage: crop candidates at 24x24 through rnet, filter by
    score, regress, suppress, square. Returns (boxes, scores)."""
    if not len(candidate_boxes):
        return _empty()
    rnet = nets.build_rnet()
    out = nets.forward(rnet, store, _crop_batch(image, candidate_boxes, 24))
    mask = out.face_prob >= cfg.thresholds[1]
    if not mask.any():
        return _empty()
    regressed = bx.apply_regression(candidate_boxes[mask], out.box_offsets[mask])
    scores = out.face_prob[mask].astype(np.float32)
    ok = bx.valid_mask(regressed)
    regressed, scores = regressed[ok], scores[ok]
    if not len(regressed):
        return _empty()
    keep = bx.nms(regressed, scores, cfg.nms_refine.threshold, cfg.nms_refine.mode)
    return bx.to_square(regressed[keep]), scores[keep]


def stage3(image, candidate_boxes, candidate_scores, store, cfg):
    """Output stage: 48x48 crops through onet; landmark offsets are mapped
    back through each crop box; final NMS runs in min mode. Returns a list
    of Detection."""
    if not len(candidate_boxes):
        return []
    onet = nets.build_onet()
    out = nets.forward(onet, store, _crop_batch(image, candidate_boxes, 48))
    mask = out.face_prob >= cfg.thresholds[2]
    if not mask.any():
        return []
    cand = candidate_boxes[mask]
    scores = out.face_prob[mask].astype(np.float32)
    offsets = out.box_offsets[mask]
    lmk = out.landmark_offsets[mask]

    w = (cand[:, 2] - cand[:, 0])[:, None]
    h = (cand[:, 3] - cand[:, 1])[:, None]
    lx = cand[:, 0:1] + lmk[:, 0::2] * w
    ly = cand[:, 1:2] + lmk[:, 1::2] * h
    landmarks = np.stack([lx, ly], axis=2)  # (n, 5, 2)

    regressed = bx.apply_regression(cand, offsets)
    ok = bx.valid_mask(regressed)
    regressed, scores, landmarks = regressed[ok], scores[ok], landmarks[ok]
    if not len(regressed):
        return []
    keep = bx.nms(regressed, scores, cfg.nms_output.threshold, cfg.nms_output.mode)
    return [Detection(regressed[i], scores[i], landmarks[i]) for i in keep]


def detect(image, store, cfg=None):
    """Run the full cascade over one image; deterministic for fixed weights
    and configuration."""
    if cfg is None:
        cfg = CascadeConfig()
    image = ensure_rgb(image)

    t0 = time.perf_counter()
    b1, s1 = stage1(image, store, cfg)
    t1 = time.perf_counter()
    b2, s2 = stage2(image, b1, s1, store, cfg)
    t2 = time.perf_counter()
    dets = stage3(image, b2, s2, store, cfg)
    t3 = time.perf_counter()

    return PipelineResult(
        detections=dets,
        stage_counts={"stage1": int(len(b1)), "stage2": int(len(b2)),
                      "stage3": len(dets)},
        stage_times={"stage1": t1 - t0, "stage2": t2 - t1, "stage3": t3 - t2,
                     "total": t3 - t0},
    )
