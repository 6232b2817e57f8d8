"""Synthetic face scenes and training patches.

A synthetic "face" is a bright ellipse with two dark eye dots, a nose dot,
and a dark mouth bar, drawn over a textured background. Scenes may also
contain distractor ellipses (no eyes/mouth) so detectors must use the inner
structure, not mere brightness. All generation is deterministic per seed.
"""

import numpy as np

from . import boxes as bx
from .pipeline import ensure_rgb, normalize, resize_bilinear
from .train import SampleKind, TrainingSample

FACE_MIN_SIZE = 16.0
FACE_MAX_SIZE = 56.0


def _texture(rng, h, w):
    base = rng.uniform(40.0, 110.0)
    gx = rng.uniform(-0.5, 0.5)
    gy = rng.uniform(-0.5, 0.5)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    canvas = base + gx * xx + gy * yy + rng.normal(0.0, 9.0, (h, w))
    for _ in range(int(rng.integers(0, 4))):
        cx = rng.uniform(0, w)
        cy = rng.uniform(0, h)
        radius = rng.uniform(4.0, max(8.0, min(h, w) / 3.0))
        amp = rng.uniform(-35.0, 35.0)
        canvas += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * radius * radius))
    return np.clip(canvas, 0.0, 255.0)


def _draw_ellipse(canvas, cx, cy, rx, ry, value):
    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    canvas[mask] = value
    return mask


def _draw_face(canvas, rng, cx, cy, size):
    """Draw one face; returns (truth box, 5 landmark points)."""
    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)

    face_val = rng.uniform(175.0, 240.0)
    _draw_ellipse(canvas, cx, cy, 0.42 * size, 0.48 * size, face_val)

    eye_dx = 0.18 * size
    eye_dy = 0.13 * size
    eye_r = max(0.07 * size, 0.8)
    eye_val = rng.uniform(10.0, 60.0)
    for ex in (cx - eye_dx, cx + eye_dx):
        mask = (xx - ex) ** 2 + (yy - (cy - eye_dy)) ** 2 <= eye_r ** 2
        canvas[mask] = eye_val

    nose_y = cy + 0.06 * size
    nose_r = max(0.05 * size, 0.6)
    mask = (xx - cx) ** 2 + (yy - nose_y) ** 2 <= nose_r ** 2
    canvas[mask] = rng.uniform(100.0, 150.0)

    mouth_y = cy + 0.26 * size
    mouth_hw = 0.19 * size
    mouth_hh = max(0.045 * size, 0.6)
    mask = (np.abs(xx - cx) <= mouth_hw) & (np.abs(yy - mouth_y) <= mouth_hh)
    canvas[mask] = rng.uniform(15.0, 70.0)

    box = np.array([cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2],
                   dtype=np.float32)
    landmarks = np.array([
        [cx - eye_dx, cy - eye_dy],
        [cx + eye_dx, cy - eye_dy],
        [cx, nose_y],
        [cx - mouth_hw, mouth_y],
        [cx + mouth_hw, mouth_y],
    ], dtype=np.float32)
    return box, landmarks


def _draw_distractor(canvas, rng, cx, cy, size):
    value = rng.uniform(175.0, 240.0)
    _draw_ellipse(canvas, cx, cy, 0.42 * size, 0.48 * size, value)


def _to_rgb(gray, rng):
    gains = 1.0 + rng.uniform(-0.06, 0.06, size=3)
    rgb = np.clip(gray[:, :, None] * gains[None, None, :], 0.0, 255.0)
    return rgb.astype(np.uint8)


def render_scene(rng, width, height, n_faces=1, distractor_prob=0.25,
                 min_size=20.0, max_size=60.0):
    """Render a scene with `n_faces` faces; returns (rgb image, truth boxes
    (k,4), truth landmarks (k,5,2))."""
    canvas = _texture(rng, height, width)
    boxes, landmark_sets = [], []
    for _ in range(n_faces):
        for _attempt in range(60):
            size = rng.uniform(min_size, min(max_size, min(width, height) - 6))
            margin = size / 2 + 2
            if width - margin <= margin or height - margin <= margin:
                continue
            cx = rng.uniform(margin, width - margin)
            cy = rng.uniform(margin, height - margin)
            cand = np.array([cx - size / 2, cy - size / 2,
                             cx + size / 2, cy + size / 2], dtype=np.float32)
            if all(bx.iou(cand, b) < 0.05 for b in boxes):
                box, lmk = _draw_face(canvas, rng, cx, cy, size)
                boxes.append(box)
                landmark_sets.append(lmk)
                break
    if rng.uniform() < distractor_prob:
        for _attempt in range(40):
            size = rng.uniform(min_size, min(max_size, min(width, height) - 6))
            margin = size / 2 + 2
            if width - margin <= margin or height - margin <= margin:
                break
            cx = rng.uniform(margin, width - margin)
            cy = rng.uniform(margin, height - margin)
            cand = np.array([cx - size / 2, cy - size / 2,
                             cx + size / 2, cy + size / 2], dtype=np.float32)
            if all(bx.iou(cand, b) < 0.05 for b in boxes):
                _draw_distractor(canvas, rng, cx, cy, size)
                break
    img = _to_rgb(canvas, rng)
    if boxes:
        return img, np.stack(boxes), np.stack(landmark_sets)
    return img, np.zeros((0, 4), np.float32), np.zeros((0, 5, 2), np.float32)


def _patch_from_crop(scene, crop_box, patch_size):
    crop = bx.extract_crop(scene, crop_box)
    return resize_bilinear(crop, patch_size, patch_size)


def _normalized_patch(scene, crop_box, patch_size):
    return normalize(_patch_from_crop(scene, crop_box, patch_size))[0]


def _face_scene(rng):
    """A small scene holding exactly one face, for patch sampling."""
    size = rng.uniform(FACE_MIN_SIZE, FACE_MAX_SIZE)
    side = int(size * 2.4) + 8
    canvas = _texture(rng, side, side)
    cx = side / 2 + rng.uniform(-2.0, 2.0)
    cy = side / 2 + rng.uniform(-2.0, 2.0)
    box, lmk = _draw_face(canvas, rng, cx, cy, size)
    return _to_rgb(canvas, rng), box, lmk, size


def _square_crop(cx, cy, side):
    half = side / 2
    return np.array([cx - half, cy - half, cx + half, cy + half], dtype=np.float32)


def _sample_crop(rng, box, size, iou_lo, iou_hi, side_range, jitter):
    """Rejection-sample a square crop whose IoU with `box` lies in
    [iou_lo, iou_hi)."""
    cx = (box[0] + box[2]) / 2
    cy = (box[1] + box[3]) / 2
    for _attempt in range(200):
        side = size * rng.uniform(*side_range)
        dx = rng.uniform(-jitter, jitter) * size
        dy = rng.uniform(-jitter, jitter) * size
        crop = _square_crop(cx + dx, cy + dy, side)
        overlap = bx.iou(crop, box)
        if iou_lo <= overlap < iou_hi:
            return crop
    raise RuntimeError("crop sampling failed to hit the requested IoU range")


def _box_target(crop, truth):
    w = crop[2] - crop[0]
    h = crop[3] - crop[1]
    return np.array([(truth[0] - crop[0]) / w, (truth[1] - crop[1]) / h,
                     (truth[2] - crop[2]) / w, (truth[3] - crop[3]) / h],
                    dtype=np.float32)


def _landmark_target(crop, landmarks):
    w = crop[2] - crop[0]
    h = crop[3] - crop[1]
    out = np.empty(10, dtype=np.float32)
    out[0::2] = (landmarks[:, 0] - crop[0]) / w
    out[1::2] = (landmarks[:, 1] - crop[1]) / h
    return out


def _positive_sample(rng, patch_size, kind):
    scene, box, lmk, size = _face_scene(rng)
    crop = _sample_crop(rng, box, size, 0.65, 1.01, (0.9, 1.18), 0.08)
    patch = _normalized_patch(scene, crop, patch_size)
    if kind is SampleKind.LANDMARK:
        return TrainingSample(patch=patch, y_det=None, y_box=None,
                              y_landmark=_landmark_target(crop, lmk),
                              kind=SampleKind.LANDMARK)
    return TrainingSample(patch=patch, y_det=1, y_box=_box_target(crop, box),
                          y_landmark=None, kind=SampleKind.POSITIVE)


def _part_sample(rng, patch_size):
    scene, box, _lmk, size = _face_scene(rng)
    crop = _sample_crop(rng, box, size, 0.4, 0.65, (0.85, 1.5), 0.35)
    patch = _normalized_patch(scene, crop, patch_size)
    return TrainingSample(patch=patch, y_det=None, y_box=_box_target(crop, box),
                          y_landmark=None, kind=SampleKind.PART)


def _offface_crop(rng, box, size, scene_w, scene_h):
    """A square crop with IoU < 0.3 against the truth box."""
    for _attempt in range(200):
        crop_side = size * rng.uniform(0.5, 1.6)
        cx = rng.uniform(crop_side * 0.3, scene_w - crop_side * 0.3)
        cy = rng.uniform(crop_side * 0.3, scene_h - crop_side * 0.3)
        crop = _square_crop(cx, cy, crop_side)
        if bx.iou(crop, box) < 0.3:
            return crop
    raise RuntimeError("failed to sample an off-face crop")


def _negative_scene_crop(rng):
    if rng.uniform() < 0.5:
        # pure texture, possibly with an eyeless distractor ellipse
        side = int(rng.uniform(30, 80))
        canvas = _texture(rng, side, side)
        if rng.uniform() < 0.35:
            size = rng.uniform(FACE_MIN_SIZE, side * 0.7)
            _draw_distractor(canvas, rng, side / 2 + rng.uniform(-3, 3),
                             side / 2 + rng.uniform(-3, 3), size)
        scene = _to_rgb(canvas, rng)
        crop_side = rng.uniform(12.0, side * 0.95)
        cx = rng.uniform(crop_side / 2, side - crop_side / 2)
        cy = rng.uniform(crop_side / 2, side - crop_side / 2)
        return scene, _square_crop(cx, cy, crop_side)
    # off-face crop from a face scene
    scene, box, _lmk, size = _face_scene(rng)
    h, w = scene.shape[:2]
    return scene, _offface_crop(rng, box, size, w, h)


def _negative_sample(rng, patch_size):
    scene, crop = _negative_scene_crop(rng)
    patch = _normalized_patch(scene, crop, patch_size)
    return TrainingSample(patch=patch, y_det=0, y_box=None, y_landmark=None,
                          kind=SampleKind.NEGATIVE)


def synth_dataset(n, patch_size, rng_seed):
    """Deterministic synthetic training set with class balance close to
    1:3:1:2 positives:negatives:parts:landmarks."""
    rng = np.random.default_rng(rng_seed)
    n_pos = max(1, round(n / 7))
    n_part = max(1, round(n / 7))
    n_lmk = max(1, round(2 * n / 7))
    n_neg = max(1, n - n_pos - n_part - n_lmk)
    samples = []
    for _ in range(n_pos):
        samples.append(_positive_sample(rng, patch_size, SampleKind.POSITIVE))
    for _ in range(n_neg):
        samples.append(_negative_sample(rng, patch_size))
    for _ in range(n_part):
        samples.append(_part_sample(rng, patch_size))
    for _ in range(n_lmk):
        samples.append(_positive_sample(rng, patch_size, SampleKind.LANDMARK))
    order = rng.permutation(len(samples))
    return [samples[i] for i in order]


def _scan_grid_windows(rng, count, window):
    """Background windows harvested the way a sliding-window scan sees them:
    grid positions at geometric scales over face-free scenes."""
    from .haar import to_gray
    out = []
    while len(out) < count:
        side = int(rng.uniform(70, 130))
        img, _boxes, _lmks = render_scene(rng, side, side, n_faces=0,
                                          distractor_prob=0.45)
        gray = to_gray(img)
        for scale in (1.0, 1.25, 1.5625, 1.953125):
            wside = int(np.floor(window * scale + 0.5))
            if wside > side:
                break
            stride = max(4, int(2 * scale))
            for oy in range(0, side - wside + 1, stride):
                for ox in range(0, side - wside + 1, stride):
                    out.append((gray[oy:oy + wside, ox:ox + wside], wside))
    order = rng.permutation(len(out))[:count]
    crops = []
    for i in order:
        win, wside = out[i]
        if wside == window:
            crops.append(win.copy())
        else:
            crops.append(resize_bilinear(win, window, window))
    return crops


def synth_haar_windows(n_pos, n_neg, rng_seed, window=24):
    """Grayscale face/background windows for training the Haar baseline.
    Returns (positives (n_pos, w, w) u8, negatives (n_neg, w, w) u8)."""
    from .haar import to_gray
    rng = np.random.default_rng(rng_seed)
    # crop side ratios cover the 1.25 scan-scale gap, so faces between scan
    # scales still look like training windows
    pos = []
    for _ in range(n_pos):
        scene, box, _lmk, size = _face_scene(rng)
        crop = _sample_crop(rng, box, size, 0.62, 1.01, (0.85, 1.28), 0.08)
        pos.append(to_gray(_patch_from_crop(scene, crop, window)))
    # negatives: random crops, scan-grid background windows, and badly
    # framed face windows (off-center or much looser than the face)
    n_scan = n_neg * 2 // 5
    n_near = n_neg * 3 // 10
    n_plain = n_neg - n_scan - n_near
    neg = []
    for _ in range(n_plain):
        scene, crop = _negative_scene_crop(rng)
        neg.append(to_gray(_patch_from_crop(scene, crop, window)))
    for _ in range(n_near):
        scene, box, _lmk, size = _face_scene(rng)
        # sub-face detail windows up through loose over-framed ones
        crop = _sample_crop(rng, box, size, 0.0, 0.45, (0.35, 2.4), 0.6)
        neg.append(to_gray(_patch_from_crop(scene, crop, window)))
    neg.extend(_scan_grid_windows(rng, n_scan, window))
    return np.stack(pos), np.stack(neg)


def synth_scene_set(n_images, rng_seed, width=128, height=128,
                    min_faces=1, max_faces=2, min_size=24.0, max_size=64.0):
    """Detection-scale scenes with ground truth, for end-to-end evaluation.
    Returns a list of (image, truth boxes, truth landmarks)."""
    rng = np.random.default_rng(rng_seed)
    scenes = []
    for _ in range(n_images):
        n_faces = int(rng.integers(min_faces, max_faces + 1))
        img, boxes, lmks = render_scene(rng, width, height, n_faces=n_faces,
                                        min_size=min_size, max_size=max_size)
        scenes.append((ensure_rgb(img), boxes, lmks))
    return scenes
