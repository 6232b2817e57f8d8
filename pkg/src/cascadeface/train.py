"""Multi-task training: classification / box / landmark losses, their weighted
sum with per-kind task gating, online hard-example mining on the
classification task, and a deterministic mini-batch SGD loop.

Per-sample task gating: negatives carry only the classification loss,
positives classification + box, parts box only, landmark samples landmark
only. The batch objective is the mean over the batch of the weighted
per-sample totals; hard-example mining keeps the top fraction of
classification losses per batch and zeroes the rest.
"""

import io
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

import numpy as np

from . import nets, ops

PROB_EPS = 1e-7


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite during training."""


class MissingTargetError(ValueError):
    """A sample lacks the target required by its gated-on task."""


class SampleKind(Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    PART = "part"
    LANDMARK = "landmark"


@dataclass
class TrainingSample:
    """One training patch with its task targets.

    patch: normalized float32 (C, S, S); targets per kind: negatives have only
    y_det=0, positives y_det=1 plus a box target, parts a box target only,
    landmark samples a 10-vector landmark target only.
    """

    patch: np.ndarray
    y_det: Optional[int]
    y_box: Optional[np.ndarray]
    y_landmark: Optional[np.ndarray]
    kind: SampleKind

    def __post_init__(self):
        k = self.kind
        if k is SampleKind.NEGATIVE:
            ok = self.y_det == 0 and self.y_box is None and self.y_landmark is None
        elif k is SampleKind.POSITIVE:
            ok = self.y_det == 1 and self.y_box is not None and self.y_landmark is None
        elif k is SampleKind.PART:
            ok = self.y_det is None and self.y_box is not None and self.y_landmark is None
        elif k is SampleKind.LANDMARK:
            ok = self.y_det is None and self.y_box is None and self.y_landmark is not None
        else:
            ok = False
        if not ok:
            raise ValueError(f"targets inconsistent with sample kind {k}")


@dataclass
class LossWeights:
    """Per-task weights for the summed loss; not all may be zero."""

    det: float = 1.0
    box: float = 0.5
    landmark: float = 0.5

    def __post_init__(self):
        if self.det < 0 or self.box < 0 or self.landmark < 0:
            raise ValueError("loss weights must be non-negative")
        if self.det == self.box == self.landmark == 0:
            raise ValueError("at least one loss weight must be positive")


def default_loss_weights(stage):
    """(1, 0.5, 0.5) for pnet/rnet; the output stage upweights landmarks."""
    if stage == "onet":
        return LossWeights(1.0, 0.5, 1.0)
    return LossWeights(1.0, 0.5, 0.5)


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 64
    epochs: int = 30
    ohem_keep_ratio: float = 0.7
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 0.0 < self.ohem_keep_ratio <= 1.0:
            raise ValueError("ohem_keep_ratio must lie in (0, 1]")


@dataclass
class EpochStats:
    epoch: int
    det_loss: float
    box_loss: float
    landmark_loss: float
    total: float


def cls_loss(p, y):
    """Binary cross-entropy of face probability p against label y in {0,1};
    p is clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def box_loss(pred, target):
    """Squared Euclidean distance between predicted and target 4-vectors."""
    pred = np.asarray(pred, dtype=np.float64).reshape(4)
    target = np.asarray(target, dtype=np.float64).reshape(4)
    return float(np.sum((pred - target) ** 2))


def landmark_loss(pred, target):
    """Squared Euclidean distance between predicted and target 10-vectors."""
    pred = np.asarray(pred, dtype=np.float64).reshape(10)
    target = np.asarray(target, dtype=np.float64).reshape(10)
    return float(np.sum((pred - target) ** 2))


_GATES = {
    SampleKind.NEGATIVE: ("det",),
    SampleKind.POSITIVE: ("det", "box"),
    SampleKind.PART: ("box",),
    SampleKind.LANDMARK: ("landmark",),
}


def total_loss(kind, weights, det=None, box=None, landmark=None):
    """Weighted sum of the per-task losses a sample kind participates in."""
    values = {"det": det, "box": box, "landmark": landmark}
    alphas = {"det": weights.det, "box": weights.box, "landmark": weights.landmark}
    total = 0.0
    for task in _GATES[kind]:
        if values[task] is None:
            raise MissingTargetError(f"{kind.value} sample requires a {task} loss")
        total += alphas[task] * values[task]
    return total


def ohem_select(losses, keep_ratio):
    """Indices of the ceil(keep_ratio * n) largest losses, hardest first;
    ties broken by ascending index."""
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    n = len(losses)
    if n == 0:
        raise ValueError("ohem_select requires a nonempty batch")
    k = int(np.ceil(keep_ratio * n))
    order = np.lexsort((np.arange(n), -losses))
    return order[:k]


def sgd_step(store, grads, lr):
    """In-place SGD update w <- w - lr * g for every parameter in grads."""
    for name, g in grads.items():
        store[name] = store[name] - lr * g.astype(store[name].dtype)
    return store


def init_weights(spec, rng_seed=0):
    """Glorot-uniform weights, zero biases, PReLU slopes at 0.25."""
    rng = np.random.default_rng(rng_seed)
    store = {}
    for layer in spec.trunk + spec.heads:
        if isinstance(layer, nets.Conv):
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            fan_out = layer.out_channels * layer.kernel * layer.kernel
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            store[f"{spec.stage}.{layer.name}.weight"] = (
                rng.uniform(-limit, limit, shape).astype(np.float32))
            store[f"{spec.stage}.{layer.name}.bias"] = (
                np.zeros(layer.out_channels, dtype=np.float32))
        elif isinstance(layer, nets.PRelu):
            store[f"{spec.stage}.{layer.name}.slopes"] = (
                np.full(layer.channels, 0.25, dtype=np.float32))
        elif isinstance(layer, nets.Dense):
            limit = np.sqrt(6.0 / (layer.in_features + layer.out_features))
            store[f"{spec.stage}.{layer.name}.weight"] = (
                rng.uniform(-limit, limit, (layer.out_features, layer.in_features))
                .astype(np.float32))
            store[f"{spec.stage}.{layer.name}.bias"] = (
                np.zeros(layer.out_features, dtype=np.float32))
    return store


def _stack_batch(samples):
    x = np.stack([s.patch for s in samples]).astype(np.float32)
    n = len(samples)
    det_mask = np.array([s.y_det is not None for s in samples])
    y_det = np.array([s.y_det or 0 for s in samples], dtype=np.float32)
    box_mask = np.array([s.y_box is not None for s in samples])
    y_box = np.zeros((n, 4), dtype=np.float32)
    for i, s in enumerate(samples):
        if s.y_box is not None:
            y_box[i] = s.y_box
    lmk_mask = np.array([s.y_landmark is not None for s in samples])
    y_lmk = np.zeros((n, 10), dtype=np.float32)
    for i, s in enumerate(samples):
        if s.y_landmark is not None:
            y_lmk[i] = s.y_landmark
    return x, det_mask, y_det, box_mask, y_box, lmk_mask, y_lmk


def batch_losses_and_grads(spec, store, samples, weights, keep_ratio):
    """Forward/backward over one batch.

    Returns (stats, grads) where stats carries the mean selected
    classification loss, mean box loss, mean landmark loss, and the batch
    objective (weighted task sums over the batch size); grads maps parameter
    names to gradients of that objective.
    """
    x, det_mask, y_det, box_mask, y_box, lmk_mask, y_lmk = _stack_batch(samples)
    n = len(samples)
    caches, head_caches = [], []
    cls_out, box_out, lmk_out = nets.forward_heads(
        spec, store, x, caches=caches, head_caches=head_caches)
    cls2 = cls_out.reshape(n, 2)
    box2 = box_out.reshape(n, 4)
    lmk2 = lmk_out.reshape(n, 10)

    probs = ops.softmax_channels(cls2)
    p_face = probs[:, 1]

    det_idx = np.nonzero(det_mask)[0]
    sel = np.zeros(0, dtype=np.int64)
    det_losses = np.zeros(0)
    if det_idx.size:
        det_losses = cls_loss(p_face[det_idx], y_det[det_idx])
        sel = det_idx[ohem_select(det_losses, keep_ratio)]

    d_cls = np.zeros_like(cls2)
    if sel.size:
        g = (p_face[sel] - y_det[sel]) * (weights.det / n)
        d_cls[sel, 1] = g
        d_cls[sel, 0] = -g

    box_idx = np.nonzero(box_mask)[0]
    box_losses = np.zeros(0)
    d_box = np.zeros_like(box2)
    if box_idx.size:
        diff = box2[box_idx] - y_box[box_idx]
        box_losses = np.sum(diff.astype(np.float64) ** 2, axis=1)
        d_box[box_idx] = 2.0 * diff * (weights.box / n)

    lmk_idx = np.nonzero(lmk_mask)[0]
    lmk_losses = np.zeros(0)
    d_lmk = np.zeros_like(lmk2)
    if lmk_idx.size:
        diff = lmk2[lmk_idx] - y_lmk[lmk_idx]
        lmk_losses = np.sum(diff.astype(np.float64) ** 2, axis=1)
        d_lmk[lmk_idx] = 2.0 * diff * (weights.landmark / n)

    d_heads = (d_cls.reshape(cls_out.shape),
               d_box.reshape(box_out.shape),
               d_lmk.reshape(lmk_out.shape))
    grads, _ = nets.backward_heads(spec, store, caches, head_caches, d_heads)

    sel_losses = cls_loss(p_face[sel], y_det[sel]) if sel.size else np.zeros(0)
    objective = (weights.det * sel_losses.sum()
                 + weights.box * box_losses.sum()
                 + weights.landmark * lmk_losses.sum()) / n
    # reported sums cover every participating sample (mining masks gradients,
    # not statistics) so epoch aggregates do not depend on batch partition
    stats = {
        "det_sum": float(det_losses.sum()),
        "det_count": int(det_idx.size),
        "box_sum": float(box_losses.sum()),
        "box_count": int(box_idx.size),
        "landmark_sum": float(lmk_losses.sum()),
        "landmark_count": int(lmk_idx.size),
        "objective": float(objective),
    }
    return stats, grads


def train_stage(spec, store, samples, cfg, weights=None):
    """Mini-batch SGD over the dataset; returns (trained store, epoch stats).

    Deterministic for a fixed config seed. The input store is not mutated.
    """
    if weights is None:
        weights = default_loss_weights(spec.stage)
    if not samples:
        raise ValueError("training requires a nonempty dataset")
    size = spec.input_size
    for s in samples:
        if s.patch.shape[-2:] != (size, size):
            raise ValueError(
                f"sample patch {s.patch.shape[-2:]} does not match "
                f"{spec.stage} input {size}x{size}")
    store = {k: v.copy() for k, v in store.items()}
    rng = np.random.default_rng(cfg.rng_seed)
    history: List[EpochStats] = []
    n = len(samples)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sums = {"det_sum": 0.0, "det_count": 0, "box_sum": 0.0, "box_count": 0,
                "landmark_sum": 0.0, "landmark_count": 0}
        for start in range(0, n, cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            stats, grads = batch_losses_and_grads(
                spec, store, batch, weights, cfg.ohem_keep_ratio)
            sgd_step(store, grads, cfg.learning_rate)
            for key in sums:
                sums[key] += stats[key]
        det = sums["det_sum"] / max(sums["det_count"], 1)
        box = sums["box_sum"] / max(sums["box_count"], 1)
        lmk = sums["landmark_sum"] / max(sums["landmark_count"], 1)
        total = weights.det * det + weights.box * box + weights.landmark * lmk
        if not np.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch}: det={det} box={box} "
                f"landmark={lmk}")
        history.append(EpochStats(epoch, det, box, lmk, total))
    return store, history


def predict_face_probs(spec, store, patches, batch_size=256):
    """Face probabilities for a stack of normalized patches."""
    out = []
    for start in range(0, len(patches), batch_size):
        x = np.asarray(patches[start:start + batch_size], dtype=np.float32)
        cls_out, _, _ = nets.forward_heads(spec, store, x)
        probs = ops.softmax_channels(cls_out.reshape(len(x), 2))
        out.append(probs[:, 1])
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def classification_accuracy(spec, store, samples, batch_size=256):
    """Accuracy of face/not-face decisions (p >= 0.5) over the det-labeled
    subset of `samples`."""
    labeled = [s for s in samples if s.y_det is not None]
    if not labeled:
        raise ValueError("no classification-labeled samples")
    probs = predict_face_probs(spec, store, [s.patch for s in labeled], batch_size)
    preds = (probs >= 0.5).astype(int)
    truth = np.array([s.y_det for s in labeled])
    return float((preds == truth).mean())


def history_csv(history):
    """Loss history as CSV: epoch, det_loss, box_loss, landmark_loss, total."""
    buf = io.StringIO()
    buf.write("epoch,det_loss,box_loss,landmark_loss,total\n")
    for row in history:
        buf.write(f"{row.epoch},{row.det_loss:.6f},{row.box_loss:.6f},"
                  f"{row.landmark_loss:.6f},{row.total:.6f}\n")
    return buf.getvalue()
