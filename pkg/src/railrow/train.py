"""Training loop: cross-entropy on encoded targets, Adam, per-step cosine decay."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import NumericError, ValidationError
from .grid import (
    RailAnnotation,
    RailPolyline,
    RowAnchorGrid,
    anchor_points,
    clip_polyline,
    decode,
    encode,
    monotone_run,
)
from .nn import CosineSchedule, adam_step
from .nn.ops import cross_entropy_loss

log = logging.getLogger(__name__)

TRACE_FIELDS = ("epoch", "step", "lr", "loss", "train_acc", "val_acc")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    base_lr: float = 4e-4
    seed: int = 0
    rotation: float = 6.0  # degrees, symmetric
    shift: float = 0.1  # fraction of each dimension
    augment: bool = True
    reduction: str = "batch"
    threshold: float = 1.2  # pixels at model resolution, for the trace accuracies
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValidationError("epochs must be >= 0 and batch_size > 0")
        if self.rotation < 0 or not 0 <= self.shift < 0.5:
            raise ValidationError("rotation must be >= 0 and shift in [0, 0.5)")

    def to_dict(self):
        return asdict(self)


def preprocess(images) -> np.ndarray:
    """uint8 N x H x W (or N x 1 x H x W) -> normalized float32 N x 1 x H x W."""
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    return (x / np.float32(255.0) - np.float32(0.5)) / np.float32(0.25)


# -- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class AffineParams:
    angle: float = 0.0  # degrees, counter-clockwise in image coordinates
    tx: float = 0.0  # pixels
    ty: float = 0.0

    def matrix(self, width, height):
        """Forward map ``p -> R (p - c) + c + t`` on (x, y) points, as (A, b)."""
        th = math.radians(self.angle)
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        c = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
        return rot, c - rot @ c + np.array([self.tx, self.ty])

    def inverse(self) -> "AffineParams":
        # R^-1 (p - c - t) + c  ==  R(-θ) (p - c) + c + t'  with t' = -R(-θ) t
        th = math.radians(-self.angle)
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        t = -rot @ np.array([self.tx, self.ty])
        return AffineParams(-self.angle, float(t[0]), float(t[1]))


def sample_affine(rng, width, height, rotation=6.0, shift=0.1) -> AffineParams:
    return AffineParams(rng.uniform(-rotation, rotation),
                        rng.uniform(-shift, shift) * width,
                        rng.uniform(-shift, shift) * height)


def transform_points(points, params: AffineParams, width, height) -> np.ndarray:
    a, b = params.matrix(width, height)
    return np.asarray(points, dtype=np.float64) @ a.T + b


def warp_image(image, params: AffineParams) -> np.ndarray:
    """Bilinear resampling with border replication."""
    h, w = image.shape[:2]
    a, b = params.matrix(w, h)
    ainv = np.linalg.inv(a)
    # scipy works in (row, col) = (y, x); output o samples input at ainv (o - b)
    perm = np.array([[0, 1], [1, 0]])
    mat = perm @ ainv @ perm
    off = perm @ (-ainv @ b)
    out = ndimage.affine_transform(np.asarray(image, dtype=np.float64), mat, offset=off,
                                   order=1, mode="nearest")
    if np.asarray(image).dtype == np.uint8:
        return np.clip(np.round(out), 0, 255).astype(np.uint8)
    return out.astype(np.asarray(image).dtype)


def transform_annotation(annotation: RailAnnotation, params: AffineParams) -> RailAnnotation:
    """Move every vertex, clip to the frame and drop rails left with < 2 vertices."""
    h, w = annotation.image_size
    rails = []
    for r in annotation.rails:
        pts = transform_points(r.vertices, params, w, h)
        verts = clip_polyline(monotone_run([(float(x), float(y)) for x, y in pts]), w, h)
        if len(verts) >= 2:
            rails.append(RailPolyline(r.order_number, verts))
    return RailAnnotation(rails, annotation.scene_tags, annotation.image_size)


def augment(image, annotation: RailAnnotation, rng, rotation=6.0, shift=0.1):
    """Apply one random rotation+shift to the image and, identically, to its rails."""
    h, w = annotation.image_size
    params = sample_affine(rng, w, h, rotation, shift)
    return warp_image(image, params), transform_annotation(annotation, params)


# -- metrics used in the trace -----------------------------------------------

def point_accuracy(pred_x, gt_x, threshold) -> float:
    gt = ~np.isnan(gt_x)
    if not gt.any():
        return float("nan")
    ok = gt & ~np.isnan(pred_x) & (np.abs(np.nan_to_num(pred_x) - np.nan_to_num(gt_x)) <= threshold)
    return float(ok.sum() / gt.sum())


def predict_points(net, images, grid: RowAnchorGrid, batch_size=64) -> np.ndarray:
    """Decoded pixel x for every (image, slot, anchor), NaN where absent."""
    out = []
    for s in range(0, len(images), batch_size):
        logits = net.forward(preprocess(images[s : s + batch_size]))
        out.extend(decode(lg, grid).x for lg in logits)
    return np.stack(out) if out else np.zeros((0, grid.num_rails, grid.num_anchors))


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    store: object
    trace: list = field(default_factory=list)

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
            wr.writeheader()
            for row in self.trace:
                wr.writerow(row)


def _sample_rng(seed, index, epoch):
    return np.random.default_rng([seed, index, epoch])


def train(net, images, annotations, grid: RowAnchorGrid, config: TrainConfig | None = None,
          val=None, callback=None) -> TrainResult:
    """Optimize ``net`` in place on ``(images, annotations)``.

    ``val`` is an optional ``(images, annotations)`` pair evaluated every
    ``config.eval_every`` epochs. Deterministic for a fixed ``config.seed``.
    """
    config = config or TrainConfig()
    n = len(images)
    if n == 0 or n != len(annotations):
        raise ValidationError("training set must be nonempty with one annotation per image")
    images = np.asarray(images)
    base_targets = np.stack([encode(a, grid) for a in annotations])
    val_points = None
    if val is not None and len(val[0]):
        val_points = np.stack([anchor_points(a, grid) for a in val[1]])

    per_epoch = math.ceil(n / config.batch_size)
    schedule = CosineSchedule(config.base_lr, config.epochs * per_epoch)
    store = net.store
    trace = []
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        losses, hits, total = [], 0, 0
        for b in range(per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            if config.augment:
                batch_img, targets, points = [], [], []
                for i in idx:
                    img, ann = augment(images[i], annotations[i], _sample_rng(config.seed, i, epoch),
                                       config.rotation, config.shift)
                    batch_img.append(img)
                    targets.append(encode(ann, grid))
                    points.append(anchor_points(ann, grid))
                batch_img, targets, points = np.stack(batch_img), np.stack(targets), np.stack(points)
            else:
                batch_img, targets = images[idx], base_targets[idx]
                points = None
            lr = schedule(step)
            store.zero_grad()
            logits = net.forward(preprocess(batch_img))
            loss, dlogits = cross_entropy_loss(logits, targets, config.reduction)
            if not np.isfinite(loss) or not np.all(np.isfinite(logits)):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}, batch {b} "
                                   f"(samples {idx.tolist()})")
            net.backward(dlogits)
            adam_step(store, lr)
            step += 1
            losses.append(loss)
            if points is None:
                points = np.stack([anchor_points(annotations[i], grid) for i in idx])
            pred = np.stack([decode(lg, grid).x for lg in logits])
            gt = ~np.isnan(points)
            hits += int((gt & (np.abs(np.nan_to_num(pred, nan=-1e9) - np.nan_to_num(points))
                               <= config.threshold)).sum())
            total += int(gt.sum())
        row = {"epoch": epoch, "step": step, "lr": schedule(step), "loss": float(np.mean(losses)),
               "train_acc": hits / total if total else float("nan"), "val_acc": float("nan")}
        last = epoch == config.epochs - 1
        if val_points is not None and ((epoch + 1) % config.eval_every == 0 or last):
            row["val_acc"] = point_accuracy(predict_points(net, val[0], grid), val_points,
                                            config.threshold)
        trace.append(row)
        log.info("epoch %d step %d lr %.2e loss %.3f train_acc %.4f val_acc %.4f", epoch, step,
                 row["lr"], row["loss"], row["train_acc"], row["val_acc"])
        if callback is not None:
            callback(row)
    return TrainResult(store, trace)
