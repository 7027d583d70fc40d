"""Point accuracy metric, threshold/gridding sweeps, cross-scene matrix and latency bench."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .baseline import detect
from .exceptions import ValidationError
from .grid import SCENE_TAGS, RowAnchorGrid, anchor_points, decode, encode
from .model import ModelSpec, RowNet
from .train import TrainConfig, preprocess, train

# desk threshold: 6 px at 1280-px width, rescaled to the model width
REFERENCE_WIDTH = 1280
REFERENCE_THRESHOLD = 6.0


def scaled_threshold(width, reference_px=REFERENCE_THRESHOLD, reference_width=REFERENCE_WIDTH):
    return reference_px * width / reference_width


def rescale_points(x, factor):
    """Map model-resolution x to evaluation resolution (NaN stays NaN)."""
    return np.asarray(x, dtype=np.float64) * float(factor)


@dataclass
class EvalReport:
    accuracy: float
    correct: int
    total: int
    false_positives: int
    threshold: float
    per_scene: dict = field(default_factory=dict)  # tag -> (accuracy, correct, total)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_scene"] = {k: list(v) for k, v in self.per_scene.items()}
        return d

    def rows(self):
        yield {"scope": "total", "accuracy": self.accuracy, "correct": self.correct,
               "total": self.total, "false_positives": self.false_positives,
               "threshold": self.threshold}
        for tag, (acc, c, t) in self.per_scene.items():
            yield {"scope": tag, "accuracy": acc, "correct": c, "total": t,
                   "false_positives": "", "threshold": self.threshold}

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=["scope", "accuracy", "correct", "total",
                                             "false_positives", "threshold"], lineterminator="\n")
        wr.writeheader()
        for r in self.rows():
            wr.writerow(r)
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"threshold {self.threshold:.3f} px",
                 f"{'scope':<8} {'accuracy':>9} {'correct':>8} {'total':>7}"]
        for r in self.rows():
            lines.append(f"{r['scope']:<8} {100 * r['accuracy']:>8.2f}% {r['correct']:>8} {r['total']:>7}")
        lines.append(f"false positives: {self.false_positives}")
        return "\n".join(lines) + "\n"


def _check_pair(pred_x, gt_x):
    pred_x = np.asarray(pred_x, dtype=np.float64)
    gt_x = np.asarray(gt_x, dtype=np.float64)
    if pred_x.shape != gt_x.shape:
        raise ValidationError(f"prediction shape {pred_x.shape} != ground truth {gt_x.shape}")
    return pred_x, gt_x


def _hits(pred_x, gt_x, threshold):
    gt = ~np.isnan(gt_x)
    present = ~np.isnan(pred_x)
    err = np.abs(np.nan_to_num(pred_x) - np.nan_to_num(gt_x))
    return gt & present & (err <= threshold), gt


def accuracy(pred_x, gt_x, threshold, tags=None) -> EvalReport:
    """Correct GT points over all GT points.

    ``pred_x`` and ``gt_x`` are ``(N, C, h)`` pixel arrays with NaN where the
    rail is absent. ``tags`` (one set per image) adds a per-scene table.
    """
    pred_x, gt_x = _check_pair(pred_x, gt_x)
    if threshold < 0 or math.isnan(threshold):
        raise ValidationError("threshold must be >= 0")
    hit, gt = _hits(pred_x, gt_x, threshold)
    total = int(gt.sum())
    if total == 0:
        raise ValidationError("ground truth has no points; accuracy is undefined")
    correct = int(hit.sum())
    fp = int((~gt & ~np.isnan(pred_x)).sum())
    per_scene = {}
    if tags is not None:
        if len(tags) != len(gt_x):
            raise ValidationError("need one tag set per image")
        for tag in SCENE_TAGS:
            idx = [i for i, t in enumerate(tags) if tag in t]
            if not idx:
                continue
            t = int(gt[idx].sum())
            c = int(hit[idx].sum())
            if t:
                per_scene[tag] = (c / t, c, t)
    return EvalReport(correct / total, correct, total, fp, float(threshold), per_scene)


def threshold_sweep(pred_x, gt_x, thresholds) -> list:
    """``[(threshold, accuracy), ...]`` in the given order."""
    pred_x, gt_x = _check_pair(pred_x, gt_x)
    return [(float(t), accuracy(pred_x, gt_x, t).accuracy) for t in thresholds]


def write_curve(path, rows, header):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def ground_truth(annotations, grid: RowAnchorGrid) -> np.ndarray:
    if not annotations:
        return np.zeros((0, grid.num_rails, grid.num_anchors))
    return np.stack([anchor_points(a, grid) for a in annotations])


def baseline_points(images, grid: RowAnchorGrid, config=None) -> np.ndarray:
    if len(images) == 0:
        return np.zeros((0, grid.num_rails, grid.num_anchors))
    return np.stack([detect(img, grid, config).x for img in images])


def top1_accuracy(logits, targets, grid: RowAnchorGrid) -> float:
    """Argmax class agreement over cells where the target is a rail column."""
    pred = np.asarray(logits).argmax(axis=-1)
    targets = np.asarray(targets)
    m = targets != grid.background_class
    if not m.any():
        raise ValidationError("no rail cells in targets")
    return float((pred[m] == targets[m]).mean())


# -- experiments that retrain -----------------------------------------------

def _fit_and_predict(spec, images, annotations, val_images, grid, config, seed):
    net = RowNet(spec.with_grid(grid), seed=seed)
    train(net, images, annotations, grid, config)
    logits = np.concatenate([net.forward(preprocess(val_images[s : s + 64]))
                             for s in range(0, len(val_images), 64)])
    return net, logits


def gridding_sweep(dataset, train_idx, val_idx, widths=(25, 50, 100, 200), spec=None,
                   config=None, threshold=None, seed=0) -> list:
    """Retrain per gridding number; rows of ``{"w", "top1", "accuracy"}``.

    The images are fixed; only the column count of the grid changes.
    """
    spec = spec or ModelSpec()
    config = config or TrainConfig()
    base = dataset.grid
    threshold = scaled_threshold(base.image_width) if threshold is None else threshold
    tr_img = dataset.images[np.asarray(train_idx)]
    va_img = dataset.images[np.asarray(val_idx)]
    tr_ann = [dataset.annotations[i] for i in train_idx]
    va_ann = [dataset.annotations[i] for i in val_idx]
    gt = ground_truth(va_ann, base)
    rows = []
    for w in widths:
        grid = base.with_columns(int(w))
        _, logits = _fit_and_predict(spec, tr_img, tr_ann, va_img, grid, config, seed)
        targets = np.stack([encode(a, grid) for a in va_ann])
        pred = np.stack([decode(lg, grid).x for lg in logits])
        rows.append({"w": int(w), "top1": top1_accuracy(logits, targets, grid),
                     "accuracy": accuracy(pred, gt, threshold).accuracy})
    return rows


def cross_scene_matrix(dataset, scenes, train_idx, val_idx, spec=None, config=None,
                       threshold=None, seed=0) -> dict:
    """``{train_scene: {test_scene: accuracy}}`` including a ``"total"`` row.

    Each row trains on the training images carrying that tag ("total": all of
    them) and is evaluated on every scene's validation images.
    """
    spec = spec or ModelSpec()
    config = config or TrainConfig()
    grid = dataset.grid
    threshold = scaled_threshold(grid.image_width) if threshold is None else threshold
    tags = dataset.tags
    scenes = list(scenes)
    for s in scenes:
        if s not in SCENE_TAGS:
            raise ValidationError(f"unknown scene {s!r}")
    test = {s: [i for i in val_idx if s in tags[i]] for s in scenes}
    if any(not v for v in test.values()):
        raise ValidationError("every scene needs validation images")
    va_all = sorted({i for v in test.values() for i in v})
    gt = ground_truth([dataset.annotations[i] for i in va_all], grid)
    pos = {i: k for k, i in enumerate(va_all)}
    matrix = {}
    for row in scenes + ["total"]:
        tr = [i for i in train_idx if row == "total" or row in tags[i]]
        if not tr:
            raise ValidationError(f"no training images for scene {row!r}")
        _, logits = _fit_and_predict(spec, dataset.images[tr], [dataset.annotations[i] for i in tr],
                                     dataset.images[va_all], grid, config, seed)
        pred = np.stack([decode(lg, grid).x for lg in logits])
        matrix[row] = {}
        for s in scenes:
            k = [pos[i] for i in test[s]]
            matrix[row][s] = accuracy(pred[k], gt[k], threshold).accuracy
    return matrix


def matrix_rows(matrix):
    scenes = list(next(iter(matrix.values())))
    rows = [["train\\test"] + scenes + ["mean"]]
    for r, vals in matrix.items():
        v = [vals[s] for s in scenes]
        rows.append([r] + [f"{x:.4f}" for x in v] + [f"{float(np.mean(v)):.4f}"])
    return rows


# -- latency -----------------------------------------------------------------

@dataclass
class BenchReport:
    warmup: int
    runs: int
    mean_latency: float  # seconds
    std_latency: float
    fps: float
    threads: int
    fingerprint: str

    def to_dict(self):
        return asdict(self)

    def to_text(self):
        return (f"runs {self.runs} (warmup {self.warmup}, threads {self.threads})\n"
                f"latency {1e3 * self.mean_latency:.3f} ms +- {1e3 * self.std_latency:.3f} ms\n"
                f"FPS {self.fps:.1f}\n")


def fingerprint(obj) -> str:
    """Short stable hash of a JSON-serializable config."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def bench(forward, input_shape, warmup=10, runs=100, threads=1, seed=0, config=None) -> BenchReport:
    """Wall-clock single-input latency of ``forward``; BLAS pinned to ``threads``."""
    if runs < 1 or warmup < 0:
        raise ValidationError("runs must be >= 1 and warmup >= 0")
    x = np.random.default_rng(seed).standard_normal(input_shape).astype(np.float32)
    times = []
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            forward(x)
        for _ in range(runs):
            t0 = time.perf_counter()
            forward(x)
            times.append(time.perf_counter() - t0)
    mean = statistics.fmean(times)
    std = statistics.stdev(times) if len(times) > 1 else 0.0
    fp = fingerprint({"input_shape": list(input_shape), "warmup": warmup, "runs": runs,
                      "threads": threads, "config": config})
    return BenchReport(warmup, runs, mean, std, 1.0 / mean, threads, fp)


def dense_variant(spec):
    """Same backbone, per-pixel output head."""
    return replace(spec, head="dense")
