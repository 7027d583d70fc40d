"""scikit-learn style wrappers: ``fit`` on (images, annotations), ``predict`` anchor x."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .baseline import BaselineConfig, detect
from .evaluate import accuracy, ground_truth, scaled_threshold
from .exceptions import ValidationError
from .grid import RailAnnotation, RowAnchorGrid, decode
from .model import DESK_BACKBONE, ModelSpec, RowNet
from .nn import load_checkpoint, save_checkpoint
from .train import TrainConfig, preprocess, train


# Desk-scale training recipe (96x256, w=100): a wider head, a higher peak rate
# and milder augmentation than the plain defaults; 115 epochs of 410 images at
# batch 16 is 2,990 steps.
DESK_RECIPE = dict(mid_channels=32, hidden_width=512, epochs=115, batch_size=16, base_lr=1e-3,
                   rotation=3.0, shift=0.05)


def check_images(X, grid: RowAnchorGrid) -> np.ndarray:
    """Validate an ``N x H x W`` grayscale batch matching ``grid``'s frame size."""
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValidationError(f"expected N x H x W images, got shape {X.shape}")
    if X.shape[1:] != (grid.image_height, grid.image_width):
        raise ValidationError(f"image size {X.shape[1:]} != grid "
                              f"{(grid.image_height, grid.image_width)}")
    if not np.issubdtype(X.dtype, np.number) or not np.all(np.isfinite(X)):
        raise ValidationError("images must be finite numeric arrays")
    return X


def check_annotations(y, n: int) -> list:
    y = list(y)
    if len(y) != n:
        raise ValidationError(f"{n} images but {len(y)} annotations")
    for a in y:
        if not isinstance(a, RailAnnotation):
            raise ValidationError(f"expected RailAnnotation, got {type(a).__name__}")
    return y


class _Scoring:
    def score(self, X, y, threshold=None):
        """Point accuracy of ``predict(X)`` against annotations ``y``."""
        grid = self._grid()
        X = check_images(X, grid)
        y = check_annotations(y, len(X))
        t = scaled_threshold(grid.image_width) if threshold is None else threshold
        return accuracy(self.predict(X), ground_truth(y, grid), t).accuracy

    def _grid(self):
        return self.grid if self.grid is not None else RowAnchorGrid.desk()


class RowAnchorDetector(_Scoring, BaseEstimator):
    """Row-anchor classification network trained with Adam and cosine decay."""

    def __init__(self, grid=None, backbone=DESK_BACKBONE, mid_channels=8, hidden_width=256,
                 epochs=50, batch_size=16, base_lr=4e-4, rotation=6.0, shift=0.1, augment=True,
                 seed=0):
        self.grid = grid
        self.backbone = backbone
        self.mid_channels = mid_channels
        self.hidden_width = hidden_width
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.rotation = rotation
        self.shift = shift
        self.augment = augment
        self.seed = seed

    def model_spec(self) -> ModelSpec:
        grid = self._grid()
        return ModelSpec(grid.image_height, grid.image_width, 1, self.backbone,
                         self.mid_channels, self.hidden_width, grid)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, base_lr=self.base_lr,
                           seed=self.seed, rotation=self.rotation, shift=self.shift,
                           augment=self.augment,
                           threshold=scaled_threshold(self._grid().image_width))

    def fit(self, X, y, validation_data=None, callback=None):
        grid = self._grid()
        X = check_images(X, grid)
        y = check_annotations(y, len(X))
        self.spec_ = self.model_spec()
        self.net_ = RowNet(self.spec_, seed=self.seed)
        result = train(self.net_, X, y, grid, self.train_config(), val=validation_data,
                       callback=callback)
        self.trace_ = result.trace
        return self

    def decision_function(self, X, batch_size=64) -> np.ndarray:
        """Raw logits, ``N x C x h x (w+1)``."""
        check_is_fitted(self, "net_")
        X = check_images(X, self._grid())
        return np.concatenate([self.net_.forward(preprocess(X[s : s + batch_size]))
                               for s in range(0, len(X), batch_size)])

    def predict_rails(self, X) -> list:
        return [decode(lg, self._grid()) for lg in self.decision_function(X)]

    def predict(self, X) -> np.ndarray:
        """Pixel x per (image, slot, anchor), NaN where no rail is predicted."""
        rails = self.predict_rails(X)
        if not rails:
            g = self._grid()
            return np.zeros((0, g.num_rails, g.num_anchors))
        return np.stack([r.x for r in rails])

    def save(self, checkpoint):
        """Write the RAILROW1 checkpoint and its ``.model`` config next to it."""
        check_is_fitted(self, "net_")
        checkpoint = Path(checkpoint)
        save_checkpoint(checkpoint, self.net_.store)
        config_path(checkpoint).write_text(self.spec_.to_text())

    @classmethod
    def load(cls, checkpoint, spec: ModelSpec | None = None) -> "RowAnchorDetector":
        checkpoint = Path(checkpoint)
        if spec is None:
            spec = ModelSpec.from_text(config_path(checkpoint).read_text())
        store = load_checkpoint(checkpoint)
        est = cls(grid=spec.grid, backbone=spec.backbone, mid_channels=spec.mid_channels,
                  hidden_width=spec.hidden_width)
        est.spec_ = spec
        est.net_ = RowNet(spec, store=store)
        est.trace_ = []
        return est


def config_path(checkpoint) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.name + ".model")


class SobelRailDetector(_Scoring, BaseEstimator):
    """Non-learned baseline; ``fit`` only validates its inputs."""

    def __init__(self, grid=None, percentile=95.0, nms_window=5, gate=10.0, degree=2,
                 min_support=3, max_gap=2, merge_tol=1.5, outlier_tol=3.0, duplicate_tol=3.0):
        self.grid = grid
        self.percentile = percentile
        self.nms_window = nms_window
        self.gate = gate
        self.degree = degree
        self.min_support = min_support
        self.max_gap = max_gap
        self.merge_tol = merge_tol
        self.outlier_tol = outlier_tol
        self.duplicate_tol = duplicate_tol

    def config(self) -> BaselineConfig:
        return BaselineConfig(self.percentile, self.nms_window, self.gate, self.degree,
                              self.min_support, self.max_gap, self.merge_tol, self.outlier_tol,
                              self.duplicate_tol)

    def fit(self, X, y=None):
        X = check_images(X, self._grid())
        if y is not None:
            check_annotations(y, len(X))
        self.config_ = self.config()
        return self

    def predict_rails(self, X) -> list:
        check_is_fitted(self, "config_")
        grid = self._grid()
        return [detect(img, grid, self.config_) for img in check_images(X, grid)]

    def predict(self, X) -> np.ndarray:
        rails = self.predict_rails(X)
        if not rails:
            g = self._grid()
            return np.zeros((0, g.num_rails, g.num_anchors))
        return np.stack([r.x for r in rails])
