"""scikit-learn style wrappers around the preprocessing chain and the network."""
from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .attnet import ModelConfig, build_model, extract_attention_maps
from .imageproc import FrontMask, SampleImage, augment_expand, preprocess_pair
from .losses import dice_binary
from .training import (
    SegmentationSet,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    predict_proba,
    train,
)
from .validation import check_images, check_masks, check_resolutions


class FrontPreprocessor(TransformerMixin, BaseEstimator):
    """Median filter, normalize, pad, resize and thicken fronts.

    Stateless: ``fit`` only validates parameters.  ``transform`` takes a
    list of :class:`SampleImage`; :meth:`transform_pairs` also handles the
    matching masks.
    """

    def __init__(self, size: int = 512, front_width: int = 6, median_area_m2: float = 2500.0):
        self.size = size
        self.front_width = front_width
        self.median_area_m2 = median_area_m2

    def fit(self, X=None, y=None):
        if self.size < 1 or self.front_width < 1 or self.median_area_m2 <= 0:
            raise ValueError("size, front_width and median_area_m2 must be positive")
        self.fitted_ = True
        return self

    def transform(self, X: Sequence[SampleImage]) -> List[SampleImage]:
        check_is_fitted(self)
        return [self._one(img, FrontMask(np.ones(img.shape, np.uint8), img.resolution, img.id))[0] for img in X]

    def transform_pairs(self, pairs: Sequence[Tuple[SampleImage, FrontMask]]) -> List[Tuple[SampleImage, FrontMask]]:
        check_is_fitted(self)
        return [self._one(img, mask) for img, mask in pairs]

    def _one(self, img, mask):
        return preprocess_pair(img, mask, self.size, self.front_width, self.median_area_m2)


class AttentionUNetSegmenter(BaseEstimator):
    """Calving-front segmenter: fit on (N, S, S) images and {0,1} masks.

    Parameters mirror :class:`ModelConfig` and :class:`TrainConfig`.  With
    ``X_val``/``y_val`` omitted, early stopping monitors the training data.
    """

    def __init__(
        self,
        base_channels: int = 32,
        depth: int = 5,
        attention: bool = True,
        loss: str = "bce",
        w: float = 8.0,
        batch_size: int = 5,
        lr_min: float = 1e-5,
        lr_max: float = 1e-3,
        cycle_epochs: int = 8,
        patience: int = 20,
        max_epochs: int = 200,
        augment: bool = True,
        seed: int = 0,
        verbose: bool = False,
    ):
        self.base_channels = base_channels
        self.depth = depth
        self.attention = attention
        self.loss = loss
        self.w = w
        self.batch_size = batch_size
        self.lr_min = lr_min
        self.lr_max = lr_max
        self.cycle_epochs = cycle_epochs
        self.patience = patience
        self.max_epochs = max_epochs
        self.augment = augment
        self.seed = seed
        self.verbose = verbose

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            lr_min=self.lr_min,
            lr_max=self.lr_max,
            cycle_epochs=self.cycle_epochs,
            loss=self.loss,
            w=self.w,
            patience=self.patience,
            max_epochs=self.max_epochs,
            seed=self.seed,
            augment=self.augment,
        ).validate()

    def fit(self, X, y, X_val=None, y_val=None, resolution=None, resolution_val=None, callback=None):
        X = check_images(X)
        y = check_masks(y, like=X)
        if not all(m.any() for m in y):
            raise ValueError("every training mask needs at least one front pixel")
        cfg = self._train_config()
        model_cfg = ModelConfig(
            depth=self.depth, base_channels=self.base_channels, input_side=X.shape[1], attention=self.attention
        ).validate()
        res = check_resolutions(resolution, len(X))
        train_set = SegmentationSet(X, y, res)
        if X_val is None:
            val_set = train_set
        else:
            Xv = check_images(X_val, side=X.shape[1])
            val_set = SegmentationSet(Xv, check_masks(y_val, like=Xv), check_resolutions(resolution_val, len(Xv)))
        if cfg.augment:
            train_set = SegmentationSet(*_augment_arrays(X, y), np.repeat(res, 8))

        model = build_model(model_cfg, self.seed)
        echo = print if self.verbose else (lambda s: None)
        result = train(model, train_set, val_set, cfg, callback=callback, echo=echo)
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.input_side_ = X.shape[1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, check_images(X, side=self.input_side_))

    def predict(self, X, thresh: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= thresh).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean binary Dice over the samples."""
        probs = self.predict_proba(X)
        y = check_masks(y, like=probs)
        return float(np.mean([dice_binary(p, m) for p, m in zip(probs, y)]))

    def evaluate(self, X, y, resolution=None):
        """Full metric record (Dice, weighted Dice, IoU, thickness, certainty)."""
        check_is_fitted(self, "model_")
        X = check_images(X, side=self.input_side_)
        data = SegmentationSet(X, check_masks(y, like=X), check_resolutions(resolution, len(X)))
        return evaluate(self.model_, data, self._train_config())

    def attention_maps(self, X, out_side: Optional[int] = None) -> List[np.ndarray]:
        """Gate coefficients per gate (finest first), each (N, out_side, out_side)."""
        check_is_fitted(self, "model_")
        X = check_images(X, side=self.input_side_)
        out_side = out_side or self.input_side_
        per_sample = []
        for x in X:
            _, maps = self.model_.forward(x[None, None], training=False)
            per_sample.append(extract_attention_maps(maps, out_side))
        return [np.concatenate([s[g] for s in per_sample]) for g in range(len(per_sample[0]))]

    def save(self, path: Union[str, Path]) -> None:
        check_is_fitted(self, "model_")
        checkpoint_save(self.model_, None, path, {"estimator": self.get_params()})

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AttentionUNetSegmenter":
        model, _, meta = checkpoint_load(path)
        est = cls(**meta.get("estimator", {}))
        est.model_ = model
        est.history_ = []
        est.best_epoch_ = meta.get("epoch", 0)
        est.input_side_ = model.config.input_side
        return est


def _augment_arrays(X: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pairs = augment_expand(list(zip(X, y)))
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
