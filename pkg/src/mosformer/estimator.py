"""scikit-learn style wrapper around training and slice-wise inference."""

from __future__ import annotations

from dataclasses import replace
from typing import Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import config as config_mod
from .config import RunConfig
from .data import Case
from .training import evaluate, predict_case, train
from .validation import as_volume_list, check_labels, check_volume


class MOSformerSegmenter(BaseEstimator):
    """Fit on lists of volumes (C×H×W×D or H×W×D) and label maps (H×W×D).

    Hyperparameters left as ``None`` keep the preset's value.
    """

    def __init__(
        self,
        preset: str = "desk",
        neighbors: Optional[int] = None,
        encoder_mode: Optional[str] = None,
        momentum: Optional[float] = None,
        fusion_scales: Optional[Tuple[int, ...]] = None,
        n_classes: Optional[int] = None,
        epochs: Optional[int] = None,
        batch_size: Optional[int] = None,
        iters_per_epoch: Optional[int] = None,
        seed: int = 0,
        dtype: str = "float32",
        spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0),
        config_text: str = "",
    ):
        self.preset = preset
        self.neighbors = neighbors
        self.encoder_mode = encoder_mode
        self.momentum = momentum
        self.fusion_scales = fusion_scales
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.iters_per_epoch = iters_per_epoch
        self.seed = seed
        self.dtype = dtype
        self.spacing = spacing
        self.config_text = config_text

    def build_config(self) -> RunConfig:
        cfg = config_mod.from_text(self.config_text, self.preset)
        model = {k: v for k, v in dict(
            neighbors=self.neighbors, encoder_mode=self.encoder_mode, momentum=self.momentum,
            fusion_scales=None if self.fusion_scales is None else tuple(self.fusion_scales),
            n_classes=self.n_classes,
        ).items() if v is not None}
        train_kw = {k: v for k, v in dict(
            epochs=self.epochs, batch_size=self.batch_size, iters_per_epoch=self.iters_per_epoch,
        ).items() if v is not None}
        t = replace(cfg.train, seed=self.seed, dtype=self.dtype, **train_kw)
        if t.warmup_epochs >= t.epochs:
            t = replace(t, warmup_epochs=t.epochs - 1)
        return replace(cfg, model=replace(cfg.model, **model), train=t)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "MOSformerSegmenter":
        return cls(preset="desk", config_text=config_mod.to_text(cfg), seed=cfg.train.seed, dtype=cfg.train.dtype)

    def _cases(self, X, y, n_classes: int, in_channels: int):
        vols = as_volume_list(X)
        labels = as_volume_list(y)
        if len(vols) != len(labels):
            raise ValueError(f"{len(vols)} volumes but {len(labels)} label maps")
        cases = []
        for i, (v, l) in enumerate(zip(vols, labels)):
            v = check_volume(v, in_channels)
            l = check_labels(l, v.shape[1:], n_classes)
            cases.append(Case(f"case{i:03d}", v, l, tuple(self.spacing), n_classes))
        return cases

    def fit(self, X, y):
        cfg = self.build_config()
        cases = self._cases(X, y, cfg.model.n_classes, cfg.model.in_channels)
        result = train(cfg, cases)
        self.config_ = cfg
        self.model_ = result.model
        self.loss_curve_ = result.epoch_losses()
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")

    def predict(self, X):
        """Label maps (H×W×D int32); a single volume in gives a single map out."""
        self._check_fitted()
        single = isinstance(X, np.ndarray) and X.ndim in (3, 4)
        preds = [predict_case(self.model_, self.config_, check_volume(v, self.config_.model.in_channels))
                 for v in as_volume_list(X)]
        return preds[0] if single else preds

    def score(self, X, y) -> float:
        """Mean foreground DSC in [0, 1]."""
        self._check_fitted()
        cases = self._cases(X, y, self.config_.model.n_classes, self.config_.model.in_channels)
        return evaluate(self.model_, self.config_, cases).mean_dsc / 100.0
