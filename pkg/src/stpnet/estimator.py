"""scikit-learn style wrapper around training and inference."""
from __future__ import annotations

from dataclasses import fields
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .autodiff import Tensor, no_grad
from .blocks import StpnetConfig, build_model
from .checkpoint import load_checkpoint_with_header, save_checkpoint
from .errors import InvalidArgumentError
from .synthgen import GenConfig, SegDataset, derive_text_labels
from .training import TrainConfig, evaluate, predict_batches, train
from .validation import check_images, check_labels, check_masks


class STPNetSegmenter(BaseEstimator):
    """Text-prompted lesion segmenter.

    ``fit(X, y)`` trains on images ``X`` [N,1,64,64] and binary masks ``y``.
    Text labels are derived from the masks unless passed as ``labels``.
    The last ``validation_fraction`` of the samples drives model selection
    and early stopping.  ``architecture`` is an optional dict of further
    model settings (e.g. ``{"base_channels": (8, 8, 8, 8, 8)}``).
    """

    def __init__(
        self,
        lr=3e-4,
        batch_size=8,
        max_epochs=30,
        patience=10,
        seed=0,
        validation_fraction=0.1,
        no_text=False,
        no_ssm=False,
        no_utrans_text=False,
        swap_loc_order=False,
        teacher_force_text=False,
        lambda1=1.0,
        lambda2=1.0,
        lambda3=1.0,
        tau=0.07,
        gamma=2.0,
        image_size=64,
        architecture=None,
    ):
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.validation_fraction = validation_fraction
        self.no_text = no_text
        self.no_ssm = no_ssm
        self.no_utrans_text = no_utrans_text
        self.swap_loc_order = swap_loc_order
        self.teacher_force_text = teacher_force_text
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.tau = tau
        self.gamma = gamma
        self.image_size = image_size
        self.architecture = architecture

    def _configs(self):
        p = self.get_params()
        model_keys = {f.name for f in fields(StpnetConfig)}
        train_keys = {f.name for f in fields(TrainConfig)}
        arch = dict(self.architecture or {})
        clash = set(arch) & set(p)
        if clash or not set(arch) <= model_keys:
            raise InvalidArgumentError(f"bad architecture keys: {sorted(clash | (set(arch) - model_keys))}")
        mc = StpnetConfig.from_dict({**{k: v for k, v in p.items() if k in model_keys}, **arch})
        tc = TrainConfig(**{k: v for k, v in p.items() if k in train_keys})
        return mc, tc

    def fit(self, X, y, labels=None):
        mc, tc = self._configs()
        X = check_images(X, mc.in_channels, mc.image_size)
        y = check_masks(y, len(X), mc.image_size)
        if labels is None:
            gen = GenConfig(image_size=mc.image_size)
            labels = np.array([derive_text_labels(m[0], gen) for m in y], dtype=np.int64)
        labels = check_labels(labels, len(X))
        if not 0 <= self.validation_fraction < 1:
            raise InvalidArgumentError("validation_fraction must be in [0, 1)")
        n_val = int(round(len(X) * self.validation_fraction))
        n_tr = len(X) - n_val
        if n_tr < 2:
            raise InvalidArgumentError("need at least two training samples")
        seeds = np.zeros(len(X), dtype=np.uint64)
        ds = SegDataset(X, y, labels.astype(np.uint8), seeds)
        val = ds.subset(slice(n_tr, None)) if n_val else None
        res = train(tc, mc, ds.subset(slice(0, n_tr)), val)
        self.model_ = res.model
        _, self.bank_ = build_model(mc)
        self.history_ = res.history
        self.best_epoch_ = res.best_epoch
        self.n_features_in_ = mc.image_size * mc.image_size * mc.in_channels
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit() or load() first")

    def decision_function(self, X) -> np.ndarray:
        """Per-pixel logits [N,1,H,W]."""
        self._check_fitted()
        cfg = self.model_.cfg
        X = check_images(X, cfg.in_channels, cfg.image_size)
        return predict_batches(self.model_, self.bank_, X)[0]

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        return 0.5 * (1.0 + np.tanh(0.5 * z))

    def predict(self, X) -> np.ndarray:
        """Binary masks [N,1,H,W] (logit > 0)."""
        return (self.decision_function(X) > 0).astype(np.uint8)

    def retrieve(self, X) -> np.ndarray:
        """Retrieved phrase index per category, [N,4]."""
        self._check_fitted()
        cfg = self.model_.cfg
        X = check_images(X, cfg.in_channels, cfg.image_size)
        return predict_batches(self.model_, self.bank_, X)[1]

    def transform(self, X) -> np.ndarray:
        """Image embeddings F_v, [N, text_dim]."""
        self._check_fitted()
        cfg = self.model_.cfg
        X = check_images(X, cfg.in_channels, cfg.image_size)
        was = self.model_.training
        self.model_.eval()
        try:
            with no_grad():
                return self.model_.retrieval(Tensor(X.astype(self.model_.dtype))).data.copy()
        finally:
            self.model_.train(was)

    def score(self, X, y, labels=None) -> float:
        """Mean per-image Dice of the predicted masks."""
        self._check_fitted()
        cfg = self.model_.cfg
        X = check_images(X, cfg.in_channels, cfg.image_size)
        y = check_masks(y, len(X), cfg.image_size)
        lab = np.zeros((len(X), 4), np.uint8) if labels is None else check_labels(labels, len(X)).astype(np.uint8)
        return evaluate(self.model_, self.bank_, SegDataset(X, y, lab, np.zeros(len(X), np.uint64))).dice

    def save(self, path) -> None:
        self._check_fitted()
        save_checkpoint(self.model_, path)

    @classmethod
    def load(cls, path) -> "STPNetSegmenter":
        model, header = load_checkpoint_with_header(path)
        cfg = model.cfg
        names = set(cls._get_param_names())
        d = cfg.to_dict()
        params = {k: v for k, v in d.items() if k in names}
        defaults = StpnetConfig().to_dict()
        arch = {k: v for k, v in d.items() if k not in names and v != defaults[k]}
        est = cls(**params, architecture=arch or None)
        est.model_ = model
        _, est.bank_ = build_model(cfg)
        est.n_features_in_ = cfg.image_size * cfg.image_size * cfg.in_channels
        return est
