"""scikit-learn style front end over the full pipeline."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .blocks import DropBlockConfig
from .geodata import PatchConfig, RasterScaler, RasterStack, SampleTable, rasterize_samples
from .inference import mc_predict, predict_once
from .losses import weighted_accuracy
from .model import ArchConfig, ModelCheckpoint, build_model
from .pipeline import PipelineConfig, prepare
from .training import TrainConfig, TrainHistory, finetune, train
from .validation import check_fraction, check_in_grid, check_label_grid, check_positive_int, check_raster


def _samples_from(y, shape) -> SampleTable:
    if isinstance(y, SampleTable):
        check_in_grid(y.x, y.y, shape)
        return y
    grid = check_label_grid(y, shape)
    ys, xs = np.nonzero(grid >= 0)
    return SampleTable(xs, ys, grid[ys, xs].astype(str))


class SCBNetSegmenter(BaseEstimator):
    """Two-stage attention Res-U-Net conditioned on sparse field samples.

    ``X`` is a raw (channels, height, width) raster; it is standardized with a
    :class:`RasterScaler` fitted in :meth:`fit`. ``y`` is a
    :class:`SampleTable` or an integer label grid with -1 at unsampled pixels.
    Prediction is conditioned on ``y`` when given, and unconstrained (zeroed
    masks) otherwise.
    """

    def __init__(self, depth=4, base_filters=16, embed_channels=16, patch_size=160, block_size=5, drop_rate=0.3,
                 batch_size=16, learning_rate=5e-5, max_epochs=500, patience=50, early_stop_delta=1e-3,
                 gamma=2.0, holdout_rate=0.5, n_patches=2600, max_overlap=0.8, downscale_frac=0.3,
                 rotate_frac=0.25, rare_threshold=0.01, split_block=15, train_frac=0.8, n_draws=100,
                 tile_overlap=0, random_state=0, verbose=False):
        self.depth = depth
        self.base_filters = base_filters
        self.embed_channels = embed_channels
        self.patch_size = patch_size
        self.block_size = block_size
        self.drop_rate = drop_rate
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.early_stop_delta = early_stop_delta
        self.gamma = gamma
        self.holdout_rate = holdout_rate
        self.n_patches = n_patches
        self.max_overlap = max_overlap
        self.downscale_frac = downscale_frac
        self.rotate_frac = rotate_frac
        self.rare_threshold = rare_threshold
        self.split_block = split_block
        self.train_frac = train_frac
        self.n_draws = n_draws
        self.tile_overlap = tile_overlap
        self.random_state = random_state
        self.verbose = verbose

    # configs assembled from the flat parameters

    def _pipeline_config(self) -> PipelineConfig:
        patches = PatchConfig(self.patch_size, self.max_overlap, self.n_patches, self.downscale_frac,
                              self.rotate_frac)
        return PipelineConfig(self.rare_threshold, self.split_block, self.train_frac, None, self.random_state,
                              self.random_state, patches)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           max_epochs=self.max_epochs, early_stop_delta=self.early_stop_delta,
                           patience=min(self.patience, self.max_epochs), gamma=self.gamma,
                           holdout_rate=self.holdout_rate, seed=self.random_state, verbose=self.verbose)

    def _arch_config(self, n_aux: int, n_classes: int) -> ArchConfig:
        return ArchConfig(n_aux, n_classes, self.depth, self.base_filters, self.embed_channels, self.patch_size,
                          DropBlockConfig(self.block_size, self.drop_rate))

    def _validate_params(self) -> None:
        for name in ("depth", "base_filters", "embed_channels", "patch_size", "batch_size", "max_epochs",
                     "patience", "n_patches", "split_block", "n_draws"):
            check_positive_int(getattr(self, name), name)
        check_fraction(self.train_frac, "train_frac")
        check_fraction(self.holdout_rate, "holdout_rate")

    # fitting

    def fit(self, X, y, warm_start: Optional[ModelCheckpoint] = None) -> "SCBNetSegmenter":
        """Train on raster ``X`` and samples ``y``; ``warm_start`` fine-tunes from a checkpoint."""
        self._validate_params()
        X = check_raster(X)
        samples = _samples_from(y, X.shape[1:])
        self.scaler_ = RasterScaler().fit(X)
        stack = RasterStack(self.scaler_.transform(X), [f"band{i}" for i in range(X.shape[0])])
        data = prepare(stack, samples, self._pipeline_config())
        cfg = self._train_config()
        if warm_start is not None:
            if warm_start.arch.n_aux_channels != X.shape[0]:
                raise ValueError(f"warm_start expects {warm_start.arch.n_aux_channels} channels, X has {X.shape[0]}")
            ckpt, history = finetune(warm_start, data.patches, data.split, data.vocabulary, cfg, stack, data.masks)
        else:
            arch = self._arch_config(X.shape[0], len(data.vocabulary))
            ckpt, history = train(build_model(arch, self.random_state, data.vocabulary), data.patches,
                                  data.split, cfg, stack, data.masks)
        self.checkpoint_: ModelCheckpoint = ckpt
        self.history_: TrainHistory = history
        self.classes_ = np.asarray(data.vocabulary, dtype=object)
        self.split_ = data.split
        self.n_features_in_ = X.shape[0]
        return self

    # prediction

    def _prepare_inputs(self, X, y):
        check_is_fitted(self, "checkpoint_")
        X = check_raster(X)
        if X.shape[0] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[0]} channels, fitted on {self.n_features_in_}")
        aux = self.scaler_.transform(X)
        masks = None
        if y is not None:
            samples = _samples_from(y, X.shape[1:])
            known = np.isin(samples.codes.astype(str), self.classes_.astype(str))
            masks = rasterize_samples(samples.subset(known), X.shape[1:], list(self.classes_))
        return aux, masks

    def _tile(self, shape):
        m = 2 ** self.checkpoint_.arch.depth
        if shape[0] % m == 0 and shape[1] % m == 0:
            return None
        return self.checkpoint_.arch.patch_size

    def _ensemble(self, X, y, n_draws: Optional[int]):
        aux, masks = self._prepare_inputs(X, y)
        draws = self.n_draws if n_draws is None else n_draws
        return mc_predict(self.checkpoint_, aux, masks, n_draws=draws, tile=self._tile(aux.shape[1:]),
                          overlap=self.tile_overlap, rng=self.random_state)

    def predict_proba(self, X, y=None, n_draws: Optional[int] = None) -> np.ndarray:
        """MC ensemble mean, shape (n_classes, H, W); ``n_draws=0`` gives one deterministic pass."""
        if n_draws == 0:
            aux, masks = self._prepare_inputs(X, y)
            m = np.zeros((len(self.classes_),) + aux.shape[1:], np.float32) if masks is None else masks.probs
            return predict_once(self.checkpoint_, aux, m, "deterministic", None, self._tile(aux.shape[1:]),
                                self.tile_overlap)
        return self._ensemble(X, y, n_draws).mean

    def predict(self, X, y=None, n_draws: Optional[int] = None) -> np.ndarray:
        """Class codes per pixel, shape (H, W)."""
        proba = self.predict_proba(X, y, n_draws)
        return self.classes_[proba.argmax(axis=0)]

    def predict_uncertainty(self, X, y=None, n_draws: Optional[int] = None) -> np.ndarray:
        """Per-class population standard deviation over the MC draws."""
        return self._ensemble(X, y, n_draws).std

    def score(self, X, y, n_draws: Optional[int] = 0) -> float:
        """Class-balanced accuracy of unconstrained prediction at the sampled pixels of ``y``."""
        check_is_fitted(self, "checkpoint_")
        X = check_raster(X)
        samples = _samples_from(y, X.shape[1:])
        index = {str(c): i for i, c in enumerate(self.classes_)}
        codes = samples.codes.astype(str)
        known = np.array([c in index for c in codes], dtype=bool)
        if not known.any():
            raise ValueError("no samples of y carry a fitted class")
        pred = self.predict_proba(X, None, n_draws).argmax(axis=0)
        true = np.array([index[c] for c in codes[known]])
        return weighted_accuracy(pred[samples.y[known], samples.x[known]], true)


__all__ = ["SCBNetSegmenter", "NotFittedError"]
