"""scikit-learn style wrapper around training and the codec.

>>> codec = SeecCodec(epochs=1, steps_per_epoch=2).fit(images, masks)   # doctest: +SKIP
>>> streams = codec.transform(images, masks)                            # doctest: +SKIP
>>> restored = codec.inverse_transform(streams)                         # doctest: +SKIP
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import container, sic, trainer
from .maskio import MaskMap
from .model import SeecModel


def check_images(X) -> list[np.ndarray]:
    """Accept an (n, H, W, 3) uint8 array or a sequence of (H, W, 3) uint8 images."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = list(X)
    if isinstance(X, np.ndarray) or not hasattr(X, "__len__"):
        raise ValueError("expected a sequence of (H, W, 3) images or an (n, H, W, 3) array")
    out = [container.validate_image(x) for x in X]
    if not out:
        raise ValueError("no images given")
    return out


def check_masks(masks, images: list[np.ndarray], n_classes: int) -> list[MaskMap]:
    """Masks aligned with ``images``; ``None`` means every pixel is class 0."""
    if masks is None:
        return [MaskMap(np.zeros(x.shape[:2], dtype=np.uint8), n_classes) for x in images]
    if isinstance(masks, np.ndarray) and masks.ndim == 3:
        masks = list(masks)
    if len(masks) != len(images):
        raise ValueError(f"{len(masks)} masks for {len(images)} images")
    out = []
    for m, x in zip(masks, images):
        mm = m if isinstance(m, MaskMap) else MaskMap(np.asarray(m), n_classes)
        mm.check_image(x.shape[:2])
        if mm.n_classes != n_classes:
            raise ValueError(f"mask has N={mm.n_classes}, estimator has N={n_classes}")
        out.append(mm)
    return out


def _tiles(images, masks, size: int):
    """Non-overlapping size x size tiles, row-major within each image."""
    xs, ms = [], []
    for x, m in zip(images, masks):
        H, W = x.shape[:2]
        for r in range(0, H - size + 1, size):
            for c in range(0, W - size + 1, size):
                xs.append(x[r : r + size, c : c + size].transpose(2, 0, 1))
                ms.append(m.ids[r : r + size, c : c + size])
    if not xs:
        raise ValueError(f"every training image is smaller than patch_size={size}")
    return trainer.SynthCorpus(np.stack(xs), np.stack(ms))


class SeecCodec(TransformerMixin, BaseEstimator):
    """Learned lossless codec. ``fit`` trains, ``transform`` encodes,
    ``inverse_transform`` decodes and ``predict`` reports bits per pixel."""

    def __init__(
        self,
        K: int = 5,
        N: int = 2,
        c_hidden: int = 64,
        c_y: int = 64,
        c_z: int = 32,
        c_f: int = 64,
        c_ctx: int = 32,
        c_fused: int = 64,
        c_head: int = 64,
        batch_size: int = 32,
        patch_size: int = 64,
        lr: float = 1e-4,
        epochs: int = 30,
        steps_per_epoch: int = 0,
        validation_fraction: float = 0.1,
        single_head: bool = False,
        shared_mixture: bool = False,
        roi: bool = False,
        seed: int = 0,
    ):
        self.K = K
        self.N = N
        self.c_hidden = c_hidden
        self.c_y = c_y
        self.c_z = c_z
        self.c_f = c_f
        self.c_ctx = c_ctx
        self.c_fused = c_fused
        self.c_head = c_head
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.lr = lr
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.validation_fraction = validation_fraction
        self.single_head = single_head
        self.shared_mixture = shared_mixture
        self.roi = roi
        self.seed = seed

    def _train_config(self, n_train: int, n_val: int) -> trainer.TrainConfig:
        keys = ("K", "N", "c_hidden", "c_y", "c_z", "c_f", "c_ctx", "c_fused", "c_head", "batch_size",
                "patch_size", "lr", "epochs", "steps_per_epoch", "single_head", "shared_mixture", "seed")
        return trainer.TrainConfig(n_train=n_train, n_val=n_val, log_every=0,
                                   **{k: getattr(self, k) for k in keys})

    def fit(self, X, y=None):
        """Train on tiles of ``X``; ``y`` holds the per-image masks."""
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.patch_size % sic.STRIDE:
            raise ValueError(f"patch_size must be a multiple of {sic.STRIDE}")
        images = check_images(X)
        masks = check_masks(y, images, self.N)
        tiles = _tiles(images, masks, self.patch_size)
        n = len(tiles)
        if n < 2:
            raise ValueError("need at least two training tiles (one is held out for validation)")
        order = np.random.default_rng([self.seed, 3]).permutation(n)
        n_val = min(n - 1, max(1, round(n * self.validation_fraction)))
        val, tr = tiles.subset(order[:n_val]), tiles.subset(order[n_val:])
        result = trainer.train(self._train_config(len(tr), n_val), corpus=(tr, val), log=None)
        self.model_ = result.model
        self.history_ = result.history
        self.best_val_bpp_ = result.best_val
        self.n_features_in_ = 3
        return self

    @classmethod
    def from_model(cls, model: SeecModel, roi: bool = False) -> "SeecCodec":
        """Wrap an existing model (for instance a loaded checkpoint)."""
        cfg = model.config
        codec = cls(K=cfg.K, N=cfg.N, c_hidden=cfg.c_hidden, c_y=cfg.c_y, c_z=cfg.c_z, c_f=cfg.c_f,
                    c_ctx=cfg.c_ctx, c_fused=cfg.c_fused, c_head=cfg.c_head, single_head=cfg.single_head,
                    shared_mixture=cfg.shared_mixture, roi=roi)
        codec.model_ = model
        codec.n_features_in_ = 3
        return codec

    def _encode(self, X, masks):
        check_is_fitted(self, "model_")
        images = check_images(X)
        return [container.encode_image(x, m, self.model_, roi=self.roi)
                for x, m in zip(images, check_masks(masks, images, self.model_.config.N))]

    def transform(self, X, y=None) -> list[bytes]:
        """Encode each image (with its mask from ``y``) to a .seec byte stream."""
        return [blob for blob, _ in self._encode(X, y)]

    def inverse_transform(self, streams) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        return [container.decode_image(bytes(s), self.model_) for s in streams]

    def predict(self, X, y=None) -> np.ndarray:
        """Actual coded size of each image in bits per pixel."""
        return np.array([stats.bpp() for _, stats in self._encode(X, y)])

    def score(self, X, y=None) -> float:
        """Negative mean bits per pixel, so that larger is better."""
        return -float(np.mean(self.predict(X, y)))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        self.model_.save(path)

