"""scikit-learn style wrapper: ``fit`` trains, ``transform`` embeds, ``predict`` retrieves."""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import evaluation, train


def check_images(X, height: int | None = None, width: int | None = None, patch: int = 16):
    """Validate a ``B x 3 x H x W`` image batch with values in [0, 1]; returns float32."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images shaped (n, 3, height, width), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("got an empty image batch")
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"images must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"pixel values must lie in [0, 1], got [{X.min()}, {X.max()}]")
    if height is not None and X.shape[2:] != (height, width):
        raise ValueError(f"images are {X.shape[2]}x{X.shape[3]}, model expects {height}x{width}")
    if X.shape[2] % patch or X.shape[3] % patch:
        raise ValueError(f"image size {X.shape[2]}x{X.shape[3]} is not a multiple of {patch}")
    return X


def check_labels(y, n: int):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    classes, encoded = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("need at least two identities to train")
    return classes, encoded


class SparseReID(BaseEstimator, TransformerMixin):
    """Token-sparsified ViT re-identification model.

    ``fit(X, y)`` trains a teacher (when ``npkd`` is on) and then the student.
    ``transform`` returns unit-length embeddings; ``predict`` labels each
    image with the identity of its nearest training image.
    """

    def __init__(self, embed_dim=32, depth=4, heads=4, patch=16, keep_ratio=0.7,
                 stage_layers=(2, 3), hts=True, npkd=True, noda=False, teacher_embed_dim=64,
                 teacher_epochs=30, epochs=30, lr=0.001, optimizer="adamw", alpha=2.0,
                 ids_per_batch=4, imgs_per_id=4, seed=0):
        self.embed_dim = embed_dim
        self.depth = depth
        self.heads = heads
        self.patch = patch
        self.keep_ratio = keep_ratio
        self.stage_layers = stage_layers
        self.hts = hts
        self.npkd = npkd
        self.noda = noda
        self.teacher_embed_dim = teacher_embed_dim
        self.teacher_epochs = teacher_epochs
        self.epochs = epochs
        self.lr = lr
        self.optimizer = optimizer
        self.alpha = alpha
        self.ids_per_batch = ids_per_batch
        self.imgs_per_id = imgs_per_id
        self.seed = seed

    def run_config(self, height: int, width: int) -> train.RunConfig:
        names = {f.name for f in dataclasses.fields(train.RunConfig)}
        values = {k: v for k, v in self.get_params().items() if k in names}
        values["stage_layers"] = tuple(self.stage_layers)
        return train.RunConfig(height=height, width=width, **values)

    def fit(self, X, y, occluders=None):
        """Train on images ``X`` with identity labels ``y``.

        ``occluders`` is a list of OcclusionPatch, required when ``noda`` is on.
        """
        X = check_images(X, patch=self.patch)
        self.classes_, codes = check_labels(y, len(X))
        cfg = self.run_config(X.shape[2], X.shape[3])
        if cfg.noda and not occluders:
            raise ValueError("noda=True needs an occluder patch library (occluders=...)")
        teacher = None
        if cfg.npkd:
            teacher = train.fit_teacher(X, codes, cfg, occluders).model
        result = train.fit_student(X, codes, cfg, teacher, occluders)
        self.teacher_ = teacher
        self.model_ = result.model
        self.loss_curve_ = list(result.epoch_loss)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.image_shape_ = X.shape[1:]
        self.gallery_ = self.transform(X)
        self.gallery_labels_ = self.classes_[codes]
        return self

    def transform(self, X):
        """Unit-length post-BN embeddings from the pruned inference path."""
        check_is_fitted(self, "model_")
        X = check_images(X, *self.image_shape_[1:], patch=self.patch)
        return evaluation.extract_embeddings(self.model_, X)

    def predict(self, X):
        emb = self.transform(X)
        dist = evaluation.distance_matrix(emb, self.gallery_)
        return self.gallery_labels_[np.argmin(dist, axis=1)]

    def score(self, X, y):
        return float(np.mean(self.predict(X) == np.asarray(y)))
