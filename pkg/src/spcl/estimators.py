"""Scikit-learn style estimators wrapping the pre-trainer and the probes.

``SPCLPretrainer`` is a transformer: ``fit`` runs self-supervised
pre-training on unlabeled images, ``transform`` maps images to unit-norm
embeddings, so it drops into a ``Pipeline`` in front of any classifier.
``LinearProbe`` and ``KNNProbe`` are the matching frozen-feature
classifiers.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .encoder import EncoderConfig
from .errors import ConfigError
from .probes import LabeledEmbeddings, knn_probe, linear_probe
from .probes import embed_dataset
from .trainer import TrainConfig, run_training
from .validation import as_image_list, check_feature_matrix, check_labels, unit_rows


class SPCLPretrainer(TransformerMixin, BaseEstimator):
    """Self-supervised representation learner over grayscale image stacks.

    Parameters mirror the encoder and training configs; ``fit`` ignores
    ``y``.  After fitting, ``transform`` returns one unit-norm embedding row
    per image from the full (unmasked) token sequence.
    """

    def __init__(
        self,
        image_size: int = 64,
        patch_size: int = 8,
        dim: int = 64,
        depth: int = 4,
        heads: int = 4,
        mlp_ratio: int = 4,
        mask_ratio: float = 0.6,
        kappa: float = 1.0,
        tau_init: float = 10.0,
        epochs: int = 20,
        batch_size: int = 32,
        accum_steps: int = 1,
        lr_peak: float | None = None,
        weight_decay: float = 0.05,
        standardize: bool = False,
        seed: int = 0,
        threads: int = 1,
    ):
        self.image_size = image_size
        self.patch_size = patch_size
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.mask_ratio = mask_ratio
        self.kappa = kappa
        self.tau_init = tau_init
        self.epochs = epochs
        self.batch_size = batch_size
        self.accum_steps = accum_steps
        self.lr_peak = lr_peak
        self.weight_decay = weight_decay
        self.standardize = standardize
        self.seed = seed
        self.threads = threads

    def _configs(self) -> tuple[EncoderConfig, TrainConfig]:
        enc = EncoderConfig(
            depth=self.depth, dim=self.dim, heads=self.heads,
            mlp_ratio=self.mlp_ratio, patch=self.patch_size, image=self.image_size,
        )
        train = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            accum_steps=self.accum_steps, lr_peak=self.lr_peak,
            weight_decay=self.weight_decay, mask_ratio=self.mask_ratio,
            kappa=self.kappa, tau_init=self.tau_init, seed=self.seed,
            standardize=self.standardize, threads=self.threads,
        )
        return enc, train

    def fit(self, X, y=None):
        enc_cfg, train_cfg = self._configs()
        images = as_image_list(X, self.image_size)
        state, rows = run_training(images, train_cfg, enc_cfg)
        self.state_ = state
        self.history_ = rows
        self.encoder_config_ = state.enc_cfg
        self.n_features_out_ = self.dim
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "state_"):
            raise ConfigError("SPCLPretrainer is not fitted yet; call fit first")
        images = as_image_list(X, self.image_size)
        emb = embed_dataset(
            images, [0] * len(images), self.state_.params,
            self.state_.enc_cfg, pixel_stats=self.state_.pixel_stats,
            threads=self.threads,
        )
        return emb.embeddings


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression trained by full-batch gradient descent."""

    def __init__(self, epochs: int = 200, lr: float = 1.0):
        self.epochs = epochs
        self.lr = lr

    def fit(self, X, y):
        X = check_feature_matrix(X)
        y = check_labels(y, X.shape[0])
        train = LabeledEmbeddings(embeddings=unit_rows(X), labels=y)
        result = linear_probe(train, train, epochs=self.epochs, lr=self.lr)
        self.coef_ = result.weights
        self.classes_ = np.arange(result.weights.shape[1])
        self.train_losses_ = result.losses
        return self

    def decision_function(self, X) -> np.ndarray:
        X = unit_rows(check_feature_matrix(X))
        return X.astype(np.float64) @ self.coef_

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=1)


class KNNProbe(ClassifierMixin, BaseEstimator):
    """Cosine k-nearest-neighbor vote over a memorized embedding bank."""

    def __init__(self, k: int = 5):
        self.k = k

    def fit(self, X, y):
        X = check_feature_matrix(X)
        y = check_labels(y, X.shape[0])
        self.bank_ = LabeledEmbeddings(embeddings=unit_rows(X), labels=y)
        self.classes_ = np.unique(y)
        return self

    def predict(self, X) -> np.ndarray:
        X = unit_rows(check_feature_matrix(X))
        queries = LabeledEmbeddings(embeddings=X, labels=np.zeros(len(X), np.int64))
        sims = queries.embeddings @ self.bank_.embeddings.T
        out = np.empty(len(X), dtype=np.int64)
        for i in range(len(X)):
            order = np.argsort(-sims[i], kind="stable")[: self.k]
            votes: dict[int, int] = {}
            strength: dict[int, float] = {}
            for j in order:
                lbl = int(self.bank_.labels[j])
                votes[lbl] = votes.get(lbl, 0) + 1
                strength[lbl] = strength.get(lbl, 0.0) + float(sims[i, j])
            out[i] = sorted(votes, key=lambda l: (-votes[l], -strength[l], l))[0]
        return out

    def score(self, X, y, sample_weight=None):
        queries = LabeledEmbeddings(
            embeddings=unit_rows(check_feature_matrix(X)),
            labels=check_labels(y, len(X)),
        )
        return knn_probe(self.bank_, queries, k=self.k)
