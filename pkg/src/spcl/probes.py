"""Frozen-feature evaluation: linear and kNN probes over encoder embeddings."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from .encoder import EncoderConfig, EncoderParams, forward_full
from .errors import ConfigError, ContractError
from .patching import ImageGray, embed_tokens, extract_patches, sincos_pos_embed
from .tensor import no_grad

log = logging.getLogger(__name__)


@dataclass
class LabeledEmbeddings:
    """Unit-norm embedding rows paired with integer class labels."""

    embeddings: np.ndarray  # (M, D) float32
    labels: np.ndarray  # (M,) int

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.ndim != 2 or self.labels.ndim != 1:
            raise ContractError(
                f"need (M, D) embeddings and (M,) labels, got "
                f"{self.embeddings.shape} and {self.labels.shape}"
            )
        if self.embeddings.shape[0] != self.labels.shape[0]:
            raise ContractError(
                f"{self.embeddings.shape[0]} embeddings vs {self.labels.shape[0]} labels"
            )
        if self.labels.size and self.labels.min() < 0:
            raise ContractError("labels must be non-negative")

    @property
    def count(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def embed_dataset(
    images: Sequence[ImageGray],
    labels: Sequence[int],
    params: EncoderParams,
    cfg: EncoderConfig,
    pixel_stats: tuple[float, float] | None = None,
    threads: int = 1,
) -> LabeledEmbeddings:
    """Full-sequence embeddings for every image, L2-normalized; deterministic."""
    if len(images) != len(labels):
        raise ConfigError(f"{len(images)} images vs {len(labels)} labels")
    pos = sincos_pos_embed(cfg.grid, cfg.grid, cfg.dim)

    def one(img: ImageGray) -> np.ndarray:
        if img.height != cfg.image or img.width != cfg.image:
            raise ConfigError(
                f"image {img.height}x{img.width} does not match configured side {cfg.image}"
            )
        patches = extract_patches(img, cfg.patch)
        if pixel_stats is not None:
            mean, std = pixel_stats
            patches = ((patches - mean) / std).astype(np.float32)
        with no_grad():
            tokens = embed_tokens(
                patches, params["patch.weight"], params["patch.bias"],
                pos, cfg.grid, cfg.grid,
            )
            z = forward_full(tokens, params, cfg).data
        norm = float(np.sqrt((z.astype(np.float64) ** 2).sum()))
        if norm < 1e-12:
            raise ContractError("embedding collapsed to the origin")
        return (z / np.float32(norm)).astype(np.float32)

    if threads > 1 and len(images) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, images))
    else:
        rows = [one(img) for img in images]
    emb = np.stack(rows, axis=0) if rows else np.zeros((0, cfg.dim), np.float32)
    return LabeledEmbeddings(embeddings=emb, labels=np.asarray(labels))


@dataclass
class LinearProbeResult:
    accuracy: float
    per_class: dict[int, float]
    losses: list[float]  # training loss per epoch
    weights: np.ndarray  # (D, C)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def linear_probe(
    train: LabeledEmbeddings,
    test: LabeledEmbeddings,
    epochs: int = 200,
    lr: float = 1.0,
) -> LinearProbeResult:
    """Multinomial logistic regression on frozen features.

    A single linear map D -> C trained by full-batch gradient descent from
    zero initialization under softmax cross-entropy.
    """
    if train.dim != test.dim:
        raise ConfigError(f"feature widths differ: {train.dim} vs {test.dim}")
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    if n_classes < 2:
        raise ConfigError("need at least 2 classes")
    missing = sorted(set(range(n_classes)) - set(train.labels.tolist()))
    if missing:
        log.warning("classes %s absent from the training set", missing)

    x, y = train.embeddings.astype(np.float64), train.labels
    onehot = np.zeros((x.shape[0], n_classes))
    onehot[np.arange(x.shape[0]), y] = 1.0
    w = np.zeros((train.dim, n_classes))
    losses = []
    for _ in range(epochs):
        probs = _softmax(x @ w)
        losses.append(float(-np.log(probs[np.arange(len(y)), y] + 1e-300).mean()))
        grad = x.T @ (probs - onehot) / x.shape[0]
        w -= lr * grad

    pred = (test.embeddings.astype(np.float64) @ w).argmax(axis=1)
    accuracy = float((pred == test.labels).mean())
    per_class: dict[int, float] = {}
    for c in range(n_classes):
        if c in missing:
            continue
        sel = test.labels == c
        if sel.any():
            per_class[c] = float((pred[sel] == c).mean())
    return LinearProbeResult(
        accuracy=accuracy, per_class=per_class, losses=losses, weights=w,
    )


def knn_probe(
    bank: LabeledEmbeddings,
    queries: LabeledEmbeddings,
    k: int = 5,
) -> float:
    """Cosine k-nearest-neighbor majority vote accuracy.

    Vote ties break by summed similarity, then by the lowest label index.
    """
    if bank.count == 0:
        raise ConfigError("empty embedding bank")
    if not (1 <= k <= bank.count):
        raise ConfigError(f"k must lie in [1, {bank.count}], got {k}")
    if bank.dim != queries.dim:
        raise ConfigError(f"feature widths differ: {bank.dim} vs {queries.dim}")

    sims = queries.embeddings @ bank.embeddings.T  # unit rows: cosine
    correct = 0
    for i in range(queries.count):
        order = np.argsort(-sims[i], kind="stable")[:k]
        votes: dict[int, int] = {}
        strength: dict[int, float] = {}
        for j in order:
            lbl = int(bank.labels[j])
            votes[lbl] = votes.get(lbl, 0) + 1
            strength[lbl] = strength.get(lbl, 0.0) + float(sims[i, j])
        best = sorted(
            votes, key=lambda lbl: (-votes[lbl], -strength[lbl], lbl)
        )[0]
        correct += int(best == int(queries.labels[i]))
    return correct / queries.count
