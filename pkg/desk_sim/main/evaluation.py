from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from ..api import DatasetError, FeatureBank, ShapeError
from .augment import prepare_eval_image
from .dataset import ImageDataset
from .log import LOG
from .model import SimModel


def l2_rows(features: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return features / np.maximum(np.linalg.norm(features, axis=1, keepdims=True), eps)


def build_bank(model: SimModel, dataset: ImageDataset, batch_size: int = 128) -> FeatureBank:
    """
    Pooled backbone features of every image in dataset order, L2
    normalized. Images are resized whole; no augmentation is applied.
    """
    size = model.cfg.image_size
    chunks = []

    for start in range(0, len(dataset), batch_size):
        stop = min(start + batch_size, len(dataset))
        images = np.stack(
            [
                prepare_eval_image(dataset.load(i), size, dataset.mean, dataset.std)
                for i in range(start, stop)
            ]
        )
        chunks.append(model.extract_backbone_features(images).astype(np.float64))

    if not chunks:
        raise DatasetError("Cannot build a feature bank from an empty dataset")

    features = l2_rows(np.concatenate(chunks))
    return FeatureBank(features=features, labels=dataset.labels(), l2_normalized=True)


def _check_dims(train: FeatureBank, test: FeatureBank):
    if train.dim != test.dim:
        raise ShapeError(f"Feature dimension mismatch: train {train.dim} vs test {test.dim}")


def knn_predict(
    train: FeatureBank, queries: np.ndarray, k: int = 20, temperature: float = 0.07
) -> np.ndarray:
    bank = train.features if train.l2_normalized else l2_rows(train.features)
    sims = l2_rows(queries) @ bank.T

    if k > train.size:
        LOG.warning("kNN k=%d exceeds the bank size %d, using %d", k, train.size, train.size)
        k = train.size

    neighbors = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    weights = np.exp(np.take_along_axis(sims, neighbors, axis=1) / temperature)

    classes = np.unique(train.labels)
    neighbor_labels = np.searchsorted(classes, train.labels[neighbors])

    votes = np.zeros((queries.shape[0], classes.size))
    np.add.at(votes, (np.arange(queries.shape[0])[:, None], neighbor_labels), weights)

    return classes[np.argmax(votes, axis=1)]


def knn_classify(
    train: FeatureBank, test: FeatureBank, k: int = 20, temperature: float = 0.07
) -> float:
    """
    Top-1 accuracy of a cosine-similarity kNN vote where each neighbor
    weighs exp(similarity / temperature).
    """
    _check_dims(train, test)
    predictions = knn_predict(train, test.features, k, temperature)
    return float(np.mean(predictions == test.labels))


@dataclass
class LinearProbe:
    classes: np.ndarray
    weight: np.ndarray
    bias: np.ndarray
    mean: Optional[np.ndarray]
    std: Optional[np.ndarray]
    losses: List[float] = field(default_factory=list)

    def _prepare(self, features: np.ndarray) -> np.ndarray:
        if self.mean is None or self.std is None:
            return features
        return (features - self.mean) / self.std

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self._prepare(features) @ self.weight + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.logits(features), axis=1)]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def fit_linear_probe(
    train: FeatureBank,
    epochs: int,
    lr: float,
    weight_decay: float = 0.0,
    feature_norm: bool = True,
) -> LinearProbe:
    """
    Multinomial logistic regression by full-batch gradient descent. With
    ``feature_norm`` the features are first standardized with the training
    mean and variance (an affine-free batch norm).
    """
    classes = np.unique(train.labels)
    if classes.size < 2:
        raise DatasetError(f"Linear probe needs at least 2 classes, got {classes.size}")

    x = train.features.astype(np.float64)
    mean = std = None
    if feature_norm:
        mean = x.mean(axis=0)
        std = np.sqrt(x.var(axis=0) + 1e-6)

    probe = LinearProbe(
        classes=classes,
        weight=np.zeros((train.dim, classes.size)),
        bias=np.zeros(classes.size),
        mean=mean,
        std=std,
    )

    x = probe._prepare(x)
    onehot = np.eye(classes.size)[np.searchsorted(classes, train.labels)]
    m = x.shape[0]

    for _ in range(epochs):
        probs = _softmax(x @ probe.weight + probe.bias)
        probe.losses.append(
            float(-np.mean(np.log(np.sum(probs * onehot, axis=1) + 1e-12)))
            + 0.5 * weight_decay * float(np.sum(probe.weight**2))
        )

        delta = (probs - onehot) / m
        probe.weight -= lr * (x.T @ delta + weight_decay * probe.weight)
        probe.bias -= lr * delta.sum(axis=0)

    LOG.info("Linear probe: loss %.4f -> %.4f", probe.losses[0], probe.losses[-1])

    return probe


def linear_probe(
    train: FeatureBank,
    test: FeatureBank,
    epochs: int,
    lr: float,
    weight_decay: float = 0.0,
    feature_norm: bool = True,
) -> float:
    _check_dims(train, test)
    probe = fit_linear_probe(train, epochs, lr, weight_decay, feature_norm)
    return float(np.mean(probe.predict(test.features) == test.labels))


def result_record(
    checkpoint: Optional[str],
    metric: str,
    value: float,
    k: Optional[int] = None,
    temperature: Optional[float] = None,
    epochs: Optional[int] = None,
) -> Dict[str, Any]:
    return {
        "checkpoint": checkpoint,
        "metric": metric,
        "value": value,
        "k": k,
        "temperature": temperature,
        "epochs": epochs,
    }
