"""Linear probe: bias-free softmax regression on frozen pixel features."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensorio import NODATA, FeatureMap, LabelMap, PathLike, read_container, take_payload, write_container


@dataclass
class LinearProbe:
    weights: np.ndarray  # C x D
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("probe weights must be a C x D matrix")
        if not np.isfinite(self.weights).all():
            raise ValueError("probe weights must be finite")

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> LinearProbe:
        return cls(np.zeros((num_classes, dim)))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def num_parameters(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class ProbeTrainConfig:
    learning_rate: float = 0.5
    epochs: int = 20
    batch_pixels: int | str = 4096
    seed: int = 0
    l2_reg: float = 1e-4

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_pixels != "full" and (not isinstance(self.batch_pixels, int) or self.batch_pixels < 1):
            raise ValueError("batch_pixels must be a positive int or 'full'")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be >= 0")


def upsample_labels_nn(y_lr: LabelMap, H: int, W: int) -> LabelMap:
    """Nearest-neighbour upsampling with floor index mapping."""
    h, w = y_lr.shape
    if H < 1 or W < 1:
        raise ValueError("target dims must be positive")
    if H < h or W < w:
        raise ValueError(f"target {H}x{W} is smaller than source {h}x{w}")
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    return LabelMap(y_lr.data[rows[:, None], cols[None, :]], y_lr.num_classes)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(weights: np.ndarray, X: np.ndarray, y: np.ndarray, l2_reg: float = 0.0):
    """Summed cross-entropy over rows of ``X`` plus ``l2_reg/2 * |W|_F^2``."""
    logp = _log_softmax(X @ weights.T)
    n = len(y)
    loss = -logp[np.arange(n), y].sum() + 0.5 * l2_reg * np.sum(weights**2)
    resid = np.exp(logp)
    resid[np.arange(n), y] -= 1.0
    grad = resid.T @ X + l2_reg * weights
    return float(loss), grad


def _valid_pixels(feats: FeatureMap, labels: LabelMap):
    if feats.shape[1:] != labels.shape:
        raise ValueError(f"features {feats.shape[1:]} and labels {labels.shape} are not aligned")
    X = feats.pixels()
    y = labels.data.reshape(-1).astype(np.int64)
    keep = y != NODATA
    return X[keep], y[keep]


def probe_loss_and_grad(
    probe: LinearProbe,
    feats: FeatureMap,
    labels: LabelMap,
    pixel_subset: Sequence[int] | np.ndarray | None = None,
    l2_reg: float = 0.0,
):
    """Loss and exact gradient over flat pixel indices (``u*W + v``).

    Nodata pixels in the subset are skipped; duplicates count as often as
    they appear.
    """
    if feats.shape[1:] != labels.shape:
        raise ValueError(f"features {feats.shape[1:]} and labels {labels.shape} are not aligned")
    X = feats.pixels()
    y = labels.data.reshape(-1).astype(np.int64)
    idx = np.arange(len(y)) if pixel_subset is None else np.asarray(pixel_subset, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(y)):
        raise IndexError("pixel index out of range")
    idx = idx[y[idx] != NODATA]
    if idx.size == 0:
        raise ValueError("empty pixel subset")
    return loss_and_grad(probe.weights, X[idx], y[idx], l2_reg)


def train_probe(feats, labels, cfg: ProbeTrainConfig | None = None, num_classes: int | None = None) -> LinearProbe:
    """Fit a probe by mini-batch gradient descent from zero weights.

    ``feats``/``labels`` may be single maps or equal-length sequences of
    maps; pixels from all images are pooled. Each step follows the
    gradient of the batch-mean cross-entropy plus ``l2_reg/2 * |W|^2``.
    ``loss_history`` records that objective over all pixels after each
    epoch.
    """
    cfg = cfg or ProbeTrainConfig()
    cfg.validate()
    if isinstance(feats, FeatureMap):
        feats, labels = [feats], [labels]
    if len(feats) != len(labels) or not feats:
        raise ValueError("need matching, non-empty feature and label sequences")
    parts = [_valid_pixels(f, l) for f, l in zip(feats, labels)]
    X = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    if len(y) == 0:
        raise ValueError("no labelled pixels to train on")
    C = num_classes or labels[0].num_classes
    probe = LinearProbe.zeros(C, X.shape[1])

    n = len(y)
    batch = n if cfg.batch_pixels == "full" else min(int(cfg.batch_pixels), n)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    W = probe.weights
    history = []
    for _ in range(cfg.epochs):
        order = np.arange(n) if batch == n else rng.permutation(n)
        for start in range(0, n, batch):
            sel = order[start : start + batch]
            # scaling l2 by the batch size turns the summed loss into a mean
            _, grad = loss_and_grad(W, X[sel], y[sel], cfg.l2_reg * len(sel))
            W = W - cfg.learning_rate * grad / len(sel)
        loss, _ = loss_and_grad(W, X, y, cfg.l2_reg * n)
        history.append(loss / n)
    probe.weights = W
    probe.loss_history = history
    return probe


def probe_predict(probe: LinearProbe, feats: FeatureMap) -> LabelMap:
    if feats.dim != probe.feature_dim:
        raise ValueError(f"feature dim {feats.dim} != probe dim {probe.feature_dim}")
    logits = probe.weights @ feats.data.reshape(feats.dim, -1).astype(np.float64)
    pred = logits.argmax(axis=0).astype(np.uint8)
    return LabelMap(pred.reshape(feats.shape[1:]), probe.num_classes)


def write_probe(probe: LinearProbe, path: PathLike) -> None:
    """MSRW container: dims ``C, D``; f32 weights, row-major."""
    write_container(path, b"MSRW", probe.weights.shape, probe.weights.astype("<f4").tobytes())


def read_probe(path: PathLike) -> LinearProbe:
    (c, d), buf = read_container(path, b"MSRW", 2)
    w = take_payload(buf, 0, "<f4", c * d, path).reshape(c, d)
    return LinearProbe(w.astype(np.float64))
