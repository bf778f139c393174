"""Metric-based pixel classification and the K-means + voting baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .prompts import PromptSet
from .tensorio import NODATA, FeatureMap, LabelMap, ScoreMap

INACTIVE_SCORE = -1e30


def cosine_scores(feats: FeatureMap, prompts: PromptSet) -> ScoreMap:
    """Cosine similarity of every pixel to every class prompt.

    Inactive classes get ``INACTIVE_SCORE``; zero-norm pixels score 0
    against every active class.
    """
    if feats.dim != prompts.dim:
        raise ValueError(f"feature dim {feats.dim} != prompt dim {prompts.dim}")
    active = prompts.active
    if not active.any():
        raise ValueError("no active prompts")
    D, H, W = feats.shape
    X = feats.data.reshape(D, -1).astype(np.float64)
    xnorm = np.linalg.norm(X, axis=0)
    X = X / np.where(xnorm > 0, xnorm, 1.0)
    P = prompts.prompts[active] / prompts.norms[active, None]
    scores = np.full((prompts.num_classes, H * W), INACTIVE_SCORE)
    scores[active] = P @ X
    return ScoreMap(scores.reshape(-1, H, W))


def argmax_labels(scores: ScoreMap) -> LabelMap:
    """Per-pixel argmax; ties resolve to the lowest class index."""
    return LabelMap(scores.data.argmax(axis=0).astype(np.uint8), scores.num_classes)


@dataclass(frozen=True)
class KMeansConfig:
    k: int = 8
    max_iters: int = 100
    seed: int = 0
    tol: float = 1e-6

    def validate(self) -> None:
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.max_iters < 1 or self.tol <= 0:
            raise ValueError("max_iters must be >= 1 and tol > 0")


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignment: np.ndarray
    objective_history: list[float] = field(default_factory=list)


def _sq_dists(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (X**2).sum(1)[:, None] - 2.0 * X @ centers.T + (centers**2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    closest = _sq_dists(X, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.uniform() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        closest = np.minimum(closest, _sq_dists(X, X[idx][None])[:, 0])
    return np.array(centers)


def kmeans(X: np.ndarray, cfg: KMeansConfig) -> KMeansResult:
    """Lloyd's algorithm from a seeded k-means++ start.

    An empty cluster is re-seeded at the point farthest from its current
    centre; that point leaves its old cluster. ``objective_history`` holds
    the within-cluster sum of squares after each assignment step.
    """
    cfg.validate()
    X = np.asarray(X, dtype=np.float64)
    if len(X) < cfg.k:
        raise ValueError(f"need at least k={cfg.k} points, got {len(X)}")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    centers = kmeans_plusplus(X, cfg.k, rng)
    history = []
    assign = None
    for _ in range(cfg.max_iters):
        d = _sq_dists(X, centers)
        assign = d.argmin(axis=1)
        best = d[np.arange(len(X)), assign]
        history.append(float(best.sum()))
        counts = np.bincount(assign, minlength=cfg.k)
        for c in np.flatnonzero(counts == 0):
            far = int(best.argmax())
            assign[far] = c
            best[far] = 0.0
        new = np.zeros_like(centers)
        np.add.at(new, assign, X)
        new /= np.bincount(assign, minlength=cfg.k)[:, None]
        shift = np.abs(new - centers).max()
        centers = new
        if shift < cfg.tol:
            break
    d = _sq_dists(X, centers)
    assign = d.argmin(axis=1)
    history.append(float(d[np.arange(len(X)), assign].sum()))
    return KMeansResult(centers, assign, history)


def vote_clusters(assign: np.ndarray, labels: np.ndarray, k: int, num_classes: int) -> np.ndarray:
    """Map each cluster to its modal label (ties to the lowest class).

    Clusters with no labelled member map to class 0.
    """
    ok = labels != NODATA
    votes = np.zeros((k, num_classes), dtype=np.int64)
    np.add.at(votes, (assign[ok], labels[ok].astype(np.int64)), 1)
    return votes.argmax(axis=1)


def kmeans_voting_baseline(feats: FeatureMap, lr_up: LabelMap, cfg: KMeansConfig | None = None) -> LabelMap:
    cfg = cfg or KMeansConfig()
    if feats.shape[1:] != lr_up.shape:
        raise ValueError("features and labels are not aligned")
    res = kmeans(feats.pixels(), cfg)
    lut = vote_clusters(res.assignment, lr_up.data.reshape(-1), cfg.k, lr_up.num_classes)
    return LabelMap(lut[res.assignment].reshape(lr_up.shape).astype(np.uint8), lr_up.num_classes)
