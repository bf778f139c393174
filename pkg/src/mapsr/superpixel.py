"""SLIC superpixels and per-segment summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensorio import FeatureMap, ImageRaster, ScoreMap

# sRGB (D65) -> XYZ, IEC 61966-2-1
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])
_LAB_EPS = (6.0 / 29.0) ** 3


@dataclass(frozen=True)
class SlicConfig:
    n_segments: int = 8000
    compactness: float = 10.0
    max_iters: int = 10
    enforce_connectivity: bool = True

    def validate(self, n_pixels: int | None = None) -> None:
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if self.compactness <= 0:
            raise ValueError("compactness must be > 0")
        if n_pixels is not None and self.n_segments > n_pixels:
            raise ValueError(f"n_segments={self.n_segments} exceeds pixel count {n_pixels}")


@dataclass
class SuperpixelPartition:
    assignment: np.ndarray  # H x W, ids in [0, N)
    sizes: np.ndarray  # N
    centroids: np.ndarray  # N x 2 (row, col)
    mean_embeddings: np.ndarray  # N x D, unit-norm rows (zero rows flagged)
    zero_embedding: np.ndarray  # N bool
    mean_scores: np.ndarray  # N x C

    @property
    def num_segments(self) -> int:
        return len(self.sizes)


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Convert a ``3 x H x W`` sRGB array in [0, 1] to CIELAB (D65)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = np.tensordot(_RGB_TO_XYZ, lin, axes=1) / _WHITE_D65[:, None, None]
    f = np.where(xyz > _LAB_EPS, np.cbrt(xyz), xyz / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    L = 116.0 * f[1] - 16.0
    a = 500.0 * (f[0] - f[1])
    b = 200.0 * (f[1] - f[2])
    return np.stack([L, a, b])


def _grid_centers(H: int, W: int, n: int):
    S = np.sqrt(H * W / n)
    ny = max(1, min(H, int(round(H / S))))
    nx = max(1, min(W, int(round(W / S))))
    rows = ((np.arange(ny) + 0.5) * H / ny).astype(np.int64)
    cols = ((np.arange(nx) + 0.5) * W / nx).astype(np.int64)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return S, rr.ravel(), cc.ravel()


def _perturb(lab: np.ndarray, rows: np.ndarray, cols: np.ndarray):
    """Move each seed to the lowest-gradient pixel of its 3x3 neighbourhood."""
    _, H, W = lab.shape
    pad = np.pad(lab, ((0, 0), (1, 1), (1, 1)), mode="edge")
    grad = ((pad[:, 2:, 1:-1] - pad[:, :-2, 1:-1]) ** 2).sum(0) + ((pad[:, 1:-1, 2:] - pad[:, 1:-1, :-2]) ** 2).sum(0)
    best_r, best_c = rows.copy(), cols.copy()
    best_g = grad[rows, cols].copy()
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r = np.clip(rows + dr, 0, H - 1)
            c = np.clip(cols + dc, 0, W - 1)
            g = grad[r, c]
            better = g < best_g
            best_r[better], best_c[better], best_g[better] = r[better], c[better], g[better]
    return best_r, best_c


def _enforce_connectivity(labels: np.ndarray, lab: np.ndarray) -> np.ndarray:
    """Merge stray components of each segment into a neighbouring segment.

    Every 4-connected component becomes a unit. For each segment the
    largest component is kept; the others are orphans, absorbed (smallest
    first) into the adjacent unit whose mean Lab colour is closest, ties
    going to the larger unit. Merging into the largest neighbour instead
    routinely glues fragments across colour edges on noisy images.
    """
    H, W = labels.shape
    comp = np.full((H, W), -1, dtype=np.int64)
    owner, n_comp = [], 0
    for s, box in enumerate(ndimage.find_objects(labels + 1)):
        if box is None:
            continue
        lab_ids, k = ndimage.label(labels[box] == s)
        m = lab_ids > 0
        comp[box][m] = lab_ids[m] - 1 + n_comp
        owner.extend([s] * k)
        n_comp += k
    owner = np.array(owner)
    flat = comp.ravel()
    size = np.bincount(flat, minlength=n_comp).astype(np.float64)
    keep = np.zeros(n_comp, dtype=bool)
    for s in np.unique(owner):
        ids = np.flatnonzero(owner == s)
        keep[ids[np.argmax(size[ids])]] = True
    if keep.all():
        return labels

    # component adjacency from horizontal and vertical pixel pairs
    a = np.concatenate([comp[:, :-1].ravel(), comp[:-1, :].ravel()])
    b = np.concatenate([comp[:, 1:].ravel(), comp[1:, :].ravel()])
    diff = a != b
    pairs = np.unique(np.stack([np.r_[a[diff], b[diff]], np.r_[b[diff], a[diff]]], 1), axis=0)
    neighbours = [[] for _ in range(n_comp)]
    for x, y in pairs:
        neighbours[x].append(y)

    color_sum = np.stack([np.bincount(flat, weights=ch.ravel(), minlength=n_comp) for ch in lab], 1)
    parent = np.arange(n_comp)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    unit_size = size.copy()
    for c in sorted(np.flatnonzero(~keep), key=lambda c: (size[c], c)):
        root = find(c)
        cands = {find(n) for n in neighbours[c]} - {root}
        if not cands:
            continue
        mine = color_sum[root] / unit_size[root]
        target = min(
            cands, key=lambda r: (np.sum((color_sum[r] / unit_size[r] - mine) ** 2), -unit_size[r], r)
        )
        parent[root] = target
        unit_size[target] += unit_size[root]
        color_sum[target] += color_sum[root]
    roots = np.array([find(c) for c in range(n_comp)])
    return roots[comp]


def _relabel(labels: np.ndarray) -> np.ndarray:
    _, inv = np.unique(labels, return_inverse=True)
    return inv.reshape(labels.shape).astype(np.int64)


def slic_segment(image: ImageRaster, cfg: SlicConfig | None = None) -> np.ndarray:
    """SLIC superpixels; returns ``H x W`` ids contiguous in ``[0, N)``."""
    cfg = cfg or SlicConfig()
    _, H, W = image.shape
    cfg.validate(H * W)
    lab = rgb_to_lab(image.data)
    S, rows, cols = _grid_centers(H, W, cfg.n_segments)
    rows, cols = _perturb(lab, rows, cols)
    centers = np.column_stack([lab[:, rows, cols].T, rows, cols]).astype(np.float64)
    spatial_w = (cfg.compactness / S) ** 2
    reach = int(np.ceil(S))
    yy, xx = np.mgrid[0:H, 0:W]
    labels = np.full((H, W), -1, dtype=np.int64)

    for _ in range(cfg.max_iters):
        dist = np.full((H, W), np.inf)
        for k, (L, a, b, cy, cx) in enumerate(centers):
            r0, r1 = max(0, int(cy) - reach), min(H, int(cy) + reach + 1)
            c0, c1 = max(0, int(cx) - reach), min(W, int(cx) + reach + 1)
            if r0 >= r1 or c0 >= c1:
                continue
            win = lab[:, r0:r1, c0:c1]
            d_lab = (win[0] - L) ** 2 + (win[1] - a) ** 2 + (win[2] - b) ** 2
            d_xy = (yy[r0:r1, c0:c1] - cy) ** 2 + (xx[r0:r1, c0:c1] - cx) ** 2
            d = d_lab + spatial_w * d_xy
            sub = dist[r0:r1, c0:c1]
            closer = d < sub
            sub[closer] = d[closer]
            labels[r0:r1, c0:c1][closer] = k
        orphan = labels < 0
        if orphan.any():
            # pixels outside every search window go to the nearest centre overall
            pts = np.column_stack([lab[:, orphan].T, yy[orphan], xx[orphan]])
            d = ((pts[:, None, :3] - centers[None, :, :3]) ** 2).sum(-1)
            d += spatial_w * ((pts[:, None, 3:] - centers[None, :, 3:]) ** 2).sum(-1)
            labels[orphan] = d.argmin(axis=1)
        feats = np.concatenate([lab, yy[None], xx[None]]).reshape(5, -1)
        counts = np.bincount(labels.ravel(), minlength=len(centers))
        sums = np.stack([np.bincount(labels.ravel(), weights=f, minlength=len(centers)) for f in feats], 1)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]

    if cfg.enforce_connectivity:
        labels = _enforce_connectivity(labels, lab)
    return _relabel(labels)


def pixel_segments(H: int, W: int) -> np.ndarray:
    """Trivial partition with every pixel its own segment."""
    return np.arange(H * W, dtype=np.int64).reshape(H, W)


def summarize_segments(assignment: np.ndarray, feats: FeatureMap, scores: ScoreMap) -> SuperpixelPartition:
    assignment = np.asarray(assignment, dtype=np.int64)
    H, W = assignment.shape
    if feats.shape[1:] != (H, W) or scores.shape[1:] != (H, W):
        raise ValueError("assignment, features and scores are not aligned")
    ids = assignment.ravel()
    N = int(ids.max()) + 1
    sizes = np.bincount(ids, minlength=N)
    if ids.min() < 0 or (sizes == 0).any():
        raise ValueError("segment ids must be contiguous in [0, N)")
    yy, xx = np.mgrid[0:H, 0:W]
    centroids = np.column_stack(
        [np.bincount(ids, weights=yy.ravel(), minlength=N), np.bincount(ids, weights=xx.ravel(), minlength=N)]
    ) / sizes[:, None]

    def seg_mean(values: np.ndarray) -> np.ndarray:
        # values: K x (H*W)
        out = np.column_stack([np.bincount(ids, weights=row, minlength=N) for row in values])
        return out / sizes[:, None]

    emb = seg_mean(feats.data.reshape(feats.dim, -1).astype(np.float64))
    norms = np.linalg.norm(emb, axis=1)
    zero = norms < 1e-12
    emb = emb / np.where(zero, 1.0, norms)[:, None]
    emb[zero] = 0.0
    mean_scores = seg_mean(scores.data.reshape(scores.num_classes, -1).astype(np.float64))
    return SuperpixelPartition(assignment, sizes, centroids, emb, zero, mean_scores)
