"""Synthetic scenes with known HR truth.

A scene is a Voronoi partition of the HR grid. Each Voronoi cell gets a
class; each class gets a mean embedding (a vertex of a centred regular
simplex, scaled by ``embed_separation``) and a base colour. From these we
derive the dense per-pixel features, their patch-grid averages, a noisy
RGB image and a degraded LR product.

All randomness comes from ``numpy.random.Generator(PCG64(seed))`` and is
drawn in a fixed order, so a scene is a pure function of its spec.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorio import FeatureMap, ImageRaster, LabelMap


@dataclass(frozen=True)
class SceneSpec:
    H: int = 128
    W: int = 128
    C: int = 4
    D: int = 16
    patch: int = 8
    n_regions: int = 24
    embed_separation: float = 1.0
    embed_noise: float = 0.0
    image_noise: float = 0.02
    lr_factor: int = 8
    label_flip_rate: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if min(self.H, self.W, self.C, self.D, self.patch, self.n_regions, self.lr_factor) < 1:
            raise ValueError("scene sizes must be positive")
        if self.C < 2 or self.C > 255:
            raise ValueError(f"C must be in [2, 255], got {self.C}")
        if self.D < self.C:
            raise ValueError(f"D must be >= C to embed a simplex, got D={self.D}, C={self.C}")
        if self.H % self.patch or self.W % self.patch:
            raise ValueError(f"patch {self.patch} must divide {self.H}x{self.W}")
        if self.H % self.lr_factor or self.W % self.lr_factor:
            raise ValueError(f"lr_factor {self.lr_factor} must divide {self.H}x{self.W}")
        if min(self.embed_separation, self.embed_noise, self.image_noise) < 0:
            raise ValueError("separation and noise parameters must be >= 0")
        if not 0.0 <= self.label_flip_rate < 1.0:
            raise ValueError("label_flip_rate must be in [0, 1)")


@dataclass(frozen=True)
class Scene:
    image: ImageRaster
    features_lr: FeatureMap  # D x H/p x W/p
    features_hr: FeatureMap  # dense oracle, D x H x W
    truth: LabelMap
    labels_lr: LabelMap
    class_means: np.ndarray  # C x D, float32
    class_colors: np.ndarray  # C x 3


def simplex_means(C: int, D: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Mutually equidistant vectors of norm ``separation`` in R^D."""
    verts = np.eye(C) - 1.0 / C
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    # random orthonormal frame so classes are not axis-aligned
    q, r = np.linalg.qr(rng.standard_normal((D, D)))
    q *= np.sign(np.diag(r))
    return (separation * verts @ q[:C]).astype(np.float32)


def _class_colors(C: int, rng: np.random.Generator) -> np.ndarray:
    min_gap = 0.6 / np.cbrt(C)
    colors = []
    for _ in range(1000 * C):
        cand = rng.uniform(0.15, 0.85, size=3)
        if all(np.linalg.norm(cand - c) >= min_gap for c in colors):
            colors.append(cand)
            if len(colors) == C:
                break
    while len(colors) < C:
        colors.append(rng.uniform(0.15, 0.85, size=3))
    return np.array(colors)


def majority_downsample(labels: LabelMap, factor: int) -> LabelMap:
    """Modal class of every ``factor x factor`` block (ties to the lowest class).

    Nodata pixels do not vote; an all-nodata block stays nodata.
    """
    h, w = labels.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} must divide {h}x{w}")
    if factor == 1:
        return labels
    C = labels.num_classes
    blocks = labels.data.reshape(h // factor, factor, w // factor, factor).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h // factor, w // factor, -1)
    counts = np.stack([(blocks == c).sum(axis=-1) for c in range(C)], axis=-1)
    out = counts.argmax(axis=-1).astype(np.uint8)
    out[counts.sum(axis=-1) == 0] = 255
    return LabelMap(out, C)


def generate_scene(spec: SceneSpec) -> Scene:
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    H, W, C, D, p = spec.H, spec.W, spec.C, spec.D, spec.patch

    means = simplex_means(C, D, spec.embed_separation, rng)
    colors = _class_colors(C, rng)

    seeds = rng.uniform(0, 1, size=(spec.n_regions, 2)) * (H, W)
    # first C regions cover every class, the rest are random
    region_class = np.concatenate(
        [rng.permutation(C), rng.integers(0, C, size=max(0, spec.n_regions - C))]
    )[: spec.n_regions]
    rr, cc = np.mgrid[0:H, 0:W]
    d2 = (rr[..., None] + 0.5 - seeds[:, 0]) ** 2 + (cc[..., None] + 0.5 - seeds[:, 1]) ** 2
    truth = region_class[d2.argmin(axis=-1)].astype(np.uint8)

    dense = means[truth].transpose(2, 0, 1).astype(np.float32)
    if spec.embed_noise > 0:
        dense = dense + (spec.embed_noise * rng.standard_normal((D, H, W))).astype(np.float32)
    patch_grid = dense.astype(np.float64).reshape(D, H // p, p, W // p, p).mean(axis=(2, 4))

    image = colors[truth].transpose(2, 0, 1)
    if spec.image_noise > 0:
        image = image + spec.image_noise * rng.standard_normal((3, H, W))
    image = np.clip(image, 0.0, 1.0)

    truth_map = LabelMap(truth, C)
    lr = majority_downsample(truth_map, spec.lr_factor).data.copy()
    if spec.label_flip_rate > 0:
        flip = rng.uniform(size=lr.shape) < spec.label_flip_rate
        # uniform over the C-1 wrong classes
        shift = rng.integers(1, C, size=lr.shape)
        lr = np.where(flip, (lr.astype(np.int64) + shift) % C, lr).astype(np.uint8)

    return Scene(
        image=ImageRaster(image),
        features_lr=FeatureMap(patch_grid, patch_size=p, source_grid=(H // p, W // p)),
        features_hr=FeatureMap(dense),
        truth=truth_map,
        labels_lr=LabelMap(lr, C),
        class_means=means,
        class_colors=colors,
    )
