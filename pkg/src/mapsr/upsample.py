"""Image-guided densification of patch-grid features.

Attention mode is a training-free cross-attention: for HR pixel ``(u, v)``
the query is its colour, the keys are the mean colours of the LR cells in a
``(2r+1)^2`` window around its home cell, and the values are the LR feature
vectors themselves. Logits combine a colour and a spatial term::

    logit(i, j) = -|q - k_ij|^2 / tau_c - |(u, v) - centre(i, j)|^2 / (tau_s * p^2)

Out-of-grid window positions are dropped, so the softmax always runs over
at least the home cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorio import FeatureMap, ImageRaster

MODES = ("attention", "bilinear", "nearest")


@dataclass(frozen=True)
class UpsampleConfig:
    mode: str = "attention"
    window_radius: int = 3
    color_bandwidth: float = 0.05
    spatial_bandwidth: float = 2.0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown upsample mode {self.mode!r}; expected one of {MODES}")
        if self.window_radius < 0:
            raise ValueError("window_radius must be >= 0")
        if self.color_bandwidth <= 0 or self.spatial_bandwidth <= 0:
            raise ValueError("bandwidths must be > 0")


def block_mean_colors(image: ImageRaster, p: int) -> FeatureMap:
    _, H, W = image.shape
    if p < 1 or H % p or W % p:
        raise ValueError(f"patch size {p} must divide {H}x{W}")
    blocks = image.data.astype(np.float64).reshape(3, H // p, p, W // p, p)
    return FeatureMap(blocks.mean(axis=(2, 4)), patch_size=p, source_grid=(H // p, W // p))


def _patch_size(f_lr: FeatureMap, image: ImageRaster) -> int:
    _, h, w = f_lr.shape
    _, H, W = image.shape
    if H % h or W % w or H // h != W // w:
        raise ValueError(f"image {H}x{W} is not an integer multiple of feature grid {h}x{w}")
    return H // h


def attention_logits(f_lr: FeatureMap, image: ImageRaster, cfg: UpsampleConfig):
    """Window logits and the LR cell each window slot points at.

    Returns ``(logits, cell_i, cell_j)``, each of shape ``(K, H, W)`` with
    ``K = (2r+1)^2``. Invalid slots carry ``-inf`` logits and clamped
    indices.
    """
    p = _patch_size(f_lr, image)
    _, h, w = f_lr.shape
    _, H, W = image.shape
    r = cfg.window_radius
    keys = block_mean_colors(image, p).data.astype(np.float64)
    query = image.data.astype(np.float64)

    u = np.arange(H)[:, None]
    v = np.arange(W)[None, :]
    i0, j0 = u // p, v // p
    offsets = [(di, dj) for di in range(-r, r + 1) for dj in range(-r, r + 1)]
    K = len(offsets)
    logits = np.full((K, H, W), -np.inf)
    cell_i = np.zeros((K, H, W), dtype=np.int64)
    cell_j = np.zeros((K, H, W), dtype=np.int64)
    for k, (di, dj) in enumerate(offsets):
        ii = np.broadcast_to(i0 + di, (H, W))
        jj = np.broadcast_to(j0 + dj, (H, W))
        ok = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        ic, jc = np.clip(ii, 0, h - 1), np.clip(jj, 0, w - 1)
        color = ((query - keys[:, ic, jc]) ** 2).sum(axis=0)
        ci = ic * p + (p - 1) / 2.0
        cj = jc * p + (p - 1) / 2.0
        spatial = (u - ci) ** 2 + (v - cj) ** 2
        logit = -color / cfg.color_bandwidth - spatial / (cfg.spatial_bandwidth * p * p)
        logits[k] = np.where(ok, logit, -np.inf)
        cell_i[k], cell_j[k] = ic, jc
    return logits, cell_i, cell_j


def attention_weights(f_lr: FeatureMap, image: ImageRaster, cfg: UpsampleConfig):
    """Softmax-normalised window weights; see :func:`attention_logits`."""
    logits, cell_i, cell_j = attention_logits(f_lr, image, cfg)
    m = logits.max(axis=0, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=0, keepdims=True), cell_i, cell_j


def _attention(f_lr: FeatureMap, image: ImageRaster, cfg: UpsampleConfig) -> np.ndarray:
    alpha, cell_i, cell_j = attention_weights(f_lr, image, cfg)
    vals = f_lr.data.astype(np.float64)
    out = np.zeros((f_lr.dim,) + alpha.shape[1:])
    for k in range(alpha.shape[0]):
        out += alpha[k] * vals[:, cell_i[k], cell_j[k]]
    return out


def _nearest(f_lr: FeatureMap, p: int) -> np.ndarray:
    return np.repeat(np.repeat(f_lr.data, p, axis=1), p, axis=2)


def _axis_weights(n_out: int, n_in: int, p: int):
    # LR cell centres sit at HR coordinate i*p + (p-1)/2
    x = (np.arange(n_out) - (p - 1) / 2.0) / p
    x = np.clip(x, 0, n_in - 1)
    lo = np.floor(x).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, x - lo


def _bilinear(f_lr: FeatureMap, p: int) -> np.ndarray:
    _, h, w = f_lr.shape
    vals = f_lr.data.astype(np.float64)
    r0, r1, fr = _axis_weights(h * p, h, p)
    c0, c1, fc = _axis_weights(w * p, w, p)
    rows = vals[:, r0, :] * (1 - fr)[None, :, None] + vals[:, r1, :] * fr[None, :, None]
    return rows[:, :, c0] * (1 - fc) + rows[:, :, c1] * fc


def upsample_features(f_lr: FeatureMap, image: ImageRaster, cfg: UpsampleConfig | None = None) -> FeatureMap:
    """Densify ``D x h x w`` features to the ``H x W`` grid of ``image``.

    Every output vector is a convex combination of input vectors, so each
    channel stays within its input range.
    """
    cfg = cfg or UpsampleConfig()
    cfg.validate()
    p = _patch_size(f_lr, image)
    if cfg.mode == "nearest":
        out = _nearest(f_lr, p)
    elif cfg.mode == "bilinear":
        out = _bilinear(f_lr, p)
    else:
        out = _attention(f_lr, image, cfg)
    return FeatureMap(out)
