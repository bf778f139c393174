"""Class prompts: per-class mean embeddings over selected pixel sets."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensorio import NODATA, FeatureMap, LabelMap, PathLike, read_container, take_payload, write_container

ZERO_NORM = 1e-12


class Provenance(enum.IntEnum):
    PROBE_AGREEMENT = 0
    ORACLE_HR = 1
    FALLBACK_LR_ONLY = 2
    FALLBACK_PROBE_ONLY = 3
    INACTIVE = 4


@dataclass
class PromptSet:
    prompts: np.ndarray  # C x D
    support_counts: np.ndarray  # C
    provenance: list[Provenance]

    def __post_init__(self):
        self.prompts = np.asarray(self.prompts, dtype=np.float64)
        self.support_counts = np.asarray(self.support_counts, dtype=np.int64)
        self.provenance = [Provenance(p) for p in self.provenance]
        C = self.prompts.shape[0]
        if self.prompts.ndim != 2 or self.support_counts.shape != (C,) or len(self.provenance) != C:
            raise ValueError("prompt set fields disagree on class count")
        if not np.isfinite(self.prompts).all():
            raise ValueError("prompts must be finite")
        if (self.support_counts < 0).any():
            raise ValueError("support counts must be >= 0")

    @property
    def num_classes(self) -> int:
        return self.prompts.shape[0]

    @property
    def dim(self) -> int:
        return self.prompts.shape[1]

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.prompts, axis=1)

    @property
    def degenerate(self) -> np.ndarray:
        """Classes whose prompt is numerically the zero vector."""
        return self.norms < ZERO_NORM

    @property
    def active(self) -> np.ndarray:
        inactive = np.array([p is Provenance.INACTIVE for p in self.provenance])
        return ~inactive & ~self.degenerate & (self.support_counts > 0)


def select_high_confidence(probe_pred: LabelMap, lr_up: LabelMap, c: int) -> np.ndarray:
    """Boolean ``H x W`` mask of pixels where probe and LR label both say ``c``."""
    if probe_pred.shape != lr_up.shape:
        raise ValueError("prediction and label maps are not aligned")
    if c == NODATA:
        return np.zeros(lr_up.shape, dtype=bool)
    return (probe_pred.data == c) & (lr_up.data == c)


def high_confidence_sets(probe_pred: LabelMap, lr_up: LabelMap, num_classes: int) -> list[np.ndarray]:
    return [select_high_confidence(probe_pred, lr_up, c) for c in range(num_classes)]


def _masked_sum(feats: FeatureMap, mask: np.ndarray):
    if mask.shape != feats.shape[1:]:
        raise ValueError(f"mask {mask.shape} not aligned with features {feats.shape[1:]}")
    sel = feats.data[:, mask].astype(np.float64)
    return sel.sum(axis=1), int(mask.sum())


def _pooled(feats_list, masks_list, c):
    total, count = None, 0
    for feats, masks in zip(feats_list, masks_list):
        s, n = _masked_sum(feats, masks[c])
        total = s if total is None else total + s
        count += n
    return total, count


def aggregate_prompts(
    feats,
    omegas,
    fallbacks: Sequence[tuple[Provenance, object]] = (),
    provenance: Provenance = Provenance.PROBE_AGREEMENT,
    mode: str = "pooled",
) -> PromptSet:
    """Average features over each class's pixel set.

    ``feats`` is a FeatureMap (``omegas`` a list of C masks) or a sequence
    of FeatureMaps (``omegas`` a parallel sequence of mask lists). In
    ``pooled`` mode all selected pixels are averaged together; in
    ``per-image`` mode per-image means are averaged over images where the
    class has support.

    ``fallbacks`` is an ordered chain of ``(provenance, omegas)`` tried for
    classes whose set is empty. Classes still empty are marked inactive.
    """
    if mode not in ("pooled", "per-image"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    if isinstance(feats, FeatureMap):
        feats = [feats]
        omegas = [omegas]
        fallbacks = [(prov, [alt]) for prov, alt in fallbacks]
    C = len(omegas[0])
    D = feats[0].dim
    prompts = np.zeros((C, D))
    counts = np.zeros(C, dtype=np.int64)
    prov = [Provenance.INACTIVE] * C
    chain = [(provenance, omegas)] + list(fallbacks)
    for c in range(C):
        for label, sets in chain:
            if mode == "pooled":
                total, n = _pooled(feats, sets, c)
                if n:
                    prompts[c], counts[c] = total / n, n
            else:
                means, n = [], 0
                for f, masks in zip(feats, sets):
                    s, k = _masked_sum(f, masks[c])
                    if k:
                        means.append(s / k)
                        n += k
                if n:
                    prompts[c], counts[c] = np.mean(means, axis=0), n
            if n:
                prov[c] = label
                break
    if not counts.any():
        raise ValueError("every class has an empty pixel set; no supervision available")
    return PromptSet(prompts, counts, prov)


def build_prompts(feats, probe_pred, lr_up, mode: str = "pooled") -> PromptSet:
    """Agreement prompts with the standard fallback chain.

    Empty agreement sets fall back to the LR label alone, then to the probe
    prediction alone, then the class is marked inactive.
    """
    if isinstance(feats, FeatureMap):
        feats, probe_pred, lr_up = [feats], [probe_pred], [lr_up]
    C = lr_up[0].num_classes
    agree = [high_confidence_sets(p, l, C) for p, l in zip(probe_pred, lr_up)]
    lr_only = [[l.data == c for c in range(C)] for l in lr_up]
    probe_only = [[p.data == c for c in range(C)] for p in probe_pred]
    return aggregate_prompts(
        feats,
        agree,
        fallbacks=[(Provenance.FALLBACK_LR_ONLY, lr_only), (Provenance.FALLBACK_PROBE_ONLY, probe_only)],
        mode=mode,
    )


def lr_label_prompts(feats: FeatureMap, lr_up: LabelMap) -> PromptSet:
    """Prompts from the upsampled LR labels alone (no agreement filter)."""
    C = lr_up.num_classes
    return aggregate_prompts(feats, [lr_up.data == c for c in range(C)], provenance=Provenance.FALLBACK_LR_ONLY)


def oracle_prompts(feats, y_star, mode: str = "pooled") -> PromptSet:
    """Class means over HR ground truth; classes absent from the truth are inactive."""
    if isinstance(feats, FeatureMap):
        feats, y_star = [feats], [y_star]
    C = y_star[0].num_classes
    sets = [[y.data == c for c in range(C)] for y in y_star]
    return aggregate_prompts(feats, sets, provenance=Provenance.ORACLE_HR, mode=mode)


def write_prompts(ps: PromptSet, path: PathLike) -> None:
    """MSRP container: dims ``C, D``; f32 prompts, u32 counts, u8 provenance codes."""
    payload = (
        ps.prompts.astype("<f4").tobytes()
        + ps.support_counts.astype("<u4").tobytes()
        + np.array([int(p) for p in ps.provenance], dtype=np.uint8).tobytes()
    )
    write_container(path, b"MSRP", (ps.num_classes, ps.dim), payload)


def read_prompts(path: PathLike) -> PromptSet:
    (c, d), buf = read_container(path, b"MSRP", 2)
    prompts = take_payload(buf, 0, "<f4", c * d, path).reshape(c, d)
    counts = take_payload(buf, 4 * c * d, "<u4", c, path)
    prov = take_payload(buf, 4 * c * d + 4 * c, "u1", c, path)
    return PromptSet(prompts.astype(np.float64), counts.astype(np.int64), [Provenance(int(p)) for p in prov])
