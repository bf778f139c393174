"""End-to-end map super-resolution.

    upsample features -> train probe on upsampled LR labels -> prompts
    -> cosine scores + argmax -> per-chip superpixel graph refinement

Refinement runs independently on non-overlapping chips and the results
are mosaicked back together, so chip seams are expected.
"""

from __future__ import annotations

import dataclasses
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .classify import KMeansConfig, argmax_labels, cosine_scores, kmeans_voting_baseline
from .evaluate import accumulate_confusion, miou
from .graphrefine import GraphConfig, build_graph, refine_labels
from .probe import LinearProbe, ProbeTrainConfig, probe_predict, train_probe, upsample_labels_nn
from .prompts import PromptSet, build_prompts, oracle_prompts
from .superpixel import SlicConfig, pixel_segments, slic_segment, summarize_segments
from .tensorio import FeatureMap, ImageRaster, LabelMap, ScoreMap
from .upsample import UpsampleConfig, upsample_features

PROMPT_MODES = ("probe_agreement", "oracle_hr")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextmanager
def stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, str(exc)) from exc


@dataclass(frozen=True)
class Paths:
    image: str | None = None
    features: str | None = None
    labels_lr: str | None = None
    truth: str | None = None
    oracle_labels: str | None = None
    output: str | None = None
    scores: str | None = None
    colormap: str | None = None


@dataclass(frozen=True)
class Stages:
    graph_refine: bool = True
    superpixel: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    chip_size: int = 448
    prompt_mode: str = "probe_agreement"
    prompt_pooling: str = "pooled"
    seed: int = 0
    absent_as_zero: bool = False
    upsample: UpsampleConfig = field(default_factory=UpsampleConfig)
    probe: ProbeTrainConfig = field(default_factory=ProbeTrainConfig)
    slic: SlicConfig = field(default_factory=SlicConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    kmeans: KMeansConfig = field(default_factory=KMeansConfig)
    stages: Stages = field(default_factory=Stages)

    def validate(self, patch: int | None = None) -> None:
        if self.chip_size < 1 or (patch is not None and self.chip_size < 2 * patch):
            raise ValueError(f"chip_size {self.chip_size} must be >= 2 * patch size")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}")
        if self.stages.superpixel and not self.stages.graph_refine:
            raise ValueError("stages.superpixel requires stages.graph_refine")
        self.upsample.validate()
        self.probe.validate()
        self.graph.validate()

    def seeded(self) -> PipelineConfig:
        """Propagate the pipeline seed into the seeded sub-configs."""
        return dataclasses.replace(
            self,
            probe=dataclasses.replace(self.probe, seed=self.seed),
            kmeans=dataclasses.replace(self.kmeans, seed=self.seed),
        )


@dataclass
class PipelineResult:
    labels: LabelMap
    initial: LabelMap
    scores: ScoreMap
    prompts: PromptSet
    features: FeatureMap
    probe: LinearProbe | None = None
    metrics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# chips


def chip_windows(H: int, W: int, chip_size: int) -> list[tuple[slice, slice]]:
    """Non-overlapping windows; the last row/column of chips is truncated."""
    if chip_size < 1:
        raise ValueError("chip_size must be >= 1")
    return [
        (slice(r, min(r + chip_size, H)), slice(c, min(c + chip_size, W)))
        for r in range(0, H, chip_size)
        for c in range(0, W, chip_size)
    ]


def split_chips(raster: np.ndarray, chip_size: int):
    """Cut a ``(..., H, W)`` array into chips; returns ``[(window, chip), ...]``."""
    H, W = raster.shape[-2:]
    return [((rs, cs), raster[..., rs, cs]) for rs, cs in chip_windows(H, W, chip_size)]


def mosaic(chips, shape: tuple[int, ...], dtype=None) -> np.ndarray:
    """Inverse of :func:`split_chips`."""
    first = chips[0][1]
    out = np.empty(shape, dtype=dtype or first.dtype)
    for (rs, cs), chip in chips:
        out[..., rs, cs] = chip
    return out


def chip_segments(n_segments: int, chip_size: int, h: int, w: int) -> int:
    """Superpixel count for an ``h x w`` chip at the configured density."""
    n = int(round(n_segments * (h * w) / float(chip_size * chip_size)))
    return int(np.clip(n, 1, h * w))


def refine_chip(image: np.ndarray, feats: np.ndarray, scores: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    _, h, w = scores.shape
    if cfg.stages.superpixel:
        slic_cfg = dataclasses.replace(cfg.slic, n_segments=chip_segments(cfg.slic.n_segments, cfg.chip_size, h, w))
        assign = slic_segment(ImageRaster(image), slic_cfg)
    else:
        assign = pixel_segments(h, w)
    part = summarize_segments(assign, FeatureMap(feats), ScoreMap(scores))
    if part.num_segments < 2:
        seg_class = part.mean_scores.argmax(axis=1).astype(np.uint8)
        return seg_class[assign]
    with warnings.catch_warnings():
        # small edge chips routinely have fewer than k segments
        warnings.simplefilter("ignore", RuntimeWarning)
        graph = build_graph(part, cfg.graph)
    return refine_labels(part, graph, cfg.graph).data


def refine_map(image: ImageRaster, feats: FeatureMap, scores: ScoreMap, cfg: PipelineConfig) -> LabelMap:
    H, W = scores.shape[1:]
    out = np.empty((H, W), dtype=np.uint8)
    for rs, cs in chip_windows(H, W, cfg.chip_size):
        out[rs, cs] = refine_chip(image.data[:, rs, cs], feats.data[:, rs, cs], scores.data[:, rs, cs], cfg)
    return LabelMap(out, scores.num_classes)


# ---------------------------------------------------------------------------
# pipeline


def map_super_resolve(
    f_lr: FeatureMap,
    image: ImageRaster,
    y_lr: LabelMap,
    cfg: PipelineConfig | None = None,
    truth: LabelMap | None = None,
    oracle_labels: LabelMap | None = None,
) -> PipelineResult:
    """Run the full pipeline on one scene held in memory."""
    cfg = (cfg or PipelineConfig()).seeded()
    _, H, W = image.shape
    with stage("config"):
        if H % f_lr.height or W % f_lr.width:
            raise ValueError(f"image {H}x{W} is not a multiple of the feature grid {f_lr.shape[1:]}")
        cfg.validate(patch=H // f_lr.height)

    with stage("upsample"):
        feats = upsample_features(f_lr, image, cfg.upsample)
    with stage("labels"):
        lr_up = upsample_labels_nn(y_lr, H, W)

    probe = None
    with stage("prompts"):
        if cfg.prompt_mode == "oracle_hr":
            ref = oracle_labels if oracle_labels is not None else truth
            if ref is None:
                raise ValueError("oracle_hr prompts need HR labels")
            prompts = oracle_prompts(feats, ref)
        else:
            with stage("probe"):
                probe = train_probe(feats, lr_up, cfg.probe, num_classes=y_lr.num_classes)
            prompts = build_prompts(feats, probe_predict(probe, feats), lr_up, mode=cfg.prompt_pooling)

    with stage("classify"):
        scores = cosine_scores(feats, prompts)
        initial = argmax_labels(scores)

    labels = initial
    if cfg.stages.graph_refine:
        with stage("refine"):
            labels = refine_map(image, feats, scores, cfg)

    result = PipelineResult(labels, initial, scores, prompts, feats, probe)
    if truth is not None:
        with stage("eval"):
            result.metrics = evaluate_maps(labels, truth, cfg.absent_as_zero)
            result.metrics["initial_miou"] = evaluate_maps(initial, truth, cfg.absent_as_zero)["miou"]
    return result


def kmeans_baseline(
    f_lr: FeatureMap, image: ImageRaster, y_lr: LabelMap, cfg: PipelineConfig | None = None
) -> LabelMap:
    """K-means on the upsampled features, clusters named by LR-label majority."""
    cfg = (cfg or PipelineConfig()).seeded()
    _, H, W = image.shape
    feats = upsample_features(f_lr, image, cfg.upsample)
    return kmeans_voting_baseline(feats, upsample_labels_nn(y_lr, H, W), cfg.kmeans)


def evaluate_maps(pred: LabelMap, truth: LabelMap, absent_as_zero: bool = False) -> dict:
    cm = accumulate_confusion(pred, truth)
    iou, mean = miou(cm, absent_as_zero)
    return {"miou": mean, "iou": [float(v) for v in iou], "ignored": cm.ignored}


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    """File-driven pipeline: reads inputs named in ``cfg.paths``, writes outputs."""
    from . import tensorio as tio

    p = cfg.paths
    with stage("load"):
        for name in ("image", "features", "labels_lr"):
            if getattr(p, name) is None:
                raise ValueError(f"paths.{name} is required")
        image = tio.read_image(p.image)
        f_lr = tio.read_feature_map(p.features)
        y_lr = tio.read_label_map(p.labels_lr)
        truth = tio.read_label_map(p.truth) if p.truth else None
        oracle = tio.read_label_map(p.oracle_labels) if p.oracle_labels else None
    result = map_super_resolve(f_lr, image, y_lr, cfg, truth=truth, oracle_labels=oracle)
    with stage("write"):
        if p.output:
            tio.write_label_map(result.labels, p.output)
        if p.scores:
            tio.write_score_map(result.scores, p.scores)
        if p.colormap:
            tio.write_colormap(result.labels, tio.default_palette(result.labels.num_classes), p.colormap)
    return result
