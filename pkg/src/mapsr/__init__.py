"""Prompt-driven land-cover map super-resolution.

A coarse land-cover product supervises a linear probe once; the probe's
confident pixels define class prompts, HR pixels are labelled by cosine
similarity to the prompts, and a superpixel graph smooths the scores.
"""

from .pipeline import PipelineConfig, PipelineResult, kmeans_baseline, map_super_resolve, run_pipeline
from .tensorio import FeatureMap, ImageRaster, LabelMap, ScoreMap

__all__ = [
    "FeatureMap",
    "ImageRaster",
    "LabelMap",
    "PipelineConfig",
    "PipelineResult",
    "ScoreMap",
    "kmeans_baseline",
    "map_super_resolve",
    "run_pipeline",
]
__version__ = "0.1.0"
