"""Command-line interface.

Every subcommand accepts ``--config FILE`` plus dotted overrides such as
``--graph.k 50`` or ``--upsample.mode=bilinear``; overrides win over the
file. ``mapsr run`` executes the whole pipeline, the other subcommands run
one stage each.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensorio as tio
from .classify import argmax_labels, cosine_scores, kmeans_voting_baseline
from .config import apply_overrides, flatten, load_config_file, split_dotted_args
from .evaluate import accumulate_confusion, format_report
from .graphrefine import build_graph, refine_labels, write_edge_list
from .pipeline import PipelineConfig, PipelineError, chip_windows, refine_map, run_pipeline, stage
from .probe import probe_predict, read_probe, train_probe, upsample_labels_nn, write_probe
from .prompts import PromptSet, Provenance, build_prompts, oracle_prompts, read_prompts, write_prompts
from .superpixel import slic_segment, summarize_segments
from .synth import SceneSpec, generate_scene
from .upsample import upsample_features


def _config(args, extra: list[str], base=None, section: str | None = None):
    cfg = base if base is not None else PipelineConfig()
    overrides = {}
    if getattr(args, "config", None):
        overrides.update(load_config_file(args.config))
    overrides.update(split_dotted_args(extra))
    if section:
        overrides = {k.removeprefix(section + "."): v for k, v in overrides.items()}
    return apply_overrides(cfg, overrides)


def cmd_synth(args, extra):
    spec = _config(args, extra, SceneSpec(), section="scene")
    scene = generate_scene(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tio.write_image(scene.image, out / "image.ppm")
    tio.write_feature_map(scene.features_lr, out / "features_lr.msrf")
    tio.write_feature_map(scene.features_hr, out / "features_hr.msrf")
    tio.write_label_map(scene.truth, out / "truth.msrl")
    tio.write_label_map(scene.labels_lr, out / "labels_lr.msrl")
    counts = np.bincount(scene.truth.data.ravel(), minlength=spec.C)
    means = PromptSet(scene.class_means, counts, [Provenance.ORACLE_HR] * spec.C)
    write_prompts(means, out / "class_means.msrp")
    tio.write_colormap(scene.truth, tio.default_palette(spec.C), out / "truth.ppm")
    print(f"wrote scene to {out}")


def cmd_upsample(args, extra):
    cfg = _config(args, extra)
    f_lr = tio.read_feature_map(args.features)
    image = tio.read_image(args.image)
    tio.write_feature_map(upsample_features(f_lr, image, cfg.upsample), args.out)


def _hr_labels(path, H, W):
    return upsample_labels_nn(tio.read_label_map(path), H, W)


def cmd_probe(args, extra):
    cfg = _config(args, extra).seeded()
    feats = [tio.read_feature_map(p) for p in args.features]
    labels = [_hr_labels(p, f.height, f.width) for p, f in zip(args.labels_lr, feats)]
    probe = train_probe(feats, labels, cfg.probe)
    write_probe(probe, args.out)
    print(f"params={probe.num_parameters()}")
    print(f"final_loss={probe.loss_history[-1]:.6f}")


def cmd_prompts(args, extra):
    _config(args, extra)
    feats = [tio.read_feature_map(p) for p in args.features]
    if args.oracle_labels:
        ps = oracle_prompts(feats, [tio.read_label_map(p) for p in args.oracle_labels], mode=args.mode)
    else:
        if not args.probe or not args.labels_lr:
            raise ValueError("--probe and --labels-lr are required unless --oracle-labels is given")
        probe = read_probe(args.probe)
        labels = [_hr_labels(p, f.height, f.width) for p, f in zip(args.labels_lr, feats)]
        preds = [probe_predict(probe, f) for f in feats]
        ps = build_prompts(feats, preds, labels, mode=args.mode)
    write_prompts(ps, args.out)
    for c, (n, prov) in enumerate(zip(ps.support_counts, ps.provenance)):
        print(f"class.{c}.support={n} class.{c}.provenance={prov.name.lower()}")


def cmd_predict(args, extra):
    _config(args, extra)
    feats = tio.read_feature_map(args.features)
    scores = cosine_scores(feats, read_prompts(args.prompts))
    if args.scores_out:
        tio.write_score_map(scores, args.scores_out)
    tio.write_label_map(argmax_labels(scores), args.out)


def cmd_superpixel(args, extra):
    cfg = _config(args, extra)
    image = tio.read_image(args.image)
    seg = slic_segment(image, cfg.slic)
    tio.write_segments(seg, args.out)
    print(f"segments={seg.max() + 1}")


def cmd_refine(args, extra):
    cfg = _config(args, extra)
    feats = tio.read_feature_map(args.features)
    scores = tio.read_score_map(args.scores)
    if args.segments:
        seg = tio.read_segments(args.segments)
        out = np.empty(seg.shape, dtype=np.uint8)
        for rs, cs in chip_windows(*seg.shape, cfg.chip_size):
            _, local = np.unique(seg[rs, cs], return_inverse=True)
            local = local.reshape(seg[rs, cs].shape)
            part = summarize_segments(
                local, tio.FeatureMap(feats.data[:, rs, cs]), tio.ScoreMap(scores.data[:, rs, cs])
            )
            if part.num_segments < 2:
                out[rs, cs] = part.mean_scores.argmax(axis=1)[local]
                continue
            graph = build_graph(part, cfg.graph)
            if args.edges and (rs.start, cs.start) == (0, 0):
                write_edge_list(graph, args.edges)
            out[rs, cs] = refine_labels(part, graph, cfg.graph).data
        labels = tio.LabelMap(out, scores.num_classes)
    else:
        if args.image is None and cfg.stages.superpixel:
            raise ValueError("--image or --segments is required unless stages.superpixel is false")
        image = tio.read_image(args.image) if args.image else tio.ImageRaster(np.zeros((3,) + feats.shape[1:]))
        labels = refine_map(image, feats, scores, cfg)
    tio.write_label_map(labels, args.out)


def cmd_eval(args, extra):
    cfg = _config(args, extra)
    cm = accumulate_confusion(tio.read_label_map(args.pred), tio.read_label_map(args.truth))
    print(format_report(cm, args.absent_as_zero or cfg.absent_as_zero))


def cmd_baseline(args, extra):
    cfg = _config(args, extra).seeded()
    feats = tio.read_feature_map(args.features)
    lr_up = _hr_labels(args.labels_lr, feats.height, feats.width)
    tio.write_label_map(kmeans_voting_baseline(feats, lr_up, cfg.kmeans), args.out)


def cmd_run(args, extra):
    cfg = _config(args, extra)
    if args.dump_config:
        for k, v in flatten(cfg).items():
            print(f"{k} = {v}")
        return
    result = run_pipeline(cfg)
    if result.metrics:
        print(json.dumps({"miou": result.metrics["miou"], "initial_miou": result.metrics["initial_miou"]}))
        for c, v in enumerate(result.metrics["iou"]):
            print(f"iou.{c}={v:.6f}")
        print(f"miou={result.metrics['miou']:.6f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapsr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key = value config file")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic scene (override fields with --scene.NAME)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("upsample", cmd_upsample, "densify patch-grid features with image guidance")
    p.add_argument("--features", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = add("probe", cmd_probe, "train the linear probe on HR features and LR labels")
    p.add_argument("--features", required=True, nargs="+")
    p.add_argument("--labels-lr", required=True, nargs="+")
    p.add_argument("--out", required=True)

    p = add("prompts", cmd_prompts, "build class prompts")
    p.add_argument("--features", required=True, nargs="+")
    p.add_argument("--labels-lr", nargs="+")
    p.add_argument("--probe")
    p.add_argument("--oracle-labels", nargs="+", help="HR labels; builds oracle prompts instead")
    p.add_argument("--mode", choices=("pooled", "per-image"), default="pooled")
    p.add_argument("--out", required=True)

    p = add("predict", cmd_predict, "cosine scores and initial labels")
    p.add_argument("--features", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--scores-out")
    p.add_argument("--out", required=True)

    p = add("superpixel", cmd_superpixel, "SLIC segmentation")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = add("refine", cmd_refine, "graph refinement of a score map")
    p.add_argument("--features", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--image")
    p.add_argument("--segments", help="precomputed MSRS segmentation")
    p.add_argument("--edges", help="dump the first chip's graph as an edge list")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "per-class IoU and mIoU")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--absent-as-zero", action="store_true")

    p = add("baseline-kmeans", cmd_baseline, "K-means + LR voting baseline")
    p.add_argument("--features", required=True)
    p.add_argument("--labels-lr", required=True)
    p.add_argument("--out", required=True)

    p = add("run", cmd_run, "full pipeline (paths via --paths.NAME)")
    p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        with stage(args.command):
            args.func(args, extra)
    except PipelineError as exc:
        print(f"mapsr: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
