"""Acceptance criteria 1-9.

Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line (visible in the
terminal even under output capture) and then asserts the same condition.
Run just this module with ``pytest -m acceptance -v``.
"""

import dataclasses
import math
import time

import numpy as np
import pytest
from scipy import ndimage

from mapsr import tensorio as tio
from mapsr.classify import KMeansConfig, argmax_labels, cosine_scores, kmeans
from mapsr.graphrefine import GraphConfig, build_graph_from_nodes, propagate_direct, propagate_fixed_point, residual
from mapsr.pipeline import PipelineConfig, Stages, evaluate_maps, kmeans_baseline, map_super_resolve, mosaic, split_chips
from mapsr.probe import LinearProbe, ProbeTrainConfig, probe_loss_and_grad, probe_predict, train_probe, upsample_labels_nn
from mapsr.prompts import PromptSet, build_prompts, lr_label_prompts, read_prompts, write_prompts
from mapsr.superpixel import SlicConfig, slic_segment, summarize_segments
from mapsr.synth import SceneSpec, generate_scene, majority_downsample
from mapsr.tensorio import FeatureMap, ImageRaster, LabelMap, ScoreMap
from mapsr.upsample import UpsampleConfig, attention_weights, upsample_features

pytestmark = pytest.mark.acceptance

SEEDS = range(10)
# unrefined attention mIoU lands near 0.87 on these scenes
NOISY = dict(embed_noise=4.0, image_noise=0.2, label_flip_rate=0.2, lr_factor=8)
NO_REFINE = Stages(graph_refine=False, superpixel=False)


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return _report


def test_criterion_1_solver_equivalence(report):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst_gap = worst_res = 0.0
    count = 0
    for alpha in (0.1, 0.5, 0.9):
        for _ in range(20):
            n = int(rng.integers(5, 201))
            C = int(rng.integers(2, 7))
            z = rng.standard_normal((n, 8))
            z /= np.linalg.norm(z, axis=1, keepdims=True)
            k = int(rng.integers(1, min(n - 1, 30) + 1))
            g = build_graph_from_nodes(z, rng.uniform(size=(n, 2)), GraphConfig(k=k))
            y0 = rng.uniform(size=(n, C))
            a = propagate_direct(g, y0, alpha, 1e-6)
            b = propagate_fixed_point(g, y0, alpha, 1e-6)
            worst_gap = max(worst_gap, float(np.abs(a - b).max()))
            worst_res = max(worst_res, residual(g, y0, a, alpha), residual(g, y0, b, alpha))
            count += 1
    elapsed = time.perf_counter() - t0
    ok = count >= 50 and worst_gap < 1e-5 and worst_res < 1e-6 and elapsed < 30
    report(1, ok, f"{count} graphs, max gap {worst_gap:.2e}, max residual {worst_res:.2e}, {elapsed:.1f}s")


def test_criterion_2_gradient_check(report):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    step = 1e-4
    for _ in range(20):
        n, C, D = int(rng.integers(2, 9)), int(rng.integers(2, 6)), int(rng.integers(2, 8))
        feats = FeatureMap(rng.standard_normal((D, 1, n)))
        labels = LabelMap(rng.integers(0, C, (1, n)), C)
        W = rng.standard_normal((C, D))
        l2 = float(rng.choice([0.0, 1e-2]))
        _, grad = probe_loss_and_grad(LinearProbe(W), feats, labels, l2_reg=l2)
        fd = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            plus, minus = W.copy(), W.copy()
            plus[idx] += step
            minus[idx] -= step
            lp, _ = probe_loss_and_grad(LinearProbe(plus), feats, labels, l2_reg=l2)
            lm, _ = probe_loss_and_grad(LinearProbe(minus), feats, labels, l2_reg=l2)
            fd[idx] = (lp - lm) / (2 * step)
        worst = max(worst, float(np.linalg.norm(grad - fd) / np.linalg.norm(fd)))
    elapsed = time.perf_counter() - t0
    report(2, worst < 1e-5 and elapsed < 10, f"20 instances, max relative error {worst:.2e}, {elapsed:.2f}s")


def test_criterion_3_noiseless_oracle(report):
    t0 = time.perf_counter()
    s = generate_scene(SceneSpec(embed_noise=0.0, lr_factor=1, label_flip_rate=0.0, seed=0))
    # dense per-pixel features, so nearest upsampling is the identity
    cfg = PipelineConfig(prompt_mode="oracle_hr", upsample=UpsampleConfig(mode="nearest"), stages=NO_REFINE)
    res = map_super_resolve(s.features_hr, s.image, s.labels_lr, cfg, truth=s.truth)
    elapsed = time.perf_counter() - t0
    m = res.metrics["miou"]
    report(3, m == 1.0 and elapsed < 10, f"mIoU {m!r}, {elapsed:.2f}s")


def _unit(P):
    return P / np.linalg.norm(P, axis=1, keepdims=True)


def test_criterion_4_prompt_denoising(report):
    wins = []
    for seed in SEEDS:
        s = generate_scene(SceneSpec(H=128, W=128, D=16, C=4, **NOISY, seed=seed))
        feats = upsample_features(s.features_lr, s.image)
        lr_up = upsample_labels_nn(s.labels_lr, 128, 128)
        probe = train_probe(feats, lr_up, ProbeTrainConfig(seed=seed))
        agree = build_prompts(feats, probe_predict(probe, feats), lr_up)
        raw = lr_label_prompts(feats, lr_up)
        mu = _unit(s.class_means.astype(np.float64))
        d_agree = np.linalg.norm(_unit(agree.prompts) - mu, axis=1)
        d_raw = np.linalg.norm(_unit(raw.prompts) - mu, axis=1)
        wins.append(int((d_agree < d_raw).sum()))
    good = sum(w >= 3 for w in wins)
    report(4, good > len(wins) / 2, f"classes closer per seed {wins}; {good}/10 seeds with >=3 of 4")


@pytest.fixture(scope="module")
def ablation():
    """mIoU of each configuration on the ten noisy scenes."""
    t0 = time.perf_counter()
    base = PipelineConfig()
    nearest = dataclasses.replace(base, upsample=UpsampleConfig(mode="nearest"))
    configs = {
        "attention+refine": base,
        "attention": dataclasses.replace(base, stages=NO_REFINE),
        "nearest+refine": nearest,
        "nearest": dataclasses.replace(nearest, stages=NO_REFINE),
        "oracle": dataclasses.replace(base, prompt_mode="oracle_hr"),
    }
    rows = {name: [] for name in list(configs) + ["kmeans"]}
    for seed in SEEDS:
        s = generate_scene(SceneSpec(**NOISY, seed=seed))
        for name, cfg in configs.items():
            res = map_super_resolve(s.features_lr, s.image, s.labels_lr, dataclasses.replace(cfg, seed=seed), truth=s.truth)
            rows[name].append(res.metrics["miou"])
        km = kmeans_baseline(s.features_lr, s.image, s.labels_lr, dataclasses.replace(base, seed=seed))
        rows["kmeans"].append(evaluate_maps(km, s.truth)["miou"])
    means = {k: float(np.mean(v)) for k, v in rows.items()}
    return means, time.perf_counter() - t0


def test_criterion_5_ablation_direction(report, ablation):
    m, elapsed = ablation
    up_margin = m["attention+refine"] - m["nearest+refine"]
    up_margin_raw = m["attention"] - m["nearest"]
    ref_margin = m["attention+refine"] - m["attention"]
    in_band = 0.6 <= m["attention"] <= 0.9
    ok = in_band and up_margin > 0 and up_margin_raw > 0 and ref_margin > 0 and elapsed < 300
    summary = ", ".join(f"{k} {v:.4f}" for k, v in m.items() if k not in ("oracle", "kmeans"))
    report(5, ok, f"{summary}; {elapsed:.0f}s")


def test_criterion_6_baseline_gap(report, ablation):
    m, _ = ablation
    ok = m["attention+refine"] > m["kmeans"] and m["oracle"] >= m["attention+refine"]
    report(6, ok, f"MapSR {m['attention+refine']:.4f}, kmeans {m['kmeans']:.4f}, oracle {m['oracle']:.4f}")


def test_criterion_7_brute_force_equivalences(report):
    rng = np.random.default_rng(707)
    worst_edge = 0.0
    for _ in range(10):
        n, k = 5, int(rng.integers(1, 5))
        z = rng.standard_normal((n, 3))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        x = rng.uniform(size=(n, 2))
        gamma, sigma, q = float(rng.uniform(0.5, 2)), float(rng.uniform(0.5, 3)), float(rng.uniform(1, 3))
        g = build_graph_from_nodes(z, x, GraphConfig(k=k, gamma=gamma, sigma=sigma, spatial_exponent=q))
        W = np.zeros((n, n))
        for i in range(n):
            d = sorted(
                (sum((z[i][t] - z[j][t]) ** 2 for t in range(3)) + sum((x[i][t] - x[j][t]) ** 2 for t in range(2)), j)
                for j in range(n)
                if j != i
            )
            for _, j in d[:k]:
                cos = sum(z[i][t] * z[j][t] for t in range(3))
                dist = math.sqrt(sum((x[i][t] - x[j][t]) ** 2 for t in range(2)))
                W[i, j] = max(0.0, cos) ** gamma * math.exp(-sigma * dist**q)
        worst_edge = max(worst_edge, float(np.abs(g.weights.toarray() - np.maximum(W, W.T)).max()))

    H, Wd, D, C, N = 9, 8, 5, 3, 7
    assign = rng.integers(0, N, (H, Wd))
    assign.flat[:N] = np.arange(N)
    feats = rng.standard_normal((D, H, Wd))
    scores = rng.uniform(size=(C, H, Wd))
    part = summarize_segments(assign, FeatureMap(feats), ScoreMap(scores))
    feats32 = FeatureMap(feats).data
    worst_sum = 0.0
    for s in range(N):
        pix = [(u, v) for u in range(H) for v in range(Wd) if assign[u, v] == s]
        emb = np.array([sum(float(feats32[d, u, v]) for u, v in pix) / len(pix) for d in range(D)])
        sc = np.array([sum(float(scores[c, u, v]) for u, v in pix) / len(pix) for c in range(C)])
        cen = np.array([sum(u for u, _ in pix), sum(v for _, v in pix)]) / len(pix)
        worst_sum = max(
            worst_sum,
            float(np.abs(part.mean_embeddings[s] - emb / np.linalg.norm(emb)).max()),
            float(np.abs(part.mean_scores[s] - sc).max()),
            float(np.abs(part.centroids[s] - cen).max()),
        )

    majority_ok = True
    for f in (1, 2, 4):
        y = rng.integers(0, 4, (8, 12))
        out = majority_downsample(LabelMap(y, 4), f).data
        for i in range(8 // f):
            for j in range(12 // f):
                counts = [0] * 4
                for u in range(i * f, (i + 1) * f):
                    for v in range(j * f, (j + 1) * f):
                        counts[y[u, v]] += 1
                majority_ok &= out[i, j] == counts.index(max(counts))

    ok = worst_edge < 1e-9 and worst_sum < 1e-6 and majority_ok
    report(7, ok, f"edge err {worst_edge:.1e}, summary err {worst_sum:.1e}, majority exact {majority_ok}")


def test_criterion_8_invariant_suite(report, tmp_path):
    rng = np.random.default_rng(808)
    checks = {}

    fm = FeatureMap(rng.standard_normal((3, 5, 7)).astype(np.float32))
    tio.write_feature_map(fm, tmp_path / "f.msrf")
    lm = LabelMap(rng.integers(0, 6, (5, 7)), 6)
    tio.write_label_map(lm, tmp_path / "l.msrl")
    ps = PromptSet(rng.standard_normal((3, 4)).astype(np.float32), [1, 2, 3], [0, 1, 2])
    write_prompts(ps, tmp_path / "p.msrp")
    checks["round-trips"] = (
        tio.read_feature_map(tmp_path / "f.msrf").data.tobytes() == fm.data.tobytes()
        and tio.read_label_map(tmp_path / "l.msrl") == lm
        and np.array_equal(read_prompts(tmp_path / "p.msrp").prompts, ps.prompts)
    )

    img = ImageRaster(rng.uniform(size=(3, 40, 40)))
    seg = slic_segment(img, SlicConfig(n_segments=30))
    sizes = np.bincount(seg.ravel())
    four = ndimage.generate_binary_structure(2, 1)
    checks["slic"] = (
        (sizes > 0).all()
        and sizes.sum() == 1600
        and all(ndimage.label(seg == k, structure=four)[1] == 1 for k in range(len(sizes)))
    )

    f_lr = FeatureMap(rng.standard_normal((4, 5, 5)))
    alpha, _, _ = attention_weights(f_lr, img, UpsampleConfig())
    checks["convexity"] = bool((alpha >= 0).all() and np.abs(alpha.sum(0) - 1).max() <= 1e-6)

    x = rng.standard_normal((4, 6, 6))
    P = PromptSet(rng.standard_normal((3, 4)), [1, 1, 1], [0, 0, 0])
    checks["cosine scale"] = all(
        argmax_labels(cosine_scores(FeatureMap(x), P)) == argmax_labels(cosine_scores(FeatureMap(c * x), P))
        for c in (0.1, 3.0, 250.0)
    )

    hist = kmeans(rng.standard_normal((300, 3)), KMeansConfig(k=5, seed=2)).objective_history
    checks["kmeans monotone"] = all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))

    raster = rng.standard_normal((2, 23, 17))
    checks["mosaic"] = all(np.array_equal(mosaic(split_chips(raster, c), raster.shape), raster) for c in (1, 5, 64))

    s = generate_scene(SceneSpec(H=64, W=64, **NOISY, seed=4))
    cfg = PipelineConfig(chip_size=32, seed=11)
    a = map_super_resolve(s.features_lr, s.image, s.labels_lr, cfg)
    b = map_super_resolve(s.features_lr, s.image, s.labels_lr, cfg)
    checks["determinism"] = a.labels == b.labels

    failed = [k for k, v in checks.items() if not v]
    report(8, not failed, f"{len(checks) - len(failed)}/{len(checks)} invariants hold" + (f"; failed {failed}" if failed else ""))


def test_criterion_9_parameter_count(report):
    n = LinearProbe.zeros(5, 768).num_parameters()
    ok = n == 3840 and all(LinearProbe.zeros(c, d).num_parameters() == c * d for c, d in ((2, 3), (7, 16)))
    report(9, ok, f"C=5, D=768 -> {n} parameters")
