import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mapsr.classify import (
    INACTIVE_SCORE,
    KMeansConfig,
    argmax_labels,
    cosine_scores,
    kmeans,
    kmeans_voting_baseline,
    vote_clusters,
)
from mapsr.evaluate import score
from mapsr.probe import upsample_labels_nn
from mapsr.prompts import PromptSet, Provenance
from mapsr.synth import SceneSpec, generate_scene
from mapsr.tensorio import FeatureMap, LabelMap, ScoreMap


def _prompts(P, prov=None):
    P = np.asarray(P, dtype=np.float64)
    return PromptSet(P, np.ones(len(P), int), prov or [Provenance.PROBE_AGREEMENT] * len(P))


def test_self_similarity_and_orthogonality():
    feats = FeatureMap(np.array([[[1.0, 0.0]], [[2.0, 0.0]], [[0.0, 3.0]]]))
    P = _prompts([[1.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
    s = cosine_scores(feats, P).data
    assert s[0, 0, 0] == pytest.approx(1.0, abs=1e-12)
    assert s[1, 0, 0] == pytest.approx(0.0, abs=1e-12)
    assert s[0, 0, 1] == pytest.approx(0.0, abs=1e-12)
    assert s[1, 0, 1] == pytest.approx(1.0, abs=1e-12)


def test_scale_invariance_of_scores(rng):
    x = rng.standard_normal((4, 3, 3))
    P = _prompts(rng.standard_normal((3, 4)))
    a = cosine_scores(FeatureMap(x), P).data
    b = cosine_scores(FeatureMap(5 * x), P).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_inactive_classes_get_sentinel(rng):
    P = PromptSet(rng.standard_normal((3, 2)), [5, 0, 2], [0, 4, 0])
    s = cosine_scores(FeatureMap(rng.standard_normal((2, 2, 2))), P).data
    assert (s[1] == INACTIVE_SCORE).all()
    assert (argmax_labels(ScoreMap(s)).data != 1).all()


def test_zero_feature_scores_zero(rng):
    x = rng.standard_normal((3, 1, 2))
    x[:, 0, 1] = 0
    s = cosine_scores(FeatureMap(x), _prompts(rng.standard_normal((2, 3)))).data
    assert (s[:, 0, 1] == 0).all()
    assert argmax_labels(ScoreMap(s)).data[0, 1] == 0


def test_no_active_prompt_errors():
    P = PromptSet(np.zeros((2, 2)), [1, 1], [0, 0])
    with pytest.raises(ValueError):
        cosine_scores(FeatureMap(np.ones((2, 1, 1))), P)


def test_dim_mismatch(rng):
    with pytest.raises(ValueError):
        cosine_scores(FeatureMap(np.ones((3, 1, 1))), _prompts(np.ones((2, 2))))


def test_argmax_examples():
    assert argmax_labels(ScoreMap(np.array([[[0.9]], [[0.1]]]))).data[0, 0] == 0
    assert argmax_labels(ScoreMap(np.array([[[0.5]], [[0.5]]]))).data[0, 0] == 0


def test_argmax_hand_built():
    s = np.array(
        [
            [[0.1, 0.7], [0.3, 0.2]],
            [[0.4, 0.7], [0.1, 0.2]],
            [[0.2, 0.1], [0.6, 0.2]],
        ]
    )
    expect = np.zeros((2, 2), int)
    for u in range(2):
        for v in range(2):
            col = list(s[:, u, v])
            expect[u, v] = col.index(max(col))
    assert expect.tolist() == [[1, 0], [2, 0]]
    assert np.array_equal(argmax_labels(ScoreMap(s)).data, expect)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cosine_matches_euclidean_on_unit_vectors(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 4, 4))
    x /= np.linalg.norm(x, axis=0, keepdims=True)
    P = rng.standard_normal((3, 5))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    cos = cosine_scores(FeatureMap(x), _prompts(P)).data
    lab = argmax_labels(ScoreMap(cos)).data
    d = ((x[None] - P[:, :, None, None].astype(np.float32)) ** 2).sum(axis=1)
    # skip near-ties, where float32 storage could flip the order
    srt = np.sort(cos, axis=0)
    clear = srt[-1] - srt[-2] > 1e-5
    assert np.array_equal(lab[clear], d.argmin(axis=0)[clear])


def test_kmeans_objective_non_increasing(rng):
    X = rng.standard_normal((400, 3))
    res = kmeans(X, KMeansConfig(k=6, seed=1))
    h = res.objective_history
    assert all(b <= a + 1e-9 for a, b in zip(h, h[1:]))


def test_kmeans_deterministic(rng):
    X = rng.standard_normal((200, 4))
    a = kmeans(X, KMeansConfig(k=4, seed=3))
    b = kmeans(X, KMeansConfig(k=4, seed=3))
    assert np.array_equal(a.assignment, b.assignment)


def test_kmeans_handles_duplicate_points():
    X = np.repeat(np.eye(2), 10, axis=0)
    res = kmeans(X, KMeansConfig(k=3, seed=0))
    assert np.isfinite(res.centers).all()
    assert res.objective_history[-1] == 0.0


def test_kmeans_too_few_points():
    with pytest.raises(ValueError):
        kmeans(np.zeros((2, 2)), KMeansConfig(k=3))


def test_vote_identity_mapping():
    assign = np.array([0, 0, 1, 2, 2, 2])
    labels = np.array([0, 0, 1, 2, 2, 1])
    assert vote_clusters(assign, labels, 3, 3).tolist() == [0, 1, 2]
    # tie between classes 1 and 2 goes to 1
    assert vote_clusters(np.array([0, 0]), np.array([2, 1]), 1, 3).tolist() == [1]


def test_identity_vote_with_exact_class_means(clean_scene):
    res = kmeans_voting_baseline(clean_scene.features_hr, clean_scene.truth, KMeansConfig(k=4, seed=0))
    assert res == clean_scene.truth


def test_noiseless_two_class_scene():
    scene = generate_scene(SceneSpec(H=32, W=32, C=2, D=4, patch=4, n_regions=6, lr_factor=1, seed=2))
    lr_up = upsample_labels_nn(scene.labels_lr, 32, 32)
    pred = kmeans_voting_baseline(scene.features_hr, lr_up, KMeansConfig(k=2, seed=0))
    assert score(pred, scene.truth) == 1.0


def test_baseline_deterministic(noisy_scene):
    lr_up = upsample_labels_nn(noisy_scene.labels_lr, 64, 64)
    cfg = KMeansConfig(k=5, seed=9)
    assert kmeans_voting_baseline(noisy_scene.features_hr, lr_up, cfg) == kmeans_voting_baseline(
        noisy_scene.features_hr, lr_up, cfg
    )


def test_baseline_alignment_error(noisy_scene):
    with pytest.raises(ValueError):
        kmeans_voting_baseline(noisy_scene.features_hr, LabelMap(np.zeros((4, 4), int), 3))
