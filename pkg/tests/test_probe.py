import numpy as np
import pytest

from gm3d.data import synth_dataset
from gm3d.model import ModelConfig, init_params, tree_digest
from gm3d.probe import (
    eval_probe,
    extract_feature,
    extract_features,
    fit_linear_probe,
    linear_probe_accuracy,
    standardize,
)
from gm3d.stats import spearman

CFG = ModelConfig(embed_dim=32, encoder_depth=1, decoder_depth=1, heads=2,
                  mlp_ratio=2, n_patches=8, patch_size=4)


def make_params(seed=0):
    return init_params(CFG, np.random.default_rng(seed))


def test_feature_shape_is_twice_embed_dim():
    ds = synth_dataset(per_class=1, n_points=64, seed=0)
    f = extract_feature(make_params(), ds.samples[0][0], CFG)
    assert f.shape == (64,)

    big = ModelConfig()
    params_big = init_params(big, np.random.default_rng(0))
    ds2 = synth_dataset(per_class=1, n_points=128, seed=1)
    assert extract_feature(params_big, ds2.samples[0][0], big).shape == (192,)


def test_feature_invariant_to_sample_order():
    ds = synth_dataset(per_class=2, n_points=64, seed=2)
    params = make_params()
    clouds = [c for c, _ in ds.samples]
    feats = extract_features(params, clouds, CFG)
    feats_rev = extract_features(params, clouds[::-1], CFG)
    assert np.array_equal(feats, feats_rev[::-1])


def test_pooling_algebra_under_token_duplication():
    # duplicating every token leaves both max-pool and mean-pool unchanged
    z = np.random.default_rng(0).normal(size=(6, 8))
    doubled = np.repeat(z, 2, axis=0)
    assert np.array_equal(z.max(axis=0), doubled.max(axis=0))
    assert np.allclose(z.mean(axis=0), doubled.mean(axis=0))


def test_probe_never_mutates_encoder():
    params = make_params()
    before = tree_digest(params)
    ds = synth_dataset(per_class=4, n_points=64, seed=3)
    clouds = [c for c, _ in ds.samples]
    feats = extract_features(params, clouds, CFG)
    fit_linear_probe(feats, ds.labels(), epochs=20)
    assert tree_digest(params) == before


def test_fit_separable_two_class_reaches_full_train_accuracy():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(30, 5)) + 4.0
    b = rng.normal(size=(30, 5)) - 4.0
    feats = np.concatenate([a, b])
    labels = np.array([0] * 30 + [1] * 30)
    probe = fit_linear_probe(feats, labels, epochs=200)
    assert eval_probe(probe, feats, labels) == 1.0


def test_fit_is_deterministic():
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(40, 6))
    labels = rng.integers(0, 3, size=40)
    p1 = fit_linear_probe(feats, labels)
    p2 = fit_linear_probe(feats, labels)
    assert np.array_equal(p1.w, p2.w) and np.array_equal(p1.b, p2.b)


def test_fit_rejects_single_class():
    with pytest.raises(ValueError):
        fit_linear_probe(np.zeros((10, 3)), np.zeros(10, dtype=int))


def test_shuffled_labels_give_chance_accuracy():
    rng = np.random.default_rng(6)
    feats = rng.normal(size=(400, 8))
    labels = np.repeat(np.arange(4), 100)
    shuffled = labels.copy()
    rng.shuffle(shuffled)
    acc = linear_probe_accuracy(feats[:200], shuffled[:200], feats[200:], shuffled[200:],
                                epochs=100)
    assert abs(acc - 0.25) <= 0.10


def test_eval_all_correct_is_one():
    feats = np.array([[1.0, 0.0], [0.0, 1.0]])
    probe = fit_linear_probe(np.repeat(feats, 10, axis=0),
                             np.repeat([0, 1], 10), epochs=200)
    assert eval_probe(probe, np.repeat(feats, 10, axis=0), np.repeat([0, 1], 10)) == 1.0


def test_eval_empty_set_rejected():
    probe = fit_linear_probe(np.random.default_rng(0).normal(size=(10, 2)),
                             np.array([0, 1] * 5))
    with pytest.raises(ValueError):
        eval_probe(probe, np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_zero_probe_on_balanced_four_classes_gives_quarter():
    from gm3d.probe import ProbeWeights

    probe = ProbeWeights(w=np.zeros((3, 4)), b=np.zeros(4),
                         mean=np.zeros(3), std=np.ones(3))
    feats = np.random.default_rng(7).normal(size=(40, 3))
    labels = np.repeat(np.arange(4), 10)
    assert eval_probe(probe, feats, labels) == 0.25  # ties resolve to class 0


def test_eval_invariant_under_consistent_permutation():
    rng = np.random.default_rng(8)
    feats = rng.normal(size=(50, 4))
    labels = rng.integers(0, 3, size=50)
    probe = fit_linear_probe(feats, labels, epochs=50)
    perm = rng.permutation(50)
    assert eval_probe(probe, feats, labels) == eval_probe(probe, feats[perm], labels[perm])


def test_standardize_train_stats():
    rng = np.random.default_rng(9)
    feats = rng.normal(loc=5.0, scale=3.0, size=(100, 4))
    out, mean, std = standardize(feats)
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(out.std(axis=0), 1.0, atol=1e-12)


# -- spearman helper ------------------------------------------------------------

def test_spearman_perfect_and_reversed():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)


def test_spearman_hand_case_with_ties():
    # ranks of x: [0, 1.5, 1.5, 3]; ranks of y: [3, 1, 2, 0]
    x = np.array([1.0, 2.0, 2.0, 3.0])
    y = np.array([9.0, 5.0, 6.0, 1.0])
    rx = np.array([0.0, 1.5, 1.5, 3.0])
    ry = np.array([3.0, 1.0, 2.0, 0.0])
    want = np.corrcoef(rx, ry)[0, 1]
    assert spearman(x, y) == pytest.approx(want, rel=1e-12)


def test_spearman_degenerate_inputs():
    assert spearman([1.0], [2.0]) == 0.0
    assert spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) == 0.0
