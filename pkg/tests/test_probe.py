import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from safe_sar.encoder import EncoderConfig
from safe_sar.model import FeatureExtractor, SafeModel, load_feature_extractor, save_model
from safe_sar.probe import (
    FeatureGrid,
    FeatureMatrix,
    FewShotError,
    extract_features,
    feature_map,
    fewshot_eval,
    knn_classify,
    linear_probe_train,
    pca_rgb,
    reduce_to_rgb,
)
from safe_sar.sar import extract_patches
from safe_sar.seeding import SeedStream


@pytest.fixture(scope="module")
def tiny_model():
    return SafeModel(EncoderConfig(token_size=8, embed_dim=16, depth=1, n_heads=2, mlp_ratio=2.0),
                     proj_dim=8, proj_hidden=16, n_prototypes=8, seed=SeedStream(3))


def clusters(n_per, d=4, sep=10.0, seed=0, n_classes=2):
    rng = np.random.default_rng(seed)
    centers = np.eye(d)[:n_classes] * sep
    x = np.concatenate([c + rng.normal(size=(n_per, d)) for c in centers])
    return FeatureMatrix(x, np.repeat(np.arange(n_classes), n_per))


# ---------------------------------------------------------------- extraction


def test_duplicate_patches_give_duplicate_rows(tiny_model, rng):
    p = rng.normal(size=(32, 32, 1)).astype(np.float32)
    f = extract_features(tiny_model, np.stack([p, p]))
    assert np.array_equal(f[0], f[1])


def test_batch_invariance(tiny_model, rng):
    x = rng.normal(size=(32, 32, 32, 1)).astype(np.float32)
    full = extract_features(tiny_model, x, batch_size=32)
    single = extract_features(tiny_model, x, batch_size=1)
    np.testing.assert_allclose(single, full, atol=1e-6, rtol=0)


def test_mixed_sizes_keep_row_order(tiny_model, rng):
    a = rng.normal(size=(32, 32, 1)).astype(np.float32)
    b = rng.normal(size=(48, 48, 1)).astype(np.float32)
    mixed = extract_features(tiny_model, [a, b, a])
    np.testing.assert_allclose(mixed[1], extract_features(tiny_model, b[None])[0], atol=1e-6)
    assert np.array_equal(mixed[0], mixed[2])


def test_zero_weights_give_equal_rows(rng):
    model = SafeModel(EncoderConfig(token_size=8, embed_dim=16, depth=1, n_heads=2), proj_dim=8, proj_hidden=16,
                      n_prototypes=8)
    with torch.no_grad():
        for p in model.teacher_encoder.parameters():
            p.zero_()
    f = extract_features(FeatureExtractor(model.teacher_encoder), rng.normal(size=(5, 32, 32, 1)))
    np.testing.assert_allclose(f, np.broadcast_to(f[0], f.shape), atol=1e-7)


def test_checkpoint_features_match_in_memory(tiny_model, rng, tmp_path):
    path = save_model(tmp_path / "ckpt", tiny_model)
    x = rng.normal(size=(3, 32, 32, 1)).astype(np.float32)
    expected = extract_features(FeatureExtractor(tiny_model.teacher_encoder), x)
    np.testing.assert_array_equal(extract_features(path, x), expected)
    for feature, dim in (("h", 8), ("s", 8)):
        assert extract_features(load_feature_extractor(path, feature=feature), x).shape == (3, dim)


def test_empty_patch_list(tiny_model):
    assert extract_features(tiny_model, []).shape == (0, 16)


def test_feature_matrix_validation():
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros(3))
    with pytest.raises(ValueError):
        FeatureMatrix(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((3, 2)), np.zeros(2))


# ---------------------------------------------------------------- k-NN


def test_knn_query_equal_to_train_row():
    train = FeatureMatrix(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), np.array([4, 7, 9]))
    assert knn_classify(train, np.array([[0.0, 2.0]])).tolist() == [7]


def test_knn_separated_clusters():
    train, test = clusters(5, seed=1), clusters(50, seed=2)
    assert np.mean(knn_classify(train, test, k=3) == test.labels) == 1.0


def test_knn_constant_labels():
    train = FeatureMatrix(np.random.default_rng(0).normal(size=(6, 3)), np.full(6, 2))
    assert set(knn_classify(train, np.random.default_rng(1).normal(size=(20, 3)), k=4).tolist()) == {2}


def test_knn_tie_goes_to_nearest():
    train = FeatureMatrix(np.array([[1.0, 0.1], [1.0, -0.3], [0.0, 1.0], [0.0, -1.0]]), np.array([0, 1, 0, 1]))
    # k=2: one neighbour of each label, the closer one is label 0
    assert knn_classify(train, np.array([[1.0, 0.0]]), k=2).tolist() == [0]


def test_knn_errors():
    train = FeatureMatrix(np.eye(2), np.array([0, 1]))
    with pytest.raises(ValueError):
        knn_classify(FeatureMatrix(np.zeros((0, 2)), np.zeros(0)), np.eye(2))
    with pytest.raises(ValueError):
        knn_classify(train, np.eye(2), k=3)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 6)),
                  elements=st.floats(-100, 100, allow_subnormal=False)))
def test_knn_reproduces_training_labels(x):
    # distinct, non-parallel rows so each row is its own unique nearest neighbour
    x = x + np.arange(len(x))[:, None] * 1000.0 + 1.0
    x = np.concatenate([x, np.arange(len(x))[:, None] ** 2 * 7.0], axis=1)
    unit = x / np.linalg.norm(x, axis=1, keepdims=True)
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    if np.any(sim >= 1 - 1e-12):
        return
    labels = np.arange(len(x)) % 3
    assert np.array_equal(knn_classify(FeatureMatrix(x, labels), x), labels)


# ---------------------------------------------------------------- linear probe


def test_linear_probe_separable():
    train = clusters(20, seed=3)
    probe = linear_probe_train(train)
    assert np.mean(probe.predict(train) == train.labels) == 1.0


def test_linear_probe_conflict_gives_majority():
    train = FeatureMatrix(np.ones((10, 3)), np.array([0] * 7 + [1] * 3))
    probe = linear_probe_train(train)
    assert np.mean(probe.predict(train) == train.labels) == pytest.approx(0.7)


def test_linear_probe_seeded():
    train = clusters(10, seed=4)
    a, b = linear_probe_train(train, seed=5), linear_probe_train(train, seed=5)
    assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)


def test_linear_probe_single_class():
    with pytest.raises(ValueError):
        linear_probe_train(FeatureMatrix(np.eye(3), np.zeros(3)))


def test_linear_probe_keeps_label_values():
    train = clusters(10, seed=6)
    train.labels = train.labels * 5 + 3
    assert set(linear_probe_train(train).predict(train).tolist()) == {3, 8}


# ---------------------------------------------------------------- few-shot


@pytest.mark.parametrize("method", ["knn", "linear"])
def test_fewshot_trivial_clusters(method):
    feats = clusters(6, seed=7)
    report = fewshot_eval(feats, 5, trials=4, method=method)
    assert report.mean == 1.0 and report.std == 0.0
    assert len(report.accuracies) == 4


def test_fewshot_same_seed_same_report():
    feats = clusters(20, sep=1.0, seed=8, n_classes=3)
    a = fewshot_eval(feats, 3, trials=5, seed=9)
    b = fewshot_eval(feats, 3, trials=5, seed=9)
    assert a.accuracies == b.accuracies
    assert a.mean == pytest.approx(sum(a.accuracies) / 5, abs=1e-15)


def test_fewshot_uses_query_set():
    feats, query = clusters(5, seed=10), clusters(30, seed=11)
    report = fewshot_eval(feats, 5, trials=2, query=query)
    assert report.mean == 1.0


def test_fewshot_errors():
    feats = clusters(5)
    with pytest.raises(FewShotError):
        fewshot_eval(feats, 5)  # no sample left for evaluation
    with pytest.raises(FewShotError):
        fewshot_eval(FeatureMatrix(feats.features), 1)
    with pytest.raises(FewShotError):
        fewshot_eval(feats.subset(np.arange(5)), 1)
    with pytest.raises(FewShotError):
        fewshot_eval(feats, 0)
    with pytest.raises(ValueError):
        fewshot_eval(feats, 1, method="svm")


def test_fewshot_report_text():
    report = fewshot_eval(clusters(6), 2, trials=3)
    assert str(report).startswith("method=knn labels_per_class=2 trials=3 mean=1.0000")


# ---------------------------------------------------------------- grids and colors


def test_single_cell_grid(tiny_model, rng):
    grid = feature_map(tiny_model, rng.normal(size=(32, 32)), 32, 32)
    assert grid.shape == (1, 1)


def test_constant_image_gives_equal_cells(tiny_model):
    grid = feature_map(tiny_model, np.full((64, 64), 0.4), 32, 16)
    f = grid.features.reshape(-1, grid.features.shape[-1])
    np.testing.assert_allclose(f, np.broadcast_to(f[0], f.shape), atol=1e-6)


def test_feature_map_equals_patchwise_extraction(tiny_model, rng):
    image = rng.normal(size=(40, 56, 1)).astype(np.float32)
    grid = feature_map(tiny_model, image, 16, 8, batch_size=5)
    windows, (gh, gw) = extract_patches(image, 16, 8)
    assert grid.shape == (gh, gw)
    for i in range(gh):
        for j in range(gw):
            np.testing.assert_allclose(grid.features[i, j], extract_features(tiny_model, windows[i, j][None])[0],
                                       atol=1e-6)


def test_feature_map_rejects_misaligned_patch(tiny_model):
    with pytest.raises(ValueError):
        feature_map(tiny_model, np.zeros((32, 32)), 20, 4)


def _pca_oracle(x):
    """Eigen-decomposition of the covariance, independent of the SVD route."""
    xc = x - x.mean(axis=0)
    w, v = np.linalg.eigh(xc.T @ xc)
    out = np.zeros((len(x), 3))
    for c, i in enumerate(np.argsort(w)[::-1][:3]):
        if w[i] <= 1e-9 * w.max():
            continue
        mag = np.abs(v[:, i])
        comp = v[:, i] * np.sign(v[np.flatnonzero(mag >= mag.max() * (1 - 1e-9))[0], i])
        proj = xc @ comp
        out[:, c] = (proj - proj.min()) / (proj.max() - proj.min())
    return out


def test_pca_three_one_hot_directions():
    x = np.repeat(np.eye(3), [2, 3, 4], axis=0)
    rgb = pca_rgb(x)
    np.testing.assert_allclose(rgb, _pca_oracle(x), atol=1e-12)
    # centred one-hot rows span a plane, so the third channel is empty
    np.testing.assert_allclose(np.unique(rgb, axis=0), [[0.0, 0.0, 0.0], [0.354248688935, 1.0, 0.0],
                                                         [1.0, 0.177124344468, 0.0]], atol=1e-11)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(4, 30), st.integers(3, 8)),
                  elements=st.floats(-10, 10, allow_subnormal=False)))
def test_pca_matches_eigen_oracle(x):
    w = np.linalg.eigvalsh(np.cov(x.T))[::-1]
    if w[0] < 1e-6 or np.any(np.diff(w[:4]) > -1e-6 * w[0]):
        return  # skip near-degenerate spectra where the component choice is ambiguous
    rgb = pca_rgb(x)
    assert rgb.min() >= 0 and rgb.max() <= 1
    np.testing.assert_allclose(rgb, _pca_oracle(x), atol=1e-7)


def test_pca_channels_ordered_by_variance(rng):
    x = rng.normal(size=(200, 5)) * np.array([5.0, 3.0, 1.0, 0.1, 0.1])
    xc = x - x.mean(0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    spread = [np.var(xc @ vt[c]) for c in range(3)]
    assert spread[0] >= spread[1] >= spread[2]


def test_constant_grid_is_uniform():
    grid = FeatureGrid(np.ones((3, 4, 6)), 32, 16)
    rgb = reduce_to_rgb(grid)
    assert rgb.shape == (3, 4, 3) and np.all(rgb == rgb[0, 0])


def test_reduce_to_rgb_errors():
    with pytest.raises(ValueError):
        reduce_to_rgb(FeatureGrid(np.ones((1, 2, 3)), 32, 16))
    with pytest.raises(ValueError):
        reduce_to_rgb(FeatureGrid(np.ones((2, 2, 3)), 32, 16), "tsne")
    with pytest.raises(ValueError):
        reduce_to_rgb(FeatureGrid(np.ones((2, 2, 3)), 32, 16), "external")


def test_external_reducer(tmp_path):
    script = tmp_path / "red.py"
    script.write_text(
        "import sys\n"
        "from safe_sar.container import read_tensor, write_tensor\n"
        "g = read_tensor(sys.argv[1])\n"
        "write_tensor(sys.argv[2], (g[..., :3] * 0 + 2).astype('float32'))\n"
    )
    grid = FeatureGrid(np.ones((2, 3, 4), dtype=np.float32), 32, 16)
    rgb = reduce_to_rgb(grid, "external", f"python3 {script} {{input}} {{output}}")
    assert rgb.shape == (2, 3, 3) and np.all(rgb == 1.0)
    with pytest.raises(RuntimeError):
        reduce_to_rgb(grid, "external", "python3 -c 'import sys; sys.exit(3)'")


def test_crop_to_tokens():
    from safe_sar.probe import crop_to_tokens

    x = np.arange(100 * 102).reshape(100, 102)
    c = crop_to_tokens(x, 8)
    assert c.shape == (96, 96)
    assert c[0, 0] == x[2, 3]
    assert crop_to_tokens(x[:96, :96], 8) is not None and crop_to_tokens(x[:96, :96], 8).shape == (96, 96)
    with pytest.raises(ValueError):
        crop_to_tokens(x[:5], 8)


def test_unaligned_patches_are_centre_cropped(tiny_model, rng):
    x = rng.normal(size=(2, 100, 100, 1)).astype(np.float32)
    np.testing.assert_array_equal(extract_features(tiny_model, x), extract_features(tiny_model, x[:, 2:98, 2:98]))
