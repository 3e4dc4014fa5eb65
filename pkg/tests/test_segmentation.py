import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from safe_sar.segmentation import (
    SegHead,
    SegMetrics,
    SegTrainConfig,
    attention_aggregate,
    confusion_matrix,
    load_head,
    save_head,
    seg_forward,
    seg_metrics,
    seg_predict,
    seg_train,
    split_indices,
)
from safe_sar.seeding import SeedStream


def formula_metrics(x):
    """Straight-from-formula evaluation with explicit loops."""
    n = len(x)
    total = sum(x[i][j] for i in range(n) for j in range(n))
    oa = sum(x[i][i] for i in range(n)) / total
    aa = sum(x[i][i] / sum(x[i][j] for j in range(n)) for i in range(n)) / n
    pe = sum(sum(x[i][j] for j in range(n)) * sum(x[j][i] for j in range(n)) for i in range(n)) / total**2
    kappa = (oa - pe) / (1 - pe)
    iou = [x[i][i] / (sum(x[i][j] for j in range(n)) + sum(x[j][i] for j in range(n)) - x[i][i]) for i in range(n)]
    return oa, aa, kappa, sum(iou) / n


# ---------------------------------------------------------------- metrics


def test_confusion_identity_prediction():
    gt = np.array([[0, 1, 1], [2, 2, 2]])
    x = confusion_matrix(gt, gt, 3)
    assert np.array_equal(x, np.diag([1, 2, 3]))


def test_confusion_all_class_zero():
    gt = np.array([0, 1] * 8)
    assert confusion_matrix(np.zeros_like(gt), gt, 2).tolist() == [[8, 0], [8, 0]]


def test_confusion_matches_counting_loop(rng):
    pred, gt = rng.integers(0, 3, (8, 8)), rng.integers(0, 3, (8, 8))
    oracle = np.zeros((3, 3), dtype=np.int64)
    for p, g in zip(pred.ravel(), gt.ravel()):
        oracle[g, p] += 1
    assert np.array_equal(confusion_matrix(pred, gt, 3), oracle)


def test_confusion_errors():
    with pytest.raises(ValueError):
        confusion_matrix(np.zeros(3), np.zeros(4), 2)
    with pytest.raises(ValueError):
        confusion_matrix(np.array([2]), np.array([0]), 2)


def test_perfect_prediction_metrics():
    assert seg_metrics(np.diag([5, 7, 9])) == SegMetrics(1.0, 1.0, 1.0, 1.0)


def test_hand_evaluated_half_matrix():
    m = seg_metrics(np.array([[50, 0], [50, 0]]))
    assert m.oa == 0.5 and m.kappa == 0.0
    assert m.aa == 0.5 and m.miou == 0.25


def test_metrics_match_formula_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(2, 7))
        x = rng.integers(1, 200, (n, n))
        got = seg_metrics(x)
        expected = formula_metrics(x.astype(float).tolist())
        np.testing.assert_allclose([got.oa, got.aa, got.kappa, got.miou], expected, atol=1e-12, rtol=0)


def test_absent_class_is_skipped():
    x = np.array([[4, 1, 0], [2, 3, 0], [0, 0, 0]])
    assert seg_metrics(x) == seg_metrics(x[:2, :2])


def test_single_class_everywhere():
    m = seg_metrics(np.array([[10, 0], [0, 0]]))
    assert m == SegMetrics(1.0, 1.0, 1.0, 1.0)


def test_metrics_reject_bad_input():
    with pytest.raises(ValueError):
        seg_metrics(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        seg_metrics(np.ones((2, 3)))


def test_metrics_text():
    assert seg_metrics(np.diag([1, 1])).as_text() == "OA=1.0\nAA=1.0\nKappa=1.0\nmIoU=1.0\n"


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.int64, st.tuples(st.integers(2, 5)).map(lambda t: (t[0], t[0])), elements=st.integers(0, 50)),
       st.data())
def test_metric_ranges_and_permutation(x, data):
    if x.sum() == 0:
        return
    m = seg_metrics(x)
    assert 0 <= m.oa <= 1 and 0 <= m.aa <= 1 and 0 <= m.miou <= 1
    assert -1 - 1e-12 <= m.kappa <= 1 + 1e-12
    diagonal = np.count_nonzero(x - np.diag(np.diag(x))) == 0
    assert (abs(m.kappa - 1) < 1e-12) == diagonal
    perm = np.array(data.draw(st.permutations(range(len(x)))))
    p = seg_metrics(x[np.ix_(perm, perm)])
    np.testing.assert_allclose([p.oa, p.aa, p.kappa, p.miou], [m.oa, m.aa, m.kappa, m.miou], atol=1e-12)


# ---------------------------------------------------------------- head


def test_seg_forward_shape_512():
    head = SegHead(16, 3, reduced=8)
    feats = [np.zeros((16, 16, 16), dtype=np.float32) for _ in range(3)]
    branch = head.branches[0](torch.zeros(1, 16, 16, 16))
    assert branch.shape == (1, 8, 128, 128)
    out = seg_forward(feats, head, (512, 512))
    assert out.shape == (1, 3, 512, 512)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 2))
def test_seg_forward_shape_property(gh, gw, batch):
    head = SegHead(4, 2, reduced=4)
    feats = [np.zeros((batch, gh, gw, 4), dtype=np.float32)] * 3
    assert seg_forward(feats, head, (32 * gh, 32 * gw)).shape == (batch, 2, 32 * gh, 32 * gw)


def test_zero_head_gives_constant_logits(rng):
    head = SegHead(6, 3, reduced=4)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    out = seg_forward([rng.normal(size=(2, 2, 6))] * 3, head, (64, 64))
    assert torch.all(out == out[0, :, :1, :1])


def test_forced_attention_equals_single_branch(rng):
    torch.manual_seed(0)
    head = SegHead(6, 3, reduced=4)
    with torch.no_grad():
        for i, conv in enumerate(head.scores):
            conv.weight.zero_()
            conv.bias.fill_(100.0 if i == 0 else -100.0)
    feats = [torch.as_tensor(rng.normal(size=(1, 6, 2, 3)), dtype=torch.float32) for _ in range(3)]
    expected = torch.nn.functional.interpolate(head.classifier(head.branches[0](feats[0])), size=(64, 96),
                                               mode="bilinear", align_corners=False)
    torch.testing.assert_close(head(feats, (64, 96)), expected, atol=1e-6, rtol=0)


def test_aggregate_identical_maps(rng):
    m = torch.as_tensor(rng.normal(size=(2, 4, 5, 5)), dtype=torch.float32)
    convs = [torch.nn.Conv2d(4, 1, 1) for _ in range(3)]
    torch.testing.assert_close(attention_aggregate([m, m, m], convs), m, atol=1e-6, rtol=0)


def test_aggregate_saturated_scale(rng):
    maps = [torch.as_tensor(rng.normal(size=(1, 4, 3, 3)), dtype=torch.float32) for _ in range(3)]
    convs = [torch.nn.Conv2d(4, 1, 1) for _ in range(3)]
    with torch.no_grad():
        for i, c in enumerate(convs):
            c.weight.zero_()
            c.bias.fill_(50.0 if i == 1 else 0.0)
    torch.testing.assert_close(attention_aggregate(maps, convs), maps[1], atol=1e-6, rtol=0)


def test_aggregate_in_convex_hull(rng):
    maps = [torch.as_tensor(rng.normal(size=(2, 5, 4, 4)), dtype=torch.float32) for _ in range(3)]
    convs = [torch.nn.Conv2d(5, 1, 1) for _ in range(3)]
    fused = attention_aggregate(maps, convs)
    stack = torch.stack(maps)
    assert torch.all(fused >= stack.min(0).values - 1e-6) and torch.all(fused <= stack.max(0).values + 1e-6)


def test_head_rejects_mismatched_inputs():
    head = SegHead(4, 2, reduced=4)
    with pytest.raises(ValueError):
        head([torch.zeros(1, 4, 2, 2)] * 2, (64, 64))
    with pytest.raises(ValueError):
        head([torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 3, 2)], (64, 64))


# ---------------------------------------------------------------- training


def toy_task(rng, n=8, g=4, d=6):
    """Each grid cell's feature is a noisy one-hot of its label; labels are 8x8 blocks per cell."""
    cell = rng.integers(0, 3, (n, g, g))
    feat = np.eye(d)[cell] * 3 + rng.normal(scale=0.1, size=(n, g, g, d))
    labels = np.kron(cell, np.ones((8, 8), dtype=np.int64)).astype(np.uint8)
    return [feat.astype(np.float32)] * 3, labels


def test_zero_epochs_returns_initialization(rng):
    feats, labels = toy_task(rng)
    cfg = SegTrainConfig(epochs=0, reduced_dim=4, seed=2)
    a = seg_train(feats, labels, 3, cfg).head
    torch.manual_seed(123)
    with torch.random.fork_rng():
        torch.manual_seed(SeedStream(2).child("seg").child("init").int_seed())
        init = SegHead(6, 3, 4, 3)
    for k, v in init.named_parameters():
        assert torch.equal(dict(a.named_parameters())[k], v)


def test_input_stats_come_from_training_split(rng):
    feats, labels = toy_task(rng)
    res = seg_train(feats, labels, 3, SegTrainConfig(epochs=0, reduced_dim=4))
    train = feats[0][res.train_idx].reshape(-1, feats[0].shape[-1])
    for s in range(3):
        np.testing.assert_allclose(res.head.in_mean[s].numpy(), train.mean(0), atol=1e-5)
        np.testing.assert_allclose(res.head.in_std[s].numpy(), train.std(0) + 1e-6, atol=1e-5)


def test_head_invariant_to_common_feature_offset(rng):
    feats, labels = toy_task(rng)
    shifted = [f + 50.0 for f in feats]
    cfg = SegTrainConfig(epochs=2, reduced_dim=4, lr=1e-3)
    a, b = seg_train(feats, labels, 3, cfg), seg_train(shifted, labels, 3, cfg)
    np.testing.assert_allclose(a.losses, b.losses, rtol=1e-4)


def test_training_is_seeded(rng):
    feats, labels = toy_task(rng)
    cfg = SegTrainConfig(epochs=2, reduced_dim=4, lr=1e-3)
    a, b = seg_train(feats, labels, 3, cfg), seg_train(feats, labels, 3, cfg)
    for k, v in a.head.state_dict().items():
        assert torch.equal(b.head.state_dict()[k], v)
    assert a.losses == b.losses


def test_training_learns_toy_task(rng):
    feats, labels = toy_task(rng, n=16)
    res = seg_train(feats, labels, 3, SegTrainConfig(epochs=40, lr=3e-3, milestones=(30,), reduced_dim=8))
    assert res.losses[-1] < res.losses[0]
    assert res.val_metrics is not None and res.val_metrics.oa > 0.9


def test_milestones_divide_lr(rng):
    feats, labels = toy_task(rng, n=4)
    cfg = SegTrainConfig(epochs=3, lr=1.0, milestones=(1, 2), reduced_dim=4)
    opt_lrs = []
    orig = torch.optim.AdamW.step

    def spy(self, *a, **k):
        opt_lrs.append(self.param_groups[0]["lr"])
        return orig(self, *a, **k)

    torch.optim.AdamW.step = spy
    try:
        seg_train(feats, labels, 3, cfg)
    finally:
        torch.optim.AdamW.step = orig
    assert sorted(set(np.round(opt_lrs, 12))) == [0.01, 0.1, 1.0]


def test_split_indices():
    train, val = split_indices(8, 0.25, SeedStream(0))
    assert len(val) == 2 and len(train) == 6
    assert sorted(np.concatenate([train, val])) == list(range(8))
    assert split_indices(1, 0.5, SeedStream(0))[1].size == 0


def test_seg_train_errors(rng):
    feats, labels = toy_task(rng, n=4)
    with pytest.raises(ValueError):
        seg_train(feats, labels, 2)
    with pytest.raises(ValueError):
        seg_train([f[:3] for f in feats], labels, 3)
    with pytest.raises(ValueError):
        seg_train([f[:0] for f in feats], labels[:0], 3)


def test_head_roundtrip(rng, tmp_path):
    feats, labels = toy_task(rng, n=4)
    head = seg_train(feats, labels, 3, SegTrainConfig(epochs=1, reduced_dim=4)).head
    save_head(tmp_path / "head", head, (16, 32, 64), 32)
    loaded, sizes, stride = load_head(tmp_path / "head")
    assert sizes == (16, 32, 64) and stride == 32
    np.testing.assert_array_equal(seg_predict(loaded, feats, (32, 32)), seg_predict(head, feats, (32, 32)))
