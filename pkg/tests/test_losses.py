"""Partitioning, the contrastive objectives, and the combined loss graph."""

import math

import numpy as np
import pytest

from upcsc.autograd import Tensor
from upcsc.errors import ConfigError, DegenerateInputError, ShapeError
from upcsc.losses import (MethodFlags, _surrogate_weights, build_loss_graph,
                          consistency_loss, partition_unlabeled, pcl_reference_loss,
                          sc_loss, sc_negative_masks, supervised_loss,
                          surrogate_class, total_loss, upc_loss,
                          upc_negative_masks)
from upcsc.model import ModelDims, class_confidence, featurize, init_model
from upcsc.numerics import l2_normalize_rows, softmax_rows, substream
from upcsc.synthdata import TrainBatch, strong_augment, weak_augment

DIMS = ModelDims(input_dim=5, hidden_dims=(6,), feature_dim=4, num_classes=3)
ALL = MethodFlags(True, True, True)


def sharp_state(boost=6.0):
    # positive hidden bias: with only 6 hidden units a zero-bias ReLU layer
    # occasionally silences a whole row, and the projector refuses zero rows
    state = init_model(DIMS, seed=2)
    state.classifier[:] = state.classifier * boost
    w0, b0 = state.featurizer[0]
    state.featurizer[0] = (w0, b0 + 1.5)
    return state


def random_batch(seed, n_l=4, n_u=8):
    rng = substream(seed)
    return TrainBatch(rng.standard_normal((n_l, DIMS.input_dim)),
                      rng.integers(0, DIMS.num_classes, n_l),
                      rng.standard_normal((n_u, DIMS.input_dim)))


def unit_rows(seed, n, d):
    return l2_normalize_rows(substream(seed).standard_normal((n, d)))


# ---------------------------------------------------------------- partition

def test_partition_hand_case():
    conf = np.array([
        [0.96, 0.02, 0.02],   # confident, pseudo 0
        [0.50, 0.40, 0.10],   # candidates {0, 1}
        [1 / 3, 1 / 3, 1 / 3],  # exactly uniform: empty candidate set
    ])
    part = partition_unlabeled(conf, tau=0.9)
    assert part.confident == ((0, 0),)
    assert part.unconfident == ((1, frozenset({0, 1})), (2, frozenset()))
    assert part.degenerate_uniform == 1
    assert part.excluded(frozenset({0, 1})) == frozenset({2})


def test_partition_threshold_boundary_is_inclusive():
    conf = np.array([[0.9, 0.05, 0.05], [0.89999, 0.05001, 0.05]])
    part = partition_unlabeled(conf, tau=0.9)
    assert part.confident_indices.tolist() == [0]
    assert part.unconfident_indices.tolist() == [1]


def test_partition_argmax_tie_lowest_index():
    part = partition_unlabeled(np.array([[0.48, 0.48, 0.04]]), tau=0.4)
    assert part.confident == ((0, 0),)


def test_partition_rejects_bad_tau():
    conf = np.array([[0.5, 0.3, 0.2]])
    with pytest.raises(ConfigError):
        partition_unlabeled(conf, tau=1.0)
    with pytest.raises(ConfigError):
        partition_unlabeled(conf, tau=1 / 3)
    with pytest.raises(ConfigError):
        partition_unlabeled(conf, tau=0.2)


def test_partition_matches_bruteforce_sets():
    rng = substream(301)
    for _ in range(200):
        n = int(rng.integers(0, 9))
        c = int(rng.integers(2, 6))
        conf = softmax_rows(rng.standard_normal((n, c)) * 3) if n else np.zeros((0, c))
        tau = float(rng.uniform(1 / c + 0.01, 0.99))
        part = partition_unlabeled(conf, tau)
        expect_conf, expect_unconf = [], []
        for i in range(n):
            row = conf[i]
            if max(row) >= tau:
                expect_conf.append((i, int(np.argmax(row))))
            else:
                expect_unconf.append((i, frozenset(y for y in range(c) if row[y] > 1 / c)))
        assert list(part.confident) == expect_conf
        assert list(part.unconfident) == expect_unconf


# ----------------------------------------------------------- supervised loss

def test_supervised_loss_matches_manual_ce():
    state = sharp_state()
    rng = substream(7)
    x = rng.standard_normal((6, DIMS.input_dim))
    y = rng.integers(0, DIMS.num_classes, 6)
    value, grads = supervised_loss(state, x, y)
    logits = featurize(state, x) @ state.classifier.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    manual = float(np.mean(lse - logits[np.arange(6), y]))
    assert value == pytest.approx(manual, abs=1e-12)
    assert grads["classifier.weight"].shape == state.classifier.shape
    assert grads.max_abs() > 0


def test_supervised_loss_empty_batch():
    state = sharp_state()
    value, grads = supervised_loss(state, np.zeros((0, DIMS.input_dim)), np.zeros(0, dtype=int))
    assert value == 0.0
    assert grads.max_abs() == 0.0


def test_supervised_loss_permutation_equivariant():
    state = sharp_state()
    rng = substream(8)
    x = rng.standard_normal((6, DIMS.input_dim))
    y = rng.integers(0, DIMS.num_classes, 6)
    perm = np.array([2, 0, 1])
    inv = np.argsort(perm)
    permuted = state.with_params({"classifier.weight": state.classifier[perm]})
    base, _ = supervised_loss(state, x, y)
    relabeled, _ = supervised_loss(permuted, x, inv[y])
    assert abs(base - relabeled) <= 1e-12


# ---------------------------------------------------------- consistency loss

def test_consistency_loss_no_confident_is_zero():
    state = init_model(DIMS, seed=3)  # unboosted: confidences stay diffuse
    x_u = substream(9).standard_normal((10, DIMS.input_dim))
    value, grads, part = consistency_loss(state, x_u, tau=0.999999, rng=substream(10))
    assert value == 0.0
    assert grads.max_abs() == 0.0
    assert len(part.confident) == 0
    assert len(part.unconfident) == 10


def test_consistency_loss_empty_batch():
    state = sharp_state()
    value, grads, part = consistency_loss(state, np.zeros((0, DIMS.input_dim)),
                                          tau=0.9, rng=substream(11))
    assert value == 0.0 and grads.max_abs() == 0.0
    assert part.confident == () and part.unconfident == ()


def test_consistency_loss_compositional_oracle():
    # replaying the documented rng order and feeding the strong views to the
    # supervised loss must reproduce value and gradients exactly
    state = sharp_state()
    x_u = substream(12).standard_normal((10, DIMS.input_dim))
    value, grads, part = consistency_loss(state, x_u, tau=0.65, rng=substream(13))
    assert len(part.confident) > 0

    replay = substream(13)
    xw = weak_augment(x_u, replay, 0.05)
    conf = class_confidence(state, featurize(state, xw))
    part2 = partition_unlabeled(conf, 0.65)
    xs = strong_augment(x_u[part2.confident_indices], replay, 0.5, 0.2)
    expect_value, expect_grads = supervised_loss(state, xs, part2.pseudo_labels)
    assert value == expect_value
    for name, g in grads.items():
        assert np.array_equal(g, expect_grads[name]), name


def test_consistency_loss_near_zero_when_predictions_match():
    # identity featurizer, huge aligned proxies: strong views keep the argmax
    dims = ModelDims(input_dim=2, hidden_dims=(), feature_dim=2, num_classes=2)
    state = init_model(dims, seed=0)
    state.featurizer[0] = (np.eye(2) * 5.0, np.zeros(2))
    state.classifier[:] = np.array([[10.0, 0.0], [0.0, 10.0]])
    x_u = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.1], [0.1, 1.0]])
    value, _, part = consistency_loss(state, x_u, tau=0.9, rng=substream(14),
                                      sigma_weak=0.01, sigma_strong=0.01, strong_dropout=0.0)
    assert len(part.confident) == 4
    assert value < 1e-3


# ------------------------------------------------------------- pcl reference

def test_pcl_single_sample_zero():
    z = unit_rows(20, 1, 4)
    w = unit_rows(21, 3, 4)
    assert pcl_reference_loss(z, w, [1]) == 0.0


def test_pcl_hand_value():
    # orthogonal unit embeddings, positives perfectly aligned
    z = np.eye(2)
    w = np.eye(2)
    expect = -math.log(math.e / (math.e + 1.0))
    assert pcl_reference_loss(z, w, [0, 1]) == pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(0.3133, abs=5e-5)


def test_pcl_same_label_no_negatives():
    z = unit_rows(22, 4, 3)
    w = unit_rows(23, 2, 3)
    assert pcl_reference_loss(z, w, [1, 1, 1, 1]) == pytest.approx(0.0, abs=1e-12)


# ------------------------------------------------------------------ upc loss

def test_upc_reduces_to_pcl_without_unconfident():
    for seed in range(50):
        rng = substream(400 + seed)
        n = int(rng.integers(1, 9))
        c = int(rng.integers(2, 6))
        d = int(rng.integers(2, 7))
        z = l2_normalize_rows(rng.standard_normal((n, d)))
        w = l2_normalize_rows(rng.standard_normal((c, d)))
        labels = rng.integers(0, c, n)
        value = upc_loss(z, w, labels, np.zeros((0, d)), ()).item()
        assert abs(value - pcl_reference_loss(z, w, labels)) <= 1e-12


def test_upc_exclusion_gates_unconfident_negatives():
    z_uc = unit_rows(24, 1, 4)
    w = unit_rows(25, 3, 4)
    z_uu = unit_rows(26, 2, 4)
    # first unconfident still considers class 0; second excludes it
    cands = (frozenset({0, 1}), frozenset({1, 2}))
    value = upc_loss(z_uc, w, [0], z_uu, cands).item()
    pos = float(z_uc[0] @ w[0])
    rest = math.exp(float(z_uc[0] @ z_uu[1]))
    expect = math.log(math.exp(pos) + rest) - pos
    assert value == pytest.approx(expect, abs=1e-12)


def test_upc_no_negatives_is_zero():
    z = unit_rows(27, 3, 4)
    w = unit_rows(28, 2, 4)
    value = upc_loss(z, w, [1, 1, 1], np.zeros((0, 4)), ()).item()
    assert abs(value) <= 1e-12


def test_upc_no_confident_returns_constant_zero():
    out = upc_loss(np.zeros((0, 4)), unit_rows(29, 3, 4), [], unit_rows(30, 2, 4),
                   (frozenset({0}), frozenset({1})))
    assert out.item() == 0.0


def test_upc_gradients_flow_to_inputs():
    z_uc = Tensor(unit_rows(31, 3, 4))
    w = Tensor(unit_rows(32, 3, 4))
    z_uu = Tensor(unit_rows(33, 2, 4))
    cands = (frozenset({1}), frozenset({2}))
    out = upc_loss(z_uc, w, [0, 1, 2], z_uu, cands)
    out.backward()
    assert np.abs(z_uc.grad).max() > 0
    assert np.abs(w.grad).max() > 0
    assert np.abs(z_uu.grad).max() > 0


def test_upc_shape_validation():
    with pytest.raises(ShapeError):
        upc_loss(unit_rows(34, 2, 4), unit_rows(35, 3, 4), [0], np.zeros((0, 4)), ())
    with pytest.raises(ShapeError):
        upc_loss(unit_rows(34, 2, 4), unit_rows(35, 3, 4), [0, 1],
                 unit_rows(36, 2, 4), (frozenset(),))


# ------------------------------------------------------- surrogate + sc loss

def test_surrogate_class_hand_value_and_batched_agreement():
    w = unit_rows(40, 3, 5)
    conf = np.array([0.40, 0.35, 0.25])
    cand = frozenset({0, 1})
    expect = 0.40 * w[0] + 0.35 * w[1]
    assert np.allclose(surrogate_class(conf, cand, w), expect, atol=1e-15)
    weights = _surrogate_weights(conf[None, :], (cand,))
    assert np.allclose(weights @ w, expect[None, :], atol=1e-15)


def test_surrogate_class_empty_candidate_rejected():
    with pytest.raises(DegenerateInputError):
        surrogate_class(np.array([0.4, 0.3, 0.3]), frozenset(), unit_rows(41, 3, 4))


def test_surrogate_norm_bounded_by_one():
    rng = substream(42)
    for _ in range(100):
        c = int(rng.integers(2, 7))
        w = l2_normalize_rows(rng.standard_normal((c, 6)))
        conf = softmax_rows(rng.standard_normal((1, c)) * 2)[0]
        cand = frozenset(int(y) for y in np.flatnonzero(conf > 1 / c))
        if not cand:
            continue
        assert np.linalg.norm(surrogate_class(conf, cand, w)) <= 1.0 + 1e-12


def test_sc_loss_hand_value_with_both_negative_kinds():
    z_uu = unit_rows(43, 2, 4)
    z_uc = unit_rows(44, 2, 4)
    w = unit_rows(45, 3, 4)
    cands = (frozenset({0}), frozenset({1, 2}))  # disjoint from each other
    pseudo = [0, 1]  # pseudo 1 is excluded by anchor 0; pseudo 0 is not
    conf = np.array([[0.5, 0.2, 0.3], [0.2, 0.45, 0.35]])
    surrogates = _surrogate_weights(conf, cands) @ w
    value = sc_loss(z_uu, surrogates, cands, z_uc, pseudo).item()

    expect_terms = []
    for i in range(2):
        pos = float(z_uu[i] @ surrogates[i])
        rest = 0.0
        for j in range(2):  # confident negatives
            if pseudo[j] not in cands[i]:
                rest += math.exp(float(z_uu[i] @ z_uc[j]))
        for j in range(2):  # unconfident negatives
            if cands[i].isdisjoint(cands[j]):
                rest += math.exp(float(z_uu[i] @ z_uu[j]))
        expect_terms.append(math.log(math.exp(pos) + rest) - pos)
    assert value == pytest.approx(np.mean(expect_terms), abs=1e-12)
    assert value > 0  # both anchors really saw negatives


def test_sc_loss_degenerate_rows_skip_anchor_but_stay_negative():
    z_uu = unit_rows(46, 3, 4)
    w = unit_rows(47, 3, 4)
    cands = (frozenset({0}), frozenset(), frozenset({0, 1}))
    conf = np.full((3, 3), 1 / 3)
    conf[0] = [0.5, 0.25, 0.25]
    conf[2] = [0.4, 0.4, 0.2]
    surrogates = _surrogate_weights(conf, cands) @ w
    value = sc_loss(z_uu, surrogates, cands, np.zeros((0, 4)), []).item()
    # anchors are rows 0 and 2; the empty-set row 1 is disjoint from both, so
    # each anchor has exactly one negative: row 1
    expect = []
    for i in (0, 2):
        pos = float(z_uu[i] @ surrogates[i])
        rest = math.exp(float(z_uu[i] @ z_uu[1]))
        expect.append(math.log(math.exp(pos) + rest) - pos)
    assert value == pytest.approx(np.mean(expect), abs=1e-12)


def test_sc_loss_no_anchors_zero():
    value = sc_loss(unit_rows(48, 2, 4), np.zeros((2, 4)), (frozenset(), frozenset()),
                    np.zeros((0, 4)), []).item()
    assert value == 0.0


def test_sc_loss_no_negatives_zero():
    # single anchor, overlapping sets everywhere, no confident samples
    z_uu = unit_rows(49, 2, 4)
    w = unit_rows(50, 3, 4)
    cands = (frozenset({0, 1}), frozenset({1, 2}))
    conf = np.array([[0.4, 0.4, 0.2], [0.2, 0.4, 0.4]])
    surrogates = _surrogate_weights(conf, cands) @ w
    value = sc_loss(z_uu, surrogates, cands, np.zeros((0, 4)), []).item()
    assert abs(value) <= 1e-12


# ---------------------------------------------------------------- total loss

def test_total_loss_breakdown_sums_exactly():
    state = sharp_state()
    for seed in range(20):
        # low dropout: at 5 input features the default rate can zero a whole
        # row, which the projector rejects by design
        breakdown, _ = total_loss(state, random_batch(seed), ALL, 0.65, substream(seed),
                                  strong_dropout=0.05)
        assert breakdown.l_total == breakdown.l_sup + breakdown.l_unsup + \
            breakdown.l_upc + breakdown.l_sc
        for term in (breakdown.l_sup, breakdown.l_unsup, breakdown.l_upc, breakdown.l_sc):
            assert term >= 0.0


def test_total_loss_supervised_only_equals_supervised():
    state = sharp_state()
    batch = random_batch(60)
    breakdown, grads = total_loss(state, batch, MethodFlags(False, False, False),
                                  0.65, substream(61))
    expect_value, expect_grads = supervised_loss(state, batch.labeled_x, batch.labeled_y)
    assert breakdown.l_total == expect_value
    assert breakdown.l_unsup == 0.0 and breakdown.l_upc == 0.0 and breakdown.l_sc == 0.0
    for name, g in grads.items():
        assert np.array_equal(g, expect_grads[name]), name


def test_total_loss_ablation_identity():
    # switching the contrastive terms on must not change the baseline terms
    state = sharp_state()
    for seed in range(10):
        batch = random_batch(70 + seed)
        base, _ = total_loss(state, batch, MethodFlags(True, False, False),
                             0.65, substream(80 + seed), strong_dropout=0.05)
        full, _ = total_loss(state, batch, ALL, 0.65, substream(80 + seed),
                             strong_dropout=0.05)
        assert abs(base.l_sup - full.l_sup) <= 1e-12
        assert abs(base.l_unsup - full.l_unsup) <= 1e-12
        assert base.l_total == base.l_sup + base.l_unsup


def test_total_loss_empty_unlabeled():
    state = sharp_state()
    batch = TrainBatch(substream(90).standard_normal((4, DIMS.input_dim)),
                       substream(91).integers(0, 3, 4),
                       np.zeros((0, DIMS.input_dim)))
    breakdown, grads = total_loss(state, batch, ALL, 0.65, substream(92))
    assert breakdown.n_confident == 0 and breakdown.n_unconfident == 0
    assert breakdown.l_unsup == 0.0 and breakdown.l_upc == 0.0 and breakdown.l_sc == 0.0
    assert breakdown.l_total == breakdown.l_sup
    assert grads.max_abs() > 0  # supervised part still trains


def test_total_loss_class_permutation_equivariance():
    state = sharp_state()
    rng = substream(95)
    perm = np.array([1, 2, 0])
    inv = np.argsort(perm)
    for seed in range(10):
        batch = random_batch(100 + seed)
        base, _ = total_loss(state, batch, ALL, 0.65, substream(200 + seed),
                             strong_dropout=0.05)
        permuted_state = state.with_params({"classifier.weight": state.classifier[perm]})
        permuted_batch = TrainBatch(batch.labeled_x, inv[batch.labeled_y], batch.unlabeled_x)
        other, _ = total_loss(permuted_state, permuted_batch, ALL, 0.65,
                              substream(200 + seed), strong_dropout=0.05)
        assert abs(base.l_total - other.l_total) <= 1e-12
        assert abs(base.l_upc - other.l_upc) <= 1e-12
        assert abs(base.l_sc - other.l_sc) <= 1e-12


def test_build_loss_graph_counts_degenerate_uniform():
    state = sharp_state()
    batch = random_batch(110, n_u=3)
    conf = np.full((3, 3), 1 / 3)
    conf[0] = [0.97, 0.02, 0.01]
    conf[1] = [0.6, 0.3, 0.1]
    terms, part, _ = build_loss_graph(state, batch, ALL, 0.65, substream(111),
                                      confidences=conf)
    assert part.degenerate_uniform == 1
    assert len(part.confident) == 1 and len(part.unconfident) == 2
    assert np.isfinite(terms["sc"].item())


def test_build_loss_graph_rejects_bad_pinned_shape():
    state = sharp_state()
    batch = random_batch(112, n_u=3)
    with pytest.raises(ShapeError):
        build_loss_graph(state, batch, ALL, 0.65, substream(113),
                         confidences=np.full((2, 3), 1 / 3))


def test_pinning_the_natural_confidences_changes_nothing():
    # feeding back the matrix the graph would compute must reproduce every
    # term bit for bit; the pin only matters when parameters move afterward
    state = sharp_state()
    batch = random_batch(114)
    knobs = dict(sigma_weak=0.05, sigma_strong=0.5, strong_dropout=0.05)
    free_terms, free_part, _ = build_loss_graph(state, batch, ALL, 0.65,
                                                substream(115), **knobs)
    replay = substream(115)
    xw = weak_augment(batch.unlabeled_x, replay, knobs["sigma_weak"])
    conf = class_confidence(state, featurize(state, xw))
    pinned_terms, pinned_part, _ = build_loss_graph(state, batch, ALL, 0.65,
                                                    substream(115),
                                                    confidences=conf, **knobs)
    assert pinned_part.confident == free_part.confident
    assert pinned_part.unconfident == free_part.unconfident
    for name in ("sup", "unsup", "upc", "sc"):
        assert pinned_terms[name].item() == free_terms[name].item(), name


def test_negative_mask_shapes_on_empty_sides():
    vs_c, vs_u = upc_negative_masks([0, 1], ())
    assert vs_c.shape == (2, 2) and vs_u.shape == (2, 0)
    svs_c, svs_u = sc_negative_masks((frozenset({0}),), [])
    assert svs_c.shape == (1, 0) and svs_u.shape == (1, 1)
    assert sc_negative_masks((frozenset(),), [0])[0].shape == (0, 1)
