"""Metric suite tests.

Oracles: hand evaluations of the small cases, a trapezoid-grid
integration oracle for the Gaussian overlap, and the closed form
2*Phi(-gap/2sigma) for equal-variance components.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from patchlens import formats, metrics
from patchlens.model import AdapterModel, TrainConfig, train_stage
from patchlens.rng import stream


# ---- dilation --------------------------------------------------------------


def test_dilate_zero_mask_stays_zero():
    np.testing.assert_array_equal(metrics.dilate(np.zeros((4, 4), dtype=np.uint8)),
                                  np.zeros((4, 4), dtype=np.uint8))


def test_dilate_center_becomes_block():
    m = np.zeros((5, 5), dtype=np.uint8)
    m[2, 2] = 1
    want = np.zeros((5, 5), dtype=np.uint8)
    want[1:4, 1:4] = 1
    np.testing.assert_array_equal(metrics.dilate(m), want)


def test_dilate_corner_clips():
    m = np.zeros((3, 3), dtype=np.uint8)
    m[0, 0] = 1
    want = np.zeros((3, 3), dtype=np.uint8)
    want[:2, :2] = 1
    np.testing.assert_array_equal(metrics.dilate(m), want)


# ---- plausibility ----------------------------------------------------------


def test_plausibility_full_mask_is_one():
    F = np.abs(stream(61, "pl").normal(size=(9, 3)))
    w = np.array([1.0, 0.5, 0.25])
    val = metrics.plausibility(F, w, np.ones((3, 3), dtype=np.uint8))
    assert abs(val - 1.0) < 1e-12


def test_plausibility_empty_mask_is_zero():
    F = np.abs(stream(62, "pl").normal(size=(25, 2)))
    val = metrics.plausibility(F, np.array([1.0, 1.0]),
                               np.zeros((5, 5), dtype=np.uint8))
    assert val == 0.0


def test_plausibility_hand_example_on_a_row_grid():
    # class map [2,2,0,0]; mask at cell 0 dilates (clipped) to [1,1,0,0]
    F = np.array([[2.0], [2.0], [0.0], [0.0]])
    w = np.array([1.0])
    val = metrics.plausibility(F, w, np.array([[1, 0, 0, 0]], dtype=np.uint8))
    assert abs(val - 1.0) < 1e-12
    val = metrics.plausibility(F, w, np.array([[0, 0, 0, 1]], dtype=np.uint8))
    assert val == 0.0


def test_plausibility_rectifies_negative_evidence():
    # the negative cell sits outside the dilation reach of the mask
    F = np.array([[-3.0], [0.0], [0.0], [0.0], [2.0]])
    w = np.array([1.0])
    mask = np.array([[0, 0, 0, 0, 1]], dtype=np.uint8)
    val = metrics.plausibility(F, w, mask)
    assert abs(val - 1.0) < 1e-12  # clamp removes the negative evidence
    raw = metrics.plausibility(F, w, mask, rectify=False)
    assert raw == 2.0 / (-1.0)  # sensitivity mode may leave [0,1]


def test_plausibility_zero_map_is_skipped():
    F = np.array([[-1.0], [-2.0]])
    assert metrics.plausibility(F, np.array([1.0]),
                                np.array([[1, 0]], dtype=np.uint8)) is None


def test_plausibility_monotone_under_mask_dilation():
    rng = stream(63, "mono")
    for _ in range(25):
        F = np.abs(rng.normal(size=(36, 4)))
        w = rng.normal(size=4)
        mask = (rng.random((6, 6)) < 0.3).astype(np.uint8)
        a = metrics.plausibility(F, w, mask)
        b = metrics.plausibility(F, w, metrics.dilate(mask))
        if a is not None and b is not None:
            assert b >= a - 1e-12


def test_plausibility_in_unit_interval():
    rng = stream(64, "unit")
    for _ in range(25):
        F = rng.normal(size=(16, 3))
        w = rng.normal(size=3)
        mask = (rng.random((4, 4)) < 0.5).astype(np.uint8)
        val = metrics.plausibility(F, w, mask)
        if val is not None:
            assert 0.0 <= val <= 1.0


# ---- patch contextualisation -----------------------------------------------


def test_contextualisation_extremes():
    cls = np.array([1.0, 2.0, 2.0])
    same = np.tile(cls, (5, 1))
    assert abs(metrics.patch_contextualisation(same, cls) - 1.0) < 1e-12
    ortho = np.tile([2.0, -1.0, 0.0], (5, 1))
    assert abs(metrics.patch_contextualisation(ortho, cls)) < 1e-12
    assert abs(metrics.patch_contextualisation(-same, cls) + 1.0) < 1e-12
    assert metrics.patch_contextualisation(np.zeros((3, 3)), cls) is None


def test_contextualisation_scale_invariant():
    rng = stream(65, "ctx")
    patches = rng.normal(size=(7, 5))
    cls = rng.normal(size=5)
    a = metrics.patch_contextualisation(patches, cls)
    b = metrics.patch_contextualisation(patches * 3.5, cls * 0.2)
    assert abs(a - b) < 1e-12


# ---- SID@k -----------------------------------------------------------------


def test_sid_at_one_is_always_one():
    rng = stream(66, "sid1")
    for _ in range(10):
        F = rng.normal(size=(12, 5))
        w = rng.normal(size=5)
        assert abs(metrics.sid_at_k(F, w, 1) - 1.0) < 1e-12


def test_sid_one_hot_maps_hand_value():
    # normalized one-hot maps become [2, 0]; each cell is owned by one
    # feature with softmax peak e^2/(e^2+1)
    a = 3.7
    F = np.array([[a, 0.0], [0.0, a]])
    w = np.array([1.0, -1.0])
    peak = math.exp(2.0) / (math.exp(2.0) + 1.0)
    assert abs(metrics.sid_at_k(F, w, 2) - peak) < 1e-12


def test_sid_identical_maps_floor():
    F = np.tile(np.array([[1.0], [3.0], [0.5]]), (1, 2))
    assert abs(metrics.sid_at_k(F, np.array([1.0, 1.0]), 2) - 0.5) < 1e-12


def test_sid_zero_map_counts_as_uniform():
    a = 3.0  # normalized hot map [2, 0] against a uniform half-half map
    F = np.array([[a, 0.0], [0.0, 0.0]])
    peak = math.exp(2.0) / (math.exp(2.0) + 1.0)
    want = (peak + 0.5) / 2.0
    assert abs(metrics.sid_at_k(F, np.array([1.0, 1.0]), 2) - want) < 1e-12


def test_sid_invariant_to_single_map_rescale():
    rng = stream(67, "sidscale")
    F = rng.normal(size=(9, 4))
    w = rng.normal(size=4)
    a = metrics.sid_at_k(F, w, 3)
    F2 = F.copy()
    F2[:, 1] *= 7.0
    assert abs(metrics.sid_at_k(F2, w, 3) - a) < 1e-12


def test_sid_selects_highest_weight_features():
    # feature 1 has tiny weight; k=1 must pick feature 0 (|w| ranking)
    F = np.array([[5.0, 0.0], [0.0, 5.0], [0.0, 5.0]])
    w = np.array([-2.0, 0.1])
    val = metrics.sid_at_k(F, w, 1)
    assert abs(val - 1.0) < 1e-12  # any single softmax sums to 1
    with pytest.raises(ValueError):
        metrics.sid_at_k(F, w, 3)


# ---- class independence ----------------------------------------------------


def test_tau_single_class_feature_contributes_zero():
    acts = np.array([[0.0], [0.0], [1.0], [1.0]])
    labels = np.array([0, 0, 1, 1])
    tau, excluded = metrics.class_independence(acts, labels, 2)
    assert excluded == 0
    assert abs(tau) < 1e-12


def test_tau_constant_feature_excluded():
    acts = np.full((4, 1), 5.0)
    tau, excluded = metrics.class_independence(acts, np.array([0, 0, 1, 1]), 2)
    assert tau is None and excluded == 1


def test_tau_equal_shares_hand_value():
    acts = np.array([[0.0], [1.0], [0.0], [1.0]])
    labels = np.array([0, 0, 1, 1])
    tau, excluded = metrics.class_independence(acts, labels, 2)
    assert excluded == 0
    assert abs(tau - 0.5) < 1e-12


def test_tau_range_on_balanced_data():
    rng = stream(68, "tau")
    labels = np.repeat(np.arange(4), 10)
    for _ in range(10):
        acts = rng.normal(size=(40, 6))
        tau, _ = metrics.class_independence(acts, labels, 4)
        assert 0.0 - 1e-12 <= tau <= 0.75 + 1e-12


# ---- contrastiveness -------------------------------------------------------


def test_overlap_identical_components_is_one():
    val = metrics.gaussian_overlap(np.array([0.5, 0.5]), np.array([1.0, 1.0]),
                                   np.array([2.0, 2.0]))
    assert abs(val - 1.0) < 1e-9


def test_overlap_matches_grid_integration_oracle():
    rng = stream(69, "quad")
    for _ in range(10):
        pi1 = rng.uniform(0.2, 0.8)
        pi = np.array([pi1, 1 - pi1])
        mu = rng.normal(scale=2.0, size=2)
        sigma = rng.uniform(0.3, 2.0, size=2)
        got = metrics.gaussian_overlap(pi, mu, sigma)
        lo = min(mu - 8 * sigma)
        hi = max(mu + 8 * sigma)
        xs = np.linspace(lo, hi, 400001)
        n1 = pi[0] * stats.norm.pdf(xs, mu[0], sigma[0])
        n2 = pi[1] * stats.norm.pdf(xs, mu[1], sigma[1])
        want = np.trapezoid(np.minimum(n1, n2), xs) / min(pi)
        assert abs(got - want) < 1e-6


def test_overlap_equal_variance_closed_form():
    # min of two equal-weight equal-sigma Gaussians integrates to
    # 2 Phi(-|mu1-mu2| / (2 sigma)); with the 1/min(pi) normalization the
    # overlap equals twice that integral of one tail pair
    for gap, sigma in ((1.0, 1.0), (2.0, 0.7), (0.5, 1.3)):
        got = metrics.gaussian_overlap(np.array([0.5, 0.5]),
                                       np.array([0.0, gap]),
                                       np.array([sigma, sigma]))
        want = 2.0 * stats.norm.cdf(-gap / (2.0 * sigma))
        assert abs(got - want) < 1e-9


def test_feature_overlap_two_tight_clusters_is_contrastive():
    rng = stream(70, "tight")
    x = np.concatenate([rng.normal(0.0, 0.01, size=500),
                        rng.normal(10.0, 0.01, size=500)])
    assert metrics.feature_overlap(x) < 0.01


def test_feature_overlap_unit_gap_matches_closed_form():
    rng = stream(71, "gap1")
    x = np.concatenate([rng.normal(0.0, 1.0, size=2500),
                        rng.normal(1.0, 1.0, size=2500)])
    want = 2.0 * stats.norm.cdf(-0.5)  # 0.6171 for the true parameters
    assert abs(metrics.feature_overlap(x) - want) < 0.03


def test_feature_overlap_affine_invariant():
    rng = stream(72, "affine")
    x = np.concatenate([rng.normal(0.0, 0.5, size=400),
                        rng.normal(3.0, 0.5, size=400)])
    a = metrics.feature_overlap(x)
    b = metrics.feature_overlap(3.0 * x - 7.0)
    assert abs(a - b) < 0.02


def test_contrastiveness_degenerate_feature_counts():
    rng = stream(73, "degen")
    acts = np.zeros((100, 2))
    acts[:, 0] = 4.2  # constant: cannot be contrastive
    acts[:50, 1] = 0.0
    acts[50:, 1] = 10.0
    acts[:, 1] += rng.normal(0, 0.01, size=100)
    value, overlaps, degenerate = metrics.contrastiveness(acts)
    assert degenerate == 1
    assert overlaps[0] == 1.0
    assert overlaps[1] < 0.01
    assert abs(value - (1.0 - (1.0 + overlaps[1]) / 2.0)) < 1e-12


def test_feature_overlap_needs_four_samples():
    with pytest.raises(ValueError):
        metrics.feature_overlap(np.array([1.0, 2.0, 3.0]))


# ---- evaluate --------------------------------------------------------------


def trained_separable(with_masks=True, with_cls=True):
    rng = stream(74, "eval")
    n_per, p, d = 12, 4, 6
    n = 2 * n_per
    labels = np.repeat([0, 1], n_per).astype(np.uint32)
    patches = rng.normal(scale=0.3, size=(n, p, d)).astype(np.float32)
    patches[:n_per, :, 0] += 3.0
    patches[n_per:, :, 0] -= 3.0
    masks = rng.integers(0, 2, size=(n, p)).astype(np.uint8) if with_masks else None
    cls = patches.mean(axis=1) if with_cls else None
    data = formats.EmbeddingSet(h_f=2, w_f=2, d=d, n_classes=2, labels=labels,
                                patches=patches, masks=masks, cls=cls)
    model = AdapterModel(d, 12, 6, 2, n_layers=2, seed=74, dropout_p=0.0)
    train_stage(model, data, TrainConfig(stage="dense", epochs=15,
                                         batch_size=8, lr=1e-2, seed=74))
    return model, data


def test_evaluate_separable_model_and_report():
    model, data = trained_separable()
    report = metrics.evaluate(model, data, k=3)
    assert report["accuracy"] == 1.0
    assert 0.0 <= report["plausibility"] <= 1.0
    assert 0.0 < report["sid_at_k"] <= 1.0
    assert 0.0 <= report["class_independence"] <= 1.0
    assert report["feature_space"] == "dense"
    text = metrics.report_to_json(report)
    assert text == metrics.report_to_json(metrics.evaluate(model, data, k=3))
    assert '"percent"' in text


def test_evaluate_without_masks_flags_reason():
    model, data = trained_separable(with_masks=False, with_cls=False)
    report = metrics.evaluate(model, data, k=3)
    assert report["plausibility"] is None
    assert report["plausibility_reason"] == "dataset has no masks"
    assert report["patch_contextualisation"] is None
    assert report["patch_contextualisation_reason"] \
        == "dataset has no CLS embeddings"


def test_evaluate_sparse_uses_selected_subspace():
    model, data = trained_separable(with_masks=False, with_cls=False)
    model.set_sparse_head(np.array([0, 2, 4]),
                          np.array([[1, 1, 0], [0, 1, 1]], dtype=np.uint8))
    report = metrics.evaluate(model, data, k=5)
    assert report["feature_space"] == "sparse"
    assert report["sid_k"] == 3  # capped to the selected subspace
