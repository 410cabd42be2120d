from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from factorda.dann import AdaptationState, ArchConfig, TrainBatch, build_model, train_step
from factorda.diffengine import ShapeError, softmax_cross_entropy
from factorda.factorworld import DomainSpec, load_accuracy_fixture
from factorda.fpda import (
    AssignmentError,
    FactorAssignment,
    apply_mask,
    compute_mask,
    fpda_train_step,
    group_masks,
    grouping_from_factor,
    sample_masks,
)

SIDES = FactorAssignment("marker_side", (1, 2, 3, 4), ("R", "L", "L", "R"))


def arch(m=4, **kw):
    base = dict(input_shape=(5,), num_classes=3, num_domains=m, conv_channels=(), feature_units=6,
                label_hidden=(4,), domain_hidden=(4, 4), dropout=0.5)
    base.update(kw)
    return ArchConfig(**base)


def batch(rng, n=8, m=4, domains=None):
    dom = rng.integers(0, m, n) if domains is None else np.asarray(domains)
    labels = rng.integers(0, 3, n)
    labels[: n // 4] = -1
    return TrainBatch(rng.standard_normal((n, 5)), labels, dom)


def params(model):
    return [t.values.copy() for ps in model.param_sets() for t in ps.values()]


# -------------------------------------------------------------------- masks


def test_mask_examples():
    np.testing.assert_array_equal(compute_mask(SIDES, 1), [0, 1, 1, 0])
    one = FactorAssignment("f", (1, 2, 3), ("a", "a", "a"))
    for k in range(3):
        np.testing.assert_array_equal(compute_mask(one, k), [1, 1, 1])
    uniq = FactorAssignment("f", (1, 2, 3), ("a", "b", "c"))
    for k in range(3):
        np.testing.assert_array_equal(compute_mask(uniq, k), np.eye(3)[k])


def test_mask_index_out_of_range():
    with pytest.raises(AssignmentError):
        compute_mask(SIDES, 4)


def test_group_masks_partition():
    masks = group_masks(SIDES)
    total = sum(masks.values())
    np.testing.assert_array_equal(total, np.ones(4))


@given(st.lists(st.integers(0, 3), min_size=1, max_size=9))
def test_masks_partition_and_contain_self(values):
    asg = FactorAssignment("f", tuple(range(len(values))), tuple(values))
    zs = [compute_mask(asg, k) for k in range(len(values))]
    for k, z in enumerate(zs):
        assert z[k] == 1.0
        assert set(np.unique(z)) <= {0.0, 1.0}
        for z2 in zs:
            assert np.array_equal(z, z2) or not np.any(z * z2)


@given(st.lists(st.integers(0, 2), min_size=2, max_size=7), st.randoms(use_true_random=False))
def test_mask_permutation_symmetry(values, rnd):
    m = len(values)
    perm = list(range(m))
    rnd.shuffle(perm)
    asg = FactorAssignment("f", tuple(range(m)), tuple(values))
    permuted = FactorAssignment("f", tuple(range(m)), tuple(values[perm[j]] for j in range(m)))
    for j in range(m):
        np.testing.assert_array_equal(compute_mask(permuted, j), compute_mask(asg, perm[j])[perm])


def test_apply_mask_examples():
    np.testing.assert_array_equal(apply_mask([0.2, -0.5, 0.3], [1, 0, 1]), [0.2, 0.0, 0.3])
    g = np.array([0.1, 0.2, 0.3])
    np.testing.assert_array_equal(apply_mask(g, np.ones(3)), g)
    out = apply_mask(g, [0, 1, 0])
    assert np.flatnonzero(out).tolist() == [1]
    with pytest.raises(ShapeError):
        apply_mask([1.0, 2.0], [1.0])


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6).flatmap(
    lambda g: st.tuples(st.just(g), st.lists(st.sampled_from([0.0, 1.0]), min_size=len(g), max_size=len(g)))))
def test_apply_mask_idempotent(gz):
    g, z = gz
    once = apply_mask(g, z)
    assert np.array_equal(apply_mask(once, z), once)


def test_sample_masks_rejects_uncovered_domain():
    with pytest.raises(AssignmentError):
        sample_masks(SIDES, np.array([0, 4]))


# --------------------------------------------------------------- assignments


def test_assignment_validation_and_restrict():
    with pytest.raises(AssignmentError):
        FactorAssignment("f", (1, 1), ("a", "b"))
    with pytest.raises(AssignmentError):
        FactorAssignment("f", (1,), ("a", "b"))
    r = SIDES.restrict((4, 2))
    assert r.domain_ids == (4, 2) and r.values == ("R", "L")
    with pytest.raises(AssignmentError):
        SIDES.restrict((5,))


def test_grouping_from_core50_hand():
    fx = load_accuracy_fixture()
    asg = grouping_from_factor(fx.domain_specs(), "hand")
    groups = {frozenset(v) for v in asg.groups().values()}
    assert groups == {frozenset({2, 3, 7, 9, 11}), frozenset({1, 4, 5, 6, 8, 10})}


def test_grouping_constant_factor_single_group():
    specs = [DomainSpec(i, {"light": "day"}) for i in (3, 1, 2)]
    asg = grouping_from_factor(specs, "light")
    assert asg.domain_ids == (1, 2, 3)
    assert list(asg.groups().values()) == [(1, 2, 3)]


def test_grouping_rejects_non_domain_factor():
    specs = [DomainSpec(1, {"pose": [0, 1]}), DomainSpec(2, {"pose": [1]})]
    with pytest.raises(AssignmentError, match="not a domain factor"):
        grouping_from_factor(specs, "pose")
    with pytest.raises(AssignmentError, match="not a domain factor"):
        grouping_from_factor(specs, "missing")


# --------------------------------------------------------------- train step


@pytest.mark.parametrize("mode", ["group", "literal"])
def test_single_group_is_bitwise_standard_da(mode):
    rng = np.random.default_rng(0)
    one = FactorAssignment("f", (1, 2, 3, 4), ("x",) * 4)
    a = build_model(arch(), np.random.default_rng(11))
    b = build_model(arch(), np.random.default_rng(11))
    for step in range(5):
        bt = batch(rng)
        la = train_step(a, bt, AdaptationState(step, 5), 0.1, rng=np.random.default_rng(step))
        lb = fpda_train_step(b, bt, AdaptationState(step, 5), 0.1, one, rng=np.random.default_rng(step), mode=mode)
        assert la == lb
    assert all(np.array_equal(x, y) for x, y in zip(params(a), params(b)))


def test_other_group_output_weights_silent_linear_head():
    rng = np.random.default_rng(1)
    model = build_model(arch(domain_hidden=(), dropout=0.0), np.random.default_rng(2))
    W = model.domain_head.params()["0.dense.W"]
    b = model.domain_head.params()["0.dense.b"]
    W0, b0 = W.values.copy(), b.values.copy()
    for step in range(6):  # a whole "epoch" of group-L samples (neurons 1 and 2)
        fpda_train_step(model, batch(rng, domains=rng.choice([1, 2], 8)), AdaptationState(step, 6), 0.2, SIDES)
    for j in (0, 3):
        assert np.array_equal(W.values[j], W0[j])
        assert b.values[j] == b0[j]
    assert not np.array_equal(W.values[1], W0[1])


@pytest.mark.parametrize("mode", ["group", "literal"])
def test_reported_domain_loss_is_unmasked(mode):
    rng = np.random.default_rng(3)
    model = build_model(arch(dropout=0.0), np.random.default_rng(4))
    bt = batch(rng)
    feats = model.extractor.forward(bt.images)
    expected, _ = softmax_cross_entropy(model.domain_head.forward(feats), bt.domain_labels)
    losses = fpda_train_step(model, bt, AdaptationState(2, 4), 0.1, SIDES, mode=mode)
    assert losses.domain == pytest.approx(expected, rel=1e-12)


def test_group_mode_gradient_is_restricted_softmax():
    # with a linear domain head on fixed inputs the bias step exposes the logit gradient
    rng = np.random.default_rng(5)
    model = build_model(arch(conv_channels=(), feature_units=0, label_hidden=(), domain_hidden=(), dropout=0.0),
                        np.random.default_rng(6))
    bt = batch(rng)
    logits = model.domain_head.forward(bt.images)
    z = sample_masks(SIDES, bt.domain_labels)
    e = np.exp(logits - logits.max(1, keepdims=True)) * z
    p = e / e.sum(1, keepdims=True)
    expected = ((p - np.eye(4)[bt.domain_labels]) * z).sum(0) / len(bt.images)
    b0 = model.domain_head.params()["0.dense.b"].values.copy()
    fpda_train_step(model, bt, AdaptationState(1, 2), 1.0, SIDES)
    np.testing.assert_allclose(b0 - model.domain_head.params()["0.dense.b"].values, expected, atol=1e-14)


def test_literal_mode_gradient_is_masked_full_softmax():
    rng = np.random.default_rng(5)
    model = build_model(arch(conv_channels=(), feature_units=0, label_hidden=(), domain_hidden=(), dropout=0.0),
                        np.random.default_rng(6))
    bt = batch(rng)
    logits = model.domain_head.forward(bt.images)
    z = sample_masks(SIDES, bt.domain_labels)
    _, g = softmax_cross_entropy(logits, bt.domain_labels)
    b0 = model.domain_head.params()["0.dense.b"].values.copy()
    fpda_train_step(model, bt, AdaptationState(1, 2), 1.0, SIDES, mode="literal")
    np.testing.assert_allclose(b0 - model.domain_head.params()["0.dense.b"].values, (g * z).sum(0), atol=1e-14)


def test_assignment_size_must_match_model():
    rng = np.random.default_rng(0)
    model = build_model(arch(m=3), rng)
    with pytest.raises(AssignmentError):
        fpda_train_step(model, batch(rng, m=3), AdaptationState(0, 1), 0.1, SIDES)
    with pytest.raises(ValueError):
        fpda_train_step(build_model(arch(), rng), batch(rng), AdaptationState(0, 1), 0.1, SIDES, mode="bogus")
