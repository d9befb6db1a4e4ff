"""Resection-class decision rule and GTR/RT scoring tests."""

import numpy as np
import pytest

import oracles
from eorpipe import (
    EmptyInput,
    EorClass,
    EorConfig,
    NegativeVolume,
    SubgroupTag,
    assign_subgroups,
    classification_metrics,
    classify_eor,
)
from eorpipe.errors import InvalidSpec

GTR, RT = EorClass.GTR, EorClass.RT


# ---------------------------------------------------------------------------
# decision rule


def test_threshold_boundary():
    assert classify_eor(0.0) is GTR
    assert classify_eor(0.0999) is GTR
    assert classify_eor(0.1) is RT  # boundary lands on the residual side
    assert classify_eor(5.0) is RT


def test_negative_volume_rejected():
    with pytest.raises(NegativeVolume):
        classify_eor(-1e-9)


def test_custom_threshold():
    cfg = EorConfig(threshold_cm3=1.0)
    assert classify_eor(0.5, cfg) is GTR
    assert classify_eor(1.0, cfg) is RT


def test_nonpositive_threshold_rejected():
    with pytest.raises(InvalidSpec):
        EorConfig(threshold_cm3=0.0)
    with pytest.raises(InvalidSpec):
        EorConfig(threshold_cm3=-0.1)


def test_threshold_monotone():
    # raising the threshold can only move cases toward GTR
    rng = np.random.default_rng(41)
    volumes = rng.uniform(0.0, 1.0, 300)
    thresholds = sorted(rng.uniform(0.01, 1.2, 10))
    for v in volumes:
        previous_gtr = False
        for t in thresholds:
            is_gtr = classify_eor(float(v), EorConfig(threshold_cm3=t)) is GTR
            assert is_gtr or not previous_gtr
            previous_gtr = is_gtr


# ---------------------------------------------------------------------------
# subgroups


def test_subgroup_assignment():
    assert assign_subgroups(GTR, GTR) == {SubgroupTag.ALL}
    assert assign_subgroups(GTR, RT) == {SubgroupTag.ALL}
    assert assign_subgroups(RT, GTR) == {SubgroupTag.ALL, SubgroupTag.POSITIVE}
    assert assign_subgroups(RT, RT) == {SubgroupTag.ALL, SubgroupTag.POSITIVE,
                                        SubgroupTag.TRUE_POSITIVE}


def test_subgroup_nesting():
    rng = np.random.default_rng(42)
    for _ in range(50):
        pairs = [(GTR if rng.random() < 0.5 else RT,
                  GTR if rng.random() < 0.5 else RT)
                 for _ in range(rng.integers(1, 40))]
        counts = {tag: 0 for tag in SubgroupTag}
        for g, p in pairs:
            for tag in assign_subgroups(g, p):
                counts[tag] += 1
        assert counts[SubgroupTag.TRUE_POSITIVE] <= counts[SubgroupTag.POSITIVE]
        assert counts[SubgroupTag.POSITIVE] <= counts[SubgroupTag.ALL]
        assert counts[SubgroupTag.ALL] == len(pairs)


# ---------------------------------------------------------------------------
# classification metrics


def test_all_correct():
    m = classification_metrics([(GTR, GTR), (RT, RT), (GTR, GTR), (RT, RT)])
    assert (m.precision, m.recall, m.f1, m.accuracy) == (1.0, 1.0, 1.0, 1.0)
    assert m.degenerate_classes == ()


def test_hand_computed_cohort():
    pairs = [(RT, RT), (RT, GTR), (GTR, GTR), (GTR, GTR)]
    m = classification_metrics(pairs)
    assert m.accuracy == pytest.approx(0.75)
    assert m.per_class["RT"].precision == pytest.approx(1.0)
    assert m.per_class["RT"].recall == pytest.approx(0.5)
    assert m.per_class["RT"].f1 == pytest.approx(2.0 / 3.0)
    assert m.per_class["GTR"].precision == pytest.approx(2.0 / 3.0)
    assert m.per_class["GTR"].recall == pytest.approx(1.0)
    assert m.per_class["GTR"].f1 == pytest.approx(0.8)
    assert m.precision == pytest.approx(5.0 / 6.0)
    assert m.recall == pytest.approx(0.75)
    assert m.f1 == pytest.approx((2.0 / 3.0 + 0.8) / 2.0)


def test_single_class_cohort_flagged():
    m = classification_metrics([(GTR, GTR)] * 5)
    assert m.accuracy == 1.0
    assert "RT" in m.degenerate_classes
    assert m.per_class["RT"].precision == 0.0
    assert m.per_class["RT"].support == 0


def test_empty_input():
    with pytest.raises(EmptyInput):
        classification_metrics([])


def test_matches_confusion_oracle():
    rng = np.random.default_rng(43)
    for _ in range(100):
        n = int(rng.integers(1, 30))
        pairs = [(GTR if rng.random() < 0.5 else RT,
                  GTR if rng.random() < 0.5 else RT) for _ in range(n)]
        gt = [g.value for g, _ in pairs]
        pred = [p.value for _, p in pairs]
        per_class, mp, mr, mf, acc = oracles.confusion_metrics(gt, pred)
        m = classification_metrics(pairs)
        assert m.accuracy == pytest.approx(acc, abs=1e-15)
        assert m.precision == pytest.approx(mp, abs=1e-15)
        assert m.recall == pytest.approx(mr, abs=1e-15)
        assert m.f1 == pytest.approx(mf, abs=1e-15)
        for cls in ("GTR", "RT"):
            got = m.per_class[cls]
            assert (got.precision, got.recall, got.f1) == pytest.approx(per_class[cls])


def test_order_invariance():
    rng = np.random.default_rng(44)
    pairs = [(GTR if rng.random() < 0.4 else RT,
              GTR if rng.random() < 0.6 else RT) for _ in range(25)]
    base = classification_metrics(pairs)
    for _ in range(10):
        perm = [pairs[i] for i in rng.permutation(len(pairs))]
        m = classification_metrics(perm)
        assert m == base


def test_accuracy_is_micro_average():
    rng = np.random.default_rng(45)
    for _ in range(30):
        pairs = [(GTR if rng.random() < 0.5 else RT,
                  GTR if rng.random() < 0.5 else RT)
                 for _ in range(rng.integers(1, 20))]
        m = classification_metrics(pairs)
        assert m.micro_precision == m.accuracy
        assert m.micro_recall == m.accuracy
        assert m.micro_f1 == m.accuracy
