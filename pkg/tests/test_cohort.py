"""Label harmonization, summary statistics, and report-shape tests."""

import json
import math

import numpy as np
import pytest

import oracles
from eorpipe import (
    CaseRecord,
    EmptyInput,
    LabelScheme,
    MetricRecord,
    TooFewCases,
    UnmappedLabel,
    build_report,
    evaluate_record,
    harmonize,
    quartile_groups,
    render_csv,
    render_json,
    render_markdown,
    summarize_mean_ci,
    summarize_median_iqr,
)
from eorpipe.cohort import identity_scheme, parse_metrics_csv, write_metrics_csv
from eorpipe.nifti import LabelVolume


def lv(data, spacing=(1.0, 1.0, 1.0)):
    return LabelVolume(data=np.asarray(data, dtype=np.uint8),
                       spacing=spacing, affine=np.diag((*spacing, 1.0)))


# ---------------------------------------------------------------------------
# harmonize


def test_identity_scheme_is_noop():
    rng = np.random.default_rng(51)
    v = lv(rng.integers(0, 4, size=(5, 5, 5)))
    out = harmonize(v, identity_scheme("m"))
    assert np.array_equal(out.data, v.data)


def test_scheme_without_cavity():
    scheme = LabelScheme(model="two-label", mapping={1: 1, 2: 2}, absent=("CAV",))
    data = np.zeros((4, 4, 4), dtype=np.uint8)
    data[0, 0, 0] = 1
    data[1, 1, 1] = 2
    out = harmonize(lv(data), scheme)
    assert np.array_equal(out.data, data)
    assert not scheme.applicable("CAV")
    assert not scheme.applicable("TC")  # composite includes the missing label
    assert scheme.applicable("ET") and scheme.applicable("ED")


def test_harmonize_relabels_and_drops():
    scheme = LabelScheme(model="m", mapping={1: 2, 2: "drop", 3: 1})
    data = np.zeros((4, 4, 4), dtype=np.uint8)
    data[0] = 1
    data[1] = 2
    data[2] = 3
    out = harmonize(lv(data), scheme)
    assert np.count_nonzero(out.data == 2) == np.count_nonzero(data == 1)
    assert np.count_nonzero(out.data == 1) == np.count_nonzero(data == 3)
    # dropped labels become background; nothing else appears
    assert np.count_nonzero(out.data) == np.count_nonzero(np.isin(data, (1, 3)))


def test_harmonize_foreground_accounting():
    rng = np.random.default_rng(52)
    scheme = LabelScheme(model="m", mapping={1: 3, 2: "drop", 3: 3})
    for _ in range(20):
        data = rng.integers(0, 4, size=(6, 6, 6)).astype(np.uint8)
        out = harmonize(lv(data), scheme)
        kept = np.count_nonzero(np.isin(data, (1, 3)))
        assert np.count_nonzero(out.data) == kept
        assert out.data.size == data.size


def test_unmapped_label_raises():
    scheme = LabelScheme(model="m", mapping={1: 1})
    data = np.zeros((3, 3, 3), dtype=np.uint8)
    data[0, 0, 0] = 3
    with pytest.raises(UnmappedLabel) as err:
        harmonize(lv(data), scheme)
    assert "3" in str(err.value)


# ---------------------------------------------------------------------------
# mean / CI


def test_constant_list_degenerate_interval():
    mean, lo, hi = summarize_mean_ci([0.5] * 20, method="t")
    assert (mean, lo, hi) == (0.5, 0.5, 0.5)
    mean, lo, hi = summarize_mean_ci([0.5] * 20, method="bootstrap")
    assert (mean, lo, hi) == (0.5, 0.5, 0.5)


def test_t_interval_two_values():
    # df=1 Student t is Cauchy, so the 97.5% quantile is tan(0.475*pi)
    mean, lo, hi = summarize_mean_ci([0.0, 1.0], method="t")
    want_half = math.tan(0.475 * math.pi) * 0.5 / math.sqrt(2.0)
    assert mean == 0.5
    assert hi - mean == pytest.approx(want_half, abs=1e-9)
    assert mean - lo == pytest.approx(want_half, abs=1e-9)
    assert want_half == pytest.approx(4.4920, abs=1e-3)


def test_single_value_warns():
    with pytest.warns(UserWarning):
        assert summarize_mean_ci([0.7]) == (0.7, 0.7, 0.7)


def test_empty_rejected():
    with pytest.raises(EmptyInput):
        summarize_mean_ci([])
    with pytest.raises(EmptyInput):
        summarize_median_iqr([])


def test_bootstrap_deterministic_and_covering():
    rng = np.random.default_rng(53)
    vals = list(rng.uniform(0.2, 0.9, 30))
    first = summarize_mean_ci(vals, method="bootstrap")
    second = summarize_mean_ci(vals, method="bootstrap")
    assert first == second  # bit-identical rerun
    mean, lo, hi = first
    assert lo <= mean <= hi
    assert summarize_mean_ci(vals, method="bootstrap", seed=99) != first


def test_bootstrap_interval_shrinks_when_replicated():
    rng = np.random.default_rng(54)
    vals = list(rng.uniform(0.0, 1.0, 12))
    _, lo1, hi1 = summarize_mean_ci(vals, method="bootstrap")
    _, lo4, hi4 = summarize_mean_ci(vals * 4, method="bootstrap")
    assert hi4 - lo4 < hi1 - lo1


def test_unknown_method_rejected():
    with pytest.raises(ValueError):
        summarize_mean_ci([1.0, 2.0], method="jackknife")


# ---------------------------------------------------------------------------
# median / IQR


def test_median_iqr_textbook():
    assert summarize_median_iqr([1, 2, 3, 4, 5]) == (3.0, 2.0, 4.0)
    assert summarize_median_iqr([7.0]) == (7.0, 7.0, 7.0)


def test_median_iqr_order_free():
    rng = np.random.default_rng(55)
    vals = list(rng.normal(size=17))
    base = summarize_median_iqr(vals)
    for _ in range(5):
        shuffled = [vals[i] for i in rng.permutation(len(vals))]
        assert summarize_median_iqr(shuffled) == base
    med, q1, q3 = base
    assert q1 <= med <= q3
    assert q1 == oracles.percentile_linear(vals, 25.0)
    assert q3 == oracles.percentile_linear(vals, 75.0)


# ---------------------------------------------------------------------------
# quartile bins


def test_eight_distinct_volumes_split_evenly():
    vols = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]
    bins = quartile_groups(vols, [0.5] * 8)
    assert [b.n for b in bins] == [2, 2, 2, 2]


def test_edge_ties_fall_into_lower_bin():
    bins = quartile_groups([1.0, 2.0, 2.0, 3.0], [0.1, 0.2, 0.3, 0.4])
    # both 2.0s sit exactly on the median edge and go to the lower bin
    assert [b.n for b in bins] == [1, 2, 0, 1]


def test_monotone_volume_dice_relation():
    rng = np.random.default_rng(56)
    vols = sorted(rng.uniform(0.5, 30.0, 24))
    dices = [0.5 + 0.4 * i / 23 for i in range(24)]  # increasing with volume
    bins = quartile_groups(vols, dices)
    means = [b.mean for b in bins]
    assert all(b.n > 0 for b in bins)
    assert means == sorted(means)


def test_too_few_cases():
    with pytest.raises(TooFewCases):
        quartile_groups([1.0, 2.0, 3.0], [0.1, 0.2, 0.3])


# ---------------------------------------------------------------------------
# case evaluation and the CSV cache


def two_model_cases():
    rng = np.random.default_rng(57)
    cases = []
    full = identity_scheme("full")
    slim = LabelScheme(model="slim", mapping={1: 1, 2: 2}, absent=("CAV",))
    for k in range(4):
        gt = rng.integers(0, 4, size=(6, 6, 6)).astype(np.uint8)
        noisy = gt.copy()
        flip = rng.random(gt.shape) < 0.1
        noisy[flip] = rng.integers(0, 4, size=int(flip.sum()))
        slim_pred = noisy.copy()
        slim_pred[slim_pred == 3] = 0
        case = CaseRecord(case_id=f"c{k}", timepoint="EPS" if k % 2 else "LPS",
                          gt=lv(gt),
                          predictions={"full": lv(noisy), "slim": lv(slim_pred)})
        evaluate_record(case, schemes={"full": full, "slim": slim})
        cases.append(case)
    return cases


def test_evaluate_record_respects_absent_labels():
    case = two_model_cases()[0]
    assert {r.label for r in case.metrics["full"]} == {"ET", "ED", "CAV"}
    assert {r.label for r in case.metrics["slim"]} == {"ET", "ED"}
    assert case.na_targets["slim"] == ("CAV",)
    assert case.na_targets["full"] == ()


def test_metrics_csv_roundtrip():
    cases = two_model_cases()
    text = write_metrics_csv(cases)
    parsed = parse_metrics_csv(text)
    assert [c.case_id for c in parsed] == [c.case_id for c in cases]
    for orig, back in zip(cases, parsed):
        assert back.timepoint == orig.timepoint
        for model in orig.metrics:
            # models without NA rows come back with no na_targets entry
            assert back.na_targets.get(model, ()) == orig.na_targets.get(model, ())
        assert back.metrics == orig.metrics  # repr-exact float round trip


def test_csv_schema_enforced():
    with pytest.raises(Exception):
        parse_metrics_csv("case_id,model\nx,y\n")


# ---------------------------------------------------------------------------
# report building


def make_record(case_id, label, dice_value, gt_vol, pred_vol):
    return MetricRecord(case_id=case_id, label=label, dice=dice_value,
                        jaccard=dice_value / (2 - dice_value) if dice_value is not None else None,
                        vsi=dice_value, sensitivity=dice_value, specificity=1.0,
                        hausdorff95=0.0, gt_volume_cm3=gt_vol, pred_volume_cm3=pred_vol)


def synthetic_cohort():
    """36 EPS cases: 23 GTR / 13 RT ground truth, 11 predictions also RT."""
    rng = np.random.default_rng(58)
    cases = []
    for k in range(36):
        rt = k < 13
        pred_rt = k < 11  # two RT cases predicted GTR
        gt_vol = 1.0 + k * 0.25 if rt else 0.0
        pred_vol = gt_vol if pred_rt else 0.0
        d = None if (not rt and pred_vol == 0.0) else float(rng.uniform(0.7, 1.0))
        case = CaseRecord(case_id=f"s{k:02d}", timepoint="EPS")
        case.metrics["m"] = [make_record(case.case_id, "ET", d, gt_vol, pred_vol)]
        case.na_targets["m"] = ()
        cases.append(case)
    return cases


def test_report_subgroup_counts():
    report = build_report(synthetic_cohort(), labels=("ET",), filters=("all", "EPS"))
    block = report.filters["EPS"]
    assert block.n_cases == 36
    assert block.subgroup_n == {"All": 36, "Positive": 13, "TruePositive": 11}
    assert block.eor_counts == {"GTR": 23, "RT": 13}
    cls = block.classification["m"]
    assert cls.accuracy == pytest.approx(34 / 36)
    assert report.filters["all"].subgroup_n["All"] == 36


def test_report_cell_matches_closed_form():
    cases = []
    dices = [0.8, 0.9, 1.0]
    for k, d in enumerate(dices):
        case = CaseRecord(case_id=f"k{k}", timepoint="EPS")
        case.metrics["m"] = [make_record(case.case_id, "ET", d, 1.0, 1.0)]
        cases.append(case)
    report = build_report(cases, labels=("ET",), filters=("all",), ci_method="t")
    cell = report.filters["all"].segmentation["All"]["ET"]["dice"]["m"]
    assert cell.n == 3
    assert cell.mean == pytest.approx(0.9, abs=1e-12)
    assert cell.median == pytest.approx(0.9, abs=1e-12)
    assert cell.ci_low <= cell.mean <= cell.ci_high
    assert cell.q1 <= cell.median <= cell.q3


def test_perfect_predictor_block():
    rng = np.random.default_rng(59)
    cases = []
    for k in range(6):
        gt = rng.integers(0, 4, size=(6, 6, 6)).astype(np.uint8)
        case = CaseRecord(case_id=f"p{k}", timepoint="EPS", gt=lv(gt),
                          predictions={"m": lv(gt.copy())})
        evaluate_record(case)
        cases.append(case)
    report = build_report(cases, filters=("all",))
    block = report.filters["all"]
    for label in report.labels:
        cell = block.segmentation["All"][label]["dice"]["m"]
        assert cell.mean == 1.0 and cell.ci_low == 1.0 and cell.ci_high == 1.0
    assert block.classification["m"].accuracy == 1.0


def test_filter_commutes_with_model_selection():
    cases = two_model_cases()
    joint = build_report(cases, models=("full", "slim"), filters=("EPS",))
    narrowed = build_report([c for c in cases if c.timepoint == "EPS"],
                            models=("full",), filters=("all",))
    a = joint.filters["EPS"].segmentation
    b = narrowed.filters["all"].segmentation
    for sub in a:
        for label in a[sub]:
            assert a[sub][label]["dice"]["full"] == b[sub][label]["dice"]["full"]


def test_report_reproducible_from_csv():
    cases = two_model_cases()
    rebuilt = parse_metrics_csv(write_metrics_csv(cases))
    r1 = build_report(cases)
    r2 = build_report(rebuilt)
    assert render_json(r1) == render_json(r2)


def test_na_cells_render_blank():
    cases = two_model_cases()
    report = build_report(cases)
    assert report.filters["all"].segmentation["All"]["CAV"]["dice"]["slim"] is None
    doc = json.loads(render_json(report))
    assert doc["filters"]["all"]["segmentation"]["All"]["CAV"]["dice"]["slim"] is None
    md = render_markdown(report)
    assert "slim" in md and "Positive" in md
    csv_text = render_csv(report)
    assert any(line.endswith(",") or ",," in line
               for line in csv_text.splitlines() if ",CAV," in line)
