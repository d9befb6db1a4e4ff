"""Cohort assembly, label harmonization, statistics, and report tables.

The flow: a manifest lists cases (ground truth plus one prediction per
model); predictions are harmonized into the canonical label scheme;
per-case metrics are computed once and cached as CSV; reports aggregate
the cached records into table-shaped blocks (per timepoint filter:
label x metric x subgroup cells, a volume summary, a classification
block, and a volume-quartile block).

Undefined metrics (both-empty cases under the default policy) are
``None`` throughout and excluded from means; each cell therefore
carries its own ``n``.  Not-applicable cells (a model that declares it
never emits some label) are ``None`` cells rendered blank.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as _scipy_stats

from .eor import (
    ClassificationMetrics,
    EorClass,
    EorConfig,
    classification_metrics,
    classify_eor,
)
from .errors import EmptyInput, InputError, TooFewCases, UnmappedLabel
from .metrics import TARGET_LABELS, MetricRecord, evaluate_case
from .nifti import LabelVolume, load_label_volume

BOOTSTRAP_RESAMPLES = 10_000
BOOTSTRAP_DEFAULT_SEED = 20240613

TABLE_METRICS = ("dice", "jaccard", "vsi")
DEFAULT_LABELS = ("ET", "ED", "CAV")
DEFAULT_FILTERS = ("all", "EPS", "LPS")
SUBGROUPS = ("All", "Positive", "TruePositive")
TIMEPOINTS = ("preop", "EPS", "LPS", "followup")

CSV_COLUMNS = (
    "case_id", "model", "timepoint", "label", "status",
    "dice", "jaccard", "vsi", "sensitivity", "specificity",
    "hausdorff95_mm", "gt_volume_cm3", "pred_volume_cm3",
)

CANONICAL_BY_NAME = {"ET": 1, "ED": 2, "CAV": 3}


# ---------------------------------------------------------------------------
# label harmonization

@dataclass(frozen=True)
class LabelScheme:
    """How one model's integer labels map into the canonical scheme.

    ``mapping`` sends each source label the model can emit to a
    canonical label 0..3 or the string ``"drop"`` (becomes background).
    ``absent`` names canonical labels the model never produces (their
    metric cells report as not-applicable).  Source label 0 is
    implicitly background unless mapped otherwise.
    """

    model: str
    mapping: dict[int, int | str] = field(default_factory=dict)
    absent: tuple[str, ...] = ()

    def __post_init__(self):
        for src, dst in self.mapping.items():
            if dst == "drop":
                continue
            if not isinstance(dst, int) or not 0 <= dst <= 3:
                raise InputError(f"scheme for {self.model!r}: {src} -> {dst!r} "
                                 "is not a canonical label or 'drop'")
        for name in self.absent:
            if name not in CANONICAL_BY_NAME:
                raise InputError(f"scheme for {self.model!r}: unknown absent label {name!r}")

    def absent_values(self) -> frozenset[int]:
        return frozenset(CANONICAL_BY_NAME[name] for name in self.absent)

    def applicable(self, target: str) -> bool:
        """False when the target involves a declared-absent label."""
        return not (set(TARGET_LABELS[target]) & self.absent_values())


def identity_scheme(model: str) -> LabelScheme:
    return LabelScheme(model=model, mapping={0: 0, 1: 1, 2: 2, 3: 3})


def harmonize(pred: LabelVolume, scheme: LabelScheme) -> LabelVolume:
    """Rewrite a prediction into the canonical {0: bg, 1: ET, 2: ED, 3: CAV}."""
    present = np.unique(pred.data)
    lut = np.zeros(256, dtype=np.uint8)
    for value in present:
        value = int(value)
        if value in scheme.mapping:
            dst = scheme.mapping[value]
            lut[value] = 0 if dst == "drop" else dst
        elif value == 0:
            lut[value] = 0
        else:
            raise UnmappedLabel(value, scheme.model)
    return LabelVolume(data=lut[pred.data], spacing=pred.spacing, affine=pred.affine)


# ---------------------------------------------------------------------------
# summary statistics

def summarize_mean_ci(values, confidence: float = 0.95, method: str = "t",
                      seed: int = BOOTSTRAP_DEFAULT_SEED,
                      resamples: int = BOOTSTRAP_RESAMPLES) -> tuple[float, float, float]:
    """Mean with a two-sided confidence interval.

    ``method="t"``: mean +/- t(n-1, (1+c)/2) * sd / sqrt(n) with the
    population standard deviation.  ``method="bootstrap"``: percentile
    interval over seeded resampled means (counter-based generator, so
    repeat runs are bit-identical).  A single value yields the
    degenerate interval (v, v, v) with a warning.
    """
    vals = np.asarray([v for v in values], dtype=np.float64)
    if vals.size == 0:
        raise EmptyInput("summarize_mean_ci needs at least one value")
    mean = float(vals.mean())
    if vals.size == 1:
        warnings.warn("confidence interval degenerate with n=1", stacklevel=2)
        return mean, mean, mean
    if method == "t":
        sd = float(vals.std(ddof=0))
        quantile = float(_scipy_stats.t.ppf(0.5 + confidence / 2.0, df=vals.size - 1))
        half = quantile * sd / np.sqrt(vals.size)
        return mean, mean - half, mean + half
    if method == "bootstrap":
        rng = np.random.Generator(np.random.Philox(key=seed))
        idx = rng.integers(0, vals.size, size=(resamples, vals.size))
        means = vals[idx].mean(axis=1)
        alpha = (1.0 - confidence) / 2.0
        lo = float(np.percentile(means, 100.0 * alpha, method="linear"))
        hi = float(np.percentile(means, 100.0 * (1.0 - alpha), method="linear"))
        return mean, lo, hi
    raise ValueError(f"unknown CI method {method!r}; expected 't' or 'bootstrap'")


def summarize_median_iqr(values) -> tuple[float, float, float]:
    """(median, q1, q3) with linear-interpolation quantiles."""
    vals = np.asarray([v for v in values], dtype=np.float64)
    if vals.size == 0:
        raise EmptyInput("summarize_median_iqr needs at least one value")
    q1, med, q3 = (float(q) for q in np.percentile(vals, [25.0, 50.0, 75.0], method="linear"))
    return med, q1, q3


@dataclass(frozen=True)
class QuartileBin:
    lo: float
    hi: float
    n: int
    mean: float | None
    median: float | None


def quartile_groups(volumes, values) -> list[QuartileBin]:
    """Bin (volume, value) pairs by volume quartiles.

    Edges at Q1/Q2/Q3 of the volumes; bins are half-open with ties on
    an edge falling into the lower bin, and the upper bin closed.
    """
    vols = np.asarray(list(volumes), dtype=np.float64)
    vals = np.asarray(list(values), dtype=np.float64)
    if vols.size != vals.size:
        raise InputError("volumes and values must pair up")
    if vols.size < 4:
        raise TooFewCases(f"quartile grouping needs >= 4 cases, got {vols.size}")
    q1, q2, q3 = np.percentile(vols, [25.0, 50.0, 75.0], method="linear")
    edges = [float(vols.min()), float(q1), float(q2), float(q3), float(vols.max())]
    bins = []
    for i in range(4):
        if i == 0:
            picked = vols <= q1
        elif i == 1:
            picked = (vols > q1) & (vols <= q2)
        elif i == 2:
            picked = (vols > q2) & (vols <= q3)
        else:
            picked = vols > q3
        chosen = vals[picked]
        bins.append(QuartileBin(
            lo=edges[i], hi=edges[i + 1], n=int(chosen.size),
            mean=float(chosen.mean()) if chosen.size else None,
            median=float(np.median(chosen)) if chosen.size else None,
        ))
    return bins


# ---------------------------------------------------------------------------
# case records and evaluation

@dataclass
class CaseRecord:
    """One case: identity, volumes (optional), and evaluated results.

    ``sequences`` and ``mask`` carry raw pipeline inputs when the case
    was generated in memory (native-grid renders); they are dropped
    after evaluation to keep cohorts streamable.
    """

    case_id: str
    center: str = ""
    timepoint: str = ""
    gt: LabelVolume | None = None
    predictions: dict[str, LabelVolume] = field(default_factory=dict)
    sequences: dict[str, object] = field(default_factory=dict)
    mask: LabelVolume | None = None
    # filled by evaluation:
    metrics: dict[str, list[MetricRecord]] = field(default_factory=dict)
    na_targets: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def record_for(self, model: str, label: str) -> MetricRecord | None:
        for rec in self.metrics.get(model, []):
            if rec.label == label:
                return rec
        return None

    def et_volumes(self, model: str) -> tuple[float, float] | None:
        rec = self.record_for(model, "ET")
        if rec is None:
            return None
        return rec.gt_volume_cm3, rec.pred_volume_cm3

    def drop_volumes(self) -> None:
        self.gt = None
        self.predictions = {}
        self.sequences = {}
        self.mask = None


def evaluate_record(case: CaseRecord, schemes: dict[str, LabelScheme] | None = None,
                    labels: tuple[str, ...] = DEFAULT_LABELS,
                    empty_policy: str = "undefined") -> CaseRecord:
    """Harmonize and score every prediction attached to a case in place."""
    if case.gt is None:
        raise InputError(f"case {case.case_id}: ground truth volume not loaded")
    for model in sorted(case.predictions):
        scheme = (schemes or {}).get(model) or identity_scheme(model)
        pred = harmonize(case.predictions[model], scheme)
        applicable = tuple(t for t in labels if scheme.applicable(t))
        case.metrics[model] = evaluate_case(case.gt, pred, labels=applicable,
                                            empty_policy=empty_policy,
                                            case_id=case.case_id)
        case.na_targets[model] = tuple(t for t in labels if not scheme.applicable(t))
    return case


# ---------------------------------------------------------------------------
# per-case metrics CSV cache

def _cell(value: float | None) -> str:
    return "" if value is None else repr(value)


def _uncell(text: str) -> float | None:
    return None if text == "" else float(text)


def metrics_csv_rows(cases: list[CaseRecord]) -> list[dict[str, str]]:
    rows = []
    for case in cases:
        for model in sorted(case.metrics):
            for rec in case.metrics[model]:
                rows.append({
                    "case_id": case.case_id, "model": model,
                    "timepoint": case.timepoint, "label": rec.label, "status": "ok",
                    "dice": _cell(rec.dice), "jaccard": _cell(rec.jaccard),
                    "vsi": _cell(rec.vsi), "sensitivity": _cell(rec.sensitivity),
                    "specificity": _cell(rec.specificity),
                    "hausdorff95_mm": _cell(rec.hausdorff95),
                    "gt_volume_cm3": _cell(rec.gt_volume_cm3),
                    "pred_volume_cm3": _cell(rec.pred_volume_cm3),
                })
            for label in case.na_targets.get(model, ()):
                rows.append({
                    "case_id": case.case_id, "model": model,
                    "timepoint": case.timepoint, "label": label, "status": "na",
                    "dice": "", "jaccard": "", "vsi": "", "sensitivity": "",
                    "specificity": "", "hausdorff95_mm": "",
                    "gt_volume_cm3": "", "pred_volume_cm3": "",
                })
    return rows


def write_metrics_csv(cases: list[CaseRecord], path: str | Path | None = None) -> str:
    """Serialize per-case records; fixed column order, repr-exact floats."""
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in metrics_csv_rows(cases):
        writer.writerow(row)
    text = out.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_metrics_csv(path: str | Path) -> list[CaseRecord]:
    """Rebuild CaseRecords (metrics only, no volumes) from the CSV cache."""
    return parse_metrics_csv(Path(path).read_text())


def parse_metrics_csv(text: str) -> list[CaseRecord]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
        raise InputError(f"metrics CSV columns {reader.fieldnames} do not match "
                         f"the documented schema {CSV_COLUMNS}")
    by_case: dict[str, CaseRecord] = {}
    for row in reader:
        case = by_case.setdefault(row["case_id"], CaseRecord(
            case_id=row["case_id"], timepoint=row["timepoint"]))
        model = row["model"]
        if row["status"] == "na":
            case.na_targets[model] = case.na_targets.get(model, ()) + (row["label"],)
            case.metrics.setdefault(model, [])
            continue
        case.metrics.setdefault(model, []).append(MetricRecord(
            case_id=row["case_id"], label=row["label"],
            dice=_uncell(row["dice"]), jaccard=_uncell(row["jaccard"]),
            vsi=_uncell(row["vsi"]), sensitivity=_uncell(row["sensitivity"]),
            specificity=_uncell(row["specificity"]),
            hausdorff95=_uncell(row["hausdorff95_mm"]),
            gt_volume_cm3=float(row["gt_volume_cm3"]),
            pred_volume_cm3=float(row["pred_volume_cm3"]),
        ))
    return list(by_case.values())


# ---------------------------------------------------------------------------
# report building

@dataclass(frozen=True)
class CellStats:
    n: int
    mean: float
    ci_low: float
    ci_high: float
    median: float
    q1: float
    q3: float


@dataclass(frozen=True)
class VolumeStats:
    n: int
    median: float
    q1: float
    q3: float


@dataclass
class FilterBlock:
    name: str
    n_cases: int
    subgroup_n: dict[str, int]
    eor_counts: dict[str, int]
    volumes: dict[str, VolumeStats | None]
    segmentation: dict[str, dict[str, dict[str, dict[str, CellStats | None]]]]
    classification: dict[str, ClassificationMetrics]
    quartiles: dict[str, list[QuartileBin] | None]


@dataclass
class CohortSummary:
    models: tuple[str, ...]
    labels: tuple[str, ...]
    filters: dict[str, FilterBlock]
    settings: dict[str, object]


def _filter_cases(cases: list[CaseRecord], name: str) -> list[CaseRecord]:
    if name == "all":
        return list(cases)
    return [c for c in cases if c.timepoint == name]


def _summarize_cell(values: list[float], ci_method: str, ci_seed: int) -> CellStats | None:
    if not values:
        return None
    mean, lo, hi = summarize_mean_ci(values, method=ci_method, seed=ci_seed)
    med, q1, q3 = summarize_median_iqr(values)
    return CellStats(n=len(values), mean=mean, ci_low=lo, ci_high=hi,
                     median=med, q1=q1, q3=q3)


def build_report(cases: list[CaseRecord], models: tuple[str, ...] | None = None,
                 labels: tuple[str, ...] = DEFAULT_LABELS,
                 filters: tuple[str, ...] = DEFAULT_FILTERS,
                 ci_method: str = "t", ci_seed: int = BOOTSTRAP_DEFAULT_SEED,
                 eor_cfg: EorConfig = EorConfig(),
                 tp_rule: str = "threshold") -> CohortSummary:
    """Aggregate evaluated cases into the table-shaped cohort summary.

    Per filter (all / EPS / LPS): a gt-volume block (median, IQR, EOR
    counts), segmentation cells for All / Positive / TruePositive
    subgroups, a GTR-vs-RT classification block per model, and a
    volume-quartile block over Positive cases.  Cells with no defined
    values (or not-applicable labels) are None.
    """
    if tp_rule not in ("threshold", "nonzero"):
        raise InputError(f"tp_rule must be 'threshold' or 'nonzero', got {tp_rule!r}")
    if models is None:
        seen: list[str] = []
        for case in cases:
            for model in case.metrics:
                if model not in seen:
                    seen.append(model)
        models = tuple(sorted(seen))
    blocks: dict[str, FilterBlock] = {}
    for fname in filters:
        chosen = _filter_cases(cases, fname)
        blocks[fname] = _build_filter_block(
            fname, chosen, models, labels, ci_method, ci_seed, eor_cfg, tp_rule)
    return CohortSummary(
        models=models, labels=labels, filters=blocks,
        settings={"ci_method": ci_method, "ci_seed": ci_seed,
                  "eor_threshold_cm3": eor_cfg.threshold_cm3, "tp_rule": tp_rule},
    )


def _case_classes(case: CaseRecord, model: str, eor_cfg: EorConfig,
                  tp_rule: str) -> tuple[EorClass, EorClass, bool] | None:
    """(gt class, pred class, tp-subgroup pred-RT flag) from ET volumes."""
    vols = case.et_volumes(model)
    if vols is None:
        return None
    gt_vol, pred_vol = vols
    gt_cls = classify_eor(gt_vol, eor_cfg)
    pred_cls = classify_eor(pred_vol, eor_cfg)
    tp_pred_rt = (pred_cls is EorClass.RT) if tp_rule == "threshold" else (pred_vol > 0)
    return gt_cls, pred_cls, tp_pred_rt


def _build_filter_block(fname: str, cases: list[CaseRecord], models: tuple[str, ...],
                        labels: tuple[str, ...], ci_method: str, ci_seed: int,
                        eor_cfg: EorConfig, tp_rule: str) -> FilterBlock:
    # gt volume summary + gt EOR counts (model-independent; read off the
    # first model that evaluated each case)
    volumes: dict[str, VolumeStats | None] = {}
    gt_vol_lists: dict[str, list[float]] = {label: [] for label in labels}
    eor_counts = {"GTR": 0, "RT": 0}
    positive_ids = set()
    for case in cases:
        gt_vol_et = None
        for model in models:
            vols = case.et_volumes(model)
            if vols is not None:
                gt_vol_et = vols[0]
                break
        if gt_vol_et is not None:
            cls = classify_eor(gt_vol_et, eor_cfg)
            eor_counts[cls.value] += 1
            if cls is EorClass.RT:
                positive_ids.add(case.case_id)
        for label in labels:
            for model in models:
                rec = case.record_for(model, label)
                if rec is not None:
                    gt_vol_lists[label].append(rec.gt_volume_cm3)
                    break
    for label in labels:
        vals = gt_vol_lists[label]
        if vals:
            med, q1, q3 = summarize_median_iqr(vals)
            volumes[label] = VolumeStats(n=len(vals), median=med, q1=q1, q3=q3)
        else:
            volumes[label] = None

    # subgroup membership per model
    seg: dict[str, dict[str, dict[str, dict[str, CellStats | None]]]] = {}
    subgroup_n = {"All": len(cases), "Positive": len(positive_ids), "TruePositive": 0}
    classification: dict[str, ClassificationMetrics] = {}
    quartiles: dict[str, list[QuartileBin] | None] = {}

    for sub in SUBGROUPS:
        seg[sub] = {}
        sub_labels = labels if sub == "All" else tuple(l for l in labels if l == "ET")
        for label in sub_labels:
            seg[sub][label] = {metric: {} for metric in TABLE_METRICS}

    tp_counts = []
    for model in models:
        pairs = []
        tp_ids = set()
        for case in cases:
            classes = _case_classes(case, model, eor_cfg, tp_rule)
            if classes is None:
                continue
            gt_cls, pred_cls, tp_pred_rt = classes
            pairs.append((gt_cls, pred_cls))
            if gt_cls is EorClass.RT and tp_pred_rt:
                tp_ids.add(case.case_id)
        if pairs:
            classification[model] = classification_metrics(pairs)
        tp_counts.append(len(tp_ids))

        members = {
            "All": {c.case_id for c in cases},
            "Positive": positive_ids,
            "TruePositive": tp_ids,
        }
        for sub in SUBGROUPS:
            sub_labels = labels if sub == "All" else ("ET",)
            for label in sub_labels:
                if label not in seg[sub]:
                    continue
                na = any(label in case.na_targets.get(model, ()) for case in cases)
                for metric in TABLE_METRICS:
                    if na:
                        seg[sub][label][metric][model] = None
                        continue
                    vals = []
                    for case in cases:
                        if case.case_id not in members[sub]:
                            continue
                        rec = case.record_for(model, label)
                        if rec is None:
                            continue
                        value = getattr(rec, metric)
                        if value is not None:
                            vals.append(value)
                    seg[sub][label][metric][model] = _summarize_cell(vals, ci_method, ci_seed)

        # Figure-3-shaped quartile block: Positive cases' gt ET volume vs Dice
        vols, dices = [], []
        for case in cases:
            if case.case_id not in positive_ids:
                continue
            rec = case.record_for(model, "ET")
            if rec is not None and rec.dice is not None:
                vols.append(rec.gt_volume_cm3)
                dices.append(rec.dice)
        try:
            quartiles[model] = quartile_groups(vols, dices)
        except TooFewCases:
            quartiles[model] = None

    subgroup_n["TruePositive"] = max(tp_counts) if tp_counts else 0
    return FilterBlock(name=fname, n_cases=len(cases), subgroup_n=subgroup_n,
                       eor_counts=eor_counts, volumes=volumes, segmentation=seg,
                       classification=classification, quartiles=quartiles)


# ---------------------------------------------------------------------------
# renderers

def _stats_dict(cell: CellStats | None):
    if cell is None:
        return None
    return {"n": cell.n, "mean": cell.mean, "ci_low": cell.ci_low,
            "ci_high": cell.ci_high, "median": cell.median,
            "q1": cell.q1, "q3": cell.q3}


def render_json(summary: CohortSummary) -> str:
    doc = {"models": list(summary.models), "labels": list(summary.labels),
           "settings": summary.settings, "filters": {}}
    for fname, block in summary.filters.items():
        fd = {
            "n_cases": block.n_cases,
            "subgroup_n": block.subgroup_n,
            "eor_counts": block.eor_counts,
            "volumes": {label: (None if v is None else
                                {"n": v.n, "median": v.median, "q1": v.q1, "q3": v.q3})
                        for label, v in block.volumes.items()},
            "segmentation": {
                sub: {label: {metric: {model: _stats_dict(cell)
                                       for model, cell in per_model.items()}
                              for metric, per_model in per_label.items()}
                      for label, per_label in per_sub.items()}
                for sub, per_sub in block.segmentation.items()},
            "classification": {
                model: {"precision": cm.precision, "recall": cm.recall,
                        "f1": cm.f1, "accuracy": cm.accuracy, "n": cm.n,
                        "degenerate_classes": list(cm.degenerate_classes),
                        "per_class": {name: {"precision": pc.precision,
                                             "recall": pc.recall, "f1": pc.f1,
                                             "support": pc.support}
                                      for name, pc in cm.per_class.items()}}
                for model, cm in block.classification.items()},
            "quartiles": {
                model: (None if bins is None else
                        [{"lo": b.lo, "hi": b.hi, "n": b.n,
                          "mean": b.mean, "median": b.median} for b in bins])
                for model, bins in block.quartiles.items()},
        }
        doc["filters"][fname] = fd
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def render_csv(summary: CohortSummary) -> str:
    """Long-format summary: one row per (filter, block, ...) cell."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["filter", "block", "subgroup", "label", "metric", "model",
                     "n", "mean", "ci_low", "ci_high", "median", "q1", "q3"])
    for fname in summary.filters:
        block = summary.filters[fname]
        for label, v in block.volumes.items():
            if v is None:
                continue
            writer.writerow([fname, "volume", "", label, "gt_volume_cm3", "",
                             v.n, "", "", "", repr(v.median), repr(v.q1), repr(v.q3)])
        writer.writerow([fname, "eor_counts", "", "", "GTR/RT", "",
                         block.n_cases, block.eor_counts["GTR"],
                         block.eor_counts["RT"], "", "", "", ""])
        for sub, per_sub in block.segmentation.items():
            for label, per_label in per_sub.items():
                for metric, per_model in per_label.items():
                    for model, cell in per_model.items():
                        if cell is None:
                            writer.writerow([fname, "segmentation", sub, label,
                                             metric, model, "", "", "", "", "", "", ""])
                        else:
                            writer.writerow([fname, "segmentation", sub, label,
                                             metric, model, cell.n, repr(cell.mean),
                                             repr(cell.ci_low), repr(cell.ci_high),
                                             repr(cell.median), repr(cell.q1),
                                             repr(cell.q3)])
        for model, cm in block.classification.items():
            for metric, value in (("precision", cm.precision), ("recall", cm.recall),
                                  ("f1", cm.f1), ("accuracy", cm.accuracy)):
                writer.writerow([fname, "classification", "", "", metric, model,
                                 cm.n, repr(value), "", "", "", "", ""])
        for model, bins in block.quartiles.items():
            if bins is None:
                continue
            for i, b in enumerate(bins, start=1):
                writer.writerow([fname, "quartile", f"Q{i}", "", "dice", model,
                                 b.n, "" if b.mean is None else repr(b.mean),
                                 repr(b.lo), repr(b.hi),
                                 "" if b.median is None else repr(b.median), "", ""])
    return out.getvalue()


def _fmt(x: float | None, digits: int = 3) -> str:
    return "" if x is None else f"{x:.{digits}f}"


def render_markdown(summary: CohortSummary) -> str:
    """Human-readable tables mirroring the summary blocks."""
    lines: list[str] = []
    titles = {"all": "All timepoints", "EPS": "Early postsurgical (EPS)",
              "LPS": "Late postsurgical (LPS)"}
    for fname, block in summary.filters.items():
        title = titles.get(fname, fname)
        lines.append(f"## {title} (n={block.n_cases})")
        lines.append("")
        if block.n_cases == 0:
            lines.append("_no cases_")
            lines.append("")
            continue

        lines.append(f"Ground-truth EOR: GTR {block.eor_counts['GTR']} / "
                     f"RT {block.eor_counts['RT']}")
        lines.append("")
        lines.append("### Ground-truth volumes, median (IQR) cm^3")
        lines.append("")
        lines.append("| Label | n | Median (IQR) |")
        lines.append("| --- | --- | --- |")
        for label, v in block.volumes.items():
            if v is None:
                lines.append(f"| {label} |  |  |")
            else:
                lines.append(f"| {label} | {v.n} | "
                             f"{_fmt(v.median, 2)} ({_fmt(v.q3 - v.q1, 2)}) |")
        lines.append("")

        lines.append("### Segmentation, mean (95% CI)")
        lines.append("")
        header = "| Subgroup | Label | Metric | " + " | ".join(summary.models) + " |"
        lines.append(header)
        lines.append("| --- | --- | --- | " + " | ".join("---" for _ in summary.models) + " |")
        metric_names = {"dice": "Dice", "jaccard": "JSC", "vsi": "VSI"}
        for sub in SUBGROUPS:
            per_sub = block.segmentation.get(sub, {})
            sub_title = {"All": "All cases", "Positive": "Positive",
                         "TruePositive": "True positives"}[sub]
            n_sub = block.subgroup_n.get(sub, 0)
            for label, per_label in per_sub.items():
                for metric in TABLE_METRICS:
                    cells = []
                    for model in summary.models:
                        cell = per_label[metric].get(model)
                        if cell is None:
                            cells.append("")
                        else:
                            cells.append(f"{_fmt(cell.mean)} ({_fmt(cell.ci_low)}, "
                                         f"{_fmt(cell.ci_high)}) [n={cell.n}]")
                    lines.append(f"| {sub_title} (n={n_sub}) | {label} | "
                                 f"{metric_names[metric]} | " + " | ".join(cells) + " |")
        lines.append("")

        if block.classification:
            lines.append("### EOR classification (GTR vs RT, macro-averaged)")
            lines.append("")
            lines.append("| Model | Precision | Recall | F1 | Accuracy |")
            lines.append("| --- | --- | --- | --- | --- |")
            for model in summary.models:
                cm = block.classification.get(model)
                if cm is None:
                    continue
                note = " *" if cm.degenerate_classes else ""
                lines.append(f"| {model}{note} | {_fmt(cm.precision)} | {_fmt(cm.recall)} "
                             f"| {_fmt(cm.f1)} | {_fmt(cm.accuracy)} |")
            if any(cm.degenerate_classes for cm in block.classification.values()):
                lines.append("")
                lines.append("\\* a class with an empty denominator contributed 0")
            lines.append("")

        if any(bins for bins in block.quartiles.values()):
            lines.append("### Dice by gt ET volume quartile (Positive cases)")
            lines.append("")
            lines.append("| Model | Bin | Volume range cm^3 | n | Mean | Median |")
            lines.append("| --- | --- | --- | --- | --- | --- |")
            for model in summary.models:
                bins = block.quartiles.get(model)
                if not bins:
                    continue
                for i, b in enumerate(bins, start=1):
                    lines.append(f"| {model} | Q{i} | {_fmt(b.lo, 2)}-{_fmt(b.hi, 2)} "
                                 f"| {b.n} | {_fmt(b.mean)} | {_fmt(b.median)} |")
            lines.append("")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# manifest I/O

@dataclass(frozen=True)
class ManifestCase:
    case_id: str
    gt: str
    predictions: dict[str, str] = field(default_factory=dict)
    center: str = ""
    timepoint: str = ""
    sequences: dict[str, str] = field(default_factory=dict)
    mask: str | None = None


def load_manifest(path: str | Path) -> tuple[list[ManifestCase], dict]:
    """Read a cohort manifest; returns (cases, extra metadata)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "cases" not in doc:
        raise InputError(f"manifest {path} must be an object with a 'cases' list")
    cases = []
    for i, entry in enumerate(doc["cases"]):
        if "case_id" not in entry:
            raise InputError(f"manifest case #{i} missing 'case_id'")
        cases.append(ManifestCase(
            case_id=entry["case_id"],
            gt=entry.get("gt", ""),
            predictions=dict(entry.get("predictions", {})),
            center=entry.get("center", ""),
            timepoint=entry.get("timepoint", ""),
            sequences=dict(entry.get("sequences", {})),
            mask=entry.get("mask"),
        ))
    meta = {k: v for k, v in doc.items() if k != "cases"}
    return cases, meta


def save_manifest(path: str | Path, cases: list[ManifestCase],
                  meta: dict | None = None) -> None:
    doc: dict = dict(meta or {})
    doc["cases"] = [
        {k: v for k, v in (
            ("case_id", c.case_id), ("center", c.center), ("timepoint", c.timepoint),
            ("gt", c.gt), ("predictions", c.predictions),
            ("sequences", c.sequences), ("mask", c.mask),
        ) if v not in ("", None, {})}
        for c in cases
    ]
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_schemes(path: str | Path) -> dict[str, LabelScheme]:
    """Read the label-scheme file: {model: {mapping: {src: dst}, absent: [...]}}."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"scheme file {path} is not valid JSON: {exc}") from exc
    schemes = {}
    for model, body in doc.items():
        mapping = {}
        for src, dst in body.get("mapping", {}).items():
            mapping[int(src)] = dst if dst == "drop" else int(dst)
        schemes[model] = LabelScheme(model=model, mapping=mapping,
                                     absent=tuple(body.get("absent", ())))
    return schemes


def evaluate_manifest(manifest_cases: list[ManifestCase],
                      schemes: dict[str, LabelScheme] | None = None,
                      labels: tuple[str, ...] = DEFAULT_LABELS,
                      empty_policy: str = "undefined",
                      base_dir: str | Path | None = None,
                      keep_volumes: bool = False) -> list[CaseRecord]:
    """Load, harmonize, and score every manifest case (volumes dropped)."""
    base = Path(base_dir) if base_dir is not None else None

    def resolve(p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() or base is None else base / path

    out = []
    for mc in manifest_cases:
        _, gt = load_label_volume(resolve(mc.gt))
        record = CaseRecord(case_id=mc.case_id, center=mc.center,
                            timepoint=mc.timepoint, gt=gt)
        for model, pred_path in sorted(mc.predictions.items()):
            _, pred = load_label_volume(resolve(pred_path))
            record.predictions[model] = pred
        evaluate_record(record, schemes, labels=labels, empty_policy=empty_policy)
        if not keep_volumes:
            record.drop_volumes()
        out.append(record)
    return out
