"""Extent-of-resection classification and GTR-vs-RT scoring.

A case is GTR when its enhancing-tissue volume is strictly below the
threshold (default 0.1 cm^3); a volume exactly at the threshold is RT.
Subgroups: every case is in All; cases whose ground truth is RT are
Positive; Positive cases whose prediction is also RT are TruePositive.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .errors import EmptyInput, InvalidSpec, NegativeVolume


class EorClass(enum.Enum):
    GTR = "GTR"
    RT = "RT"

    def __str__(self) -> str:  # manifest / CSV friendly
        return self.value


class SubgroupTag(enum.Enum):
    ALL = "All"
    POSITIVE = "Positive"
    TRUE_POSITIVE = "TruePositive"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class EorConfig:
    threshold_cm3: float = 0.1

    def __post_init__(self):
        if self.threshold_cm3 <= 0:
            raise InvalidSpec(f"threshold_cm3 must be positive, got {self.threshold_cm3}")


def classify_eor(et_volume_cm3: float, cfg: EorConfig = EorConfig()) -> EorClass:
    """GTR iff the volume is strictly below the threshold, else RT."""
    if et_volume_cm3 < 0:
        raise NegativeVolume(f"volume {et_volume_cm3} cm^3 is negative")
    return EorClass.GTR if et_volume_cm3 < cfg.threshold_cm3 else EorClass.RT


def assign_subgroups(gt_class: EorClass, pred_class: EorClass) -> set[SubgroupTag]:
    tags = {SubgroupTag.ALL}
    if gt_class is EorClass.RT:
        tags.add(SubgroupTag.POSITIVE)
        if pred_class is EorClass.RT:
            tags.add(SubgroupTag.TRUE_POSITIVE)
    return tags


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class ClassificationMetrics:
    """Macro-averaged two-class metrics plus per-class and micro views."""

    precision: float
    recall: float
    f1: float
    accuracy: float
    per_class: dict[str, ClassMetrics]
    micro_precision: float
    micro_recall: float
    micro_f1: float
    n: int
    degenerate_classes: tuple[str, ...]


def classification_metrics(pairs: list[tuple[EorClass, EorClass]]) -> ClassificationMetrics:
    """Score (gt, pred) pairs over the two classes GTR and RT.

    Per-class precision/recall/F1 are macro-averaged with equal class
    weight; a class with an empty denominator contributes 0 and is
    reported in ``degenerate_classes``.  Accuracy doubles as the micro
    precision/recall for this two-class, single-label setting.
    """
    if not pairs:
        raise EmptyInput("classification_metrics needs at least one (gt, pred) pair")
    classes = (EorClass.GTR, EorClass.RT)
    per_class: dict[str, ClassMetrics] = {}
    degenerate: list[str] = []
    for cls in classes:
        tp = sum(1 for g, p in pairs if g is cls and p is cls)
        fp = sum(1 for g, p in pairs if g is not cls and p is cls)
        fn = sum(1 for g, p in pairs if g is cls and p is not cls)
        if tp + fp == 0 or tp + fn == 0:
            degenerate.append(cls.value)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[cls.value] = ClassMetrics(precision, recall, f1, support=tp + fn)
    n = len(pairs)
    correct = sum(1 for g, p in pairs if g is p)
    accuracy = correct / n
    macro_p = sum(m.precision for m in per_class.values()) / len(classes)
    macro_r = sum(m.recall for m in per_class.values()) / len(classes)
    macro_f = sum(m.f1 for m in per_class.values()) / len(classes)
    return ClassificationMetrics(
        precision=macro_p, recall=macro_r, f1=macro_f, accuracy=accuracy,
        per_class=per_class,
        micro_precision=accuracy, micro_recall=accuracy, micro_f1=accuracy,
        n=n, degenerate_classes=tuple(degenerate),
    )
