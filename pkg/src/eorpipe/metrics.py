"""Per-case segmentation metrics: overlap, volumetric, and surface distance.

All metrics operate on :class:`BinaryMask` pairs on identical grids and
return plain floats, or ``None`` where a value is undefined (both masks
empty under the default policy, sensitivity with an empty ground truth,
surface distance against an empty mask).  ``None`` propagates into
cohort aggregation as "excluded from the mean", never as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import GeometryMismatch, NegativeVolume
from .nifti import LabelVolume

# Canonical label targets: singles plus the BraTS-style composites.
TARGET_LABELS: dict[str, tuple[int, ...]] = {
    "ET": (1,),
    "ED": (2,),
    "CAV": (3,),
    "WT": (1, 2, 3),
    "TC": (1, 3),
}

EMPTY_POLICIES = ("one", "undefined")


@dataclass(frozen=True)
class BinaryMask:
    """A boolean voxel mask plus the geometry of its parent volume."""

    data: np.ndarray = field(repr=False)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=bool))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))


@dataclass(frozen=True)
class MetricRecord:
    """One label's metrics for one case; None marks undefined values."""

    case_id: str
    label: str
    dice: float | None
    jaccard: float | None
    vsi: float | None
    sensitivity: float | None
    specificity: float | None
    hausdorff95: float | None
    gt_volume_cm3: float
    pred_volume_cm3: float


def extract_mask(lv: LabelVolume, target: str) -> BinaryMask:
    """Select the voxels of one label or composite (ET/ED/CAV/WT/TC)."""
    try:
        members = TARGET_LABELS[target]
    except KeyError:
        raise KeyError(f"unknown label target {target!r}; expected one of "
                       f"{sorted(TARGET_LABELS)}") from None
    mask = np.isin(lv.data, members)
    return BinaryMask(data=mask, spacing=lv.spacing)


def _check_pair(gt: BinaryMask, pred: BinaryMask) -> None:
    if gt.dims != pred.dims:
        raise GeometryMismatch(f"mask dims differ: {gt.dims} vs {pred.dims}")
    if not np.allclose(gt.spacing, pred.spacing, atol=1e-6):
        raise GeometryMismatch(f"mask spacing differs: {gt.spacing} vs {pred.spacing}")


def _check_policy(empty_policy: str) -> None:
    if empty_policy not in EMPTY_POLICIES:
        raise ValueError(f"empty_policy must be one of {EMPTY_POLICIES}")


def dice(gt: BinaryMask, pred: BinaryMask, empty_policy: str = "undefined") -> float | None:
    """2|A∩B| / (|A|+|B|); both-empty resolves per the policy."""
    _check_pair(gt, pred)
    _check_policy(empty_policy)
    na, nb = gt.count, pred.count
    if na + nb == 0:
        return 1.0 if empty_policy == "one" else None
    inter = int(np.count_nonzero(gt.data & pred.data))
    return 2 * inter / (na + nb)


def jaccard(gt: BinaryMask, pred: BinaryMask, empty_policy: str = "undefined") -> float | None:
    """|A∩B| / |A∪B|; both-empty resolves per the policy."""
    _check_pair(gt, pred)
    _check_policy(empty_policy)
    na, nb = gt.count, pred.count
    if na + nb == 0:
        return 1.0 if empty_policy == "one" else None
    inter = int(np.count_nonzero(gt.data & pred.data))
    return inter / (na + nb - inter)


def volumetric_similarity(gt: BinaryMask, pred: BinaryMask,
                          empty_policy: str = "undefined") -> float | None:
    """1 - ||A|-|B|| / (|A|+|B|); both-empty resolves per the policy."""
    _check_pair(gt, pred)
    _check_policy(empty_policy)
    na, nb = gt.count, pred.count
    if na + nb == 0:
        return 1.0 if empty_policy == "one" else None
    return 1.0 - abs(na - nb) / (na + nb)


def sensitivity_specificity(gt: BinaryMask, pred: BinaryMask) -> tuple[float | None, float | None]:
    """Voxel-wise TP/(TP+FN) and TN/(TN+FP); None on an empty denominator."""
    _check_pair(gt, pred)
    total = int(np.prod(gt.dims))
    tp = int(np.count_nonzero(gt.data & pred.data))
    gt_count = gt.count
    union = gt_count + pred.count - tp
    sens = tp / gt_count if gt_count else None
    negatives = total - gt_count
    spec = (total - union) / negatives if negatives else None
    return sens, spec


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-neighbour background or on the border."""
    m = np.asarray(mask, dtype=bool)
    interior = np.zeros_like(m)
    if all(n > 2 for n in m.shape):
        interior[1:-1, 1:-1, 1:-1] = (
            m[1:-1, 1:-1, 1:-1]
            & m[:-2, 1:-1, 1:-1] & m[2:, 1:-1, 1:-1]
            & m[1:-1, :-2, 1:-1] & m[1:-1, 2:, 1:-1]
            & m[1:-1, 1:-1, :-2] & m[1:-1, 1:-1, 2:]
        )
    return m & ~interior


def _percentile95(values: np.ndarray) -> float:
    return float(np.percentile(values, 95.0, method="linear"))


def hausdorff95(gt: BinaryMask, pred: BinaryMask,
                spacing: tuple[float, float, float] | None = None) -> float | None:
    """95th-percentile symmetric surface distance in world millimetres.

    Surfaces use 6-connectivity (volume-border voxels count as surface);
    each direction takes the linear-interpolation 95th percentile of
    nearest-surface distances, and the result is the max of the two.
    Returns None when either mask is empty.
    """
    _check_pair(gt, pred)
    if spacing is None:
        spacing = gt.spacing
    if gt.count == 0 or pred.count == 0:
        return None
    sp = np.asarray(spacing, dtype=np.float64)
    pts_a = np.argwhere(surface_mask(gt.data)) * sp
    pts_b = np.argwhere(surface_mask(pred.data)) * sp
    tree_a = cKDTree(pts_a)
    tree_b = cKDTree(pts_b)
    d_ab, _ = tree_b.query(pts_a, k=1)
    d_ba, _ = tree_a.query(pts_b, k=1)
    return max(_percentile95(d_ab), _percentile95(d_ba))


def volume_cm3(mask: BinaryMask, spacing: tuple[float, float, float] | None = None) -> float:
    """Foreground volume in cm^3: count * sx*sy*sz / 1000."""
    if spacing is None:
        spacing = mask.spacing
    if any(s <= 0 for s in spacing):
        raise NegativeVolume(f"non-positive spacing {spacing}")
    return mask.count * spacing[0] * spacing[1] * spacing[2] / 1000.0


def evaluate_case(gt: LabelVolume, pred: LabelVolume,
                  labels: tuple[str, ...] = ("ET", "ED", "CAV"),
                  empty_policy: str = "undefined",
                  case_id: str = "") -> list[MetricRecord]:
    """Compute every metric for each requested label/composite."""
    if gt.dims != pred.dims:
        raise GeometryMismatch(f"volume dims differ: {gt.dims} vs {pred.dims}")
    if not np.allclose(gt.spacing, pred.spacing, atol=1e-6):
        raise GeometryMismatch(f"volume spacing differs: {gt.spacing} vs {pred.spacing}")
    records = []
    for label in labels:
        gm = extract_mask(gt, label)
        pm = extract_mask(pred, label)
        sens, spec = sensitivity_specificity(gm, pm)
        records.append(MetricRecord(
            case_id=case_id,
            label=label,
            dice=dice(gm, pm, empty_policy),
            jaccard=jaccard(gm, pm, empty_policy),
            vsi=volumetric_similarity(gm, pm, empty_policy),
            sensitivity=sens,
            specificity=spec,
            hausdorff95=hausdorff95(gm, pm),
            gt_volume_cm3=volume_cm3(gm),
            pred_volume_cm3=volume_cm3(pm),
        ))
    return records
