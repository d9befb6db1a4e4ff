"""Synthetic multiparametric brain phantoms with exact ground truth.

The anatomy is analytic: a triaxial brain ellipsoid centered on the
world origin carrying two bright landmarks, a dark pocket, and an
oblique intensity gradient (structure that makes every rotation axis
observable to registration), plus lesion components rendered with
per-sequence contrasts.  All
intensities sit around a brain base level of 10 in arbitrary units, so
the default noise levels (tenths) are mild relative to tissue
contrasts.

Edges: structural features fade over a 3 mm shell (smooth enough for
intensity-driven registration); lesion boundaries fade over a 2 mm
shell whose 50% blend point lies exactly on the analytic surface.
Default contrasts keep non-discriminating tissues at the base level on
each sequence a threshold rule reads, so a threshold placed at the
midpoint between base and lesion level crosses every interface on the
analytic surface and thresholding recovers the center-inclusion ground
truth.  The default native grid is 1 mm isotropic with voxel centers
on the atlas-grid lattice, making the unmisaligned resample exact.
Ground truth labels are evaluated directly at atlas-grid voxel
centers, never resampled: a voxel gets the label of the last lesion in
the list whose surface strictly contains its center.

Resection: a single axial plane, positioned by bisection so the
analytic enhancing-tumor volume above it equals the requested
fraction, turns the removed region into cavity (label 3) in both the
rendered intensities and the ground truth.  Fraction 1 removes the
enhancing tumor entirely.

Determinism: every random draw comes from a counter-based generator
keyed by (case seed, stream); cohort case seeds are seed XOR
case-index, so parallel generation is order-independent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cohort import CaseRecord, ManifestCase, save_manifest
from .errors import InputError, InvalidSpec, NotNormalized
from .geometry import AffineTransform, apply_affine, rigid_params_to_matrix
from .nifti import LabelVolume, VoxelGrid, save_label_volume, save_volume, same_geometry
from .preprocess import SEQUENCE_NAMES, AtlasGrid

BASE_LEVEL = 10.0
STRUCT_SHELL_MM = 3.0
LESION_SHELL_MM = 2.0

# Additive deltas for the two structural features, per sequence.
# Landmark deltas are identical across sequences: cross-sequence
# registration relies on linear correlation, so anatomy that appears in
# every sequence at the same strength anchors the true pose, while any
# sequence-specific difference hands the metric a reason to warp.  The
# magnitudes sit several noise deviations clear of every segmentation
# threshold level.
_BLOB_DELTA = {"t1w": 4.0, "t1ce": 4.0, "t2w": 4.0, "flair": 4.0}
_POCKET_DELTA = {"t1w": -2.5, "t1ce": -2.5, "t2w": -2.5, "flair": -2.5}
_NODE_DELTA = {"t1w": 3.0, "t1ce": 3.0, "t2w": 3.0, "flair": 3.0}
_BLOB_CENTER_FRAC = (-0.35, -0.20, 0.15)
_BLOB_RADIUS_MM = 15.0
_POCKET_CENTER_FRAC = (-0.30, 0.25, -0.20)
_POCKET_RADIUS_MM = 12.0
_NODE_CENTER_FRAC = (0.10, -0.45, 0.35)
_NODE_RADIUS_MM = 10.0
_GRADIENT_SPAN = 1.8          # intensity change per GRADIENT_SCALE_MM
_GRADIENT_SCALE_MM = 80.0
_GRADIENT_DIR = (1.0, 0.6, 0.3)

# Absolute lesion intensities per canonical label.  Each sequence a
# threshold rule reads keeps the non-discriminating tissues at the
# brain base level, so the rule's level set crosses every tissue
# interface at the 50% blend point, i.e. on the analytic surface.
# On sequences no rule reads (t2w, and flair inside the core) the core
# matches the edema intensity: a core/rim brightness step that exists in
# only one sequence of a pair hands the correlation metric a bogus pose
# that slides the bright rim of one image onto the bright core of the
# other.
DEFAULT_CONTRAST = {
    1: {"t1w": 6.5, "t1ce": 24.0, "t2w": 16.0, "flair": 24.0},
    2: {"t1w": 9.7, "t1ce": 10.0, "t2w": 16.0, "flair": 24.0},
    3: {"t1w": 2.0, "t1ce": 10.0, "t2w": 15.0, "flair": 10.0},
}

_MASK64 = (1 << 64) - 1
_NOISE_STREAM_BASE = 1   # streams 1..4 are per-sequence noise
_PARAM_STREAM = 8        # per-case variation draws
_ASSIGN_STREAM = 9       # cohort-level resection-class assignment


def default_contrast(label: int) -> dict[str, float]:
    return dict(DEFAULT_CONTRAST[label])


@dataclass(frozen=True)
class LesionSpec:
    """One ellipsoidal lesion component in canonical world mm."""

    shape: str                       # "sphere" | "ellipsoid"
    center_mm: tuple[float, float, float]
    radii_mm: tuple[float, float, float]
    label: int
    contrast: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.shape not in ("sphere", "ellipsoid"):
            raise InvalidSpec(f"lesion shape must be sphere or ellipsoid, got {self.shape!r}")
        if self.label not in (1, 2, 3):
            raise InvalidSpec(f"lesion label must be 1, 2, or 3, got {self.label}")
        radii = tuple(float(r) for r in self.radii_mm)
        if any(r <= 0 for r in radii):
            raise InvalidSpec(f"lesion radii must be positive, got {radii}")
        if self.shape == "sphere" and len(set(radii)) != 1:
            raise InvalidSpec("a sphere needs equal radii; use shape='ellipsoid'")
        object.__setattr__(self, "center_mm", tuple(float(c) for c in self.center_mm))
        object.__setattr__(self, "radii_mm", radii)
        merged = default_contrast(self.label)
        merged.update({k: float(v) for k, v in self.contrast.items()})
        unknown = set(merged) - set(SEQUENCE_NAMES)
        if unknown:
            raise InvalidSpec(f"contrast names unknown sequences: {sorted(unknown)}")
        object.__setattr__(self, "contrast", merged)


def sphere(center_mm, radius_mm: float, label: int,
           contrast: dict[str, float] | None = None) -> LesionSpec:
    return LesionSpec(shape="sphere", center_mm=tuple(center_mm),
                      radii_mm=(radius_mm, radius_mm, radius_mm), label=label,
                      contrast=contrast or {})


@dataclass(frozen=True)
class PhantomSpec:
    """Everything needed to render one case; the seed pins all noise."""

    seed: int
    dims: tuple[int, int, int] = (160, 160, 126)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    brain_semi_axes_mm: tuple[float, float, float] = (62.0, 75.0, 50.0)
    lesions: tuple[LesionSpec, ...] = ()
    noise_sigma: dict[str, float] = field(default_factory=dict)
    misalignments: dict[str, AffineTransform] = field(default_factory=dict)
    resection_fraction: float = 0.0

    def __post_init__(self):
        if not 0 <= int(self.seed) <= _MASK64:
            raise InvalidSpec(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 4 for d in dims):
            raise InvalidSpec(f"dims must be three sizes >= 4, got {self.dims}")
        spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in spacing):
            raise InvalidSpec(f"spacing must be positive, got {self.spacing}")
        semi = tuple(float(a) for a in self.brain_semi_axes_mm)
        if any(a <= 0 for a in semi):
            raise InvalidSpec(f"brain semi-axes must be positive, got {semi}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "brain_semi_axes_mm", semi)
        object.__setattr__(self, "lesions", tuple(self.lesions))
        if not 0.0 <= self.resection_fraction <= 1.0:
            raise InvalidSpec(f"resection fraction must lie in [0, 1], "
                              f"got {self.resection_fraction}")
        sigma = self.noise_sigma
        if not isinstance(sigma, dict):
            sigma = {name: float(sigma) for name in SEQUENCE_NAMES}
        sigma = {name: float(sigma.get(name, 0.0)) for name in SEQUENCE_NAMES}
        if any(v < 0 for v in sigma.values()):
            raise InvalidSpec("noise sigma must be non-negative")
        object.__setattr__(self, "noise_sigma", sigma)
        unknown = set(self.misalignments) - set(SEQUENCE_NAMES)
        if unknown:
            raise InvalidSpec(f"misalignments name unknown sequences: {sorted(unknown)}")
        for lesion in self.lesions:
            # conservative inside-brain bound: worst-case axis extents
            reach = max(lesion.radii_mm)
            score = sum(((abs(c) + reach) / a) ** 2
                        for c, a in zip(lesion.center_mm, semi))
            if score > 1.0:
                raise InvalidSpec(
                    f"lesion at {lesion.center_mm} with radius {reach} mm may "
                    f"leave the brain ellipsoid {semi} (bound {score:.3f} > 1)")

    @property
    def native_affine(self) -> np.ndarray:
        """Voxel->world with the grid centered on the world origin."""
        mat = np.eye(4)
        for i in range(3):
            mat[i, i] = self.spacing[i]
            mat[i, 3] = -self.spacing[i] * (self.dims[i] - 1) / 2.0
        return mat

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "brain_semi_axes_mm": list(self.brain_semi_axes_mm),
            "lesions": [{
                "shape": l.shape, "center_mm": list(l.center_mm),
                "radii_mm": list(l.radii_mm), "label": l.label,
                "contrast": dict(l.contrast),
            } for l in self.lesions],
            "noise_sigma": dict(self.noise_sigma),
            "misalignments": {name: [list(row) for row in t.matrix]
                              for name, t in self.misalignments.items()},
            "resection_fraction": float(self.resection_fraction),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        try:
            lesions = tuple(LesionSpec(
                shape=l["shape"], center_mm=tuple(l["center_mm"]),
                radii_mm=tuple(l["radii_mm"]), label=int(l["label"]),
                contrast=dict(l.get("contrast", {}))) for l in doc.get("lesions", ()))
            misalignments = {
                name: AffineTransform(np.asarray(rows, dtype=np.float64))
                for name, rows in doc.get("misalignments", {}).items()}
            return cls(
                seed=int(doc["seed"]),
                dims=tuple(doc.get("dims", (160, 160, 126))),
                spacing=tuple(doc.get("spacing", (1.0, 1.0, 1.0))),
                brain_semi_axes_mm=tuple(doc.get("brain_semi_axes_mm", (62.0, 75.0, 50.0))),
                lesions=lesions,
                noise_sigma=doc.get("noise_sigma", {}),
                misalignments=misalignments,
                resection_fraction=float(doc.get("resection_fraction", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSpec(f"malformed phantom spec: {exc}") from exc


def save_spec(path: str | Path, spec: PhantomSpec) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


def load_spec(path: str | Path) -> PhantomSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"spec file {path} is not valid JSON: {exc}") from exc
    return PhantomSpec.from_dict(doc)


def default_phantom_spec(seed: int = 0, noise_sigma: float = 0.5,
                         dims: tuple[int, int, int] = (160, 160, 126),
                         spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
                         resection_fraction: float = 0.0) -> PhantomSpec:
    """A postoperative-looking case: edema shell, enhancing tumor, and
    an overlapping cavity sitting above the tumor (so resected tissue
    stays attached to the cavity)."""
    lesions = (
        LesionSpec(shape="ellipsoid", center_mm=(18.0, 12.0, -2.0),
                   radii_mm=(17.0, 15.0, 14.0), label=2),
        sphere((22.0, 16.0, 2.0), 11.0, label=1),
        sphere((22.0, 16.0, 11.9), 10.45, label=3),
    )
    return PhantomSpec(seed=seed, dims=dims, spacing=spacing, lesions=lesions,
                       noise_sigma={name: noise_sigma for name in SEQUENCE_NAMES},
                       resection_fraction=resection_fraction)


# ---------------------------------------------------------------------------
# analytic rendering

def _shell_weight(q: np.ndarray, min_radius: float, shell_mm: float) -> np.ndarray:
    """1 deep inside the unit-level surface, 0 outside, 0.5 exactly on
    it; q is the normalized ellipsoid coordinate."""
    s = (q - 1.0) * min_radius  # approximate signed mm distance
    return np.clip(0.5 - s / shell_mm, 0.0, 1.0)


def _ellipsoid_q(pts: np.ndarray, center, radii) -> np.ndarray:
    d = (pts - np.asarray(center, dtype=np.float64)) / np.asarray(radii, dtype=np.float64)
    return np.sqrt(np.sum(d * d, axis=1))


def _gradient(pts: np.ndarray) -> np.ndarray:
    u = np.asarray(_GRADIENT_DIR, dtype=np.float64)
    u = u / np.linalg.norm(u)
    return _GRADIENT_SPAN * (pts @ u) / _GRADIENT_SCALE_MM


def _resection_plane(spec: PhantomSpec) -> float:
    """World z of the axial cut; +inf means no cut, -inf removes all
    enhancing tumor.  Solves analytic cap volume above the plane equal
    to the requested fraction of the total enhancing-tumor volume."""
    ets = [l for l in spec.lesions if l.label == 1]
    f = spec.resection_fraction
    if not ets or f <= 0.0:
        return math.inf
    if f >= 1.0:
        return -math.inf
    volumes = [4.0 / 3.0 * math.pi * l.radii_mm[0] * l.radii_mm[1] * l.radii_mm[2]
               for l in ets]
    total = sum(volumes)

    def above(z: float) -> float:
        acc = 0.0
        for lesion, vol in zip(ets, volumes):
            cz, rz = lesion.center_mm[2], lesion.radii_mm[2]
            t = min(1.0, max(-1.0, (z - cz) / rz))
            acc += vol * (2.0 - 3.0 * t + t ** 3) / 4.0
        return acc

    lo = min(l.center_mm[2] - l.radii_mm[2] for l in ets) - 1.0
    hi = max(l.center_mm[2] + l.radii_mm[2] for l in ets) + 1.0
    target = f * total
    for _ in range(200):
        mid = (lo + hi) / 2.0
        if above(mid) > target:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


def _anatomy_values(spec: PhantomSpec, seq: str, pts: np.ndarray,
                    z_cut: float, with_lesions: bool = True) -> np.ndarray:
    semi = spec.brain_semi_axes_mm
    min_semi = min(semi)
    brain_w = _shell_weight(_ellipsoid_q(pts, (0.0, 0.0, 0.0), semi),
                            min_semi, STRUCT_SHELL_MM)
    grad = _gradient(pts)
    values = BASE_LEVEL + grad
    blob_center = tuple(f * a for f, a in zip(_BLOB_CENTER_FRAC, semi))
    blob_w = _shell_weight(_ellipsoid_q(pts, blob_center, (_BLOB_RADIUS_MM,) * 3),
                           _BLOB_RADIUS_MM, STRUCT_SHELL_MM)
    values = values + _BLOB_DELTA[seq] * blob_w
    pocket_center = tuple(f * a for f, a in zip(_POCKET_CENTER_FRAC, semi))
    pocket_w = _shell_weight(_ellipsoid_q(pts, pocket_center, (_POCKET_RADIUS_MM,) * 3),
                             _POCKET_RADIUS_MM, STRUCT_SHELL_MM)
    values = values + _POCKET_DELTA[seq] * pocket_w
    node_center = tuple(f * a for f, a in zip(_NODE_CENTER_FRAC, semi))
    node_w = _shell_weight(_ellipsoid_q(pts, node_center, (_NODE_RADIUS_MM,) * 3),
                           _NODE_RADIUS_MM, STRUCT_SHELL_MM)
    values = values + _NODE_DELTA[seq] * node_w
    if with_lesions:
        for lesion in spec.lesions:
            w = _shell_weight(_ellipsoid_q(pts, lesion.center_mm, lesion.radii_mm),
                              min(lesion.radii_mm), LESION_SHELL_MM)
            target = lesion.contrast[seq] + grad
            if lesion.label == 1 and math.isfinite(z_cut):
                removed = np.clip(0.5 + (pts[:, 2] - z_cut) / LESION_SHELL_MM, 0.0, 1.0)
                cavity = DEFAULT_CONTRAST[3][seq] + grad
                target = target * (1.0 - removed) + cavity * removed
            elif lesion.label == 1 and z_cut == -math.inf:
                target = DEFAULT_CONTRAST[3][seq] + grad
            values = values * (1.0 - w) + target * w
    return values * brain_w


def _gt_labels_at(spec: PhantomSpec, pts: np.ndarray, z_cut: float) -> np.ndarray:
    """Strict center-inclusion labels; last listed lesion wins."""
    labels = np.zeros(pts.shape[0], dtype=np.uint8)
    for lesion in spec.lesions:
        inside = _ellipsoid_q(pts, lesion.center_mm, lesion.radii_mm) < 1.0
        value = np.uint8(lesion.label)
        if lesion.label == 1:
            removed = inside & (pts[:, 2] > z_cut)
            labels[inside] = value
            labels[removed] = np.uint8(3)
        else:
            labels[inside] = value
    return labels


def _grid_points_slab(dims, affine: np.ndarray, z0: int, z1: int) -> np.ndarray:
    nx, ny = dims[0], dims[1]
    ii, jj, kk = np.meshgrid(np.arange(nx, dtype=np.float64),
                             np.arange(ny, dtype=np.float64),
                             np.arange(z0, z1, dtype=np.float64), indexing="ij")
    idx = np.column_stack([ii.ravel(), jj.ravel(), kk.ravel()])
    return idx @ affine[:3, :3].T + affine[:3, 3]


def _render_grid(spec: PhantomSpec, seq: str, dims, affine: np.ndarray,
                 z_cut: float, transform: AffineTransform | None = None,
                 with_lesions: bool = True, chunk: int = 24) -> np.ndarray:
    out = np.empty(tuple(dims), dtype=np.float64)
    for z0 in range(0, dims[2], chunk):
        z1 = min(z0 + chunk, dims[2])
        pts = _grid_points_slab(dims, affine, z0, z1)
        if transform is not None:
            pts = apply_affine(transform, pts)
        vals = _anatomy_values(spec, seq, pts, z_cut, with_lesions)
        out[:, :, z0:z1] = vals.reshape(dims[0], dims[1], z1 - z0)
    return out


def generate_case(spec: PhantomSpec, case_id: str = "case000",
                  timepoint: str = "EPS", atlas: AtlasGrid | None = None) -> CaseRecord:
    """Render one case: native-grid sequences (with per-sequence
    misalignment and seeded noise), a native-grid brain mask in the
    T1ce frame, and exact atlas-grid ground truth labels."""
    atlas = atlas or AtlasGrid()
    z_cut = _resection_plane(spec)
    native_affine = spec.native_affine
    sequences: dict[str, VoxelGrid] = {}
    for index, seq in enumerate(SEQUENCE_NAMES):
        transform = spec.misalignments.get(seq)
        data = _render_grid(spec, seq, spec.dims, native_affine, z_cut, transform)
        sigma = spec.noise_sigma[seq]
        if sigma > 0.0:
            rng = np.random.Generator(np.random.Philox(
                key=[int(spec.seed) & _MASK64, _NOISE_STREAM_BASE + index]))
            data = data + rng.normal(0.0, sigma, size=spec.dims)
        sequences[seq] = VoxelGrid(data=data, spacing=spec.spacing,
                                   affine=native_affine)

    # Mask covers full-intensity brain only; the boundary ramp (where the
    # edge shell attenuates toward background) stays outside, the way a
    # skull-strip mask excludes partial-volume rim voxels.
    q_interior = 1.0 - 0.5 * STRUCT_SHELL_MM / min(spec.brain_semi_axes_mm)
    mask_transform = spec.misalignments.get("t1ce")
    mask = np.empty(spec.dims, dtype=np.uint8)
    for z0 in range(0, spec.dims[2], 24):
        z1 = min(z0 + 24, spec.dims[2])
        pts = _grid_points_slab(spec.dims, native_affine, z0, z1)
        if mask_transform is not None:
            pts = apply_affine(mask_transform, pts)
        inside = _ellipsoid_q(pts, (0.0, 0.0, 0.0),
                              spec.brain_semi_axes_mm) <= q_interior
        mask[:, :, z0:z1] = inside.reshape(spec.dims[0], spec.dims[1],
                                           z1 - z0).astype(np.uint8)

    atlas_affine = atlas.affine_array
    gt = np.empty(atlas.dims, dtype=np.uint8)
    for z0 in range(0, atlas.dims[2], 24):
        z1 = min(z0 + 24, atlas.dims[2])
        pts = _grid_points_slab(atlas.dims, atlas_affine, z0, z1)
        gt[:, :, z0:z1] = _gt_labels_at(spec, pts, z_cut).reshape(
            atlas.dims[0], atlas.dims[1], z1 - z0)

    return CaseRecord(
        case_id=case_id, center="SYN", timepoint=timepoint,
        gt=LabelVolume(data=gt, spacing=atlas.spacing, affine=atlas_affine),
        sequences=sequences,
        mask=LabelVolume(data=mask, spacing=spec.spacing, affine=native_affine),
    )


def synthetic_atlas(brain_semi_axes_mm=(62.0, 75.0, 50.0),
                    atlas: AtlasGrid | None = None) -> VoxelGrid:
    """Lesion-free noiseless reference render on the atlas grid, used
    as the fixed image for atlas registration."""
    atlas = atlas or AtlasGrid()
    spec = PhantomSpec(seed=0, brain_semi_axes_mm=brain_semi_axes_mm)
    data = _render_grid(spec, "t1w", atlas.dims, atlas.affine_array,
                        math.inf, with_lesions=False)
    return VoxelGrid(data=data, spacing=atlas.spacing, affine=atlas.affine_array)


# ---------------------------------------------------------------------------
# cohorts

@dataclass(frozen=True)
class VariationRanges:
    """Per-case draw bounds for cohort generation.

    Tumor and cavity lesions (labels 1 and 3) share one center jitter
    so the cavity stays attached to the tumor; edema (label 2) jitters
    independently.  One radius scale applies to all lesions.  Cases
    designated residual-tumor draw their partial resection fraction
    from ``partial_resection``; the rest resect fully.
    """

    center_jitter_mm: float = 5.0
    radius_scale: tuple[float, float] = (0.85, 1.2)
    translation_mm: float = 0.0
    rotation_deg: float = 0.0
    partial_resection: tuple[float, float] = (0.0, 0.5)
    gtr_ratio: float = 0.5

    def __post_init__(self):
        if self.center_jitter_mm < 0 or self.translation_mm < 0 or self.rotation_deg < 0:
            raise InvalidSpec("variation bounds must be non-negative")
        if not 0.0 <= self.gtr_ratio <= 1.0:
            raise InvalidSpec(f"gtr_ratio must lie in [0, 1], got {self.gtr_ratio}")
        lo, hi = self.radius_scale
        if not 0 < lo <= hi:
            raise InvalidSpec(f"radius_scale must be 0 < lo <= hi, got {self.radius_scale}")
        lo, hi = self.partial_resection
        if not 0.0 <= lo <= hi < 1.0:
            raise InvalidSpec("partial_resection must satisfy 0 <= lo <= hi < 1")


def _vary_spec(base: PhantomSpec, variation: VariationRanges,
               case_seed: int) -> PhantomSpec:
    rng = np.random.Generator(np.random.Philox(key=[case_seed, _PARAM_STREAM]))
    j = variation.center_jitter_mm
    scale = float(rng.uniform(*variation.radius_scale))
    tumor_jitter = rng.uniform(-j, j, size=3)
    edema_jitter = rng.uniform(-j, j, size=3)
    lesions = []
    for lesion in base.lesions:
        jitter = edema_jitter if lesion.label == 2 else tumor_jitter
        lesions.append(replace(
            lesion,
            center_mm=tuple(np.asarray(lesion.center_mm) + jitter),
            radii_mm=tuple(np.asarray(lesion.radii_mm) * scale)))
    misalignments = {}
    t_max = variation.translation_mm
    r_max = math.radians(variation.rotation_deg)
    for seq in SEQUENCE_NAMES:
        trans = rng.uniform(-t_max, t_max, size=3)
        rot = rng.uniform(-r_max, r_max, size=3)
        if t_max > 0 or r_max > 0:
            misalignments[seq] = rigid_params_to_matrix(
                np.concatenate([trans, rot]), center=np.zeros(3))
    partial = float(rng.uniform(*variation.partial_resection))
    return replace(base, seed=case_seed, lesions=tuple(lesions),
                   misalignments=misalignments, resection_fraction=partial)


def generate_cohort(n: int, base_spec: PhantomSpec | None = None,
                    variation: VariationRanges | None = None,
                    seed: int = 0, jobs: int = 1) -> tuple[list[CaseRecord], dict]:
    """n cases with drawn parameters and an exact resection-class count:
    round(n * gtr_ratio) cases resect fully, the designated subset
    chosen by a seeded permutation.  Returns (cases, manifest metadata);
    the metadata's generator block regenerates the cohort exactly.
    Cases draw from per-case seeds (seed XOR index), so ``jobs`` > 1
    changes nothing but wall time."""
    if n < 1:
        raise InvalidSpec(f"cohort size must be >= 1, got {n}")
    base = base_spec or default_phantom_spec(seed=seed)
    variation = variation or VariationRanges()
    assign = np.random.Generator(np.random.Philox(key=[int(seed) & _MASK64,
                                                       _ASSIGN_STREAM]))
    order = assign.permutation(n)
    full_resection = set(int(i) for i in order[:round(n * variation.gtr_ratio)])
    specs = []
    for i in range(n):
        case_seed = (int(seed) ^ i) & _MASK64
        spec = _vary_spec(base, variation, case_seed)
        if i in full_resection:
            spec = replace(spec, resection_fraction=1.0)
        specs.append(spec)

    def build(i: int) -> CaseRecord:
        return generate_case(specs[i], case_id=f"case{i:03d}",
                             timepoint="EPS" if i % 2 == 0 else "LPS")

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            cases = list(pool.map(build, range(n)))
    else:
        cases = [build(i) for i in range(n)]
    meta = {"generator": {
        "seed": int(seed), "n": int(n),
        "base_spec": base.to_dict(),
        "variation": {
            "center_jitter_mm": variation.center_jitter_mm,
            "radius_scale": list(variation.radius_scale),
            "translation_mm": variation.translation_mm,
            "rotation_deg": variation.rotation_deg,
            "partial_resection": list(variation.partial_resection),
            "gtr_ratio": variation.gtr_ratio,
        },
    }}
    return cases, meta


def regenerate_cohort(meta: dict) -> tuple[list[CaseRecord], dict]:
    """Rebuild a cohort from manifest metadata written by generate_cohort."""
    try:
        gen = meta["generator"]
        base = PhantomSpec.from_dict(gen["base_spec"])
        v = gen["variation"]
        variation = VariationRanges(
            center_jitter_mm=v["center_jitter_mm"],
            radius_scale=tuple(v["radius_scale"]),
            translation_mm=v["translation_mm"],
            rotation_deg=v["rotation_deg"],
            partial_resection=tuple(v["partial_resection"]),
            gtr_ratio=v["gtr_ratio"])
        return generate_cohort(gen["n"], base, variation, seed=gen["seed"])
    except (KeyError, TypeError) as exc:
        raise InvalidSpec(f"manifest lacks a usable generator block: {exc}") from exc


def write_cohort(cases: list[CaseRecord], out_dir: str | Path,
                 meta: dict | None = None, gz: bool = True) -> Path:
    """Write sequences, mask, and ground truth as NIfTI plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    suffix = ".nii.gz" if gz else ".nii"
    entries = []
    for case in cases:
        paths = {}
        for seq, grid in case.sequences.items():
            name = f"{case.case_id}_{seq}{suffix}"
            save_volume(out / name, grid)
            paths[seq] = name
        mask_name = f"{case.case_id}_mask{suffix}"
        save_label_volume(out / mask_name, case.mask)
        gt_name = f"{case.case_id}_gt{suffix}"
        save_label_volume(out / gt_name, case.gt)
        predictions = {}
        for model, pred in case.predictions.items():
            pred_name = f"{case.case_id}_pred_{model}{suffix}"
            save_label_volume(out / pred_name, pred)
            predictions[model] = pred_name
        entries.append(ManifestCase(
            case_id=case.case_id, gt=gt_name, predictions=predictions,
            center=case.center, timepoint=case.timepoint,
            sequences=paths, mask=mask_name))
    manifest_path = out / "manifest.json"
    save_manifest(manifest_path, entries, meta)
    return manifest_path


# ---------------------------------------------------------------------------
# baseline segmenter

@dataclass(frozen=True)
class SegmenterConfig:
    """Rule thresholds in z-score units (defaults tuned on the default
    phantom family; see each rule in baseline_segment)."""

    enhancing_t1ce_min_z: float = 6.30
    enhancing_t1w_max_z: float = -0.38
    edema_flair_min_z: float = 3.84
    cavity_t1w_max_z: float = -3.52
    min_island_voxels: int = 5
    smoothing_sigma_voxels: float = 0.0

    def __post_init__(self):
        if self.min_island_voxels < 0:
            raise InvalidSpec("min_island_voxels must be >= 0")
        if self.smoothing_sigma_voxels < 0:
            raise InvalidSpec("smoothing_sigma_voxels must be >= 0")


_CONNECT6 = ndimage.generate_binary_structure(3, 1)


def _drop_small(mask: np.ndarray, min_voxels: int) -> np.ndarray:
    if min_voxels <= 1 or not mask.any():
        return mask
    labeled, count = ndimage.label(mask, structure=_CONNECT6)
    sizes = ndimage.sum_labels(np.ones_like(labeled), labeled,
                               index=np.arange(1, count + 1))
    keep = np.flatnonzero(sizes >= min_voxels) + 1
    return np.isin(labeled, keep)


def _largest(mask: np.ndarray) -> np.ndarray:
    if not mask.any():
        return mask
    labeled, count = ndimage.label(mask, structure=_CONNECT6)
    sizes = ndimage.sum_labels(np.ones_like(labeled), labeled,
                               index=np.arange(1, count + 1))
    return labeled == (1 + int(np.argmax(sizes)))


def baseline_segment(sequences: dict[str, VoxelGrid], mask,
                     cfg: SegmenterConfig | None = None) -> LabelVolume:
    """Threshold rules on z-scored sequences.

    Enhancing tumor: bright on T1ce and dark on T1w; islands under
    min_island_voxels are dropped.  Cavity: very dark on T1w, largest
    6-connected component, excluding enhancing tumor.  Edema: bright on
    FLAIR, excluding both.  Inputs must be z-score normalized (masked
    mean within 0.1 of zero) on a shared grid.
    """
    cfg = cfg or SegmenterConfig()
    for name in ("t1w", "t1ce", "flair"):
        if name not in sequences:
            raise InputError(f"baseline segmenter needs sequence {name!r}")
    mask_data = mask.data if hasattr(mask, "data") else np.asarray(mask)
    fg = mask_data > 0
    first = sequences["t1w"]
    arrays = {}
    for name in ("t1w", "t1ce", "flair"):
        grid = sequences[name]
        if not same_geometry(grid, first):
            raise InputError(f"sequence {name!r} is not on the shared grid")
        mean = float(grid.data[fg].mean()) if fg.any() else 0.0
        if abs(mean) > 0.1:
            raise NotNormalized(f"sequence {name!r} has masked mean {mean:.3f}; "
                                "z-score inputs first")
        data = grid.data
        if cfg.smoothing_sigma_voxels > 0:
            data = ndimage.gaussian_filter(data, cfg.smoothing_sigma_voxels)
        arrays[name] = data

    enhancing = (fg & (arrays["t1ce"] > cfg.enhancing_t1ce_min_z)
                 & (arrays["t1w"] < cfg.enhancing_t1w_max_z))
    enhancing = _drop_small(enhancing, cfg.min_island_voxels)
    cavity = _largest(fg & ~enhancing & (arrays["t1w"] < cfg.cavity_t1w_max_z))
    if cavity.sum() < cfg.min_island_voxels:
        cavity = np.zeros_like(cavity)
    edema = fg & ~enhancing & ~cavity & (arrays["flair"] > cfg.edema_flair_min_z)
    edema = _drop_small(edema, cfg.min_island_voxels)

    labels = np.zeros(first.dims, dtype=np.uint8)
    labels[edema] = 2
    labels[cavity] = 3
    labels[enhancing] = 1
    return LabelVolume(data=labels, spacing=first.spacing, affine=first.affine)
