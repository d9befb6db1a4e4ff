"""Atlas-space preprocessing: registration, resampling, masking, z-scoring.

Geometry conventions used throughout: a registration result's
``transform`` maps moving-world points to fixed-world points; the
sampling map used to pull moving intensities onto the fixed grid is
its inverse.  Resampling onto the atlas grid is a single interpolation
step per volume, so composed transforms never resample twice.

Determinism: the optimizer is gradient-free coordinate descent with a
fixed sweep order, metric sample points are drawn once per pyramid
level from a counter-based generator with a fixed key, and all
reductions are plain numpy sums over fixed-shape arrays.  Two runs on
identical inputs produce bit-identical parameter vectors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import (
    ConstantImage,
    DegenerateMask,
    EmptyMask,
    InputError,
    MissingReferenceSequence,
)
from .geometry import (
    AffineTransform,
    N_PARAMS,
    apply_affine,
    params_to_matrix,
    trilinear_sample,
    nearest_sample,
)
from .nifti import LabelVolume, VoxelGrid, same_geometry

ATLAS_DIMS = (240, 240, 155)
ATLAS_SPACING = (1.0, 1.0, 1.0)
# voxel centers span [-119.5, 119.5] x [-119.5, 119.5] x [-77, 77] mm,
# so the world origin sits at the grid center
ATLAS_OFFSET = (-119.5, -119.5, -77.0)

SEQUENCE_NAMES = ("t1w", "t1ce", "t2w", "flair")

_CONNECT6 = ndimage.generate_binary_structure(3, 1)


def _ball(radius: int) -> np.ndarray:
    span = np.arange(-radius, radius + 1)
    x, y, z = np.meshgrid(span, span, span, indexing="ij")
    return (x * x + y * y + z * z) <= radius * radius


@dataclass(frozen=True)
class AtlasGrid:
    """The fixed output grid every pipeline volume lands on."""

    dims: tuple[int, int, int] = ATLAS_DIMS
    spacing: tuple[float, float, float] = ATLAS_SPACING
    affine: tuple = ()

    def __post_init__(self):
        if tuple(self.dims) != ATLAS_DIMS or tuple(self.spacing) != ATLAS_SPACING:
            raise InputError(f"atlas grid must be {ATLAS_DIMS} at {ATLAS_SPACING} mm, "
                             f"got {self.dims} at {self.spacing}")
        if len(self.affine) == 0:
            mat = np.eye(4)
            mat[:3, 3] = ATLAS_OFFSET
            object.__setattr__(self, "affine", tuple(map(tuple, mat)))

    @property
    def affine_array(self) -> np.ndarray:
        return np.asarray(self.affine, dtype=np.float64)

    @classmethod
    def from_volume(cls, grid: VoxelGrid) -> "AtlasGrid":
        return cls(dims=grid.dims, spacing=tuple(float(s) for s in grid.spacing),
                   affine=tuple(map(tuple, grid.affine)))

    def voxel_centers_world(self) -> np.ndarray:
        """All voxel centers as an (n, 3) world-coordinate array."""
        nx, ny, nz = self.dims
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        idx = np.column_stack([ii.ravel(), jj.ravel(), kk.ravel()]).astype(np.float64)
        return apply_affine(AffineTransform(self.affine_array), idx)


def default_atlas_grid() -> AtlasGrid:
    return AtlasGrid()


# ---------------------------------------------------------------------------
# resampling

def _pull_sample(data: np.ndarray, affine: np.ndarray, world_pts: np.ndarray,
                 interp: str) -> np.ndarray:
    inv = np.linalg.inv(affine)
    vox = world_pts @ inv[:3, :3].T + inv[:3, 3]
    if interp == "trilinear":
        return trilinear_sample(data, vox, fill=0.0)
    if interp == "nearest":
        return nearest_sample(data, vox, fill=0)
    raise InputError(f"unknown interpolation {interp!r}; expected 'trilinear' or 'nearest'")


def resample_to_atlas(grid: VoxelGrid, transform: AffineTransform,
                      atlas: AtlasGrid | None = None,
                      interp: str = "trilinear",
                      chunk_slices: int = 16) -> VoxelGrid:
    """Resample a volume onto the atlas grid through a world transform.

    ``transform`` maps the input volume's world onto atlas world; each
    atlas voxel center is pulled from the input at the inverse-mapped
    location.  Output geometry is exactly the atlas grid.  Work is
    chunked along z to bound peak memory on the 240x240x155 grid.
    """
    atlas = atlas or AtlasGrid()
    pull = transform.inverse()
    nx, ny, nz = atlas.dims
    out = np.empty((nx, ny, nz), dtype=np.float64)
    atlas_affine = atlas.affine_array
    for z0 in range(0, nz, chunk_slices):
        z1 = min(z0 + chunk_slices, nz)
        ii, jj, kk = np.meshgrid(np.arange(nx, dtype=np.float64),
                                 np.arange(ny, dtype=np.float64),
                                 np.arange(z0, z1, dtype=np.float64),
                                 indexing="ij")
        idx = np.column_stack([ii.ravel(), jj.ravel(), kk.ravel()])
        world = idx @ atlas_affine[:3, :3].T + atlas_affine[:3, 3]
        moving_world = apply_affine(pull, world)
        out[:, :, z0:z1] = _pull_sample(grid.data, grid.affine, moving_world,
                                        interp).reshape(nx, ny, z1 - z0)
    return VoxelGrid(data=out, spacing=atlas.spacing, affine=atlas_affine)


def resample_labels_to_atlas(labels: LabelVolume, transform: AffineTransform,
                             atlas: AtlasGrid | None = None) -> LabelVolume:
    """Nearest-neighbor label resampling; never invents new labels."""
    as_grid = VoxelGrid(data=labels.data.astype(np.float64),
                        spacing=labels.spacing, affine=labels.affine)
    res = resample_to_atlas(as_grid, transform, atlas, interp="nearest")
    return LabelVolume(data=res.data.astype(np.uint8), spacing=res.spacing,
                       affine=res.affine)


# ---------------------------------------------------------------------------
# registration

@dataclass(frozen=True)
class RegistrationConfig:
    """Knobs for the multiresolution coordinate-descent registration.

    Steps are in mm (translations), radians (rotations), and unitless
    (log-scale, shear).  A sweep that accepts no move halves every
    step; a level ends when steps fall below ``initial * min_step_ratio``
    or after ``max_iterations`` sweeps.  Improvements must exceed
    ``tolerance`` to be accepted, which keeps self-registration at the
    exact identity.
    """

    pyramid_factors: tuple[int, ...] = (4, 2, 1)
    metric: str = "NCC"
    max_iterations: int = 200
    initial_step: float = 1.0
    scale_shear_step: float = 0.1
    step_decay: float = 0.5
    min_step_ratio: float = 1.0 / 1024.0
    tolerance: float = 1e-6
    stages: tuple[str, ...] = ("rigid", "affine")
    samples_per_level: int = 32768
    sample_seed: int = 20240613

    def __post_init__(self):
        if len(self.pyramid_factors) < 1 or any(f < 1 for f in self.pyramid_factors):
            raise InputError("pyramid_factors must be >= 1 integers, coarsest first")
        if self.max_iterations < 1:
            raise InputError("max_iterations must be >= 1")
        if self.metric not in ("NCC", "MSE"):
            raise InputError(f"metric must be 'NCC' or 'MSE', got {self.metric!r}")
        for stage in self.stages:
            if stage not in ("rigid", "affine"):
                raise InputError(f"unknown stage {stage!r}")
        if not 0 < self.step_decay < 1:
            raise InputError("step_decay must lie in (0, 1)")


@dataclass(frozen=True)
class RegistrationResult:
    """Transform maps moving-world -> fixed-world.  ``improved`` is
    False when no candidate step beat the starting metric at any level
    (the transform is then whatever seeded the search, identity by
    default).  ``traces`` holds the accepted-step metric values, one
    tuple per (stage, level) in run order: non-decreasing for NCC,
    non-increasing for MSE."""

    transform: AffineTransform
    final_metric: float
    improved: bool
    traces: tuple[tuple[float, ...], ...]


def _block_average(data: np.ndarray, affine: np.ndarray,
                   factor: int) -> tuple[np.ndarray, np.ndarray]:
    """Downsample by block mean; trailing voxels that do not fill a
    block are trimmed.  The returned affine keeps block centers at the
    mean world position of their constituent voxel centers."""
    if factor == 1:
        return data, affine
    nx, ny, nz = (d // factor for d in data.shape)
    if min(nx, ny, nz) < 1:
        return data, affine
    trimmed = data[:nx * factor, :ny * factor, :nz * factor]
    coarse = trimmed.reshape(nx, factor, ny, factor, nz, factor).mean(axis=(1, 3, 5))
    out = affine.copy()
    out[:3, :3] = affine[:3, :3] * factor
    out[:3, 3] = affine[:3, 3] + affine[:3, :3] @ np.full(3, (factor - 1) / 2.0)
    return coarse, out


def _world_center(grid: VoxelGrid) -> np.ndarray:
    mid = (np.asarray(grid.dims, dtype=np.float64) - 1.0) / 2.0
    return grid.affine[:3, :3] @ mid + grid.affine[:3, 3]


def _sample_points(data: np.ndarray, affine: np.ndarray, budget: int,
                   seed: int, level: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-image sample set for one pyramid level: every voxel when
    the level fits the budget, otherwise a seeded draw (fixed for the
    whole level so the accepted-metric trace is comparable)."""
    n = data.size
    if n <= budget:
        flat = np.arange(n)
    else:
        rng = np.random.Generator(np.random.Philox(key=[seed, level]))
        flat = rng.integers(0, n, size=budget)
    idx = np.column_stack(np.unravel_index(flat, data.shape)).astype(np.float64)
    world = idx @ affine[:3, :3].T + affine[:3, 3]
    values = data.reshape(-1)[flat]
    return world, values


def _metric_evaluator(m_data, m_affine, world_pts, f_vals, metric):
    """Returns score(matrix) -> (score, raw). Score is maximized; raw
    is the reported metric value (NCC itself, or MSE)."""
    m_inv = np.linalg.inv(m_affine)
    f_centered = f_vals - f_vals.mean()
    f_norm = float(np.sqrt(np.sum(f_centered * f_centered)))
    if f_norm == 0.0 and metric == "NCC":
        raise ConstantImage("fixed-image sample has zero variance")

    def evaluate(matrix: np.ndarray) -> tuple[float, float]:
        pts = world_pts @ matrix[:3, :3].T + matrix[:3, 3]
        vox = pts @ m_inv[:3, :3].T + m_inv[:3, 3]
        vals = trilinear_sample(m_data, vox, fill=0.0)
        if metric == "MSE":
            diff = vals - f_vals
            mse = float(np.mean(diff * diff))
            return -mse, mse
        m_centered = vals - vals.mean()
        m_norm = float(np.sqrt(np.sum(m_centered * m_centered)))
        if m_norm == 0.0:
            return -np.inf, -np.inf
        ncc = float(np.dot(f_centered, m_centered) / (f_norm * m_norm))
        return ncc, ncc

    return evaluate


def _step_vector(n_params: int, cfg: RegistrationConfig) -> np.ndarray:
    steps = np.full(n_params, cfg.initial_step, dtype=np.float64)
    if n_params == N_PARAMS:
        steps[6:] = cfg.scale_shear_step
    return steps


def register(moving: VoxelGrid, fixed: VoxelGrid,
             cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Estimate the moving-world -> fixed-world transform.

    Coordinate descent over center-anchored transform parameters
    (translations, ZYX Euler angles, then log-scales and shears in the
    affine stage), coarse-to-fine over a block-averaged pyramid.  The
    rigid stage seeds the affine stage.  Internally the search is over
    the fixed->moving sampling map; the inverse is returned.
    """
    cfg = cfg or RegistrationConfig()
    if float(np.ptp(moving.data)) == 0.0:
        raise ConstantImage("moving image is constant")
    if float(np.ptp(fixed.data)) == 0.0:
        raise ConstantImage("fixed image is constant")

    center = _world_center(fixed)
    params = np.zeros(6, dtype=np.float64)
    improved = False
    traces: list[tuple[float, ...]] = []
    final_raw = np.nan

    for stage in cfg.stages:
        n_params = 6 if stage == "rigid" else N_PARAMS
        if params.size < n_params:
            params = np.concatenate([params, np.zeros(n_params - params.size)])
        for level, factor in enumerate(cfg.pyramid_factors):
            f_data, f_aff = _block_average(fixed.data, fixed.affine, factor)
            m_data, m_aff = _block_average(moving.data, moving.affine, factor)
            world_pts, f_vals = _sample_points(f_data, f_aff, cfg.samples_per_level,
                                               cfg.sample_seed, level)
            evaluate = _metric_evaluator(m_data, m_aff, world_pts, f_vals, cfg.metric)

            def score_of(p: np.ndarray) -> tuple[float, float]:
                return evaluate(params_to_matrix(_pad(p), center).matrix)

            current, raw = score_of(params)
            trace = [raw]
            steps = _step_vector(n_params, cfg)
            floor = _step_vector(n_params, cfg) * cfg.min_step_ratio
            for _ in range(cfg.max_iterations):
                accepted = False
                for i in range(n_params):
                    for sign in (1.0, -1.0):
                        candidate = params.copy()
                        candidate[i] += sign * steps[i]
                        cand_score, cand_raw = score_of(candidate)
                        if cand_score > current + cfg.tolerance:
                            params, current, raw = candidate, cand_score, cand_raw
                            trace.append(cand_raw)
                            accepted = True
                            improved = True
                            break
                if not accepted:
                    steps = steps * cfg.step_decay
                    if np.all(steps < floor):
                        break
            traces.append(tuple(trace))
            final_raw = raw

    transform = params_to_matrix(_pad(params), center).inverse()
    if not improved:
        transform = AffineTransform.identity()
    return RegistrationResult(transform=transform, final_metric=float(final_raw),
                              improved=improved, traces=tuple(traces))


def _pad(params: np.ndarray) -> np.ndarray:
    if params.size == N_PARAMS:
        return params
    return np.concatenate([params, np.zeros(N_PARAMS - params.size)])


# ---------------------------------------------------------------------------
# skull strip fallback

@dataclass(frozen=True)
class BrainMask:
    mask: LabelVolume
    provenance: str  # "external" | "fallback"

    @property
    def data(self) -> np.ndarray:
        return self.mask.data


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Histogram threshold maximizing between-class variance; returns
    the cut value (foreground is strictly above it)."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    lo, hi = float(flat.min()), float(flat.max())
    if lo == hi:
        raise ConstantImage("cannot threshold a constant image")
    hist, edges = np.histogram(flat, bins=bins, range=(lo, hi))
    weights = hist.astype(np.float64) / flat.size
    mids = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(weights)
    w1 = 1.0 - w0
    mu0 = np.cumsum(weights * mids)
    total_mu = mu0[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        m0 = mu0 / w0
        m1 = (total_mu - mu0) / w1
        between = w0 * w1 * (m0 - m1) ** 2
    between[~np.isfinite(between)] = -1.0
    k = int(np.argmax(between))
    return float(edges[k + 1])


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labeled, count = ndimage.label(mask, structure=_CONNECT6)
    if count == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = ndimage.sum_labels(np.ones_like(labeled), labeled,
                               index=np.arange(1, count + 1))
    return labeled == (1 + int(np.argmax(sizes)))


def skull_strip_fallback(t1: VoxelGrid) -> BrainMask:
    """Otsu threshold, keep the largest 6-connected component, close
    with a radius-2 ball, then fill enclosed cavities."""
    cut = otsu_threshold(t1.data)
    fg = t1.data > cut
    if not fg.any():
        raise EmptyMask("threshold produced an empty foreground")
    comp = _largest_component(fg)
    closed = ndimage.binary_closing(comp, structure=_ball(2))
    filled = ndimage.binary_fill_holes(closed, structure=_CONNECT6)
    # closing with a zero border can only shrink at the edges; it never
    # splits the component, so the single-component invariant holds
    if not filled.any():
        raise EmptyMask("morphology removed all foreground")
    return BrainMask(mask=LabelVolume(data=filled.astype(np.uint8),
                                      spacing=t1.spacing, affine=t1.affine),
                     provenance="fallback")


# ---------------------------------------------------------------------------
# normalization

def zscore_normalize(grid: VoxelGrid, mask: BrainMask | LabelVolume) -> VoxelGrid:
    """(v - mean) / population-std over masked voxels; outside -> 0."""
    fg = mask.data > 0
    n = int(fg.sum())
    if n < 2:
        raise DegenerateMask(f"mask has {n} foreground voxel(s); need >= 2")
    inside = grid.data[fg]
    mu = float(inside.mean())
    sigma = float(inside.std(ddof=0))
    if sigma == 0.0:
        raise DegenerateMask("masked intensities have zero variance")
    out = np.zeros_like(grid.data)
    out[fg] = (inside - mu) / sigma
    return VoxelGrid(data=out, spacing=grid.spacing, affine=grid.affine)


# ---------------------------------------------------------------------------
# full pipeline

@dataclass
class PipelineResult:
    sequences: dict[str, VoxelGrid]
    mask: BrainMask
    transforms: dict[str, AffineTransform]
    registrations: dict[str, RegistrationResult] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()
    intermediates: dict[str, VoxelGrid] | None = None


def run_pipeline(sequences: dict[str, VoxelGrid],
                 atlas_volume: VoxelGrid | None = None,
                 atlas: AtlasGrid | None = None,
                 mask: LabelVolume | None = None,
                 cfg: RegistrationConfig | None = None,
                 skip_registration: bool = False,
                 keep_intermediates: bool = False) -> PipelineResult:
    """Align, resample, mask, and normalize one case.

    Order: register T1ce to the atlas volume, register every other
    sequence to T1ce and compose, resample everything onto the atlas
    grid in one step, then mask (external mask, given in T1ce native
    space, is carried through the same transform; otherwise the Otsu
    fallback runs on the resampled T1w, or T1ce when T1w is absent)
    and z-score under the mask.

    ``skip_registration`` uses identity transforms (inputs already in
    atlas world); no atlas volume is then needed.
    """
    if "t1ce" not in sequences:
        raise MissingReferenceSequence("t1ce is required as the registration reference")
    cfg = cfg or RegistrationConfig()
    atlas = atlas or AtlasGrid()
    notes = [f"missing sequence {name}" for name in SEQUENCE_NAMES
             if name not in sequences]
    for note in notes:
        warnings.warn(note, stacklevel=2)

    transforms: dict[str, AffineTransform] = {}
    registrations: dict[str, RegistrationResult] = {}
    if skip_registration:
        for name in sequences:
            transforms[name] = AffineTransform.identity()
    else:
        if atlas_volume is None:
            raise InputError("an atlas reference volume is required unless "
                             "skip_registration is set")
        ref = register(sequences["t1ce"], atlas_volume, cfg)
        registrations["t1ce"] = ref
        transforms["t1ce"] = ref.transform
        # Sequences of one subject differ by scanner pose only, so the
        # intra-subject legs are rigid; affine freedom there lets the
        # metric trade pose error against cross-sequence contrast.
        intra_cfg = replace(cfg, stages=("rigid",))
        for name in sorted(sequences):
            if name == "t1ce":
                continue
            res = register(sequences[name], sequences["t1ce"], intra_cfg)
            registrations[name] = res
            transforms[name] = ref.transform.compose(res.transform)

    resampled = {name: resample_to_atlas(vol, transforms[name], atlas)
                 for name, vol in sequences.items()}

    if mask is not None:
        atlas_mask = BrainMask(
            mask=resample_labels_to_atlas(mask, transforms["t1ce"], atlas),
            provenance="external")
    else:
        anchor = resampled.get("t1w", resampled["t1ce"])
        atlas_mask = skull_strip_fallback(anchor)

    normalized = {name: zscore_normalize(vol, atlas_mask)
                  for name, vol in resampled.items()}
    return PipelineResult(
        sequences=normalized, mask=atlas_mask, transforms=transforms,
        registrations=registrations, warnings=tuple(notes),
        intermediates=resampled if keep_intermediates else None)
