"""Phantom generator, cohort plumbing, and baseline segmenter tests.

Ground-truth rasterization is cross-checked with a brute-force
center-inclusion oracle on the atlas lattice.  The heavier end-to-end
cases (full-resolution renders through the pipeline) live at the bottom
of the file; everything else runs on tiny grids.
"""

import warnings
from dataclasses import replace

import numpy as np
import pytest

from eorpipe import (
    EorClass,
    InvalidSpec,
    LesionSpec,
    NotNormalized,
    PhantomSpec,
    RegistrationConfig,
    SegmenterConfig,
    VariationRanges,
    baseline_segment,
    classify_eor,
    default_atlas_grid,
    default_phantom_spec,
    dice,
    evaluate_case,
    extract_mask,
    generate_case,
    generate_cohort,
    load_manifest,
    load_spec,
    regenerate_cohort,
    rigid_params_to_matrix,
    run_pipeline,
    save_spec,
    synthetic_atlas,
    volume_cm3,
    write_cohort,
)
from eorpipe.phantom import sphere

TINY = {"dims": (8, 8, 8), "noise_sigma": 0.0}


def atlas_lattice():
    atlas = default_atlas_grid()
    aff = atlas.affine_array
    idx = np.indices(atlas.dims, dtype=np.float64)
    return [aff[i, i] * idx[i] + aff[i, 3] for i in range(3)]


def inside_count(center, radii, world):
    q = sum(((world[i] - center[i]) / radii[i]) ** 2 for i in range(3))
    return q < 1.0


# ---------------------------------------------------------------------------
# spec validation and serialization


def test_lesion_must_fit_inside_brain():
    with pytest.raises(InvalidSpec):
        PhantomSpec(seed=0, lesions=(sphere((55.0, 0.0, 0.0), 20.0, label=1),))


def test_spec_field_validation():
    with pytest.raises(InvalidSpec):
        PhantomSpec(seed=-1)
    with pytest.raises(InvalidSpec):
        PhantomSpec(seed=0, resection_fraction=1.5)
    with pytest.raises(InvalidSpec):
        PhantomSpec(seed=0, dims=(2, 8, 8))
    with pytest.raises(InvalidSpec):
        PhantomSpec(seed=0, spacing=(0.0, 1.0, 1.0))
    with pytest.raises(InvalidSpec):
        PhantomSpec(seed=0, misalignments={"dwi": None})


def test_spec_file_roundtrip(tmp_path):
    spec = replace(
        default_phantom_spec(seed=99, noise_sigma=0.25, resection_fraction=0.3),
        misalignments={"flair": rigid_params_to_matrix([1.0, -2.0, 0.5, 0.0, 0.01, 0.0])})
    path = tmp_path / "spec.json"
    save_spec(path, spec)
    assert load_spec(path).to_dict() == spec.to_dict()


def test_malformed_spec_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(InvalidSpec):
        load_spec(path)
    path.write_text('{"dims": [8, 8, 8]}')  # no seed
    with pytest.raises(InvalidSpec):
        load_spec(path)


# ---------------------------------------------------------------------------
# ground-truth rasterization


def test_gt_matches_center_inclusion_oracle():
    spec = default_phantom_spec(seed=3, **TINY)
    gt = generate_case(spec).gt.data
    world = atlas_lattice()
    ed, et, cav = spec.lesions
    want = np.zeros(gt.shape, dtype=np.uint8)
    want[inside_count(ed.center_mm, ed.radii_mm, world)] = 2
    want[inside_count(et.center_mm, et.radii_mm, world)] = 1
    want[inside_count(cav.center_mm, cav.radii_mm, world)] = 3
    assert np.array_equal(gt, want)


def test_threshold_straddling_sphere_counts():
    world = atlas_lattice()
    for radius, want_class in ((2.879, EorClass.GTR), (3.0, EorClass.RT)):
        spec = PhantomSpec(seed=1, dims=(8, 8, 8),
                           lesions=(sphere((0.0, 0.0, 0.0), radius, label=1),))
        gt = generate_case(spec).gt
        count = int(np.count_nonzero(gt.data == 1))
        oracle = int(inside_count((0.0, 0.0, 0.0), (radius,) * 3, world).sum())
        assert count == oracle
        vol = volume_cm3(extract_mask(gt, "ET"))
        assert abs(vol - 0.1) < 0.02  # ~100 voxels at 1 mm
        assert classify_eor(vol) is want_class


def test_full_resection_empties_enhancing_tumor():
    spec = default_phantom_spec(seed=4, resection_fraction=1.0, **TINY)
    gt = generate_case(spec).gt
    vol = volume_cm3(extract_mask(gt, "ET"))
    assert vol == 0.0
    assert classify_eor(vol) is EorClass.GTR
    # the resected region reads as cavity, not as background
    assert np.count_nonzero(gt.data == 3) > np.count_nonzero(
        generate_case(replace(spec, resection_fraction=0.0)).gt.data == 3)


def test_partial_resection_is_monotone():
    base = default_phantom_spec(seed=5, **TINY)
    volumes = []
    for fraction in (0.0, 0.3, 0.6, 1.0):
        gt = generate_case(replace(base, resection_fraction=fraction)).gt
        volumes.append(volume_cm3(extract_mask(gt, "ET")))
    assert volumes[0] > volumes[1] > volumes[2] > volumes[3] == 0.0


def test_same_spec_renders_bit_identical():
    spec = default_phantom_spec(seed=6, noise_sigma=0.5,
                                dims=(40, 40, 32), spacing=(4.0, 4.0, 4.0))
    a = generate_case(spec)
    b = generate_case(spec)
    for name in a.sequences:
        assert np.array_equal(a.sequences[name].data, b.sequences[name].data)
    assert np.array_equal(a.gt.data, b.gt.data)
    assert np.array_equal(a.mask.data, b.mask.data)
    # and the noise really is per-sequence
    assert not np.array_equal(a.sequences["t1w"].data, a.sequences["t2w"].data)


# ---------------------------------------------------------------------------
# cohorts


def test_cohort_controls_resection_classes():
    base = default_phantom_spec(seed=101, **TINY)
    cases, meta = generate_cohort(20, base_spec=base, seed=101, jobs=4)
    assert len(cases) == 20
    classes = [classify_eor(volume_cm3(extract_mask(c.gt, "ET"))) for c in cases]
    assert sum(1 for c in classes if c is EorClass.GTR) == 10
    assert meta["generator"]["n"] == 20


def test_cohort_regenerates_bit_identical():
    base = default_phantom_spec(seed=7, noise_sigma=0.5, **{"dims": (8, 8, 8)})
    variation = VariationRanges(translation_mm=2.0, rotation_deg=1.0)
    cases, meta = generate_cohort(3, base_spec=base, variation=variation, seed=7)
    again, _ = regenerate_cohort(meta)
    for a, b in zip(cases, again):
        assert a.case_id == b.case_id
        assert np.array_equal(a.gt.data, b.gt.data)
        assert np.array_equal(a.mask.data, b.mask.data)
        for name in a.sequences:
            assert np.array_equal(a.sequences[name].data, b.sequences[name].data)


def test_cohort_size_validated():
    with pytest.raises(InvalidSpec):
        generate_cohort(0)


def test_manifest_roundtrip(tmp_path):
    base = default_phantom_spec(seed=8, **TINY)
    cases, meta = generate_cohort(2, base_spec=base, seed=8)
    manifest_path = write_cohort(cases, tmp_path, meta=meta)
    loaded, extra = load_manifest(manifest_path)
    assert [m.case_id for m in loaded] == [c.case_id for c in cases]
    assert extra["generator"] == meta["generator"]
    for entry, case in zip(loaded, cases):
        assert entry.timepoint == case.timepoint
        assert set(entry.sequences) == set(case.sequences)
        assert (tmp_path / entry.gt).exists()
        assert (tmp_path / entry.mask).exists()
        from eorpipe import load_label_volume
        _, gt = load_label_volume(tmp_path / entry.gt)
        assert np.array_equal(gt.data, case.gt.data)


# ---------------------------------------------------------------------------
# baseline segmenter contracts (cheap cases)


def preprocessed(spec):
    case = generate_case(spec)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return case, run_pipeline(case.sequences, mask=case.mask,
                                  skip_registration=True)


def test_unnormalized_input_rejected():
    spec = default_phantom_spec(seed=9, noise_sigma=0.0,
                                dims=(80, 80, 64), spacing=(2.0, 2.0, 2.0))
    case = generate_case(spec)
    with pytest.raises(NotNormalized):
        baseline_segment(case.sequences, case.mask)


def test_missing_sequence_rejected():
    spec = default_phantom_spec(seed=9, noise_sigma=0.0,
                                dims=(80, 80, 64), spacing=(2.0, 2.0, 2.0))
    case, result = preprocessed(spec)
    trimmed = {k: v for k, v in result.sequences.items() if k != "flair"}
    with pytest.raises(Exception):
        baseline_segment(trimmed, result.mask)


def test_segmenter_config_validated():
    with pytest.raises(InvalidSpec):
        SegmenterConfig(min_island_voxels=-1)
    with pytest.raises(InvalidSpec):
        SegmenterConfig(smoothing_sigma_voxels=-0.5)


def test_fully_resected_case_classified_gtr():
    spec = default_phantom_spec(seed=10, noise_sigma=0.5, resection_fraction=1.0,
                                dims=(80, 80, 64), spacing=(2.0, 2.0, 2.0))
    case, result = preprocessed(spec)
    pred = baseline_segment(result.sequences, result.mask)
    vol = volume_cm3(extract_mask(pred, "ET"))
    assert vol < 0.1
    assert classify_eor(vol) is EorClass.GTR


# ---------------------------------------------------------------------------
# baseline segmenter accuracy ladder (full-resolution cases)


@pytest.fixture(scope="module")
def clean_run():
    return preprocessed(default_phantom_spec(seed=11, noise_sigma=0.0))


def test_noiseless_dice_ladder(clean_run):
    case, result = clean_run
    pred = baseline_segment(result.sequences, result.mask)
    records = evaluate_case(case.gt, pred, case_id=case.case_id)
    for rec in records:
        assert rec.dice is not None and rec.dice > 0.99, (rec.label, rec.dice)


def test_noisy_dice_ladder():
    case, result = preprocessed(default_phantom_spec(seed=12, noise_sigma=0.5))
    pred = baseline_segment(result.sequences, result.mask)
    records = evaluate_case(case.gt, pred, case_id=case.case_id)
    for rec in records:
        assert rec.dice is not None and rec.dice > 0.90, (rec.label, rec.dice)


def test_segmenter_deterministic_and_threshold_monotone(clean_run):
    case, result = clean_run
    cfg = SegmenterConfig()
    first = baseline_segment(result.sequences, result.mask, cfg)
    second = baseline_segment(result.sequences, result.mask, cfg)
    assert np.array_equal(first.data, second.data)
    previous = None
    for tau1 in (5.0, 6.3, 7.5, 9.0):
        pred = baseline_segment(result.sequences, result.mask,
                                replace(cfg, enhancing_t1ce_min_z=tau1))
        et = pred.data == 1
        if previous is not None:
            assert np.all(previous | ~et)  # et is a subset of the looser mask
        previous = et


def test_misaligned_pipeline_recovers_dice():
    poses = {
        "t1ce": [2.0, -3.0, 1.0, 0.0, 0.0, np.deg2rad(3.0)],
        "t1w": [-2.0, 1.0, 2.0, np.deg2rad(-2.0), 0.0, 0.0],
        "t2w": [1.0, 2.0, -2.0, 0.0, np.deg2rad(2.0), 0.0],
        "flair": [-1.0, -1.0, 1.0, 0.0, 0.0, np.deg2rad(-2.0)],
    }
    spec = replace(
        default_phantom_spec(seed=13, noise_sigma=0.25),
        misalignments={k: rigid_params_to_matrix(v) for k, v in poses.items()})
    case = generate_case(spec)
    result = run_pipeline(case.sequences, atlas_volume=synthetic_atlas(),
                          mask=case.mask, cfg=RegistrationConfig(stages=("rigid",)))
    pred = baseline_segment(result.sequences, result.mask)
    for rec in evaluate_case(case.gt, pred, case_id=case.case_id):
        assert rec.dice is not None and rec.dice > 0.95, (rec.label, rec.dice)
