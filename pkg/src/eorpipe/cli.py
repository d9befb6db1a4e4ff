"""Command-line surface for batch runs.

Subcommands: preprocess, evaluate, classify-eor, phantom, report.
Exit codes: 0 success, 1 internal error, 2 usage or input error,
3 partial failure (some cases processed, some failed).  Logs go to
stderr, data to files under --out (no subcommand writes anywhere
else) or to stdout.  A JSON --config file supplies option defaults;
explicit flags win.  All randomness funnels through --seed.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cohort as cohort_mod
from . import phantom as phantom_mod
from .eor import EorClass, EorConfig, classification_metrics, classify_eor
from .errors import EorPipeError, InputError, MissingReferenceSequence
from .metrics import TARGET_LABELS, volume_cm3, extract_mask
from .nifti import load_label_volume, load_volume, save_label_volume, save_volume
from .preprocess import RegistrationConfig, run_pipeline

_EXIT_OK = 0
_EXIT_INTERNAL = 1
_EXIT_INPUT = 2
_EXIT_PARTIAL = 3


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError(f"config {path} must be a JSON object")
    return doc


def _opt(args: argparse.Namespace, name: str, default):
    """Effective option value: explicit flag, then config file, then default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    return args.config_values.get(name, default)


def _flag(args: argparse.Namespace, name: str) -> bool:
    if getattr(args, name, False):
        return True
    return bool(args.config_values.get(name, False))


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _registration_config(args: argparse.Namespace) -> RegistrationConfig:
    kwargs = {}
    metric = _opt(args, "metric", None)
    if metric is not None:
        kwargs["metric"] = metric
    iters = _opt(args, "max_iterations", None)
    if iters is not None:
        kwargs["max_iterations"] = int(iters)
    stages = _opt(args, "stages", None)
    if stages is not None:
        kwargs["stages"] = tuple(s.strip() for s in stages.split(",") if s.strip())
    samples = _opt(args, "samples", None)
    if samples is not None:
        kwargs["samples_per_level"] = int(samples)
    seed = _opt(args, "seed", None)
    if seed is not None:
        kwargs["sample_seed"] = int(seed)
    return RegistrationConfig(**kwargs)


# ---------------------------------------------------------------------------
# preprocess

def cmd_preprocess(args: argparse.Namespace) -> int:
    sequence_paths = {name: getattr(args, name) for name in
                      ("t1w", "t1ce", "t2w", "flair") if getattr(args, name)}
    if "t1ce" not in sequence_paths:
        raise MissingReferenceSequence("t1ce is required as the registration reference")
    skip = _flag(args, "skip_registration")
    atlas_path = _opt(args, "atlas", None)
    use_synthetic = _flag(args, "synthetic_atlas")
    if not skip and not atlas_path and not use_synthetic:
        raise InputError("registration needs --atlas PATH or --synthetic-atlas "
                         "(or pass --skip-registration)")

    sequences = {}
    for name, path in sequence_paths.items():
        _, sequences[name] = load_volume(path)
    mask = None
    if args.mask:
        _, mask = load_label_volume(args.mask)
    atlas_volume = None
    if not skip:
        if atlas_path:
            _, atlas_volume = load_volume(atlas_path)
        else:
            atlas_volume = phantom_mod.synthetic_atlas()

    cfg = _registration_config(args)
    result = run_pipeline(sequences, atlas_volume=atlas_volume, mask=mask,
                          cfg=cfg, skip_registration=skip,
                          keep_intermediates=_flag(args, "keep_intermediates"))

    out = _out_dir(args)
    for name, grid in result.sequences.items():
        save_volume(out / f"{name}_preprocessed.nii.gz", grid)
    save_label_volume(out / "brain_mask.nii.gz", result.mask.mask)
    for name, transform in result.transforms.items():
        np.savetxt(out / f"{name}_to_atlas.txt", transform.matrix, fmt="%.17g")
    if result.intermediates:
        for name, grid in result.intermediates.items():
            save_volume(out / f"{name}_resampled.nii.gz", grid)
    for note in result.warnings:
        _log(f"warning: {note}")
    for name, reg in result.registrations.items():
        flag = "" if reg.improved else " (no improving step; kept identity)"
        _log(f"registered {name}: final {cfg.metric}={reg.final_metric:.6f}{flag}")
    _log(f"preprocess: wrote {len(result.sequences)} sequences + mask to {out}")
    return _EXIT_OK


# ---------------------------------------------------------------------------
# evaluate

def _evaluate_one(mc, base_dir: Path, schemes, labels, empty_policy):
    resolved = cohort_mod.evaluate_manifest([mc], schemes=schemes, labels=labels,
                                            empty_policy=empty_policy,
                                            base_dir=base_dir)
    return resolved[0]


def _evaluate_cases(manifest_cases, base_dir, schemes, labels, empty_policy, jobs):
    """Evaluate in manifest order; failures collected, not fatal."""
    records: list = [None] * len(manifest_cases)
    failures: list[tuple[str, str]] = []

    def work(i):
        return _evaluate_one(manifest_cases[i], base_dir, schemes, labels, empty_policy)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {i: pool.submit(work, i) for i in range(len(manifest_cases))}
            for i in range(len(manifest_cases)):
                try:
                    records[i] = futures[i].result()
                except Exception as exc:
                    failures.append((manifest_cases[i].case_id,
                                     f"{type(exc).__name__}: {exc}"))
    else:
        for i in range(len(manifest_cases)):
            try:
                records[i] = work(i)
            except Exception as exc:
                failures.append((manifest_cases[i].case_id,
                                 f"{type(exc).__name__}: {exc}"))
    return [r for r in records if r is not None], failures


def _write_summary(out: Path, summary) -> None:
    (out / "summary.json").write_text(cohort_mod.render_json(summary))
    (out / "summary.csv").write_text(cohort_mod.render_csv(summary))
    (out / "summary.md").write_text(cohort_mod.render_markdown(summary))


def cmd_evaluate(args: argparse.Namespace) -> int:
    manifest_path = Path(args.manifest)
    manifest_cases, _meta = cohort_mod.load_manifest(manifest_path)
    schemes = None
    schemes_path = _opt(args, "schemes", None)
    if schemes_path:
        schemes = cohort_mod.load_schemes(schemes_path)
    labels = tuple(x.strip() for x in
                   _opt(args, "labels", "ET,ED,CAV").split(",") if x.strip())
    for label in labels:
        if label not in TARGET_LABELS:
            raise InputError(f"unknown label target {label!r}; "
                             f"choose from {sorted(TARGET_LABELS)}")
    empty_policy = _opt(args, "empty_policy", "undefined")
    jobs = int(_opt(args, "jobs", 1))

    records, failures = _evaluate_cases(manifest_cases, manifest_path.parent,
                                        schemes, labels, empty_policy, jobs)
    out = _out_dir(args)
    if records:
        eor_cfg = EorConfig(threshold_cm3=float(_opt(args, "threshold", 0.1)))
        summary = cohort_mod.build_report(
            records, labels=labels,
            ci_method=_opt(args, "ci", "t"),
            ci_seed=int(_opt(args, "seed", cohort_mod.BOOTSTRAP_DEFAULT_SEED)),
            eor_cfg=eor_cfg, tp_rule=_opt(args, "tp_rule", "threshold"))
        (out / "per_case_metrics.csv").write_text(
            cohort_mod.write_metrics_csv(records))
        _write_summary(out, summary)
        _log(f"evaluate: {len(records)} case(s) -> {out}")
    for case_id, reason in failures:
        _log(f"failed case {case_id}: {reason}")
    if failures and records:
        _log(f"evaluate: partial failure, {len(failures)} case(s) skipped")
        return _EXIT_PARTIAL
    if failures:
        return _EXIT_INPUT
    return _EXIT_OK


# ---------------------------------------------------------------------------
# classify-eor

def cmd_classify_eor(args: argparse.Namespace) -> int:
    manifest_path = Path(args.manifest)
    manifest_cases, _meta = cohort_mod.load_manifest(manifest_path)
    schemes = None
    schemes_path = _opt(args, "schemes", None)
    if schemes_path:
        schemes = cohort_mod.load_schemes(schemes_path)
    threshold = float(_opt(args, "threshold", 0.1))
    eor_cfg = EorConfig(threshold_cm3=threshold)
    base = manifest_path.parent

    rows = []
    pairs_by_model: dict[str, list[tuple[EorClass, EorClass]]] = {}
    for mc in manifest_cases:
        if not mc.gt:
            raise InputError(f"case {mc.case_id} has no ground-truth path")
        _, gt = load_label_volume(_resolve(base, mc.gt))
        gt_vol = volume_cm3(extract_mask(gt, "ET"), gt.spacing)
        gt_cls = classify_eor(gt_vol, eor_cfg)
        for model in sorted(mc.predictions):
            _, pred = load_label_volume(_resolve(base, mc.predictions[model]))
            if schemes and model in schemes:
                pred = cohort_mod.harmonize(pred, schemes[model])
            pred_vol = volume_cm3(extract_mask(pred, "ET"), pred.spacing)
            pred_cls = classify_eor(pred_vol, eor_cfg)
            rows.append((mc.case_id, model, gt_vol, pred_vol,
                         gt_cls.value, pred_cls.value))
            pairs_by_model.setdefault(model, []).append((gt_cls, pred_cls))

    out = _out_dir(args)
    lines = ["case_id,model,gt_volume_cm3,pred_volume_cm3,gt_class,pred_class"]
    for row in rows:
        lines.append(f"{row[0]},{row[1]},{row[2]!r},{row[3]!r},{row[4]},{row[5]}")
    (out / "eor_table.csv").write_text("\n".join(lines) + "\n")

    report = {}
    print("## Resection-class classification (threshold "
          f"{threshold:g} cm^3)\n")
    print("| Metric | " + " | ".join(sorted(pairs_by_model)) + " |")
    print("| --- | " + " | ".join("---" for _ in pairs_by_model) + " |")
    metrics_by_model = {model: classification_metrics(pairs)
                        for model, pairs in sorted(pairs_by_model.items())}
    for metric in ("precision", "recall", "f1", "accuracy"):
        cells = [f"{getattr(metrics_by_model[m], metric):.4f}"
                 for m in sorted(metrics_by_model)]
        print(f"| {metric.capitalize()} | " + " | ".join(cells) + " |")
    for model, cm in metrics_by_model.items():
        report[model] = {
            "precision": cm.precision, "recall": cm.recall, "f1": cm.f1,
            "accuracy": cm.accuracy, "n": cm.n,
            "degenerate_classes": list(cm.degenerate_classes),
        }
    (out / "eor_metrics.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    return _EXIT_OK


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


# ---------------------------------------------------------------------------
# phantom

def cmd_phantom(args: argparse.Namespace) -> int:
    seed = int(_opt(args, "seed", 0))
    n = int(_opt(args, "n", 1))
    spec_path = _opt(args, "spec", None)
    if spec_path:
        base = phantom_mod.load_spec(spec_path)
    else:
        base = phantom_mod.default_phantom_spec(
            seed=seed, noise_sigma=float(_opt(args, "noise", 0.5)))
    variation = phantom_mod.VariationRanges(
        gtr_ratio=float(_opt(args, "gtr_ratio", 0.5)),
        translation_mm=float(_opt(args, "translation", 0.0)),
        rotation_deg=float(_opt(args, "rotation", 0.0)))
    jobs = int(_opt(args, "jobs", 1))
    cases, meta = phantom_mod.generate_cohort(n, base, variation, seed=seed,
                                              jobs=jobs)

    if _flag(args, "with_baseline"):
        misaligned = (variation.translation_mm > 0 or variation.rotation_deg > 0
                      or bool(base.misalignments))
        atlas_volume = phantom_mod.synthetic_atlas(
            base.brain_semi_axes_mm) if misaligned else None
        # The generator moves sequences rigidly, so align them back with
        # the rigid stage unless the flags ask for something else.
        cfg = _registration_config(args)
        if _opt(args, "stages", None) is None:
            cfg = replace(cfg, stages=("rigid",))
        for case in cases:
            result = run_pipeline(case.sequences, atlas_volume=atlas_volume,
                                  mask=case.mask, cfg=cfg,
                                  skip_registration=not misaligned)
            case.predictions["baseline"] = phantom_mod.baseline_segment(
                result.sequences, result.mask)

    out = _out_dir(args)
    manifest = phantom_mod.write_cohort(cases, out, meta=meta)
    _log(f"phantom: wrote {len(cases)} case(s), manifest {manifest}")
    return _EXIT_OK


# ---------------------------------------------------------------------------
# report

def cmd_report(args: argparse.Namespace) -> int:
    records = cohort_mod.read_metrics_csv(args.metrics_csv)
    if not records:
        raise InputError(f"no case rows in {args.metrics_csv}")
    eor_cfg = EorConfig(threshold_cm3=float(_opt(args, "threshold", 0.1)))
    summary = cohort_mod.build_report(
        records,
        ci_method=_opt(args, "ci", "t"),
        ci_seed=int(_opt(args, "seed", cohort_mod.BOOTSTRAP_DEFAULT_SEED)),
        eor_cfg=eor_cfg, tp_rule=_opt(args, "tp_rule", "threshold"))
    out = _out_dir(args)
    _write_summary(out, summary)
    _log(f"report: wrote summary artifacts to {out}")
    return _EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eorpipe",
        description="Postoperative glioma volumetry: preprocessing, "
                    "segmentation metrics, resection classification, and "
                    "cohort reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON file with option defaults "
                                        "(explicit flags win)")
        p.add_argument("--out", required=True, help="output directory; all "
                       "files are written under it")

    p = sub.add_parser("preprocess", help="align one case to the atlas grid "
                       "and z-score it")
    common(p)
    for name in ("t1w", "t1ce", "t2w", "flair"):
        p.add_argument(f"--{name}", help=f"{name} NIfTI path")
    p.add_argument("--mask", help="external brain mask (T1ce native space)")
    p.add_argument("--atlas", help="atlas reference NIfTI (240x240x155 @ 1mm)")
    p.add_argument("--synthetic-atlas", action="store_true", default=False,
                   help="use the built-in synthetic atlas render")
    p.add_argument("--skip-registration", action="store_true", default=False,
                   help="assume inputs already share atlas world coordinates")
    p.add_argument("--keep-intermediates", action="store_true", default=False,
                   help="also write resampled, un-normalized volumes")
    p.add_argument("--metric", choices=("NCC", "MSE"))
    p.add_argument("--stages", help="comma list from: rigid,affine")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--samples", type=int, help="metric sample budget per level")
    p.add_argument("--seed", type=int, help="sampling seed")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("evaluate", help="score manifest predictions and "
                       "write cohort reports")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--schemes", help="JSON label-scheme file")
    p.add_argument("--labels", help="comma list, default ET,ED,CAV")
    p.add_argument("--empty-dice", choices=("undefined", "one"),
                   dest="empty_policy",
                   help="overlap value when gt and prediction are both "
                        "empty: leave undefined, or score 1")
    p.add_argument("--ci", choices=("t", "bootstrap"))
    p.add_argument("--threshold", type=float, help="residual volume cut, cm^3")
    p.add_argument("--tp-rule", choices=("threshold", "nonzero"), dest="tp_rule")
    p.add_argument("--seed", type=int, help="bootstrap seed")
    p.add_argument("--jobs", type=int, help="parallel case evaluations")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("classify-eor", help="resection-class table and "
                       "classification metrics")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--schemes", help="JSON label-scheme file")
    p.add_argument("--threshold", type=float, help="residual volume cut, cm^3")
    p.set_defaults(func=cmd_classify_eor)

    p = sub.add_parser("phantom", help="generate a synthetic cohort")
    common(p)
    p.add_argument("--n", type=int, help="number of cases (default 1)")
    p.add_argument("--seed", type=int, help="cohort seed (default 0)")
    p.add_argument("--spec", help="phantom spec JSON to use as the base case")
    p.add_argument("--noise", type=float, help="per-sequence noise sigma "
                   "(default 0.5)")
    p.add_argument("--gtr-ratio", type=float, dest="gtr_ratio",
                   help="fraction of fully resected cases (default 0.5)")
    p.add_argument("--translation", type=float, help="max per-axis "
                   "misalignment, mm (default 0)")
    p.add_argument("--rotation", type=float, help="max per-axis misalignment, "
                   "degrees (default 0)")
    p.add_argument("--with-baseline", action="store_true", default=False,
                   help="run the pipeline + baseline segmenter and include "
                        "predictions in the manifest")
    p.add_argument("--jobs", type=int, help="parallel case generation")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("report", help="rebuild summary artifacts from a "
                       "per-case metrics CSV")
    common(p)
    p.add_argument("--metrics-csv", required=True, dest="metrics_csv")
    p.add_argument("--ci", choices=("t", "bootstrap"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--tp-rule", choices=("threshold", "nonzero"), dest="tp_rule")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.config_values = _load_config(getattr(args, "config", None))
        return args.func(args)
    except InputError as exc:
        _log(f"error: {type(exc).__name__}: {exc}")
        return _EXIT_INPUT
    except EorPipeError as exc:
        _log(f"error: {type(exc).__name__}: {exc}")
        return _EXIT_INTERNAL
    except OSError as exc:
        _log(f"error: {type(exc).__name__}: {exc}")
        return _EXIT_INPUT
    except Exception:  # pragma: no cover - safety net
        traceback.print_exc()
        return _EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
