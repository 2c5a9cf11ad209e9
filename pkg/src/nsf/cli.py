"""Batch command-line surface: generate synthetic samples, segment, evaluate.

Runs are reproducible: the seed defaults to a fixed constant (override with
--seed, or opt into entropy with --random-seed), per-sample rng streams are
spawned by index before dispatch, and outputs are byte-identical for any
worker count.  Exit codes: 0 success, 1 total failure, 2 partial failure.
"""

import argparse
import concurrent.futures
import json
import logging
import os
import secrets
import sys
from dataclasses import fields

import numpy as np

from . import nifti
from .errors import NsfError
from .generator import GeneratorConfig, TrainingPair, generate_sample
from .inference import ExternalPredictor, StubPredictor, evaluate_dataset, segment
from .metrics import write_roi_report_csv, write_roi_report_json
from .schema import default_schema, load_schema

log = logging.getLogger("nsf")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = os.environ.get("NSF_LOG_LEVEL", "info").strip().lower()
    if level not in _LOG_LEVELS:
        level = "info"
    logging.basicConfig(level=_LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def load_keyvalue_config(path):
    """Plain-text ``key = value`` file; '#' starts a comment."""
    mapping = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise NsfError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            mapping[key] = value
    return mapping


def generator_config_from_mapping(mapping):
    defaults = GeneratorConfig()
    known = {f.name for f in fields(GeneratorConfig)}
    unknown = set(mapping) - known
    if unknown:
        raise NsfError(f"unknown generator config keys: {sorted(unknown)}")
    kwargs = {}
    for f in fields(GeneratorConfig):
        if f.name not in mapping:
            continue
        raw = str(mapping[f.name])
        default = getattr(defaults, f.name)
        if isinstance(default, tuple):
            parts = raw.replace("(", "").replace(")", "").split(",")
            kwargs[f.name] = tuple(float(p) for p in parts if p.strip())
        elif isinstance(default, int):
            kwargs[f.name] = int(raw)
        else:
            kwargs[f.name] = float(raw)
    return GeneratorConfig(**kwargs)


def _load_generator_config(args):
    mapping = load_keyvalue_config(args.config) if args.config else {}
    config = generator_config_from_mapping(mapping)
    if args.random_seed:
        seed = secrets.randbelow(2**31)
        log.info("using random seed %d", seed)
        return GeneratorConfig(**{**_asdict(config), "seed": seed})
    if args.seed is not None:
        return GeneratorConfig(**{**_asdict(config), "seed": args.seed})
    return config


def _asdict(config):
    return {f.name: getattr(config, f.name) for f in fields(GeneratorConfig)}


def _load_schema(args):
    return load_schema(args.schema) if args.schema else default_schema()


def _make_predictor(spec, schema):
    if spec == "stub":
        return StubPredictor(schema)
    return ExternalPredictor(spec, schema)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

_NII_SUFFIXES = (".nii", ".nii.gz")


def _stem(name):
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return None


def _scan_pairs(input_dir):
    """Collect (stem, image_path, labels_path) pairs from one directory."""
    found = {}
    for name in sorted(os.listdir(input_dir)):
        stem = _stem(name)
        if stem is None:
            continue
        for kind in ("image", "labels"):
            if stem.endswith(f"_{kind}"):
                found.setdefault(stem[: -len(kind) - 1], {})[kind] = os.path.join(input_dir, name)
    pairs = []
    for stem in sorted(found):
        entry = found[stem]
        if "image" in entry and "labels" in entry:
            pairs.append((stem, entry["image"], entry["labels"]))
        else:
            log.warning("ignoring incomplete pair %r (need _image and _labels files)", stem)
    return pairs


def _generate_one(index, pair, stem, schema, config, out_dir):
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(index,)))
    sample, info = generate_sample(pair, schema, config, rng, with_info=True)
    prefix = os.path.join(out_dir, f"sample_{index:04d}")
    nifti.write_volume(sample.synth, f"{prefix}_synth.nii.gz")
    nifti.write_volume(sample.labels, f"{prefix}_labels.nii.gz")
    nifti.write_volume(sample.target_image, f"{prefix}_image.nii.gz")
    nifti.write_volume(sample.target_bias, f"{prefix}_bias.nii.gz")
    record = {
        "index": index,
        "seed": config.seed,
        "pair": stem,
        "regime": info.resolution.regime,
        "orientation": info.resolution.orientation,
        "voxel_size": [round(v, 6) for v in info.resolution.voxel_size],
        "gmm": info.gmm.as_table(schema),
    }
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def cmd_generate(args):
    schema = _load_schema(args)
    config = _load_generator_config(args)
    input_dir = args.input[0]
    if not os.path.isdir(input_dir):
        log.error("input directory does not exist: %s", input_dir)
        return 1
    os.makedirs(args.output, exist_ok=True)

    pairs = []
    failures = 0
    for stem, image_path, labels_path in _scan_pairs(input_dir):
        try:
            pair = TrainingPair(
                image=nifti.read_image(image_path), labels=nifti.read_labels(labels_path)
            )
            pairs.append((stem, pair))
        except (NsfError, OSError) as exc:
            failures += 1
            log.error("cannot load pair %r: %s", stem, exc)

    manifest_path = os.path.join(args.output, "manifest.jsonl")
    if args.count == 0:
        _atomic_write(manifest_path, "")
        log.info("nothing to generate (count 0)")
        return 0
    if not pairs:
        log.error("no usable training pairs in %s", input_dir)
        return 1

    selector = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(2**32,)))
    choices = selector.integers(0, len(pairs), size=args.count)

    lines = [None] * args.count
    errors = 0
    per_regime = {}

    def run(i):
        stem, pair = pairs[int(choices[i])]
        return _generate_one(i, pair, stem, schema, config, args.output)

    with concurrent.futures.ThreadPoolExecutor(max_workers=args.workers) as pool:
        futmap = {pool.submit(run, i): i for i in range(args.count)}
        for fut in concurrent.futures.as_completed(futmap):
            i = futmap[fut]
            try:
                lines[i] = fut.result()
                regime = json.loads(lines[i])["regime"]
                per_regime[regime] = per_regime.get(regime, 0) + 1
                log.info("sample %d done (%s)", i, regime)
            except (NsfError, OSError) as exc:
                errors += 1
                log.error("sample %d failed: %s", i, exc)

    _atomic_write(manifest_path, "".join(line + "\n" for line in lines if line is not None))
    log.info("per-regime counts: %s", dict(sorted(per_regime.items())))
    done = args.count - errors
    if done == 0:
        return 1
    return 2 if errors or failures else 0


def _atomic_write(path, text):
    tmp = f"{path}.part"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# segment
# ---------------------------------------------------------------------------


def _collect_inputs(paths):
    out = []
    for path in paths:
        if os.path.isdir(path):
            out.extend(
                os.path.join(path, name)
                for name in sorted(os.listdir(path))
                if _stem(name) is not None
            )
        else:
            out.append(path)
    return out


def _segment_one(path, predictor, schema, out_dir, tta):
    vol = nifti.read_image(path)
    result = segment(vol, predictor, tta=tta)
    stem = _stem(os.path.basename(path))
    nifti.write_volume(result.segmentation, os.path.join(out_dir, f"{stem}_seg.nii.gz"))
    write_roi_report_csv(result.report, schema, os.path.join(out_dir, f"{stem}_report.csv"), stem)
    write_roi_report_json(result.report, schema, os.path.join(out_dir, f"{stem}_report.json"), stem)
    return stem


def cmd_segment(args):
    schema = _load_schema(args)
    if not args.predictor:
        log.error("segment needs --predictor (stub or a descriptor JSON path)")
        return 1
    predictor = _make_predictor(args.predictor, schema)
    inputs = _collect_inputs(args.input)
    if not inputs:
        log.error("no input volumes given")
        return 1
    missing = [p for p in inputs if not os.path.exists(p)]
    for path in missing:
        log.error("input file does not exist: %s", path)
    if len(missing) == len(inputs):
        return 1
    os.makedirs(args.output, exist_ok=True)

    errors = len(missing)
    with concurrent.futures.ThreadPoolExecutor(max_workers=args.workers) as pool:
        futmap = {
            pool.submit(_segment_one, p, predictor, schema, args.output, args.tta): p
            for p in inputs
            if os.path.exists(p)
        }
        for fut in concurrent.futures.as_completed(futmap):
            path = futmap[fut]
            try:
                stem = fut.result()
                log.info("segmented %s", stem)
            except (NsfError, OSError) as exc:
                errors += 1
                log.error("segmentation of %s failed: %s", path, exc)

    if errors == len(inputs):
        return 1
    return 2 if errors else 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _index_by_stem(directory):
    return {
        _stem(name): os.path.join(directory, name)
        for name in sorted(os.listdir(directory))
        if _stem(name) is not None
    }


def cmd_evaluate(args):
    schema = _load_schema(args)
    if len(args.input) != 2:
        log.error("evaluate needs --input SCAN_DIR REFERENCE_DIR")
        return 1
    scan_dir, ref_dir = args.input
    for d in (scan_dir, ref_dir):
        if not os.path.isdir(d):
            log.error("not a directory: %s", d)
            return 1
    if not args.predictor:
        log.error("evaluate needs --predictor (stub or a descriptor JSON path)")
        return 1
    predictor = _make_predictor(args.predictor, schema)

    scans = _index_by_stem(scan_dir)
    refs = _index_by_stem(ref_dir)
    matched = sorted(set(scans) & set(refs))
    for stem in sorted(set(scans) ^ set(refs)):
        log.warning("unmatched stem %r skipped", stem)
    if not matched:
        log.error("no filename stems in common between %s and %s", scan_dir, ref_dir)
        return 1

    cases, names = [], []
    errors = 0
    for stem in matched:
        try:
            cases.append((nifti.read_image(scans[stem]), nifti.read_labels(refs[stem])))
            names.append(stem)
        except (NsfError, OSError) as exc:
            errors += 1
            log.error("cannot load case %r: %s", stem, exc)
    if not cases:
        return 1

    report = evaluate_dataset(cases, predictor, tta=args.tta, names=names)
    os.makedirs(args.output, exist_ok=True)
    _write_evaluation(report, schema, args.output)
    log.info(
        "anatomy mean Dice %.4f, WMH mean Dice %.4f, mean WMH load %.1f mm^3",
        report.anatomy_mean_dice,
        report.wmh_mean_dice,
        report.mean_pred_wmh_mm3,
    )
    return 2 if errors else 0


def _write_evaluation(report, schema, out_dir):
    import csv

    names = schema.names
    per_case_path = os.path.join(out_dir, "per_case.csv")
    with open(per_case_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "id", "name", "volume_mm3", "ref_volume_mm3", "dice"])
        for case in report.cases:
            for lab in sorted(case.dice):
                writer.writerow(
                    [
                        case.name,
                        lab,
                        names[lab],
                        f"{case.pred_volumes[lab]:.6f}",
                        f"{case.ref_volumes[lab]:.6f}",
                        f"{case.dice[lab]:.6f}",
                    ]
                )

    with open(os.path.join(out_dir, "dice_summary.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "name", "mean_dice"])
        for lab, val in sorted(report.mean_dice.items()):
            writer.writerow([lab, names[lab], f"{val:.6f}"])
        writer.writerow(["", "anatomy-average", f"{report.anatomy_mean_dice:.6f}"])

    with open(os.path.join(out_dir, "correlations.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["roi", "pearson", "spearman"])
        for key, val in sorted(report.correlations.items()):
            if val is None:
                writer.writerow([key, "", ""])
            else:
                writer.writerow([key, f"{val['pearson']:.10f}", f"{val['spearman']:.10f}"])

    payload = {
        "mean_dice": {names[l]: v for l, v in report.mean_dice.items()},
        "anatomy_mean_dice": report.anatomy_mean_dice,
        "wmh_mean_dice": report.wmh_mean_dice,
        "mean_pred_wmh_mm3": report.mean_pred_wmh_mm3,
        "correlations": report.correlations,
        "cases": [
            {
                "subject": c.name,
                "dice": {names[l]: v for l, v in c.dice.items()},
                "pred_wmh_mm3": c.pred_wmh_mm3,
                "ref_wmh_mm3": c.ref_wmh_mm3,
            }
            for c in report.cases
        ],
    }
    with open(os.path.join(out_dir, "evaluation.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nsf",
        description="Synthetic-MRI-driven brain segmentation toolkit",
    )
    parser.add_argument("--command", required=True, choices=("generate", "segment", "evaluate"))
    parser.add_argument("--input", nargs="+", required=True, help="input path(s); see README")
    parser.add_argument("--output", required=True, help="output directory")
    parser.add_argument("--schema", default=None, help="schema JSON (default: built-in 36-ROI set)")
    parser.add_argument("--config", default=None, help="generator config key=value file")
    parser.add_argument("--count", type=int, default=1, help="samples to generate")
    parser.add_argument("--seed", type=int, default=None, help="override the fixed default seed")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--predictor", default=None, help="'stub' or predictor descriptor JSON")
    parser.add_argument("--tta", action=argparse.BooleanOptionalAction, default=True,
                        help="left-right flip test-time augmentation")
    parser.add_argument("--random-seed", action="store_true",
                        help="draw the seed from system entropy instead of the fixed default")
    return parser


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.count < 0 or args.workers < 1:
        log.error("count must be >= 0 and workers >= 1")
        return 1
    handler = {"generate": cmd_generate, "segment": cmd_segment, "evaluate": cmd_evaluate}
    try:
        return handler[args.command](args)
    except NsfError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
