"""Command line entry point: ``nca-wss {synth,train,segment,eval}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, coerce, field_types, read_kv_file, write_kv_file
from .data import ManifestError, SynthSpec, generate_synth, load_manifest, save_mask
from .evaluate import cross_domain, evaluate, merge_reports, segment_manifest, summary_table
from .segment import overlay, save_response
from .train import TrainingDivergedError, train_fold

log = logging.getLogger("nca_wss")


class UsageError(Exception):
    pass


def _flag(name):
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser, cls, skip=()):
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        typ = f.type if f.type in (int, float, bool, str) else str
        parser.add_argument(_flag(f.name), dest=f.name, default=None, metavar=typ.__name__.upper(),
                            help=f"(default: {f.default!r})")


def _split_config_file(path):
    if path is None:
        return {}
    if not Path(path).is_file():
        raise UsageError(f"--config: file not found: {path}")
    try:
        return read_kv_file(path)
    except ValueError as exc:
        raise UsageError(f"--config: {exc}") from exc


def _build(cls, file_values, args, extra=None):
    """Dataclass instance with precedence flag > config file > default."""
    types = field_types(cls)
    raw = {k: v for k, v in file_values.items() if k in types}
    raw.update({k: getattr(args, k) for k in types if getattr(args, k, None) is not None})
    raw.update(extra or {})
    values = {}
    for key, value in raw.items():
        try:
            values[key] = _parse_field(cls, key, value, types[key])
        except ValueError as exc:
            raise UsageError(f"{_flag(key)}: {exc}") from exc
    try:
        return cls(**values)
    except ValueError as exc:
        message = str(exc)
        field_name = message.split()[0]
        if field_name in types:
            message = f"{_flag(field_name)}: {message}"
        raise UsageError(message) from exc


def _parse_field(cls, key, value, typ):
    if cls is SynthSpec and key == "frequencies" and isinstance(value, str):
        return tuple(float(v) for v in value.split(","))
    if cls is SynthSpec and key == "cell_colors" and isinstance(value, str):
        return tuple(tuple(float(c) for c in rgb.split()) for rgb in value.split(";"))
    if typ in (int, float, bool, str):
        return coerce(value, typ)
    return value


def _known_keys():
    return set(field_types(TrainConfig)) | set(field_types(SynthSpec))


def _check_file_keys(values):
    unknown = set(values) - _known_keys()
    if unknown:
        raise UsageError(f"--config: unknown keys {sorted(unknown)}")


def _manifest(path, flag="--manifest"):
    if not Path(path).is_file():
        raise UsageError(f"{flag}: file not found: {path}")
    try:
        return load_manifest(path)
    except ManifestError as exc:
        raise UsageError(f"{flag}: {exc}") from exc


def _checkpoint(path):
    if not Path(path).is_file():
        raise UsageError(f"--checkpoint: file not found: {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError, OSError) as exc:
        raise UsageError(f"--checkpoint: {path}: {exc}") from exc


# --------------------------------------------------------------------------


def cmd_synth(args):
    file_values = _split_config_file(args.config)
    _check_file_keys(file_values)
    spec = _build(SynthSpec, file_values, args)
    manifest = generate_synth(spec, args.out)
    print(Path(args.out) / "manifest.csv")
    log.info("%d samples, dataset id %s", len(manifest), manifest.dataset_id)
    return 0


def _folds_to_run(fold, config):
    if fold in (None, "all"):
        return list(range(config.folds))
    if fold == "none":
        return [None]
    try:
        k = int(fold)
    except ValueError:
        raise UsageError("--fold: expected an integer, 'all' or 'none'") from None
    if not 0 <= k < config.folds:
        raise UsageError(f"--fold: must be in [0, {config.folds})")
    return [k]


def cmd_train(args):
    manifest = _manifest(args.manifest)
    file_values = _split_config_file(args.config)
    _check_file_keys(file_values)
    extra = {}
    if "num_classes" not in file_values and args.num_classes is None and manifest.num_classes >= 2:
        extra["num_classes"] = manifest.num_classes
    config = _build(TrainConfig, file_values, args, extra)
    if args.jobs < 1:
        raise UsageError("--jobs: must be >= 1")
    folds = _folds_to_run(args.fold, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_kv_file(config, out / "config.txt")
    for fold in folds:
        fold_dir = out / ("all" if fold is None else f"fold{fold}")
        try:
            result = train_fold(manifest, fold, config, out_dir=fold_dir, jobs=args.jobs)
        except TrainingDivergedError as exc:
            print(f"training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
            return 1
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        meta = {"dataset_id": manifest.dataset_id, "fold": fold, "class_names": manifest.class_names,
                "epoch": config.epochs, "val_ids": result.val_ids}
        path = save_checkpoint(fold_dir / "final.ckpt", result.params, config, meta, result.adam)
        last = result.log[-1] if result.log else {}
        print(f"{path}  " + " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in last.items()))
    return 0


def _inference_config(config, args):
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = int(args.seed)
    if getattr(args, "otsu_bins", None) is not None:
        changes["otsu_bins"] = int(args.otsu_bins)
    if getattr(args, "seg_state_index", None) is not None:
        changes["seg_state_index"] = int(args.seg_state_index)
    if getattr(args, "inference_mode", None) is not None:
        changes["inference_mode"] = args.inference_mode
    try:
        return config.replace(**changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_segment(args):
    ckpt = _checkpoint(args.checkpoint)
    manifest = _manifest(args.manifest)
    config = _inference_config(ckpt.config, args)
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    if args.overlay:
        (out / "overlays").mkdir(exist_ok=True)
    if args.dump_response:
        (out / "responses").mkdir(exist_ok=True)
    records = []
    for entry, image, logits, seg in segment_manifest(ckpt.params, manifest, config, args.largest_component, args.jobs):
        save_mask(seg.mask, out / "masks" / f"{entry.id}.png")
        if args.overlay:
            Image.fromarray(overlay(image, seg.mask), mode="RGB").save(out / "overlays" / f"{entry.id}.png")
        if args.dump_response:
            save_response(out / "responses" / f"{entry.id}.f64", seg.response)
        records.append({"id": entry.id, "degenerate": seg.degenerate, "threshold": seg.threshold,
                        "predicted_class": int(np.argmax(logits)), "foreground_pixels": int(seg.mask.sum())})
    (out / "segment.jsonl").write_text("".join(json.dumps(r) + "\n" for r in records))
    n_degenerate = sum(r["degenerate"] for r in records)
    print(f"{len(records)} masks written to {out / 'masks'} ({n_degenerate} degenerate)")
    return 0


def cmd_eval(args):
    checkpoints = [(_checkpoint(p), p) for p in args.checkpoint]
    manifests = [_manifest(p) for p in args.manifest]
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    kwargs = {"iou_mode": args.iou_mode, "keep_largest": args.largest_component, "jobs": args.jobs}

    models = {}
    for ckpt, path in checkpoints:
        train_id = ckpt.metadata.get("dataset_id", "model") if args.cross else "model"
        path = Path(path)
        run_id = path.parent.name if path.stem == "final" else path.stem
        models.setdefault(train_id, []).append((run_id, ckpt.params, _inference_config(ckpt.config, args)))
    if not args.cross:
        # every checkpoint is a run of one model; each manifest is scored on its own
        grid = {"model": {}}
        for manifest in manifests:
            reports = [evaluate(p, manifest, c, run_id=rid, **kwargs) for rid, p, c in models["model"]]
            grid["model"][manifest.dataset_id] = merge_reports(reports, run_id=f"model->{manifest.dataset_id}")
            grid["model"][manifest.dataset_id].test_dataset = manifest.dataset_id
            if out:
                for r in reports:
                    r.write(out / f"{manifest.dataset_id}__{r.run_id}.jsonl")
    else:
        grid = cross_domain(models, manifests, **kwargs)

    failed = 0
    lines = []
    for train_id, row in grid.items():
        for test_id, report in row.items():
            failed += len(report.skipped)
            mean = report.pooled_iou if args.aggregation == "pooled" and report.single_run else report.mean_iou
            std = "" if report.single_run else f" ± {report.std_iou:.4f}"
            acc = "" if report.accuracy is None else f"  accuracy {report.accuracy:.3f}"
            lines.append(f"{train_id} -> {test_id}: IoU {mean:.4f}{std}  (runs={len(report.run_means)}, "
                         f"images={report.n_images}, skipped={len(report.skipped)}){acc}")
            if out:
                report.write(out / f"{train_id}__{test_id}.jsonl")
    table = summary_table(grid)
    print("\n".join(lines))
    print()
    print(table)
    if out:
        (out / "summary.txt").write_text("\n".join(lines) + "\n\n" + table + "\n")
    return 1 if failed else 0


# --------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="nca-wss", description="NCA weakly supervised segmentation")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blob dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_dataclass_flags(p, SynthSpec)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the NCA classifier (cross-validation folds)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--fold", default="all", help="fold index, 'all' (default) or 'none' (train on everything)")
    p.add_argument("--jobs", type=int, default=1)
    _add_dataclass_flags(p, TrainConfig)
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (("segment", cmd_segment, "write masks for every manifest image"),
                                  ("eval", cmd_eval, "IoU reports; --cross gives the train x test grid")):
        p = sub.add_parser(name, help=help_text)
        if name == "segment":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--manifest", required=True)
            p.add_argument("--out", required=True)
            p.add_argument("--overlay", action="store_true", help="also write mask-outline overlays")
            p.add_argument("--dump-response", action="store_true", help="write raw float64 response maps")
        else:
            p.add_argument("--checkpoint", required=True, nargs="+")
            p.add_argument("--manifest", required=True, nargs="+")
            p.add_argument("--out")
            p.add_argument("--cross", action="store_true")
            p.add_argument("--iou-mode", choices=("foreground", "mean"), default="foreground")
            p.add_argument("--aggregation", choices=("per-image", "pooled"), default="per-image")
        p.add_argument("--largest-component", action="store_true", help="keep only the largest connected component")
        p.add_argument("--seed", type=int, help="inference seed (default: the checkpoint's)")
        p.add_argument("--otsu-bins", type=int)
        p.add_argument("--seg-state-index", type=int)
        p.add_argument("--inference-mode", choices=("expected", "stochastic"),
                       help="expected (deterministic mean update) or stochastic masks; default: the checkpoint's")
        p.add_argument("--jobs", type=int, default=1)
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"nca-wss {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, FloatingPointError) as exc:
        print(f"nca-wss {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
