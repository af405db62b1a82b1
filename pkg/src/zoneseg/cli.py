"""``zoneseg`` command line: synth, stats, resample, train, crossval, predict, evaluate, inspect.

Exit codes: 0 success, 1 usage/config error, 2 data/format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import introspection, runtime
from .errors import UsageError, ZonesegError
from .metrics import DiceReport
from .models import load_checkpoint
from .training import (
    Case,
    TrainingConfig,
    dataset_files,
    load_dataset,
    predict_case,
    prepare_case,
    remap_labels,
    run_crossval,
    run_final_test,
    train_only,
)
from .volume import (
    LABELS_2,
    LABELS_6,
    Volume,
    label_balance_stats,
    histogram,
    read_volume,
    resample,
    synth_phantom,
    write_balance_csv,
    write_histogram_csv,
    write_volume,
)

SUBCOMMANDS = ("synth", "stats", "resample", "train", "crossval", "predict", "evaluate", "inspect")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _triple(text: str, cast=float):
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected AxBxC, got {text!r}")
    try:
        return tuple(cast(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _int_triple(text):
    return _triple(text, int)


def _weights(text: str):
    try:
        return [float(w) for w in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_common(p):
    p.add_argument("--out", required=True, help="run directory; every output goes here")
    p.add_argument("--threads", type=int, default=None, help="internal thread cap (env ZONESEG_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_training_flags(p):
    p.add_argument("--data", required=True, help="directory of <id>_image.zvol / <id>_labels.zvol pairs")
    p.add_argument("--config", help="run-config JSON, or a manifest.json from an earlier run")
    p.add_argument("--variant", choices=("aniso", "iso"))
    p.add_argument("--labels", type=int, choices=(3, 6))
    p.add_argument("--folds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weights", type=_weights, help="comma-separated per-label loss weights")
    p.add_argument("--seed", type=int)
    p.add_argument("--l2", dest="l2_lambda", type=float)
    p.add_argument("--width-scale", help="e.g. 1/4 or 0.25")
    p.add_argument("--no-norm", action="store_true", help="disable per-conv instance normalisation")
    p.add_argument("--iso-order", choices=("3d2d", "2d3d"))
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--target-spacing", type=_triple, help="resample inputs first, e.g. 1x1x3.6")
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                   help="override any config field, e.g. augmentation.flip_prob=0.2")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zoneseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate phantom image/label pairs")
    _add_common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_int_triple, default=(64, 64, 16), help="nx x ny x nz")
    p.add_argument("--spacing", type=_triple, default=(1.0, 1.0, 3.6), help="mm, sx x sy x sz")
    p.add_argument("--labels", type=int, choices=(3, 6), default=3)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--difficulty", type=float, default=1.0)
    p.add_argument("--tz-fraction", type=float, default=0.7)
    p.add_argument("--prefix", default="phantom", help="volume id prefix, e.g. test for a held-out set")

    p = sub.add_parser("stats", help="TZ/PZ balance statistics")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--bins", type=int, default=10)

    p = sub.add_parser("resample", help="resample volumes to a new spacing")
    _add_common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", nargs="+")
    src.add_argument("--data")
    p.add_argument("--spacing", type=_triple, required=True)
    p.add_argument("--mode", choices=("trilinear", "nearest"))

    p = sub.add_parser("train", help="train on all volumes; optionally score a held-out set")
    _add_common(p)
    _add_training_flags(p)
    p.add_argument("--test-data", help="held-out directory for the final test run")

    p = sub.add_parser("crossval", help="k-fold cross-validation")
    _add_common(p)
    _add_training_flags(p)

    p = sub.add_parser("predict", help="segment volumes with a checkpoint")
    _add_common(p)
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", nargs="+")
    src.add_argument("--data")
    p.add_argument("--target-spacing", type=_triple)
    p.add_argument("--no-normalize-intensity", action="store_true")

    p = sub.add_parser("evaluate", help="dice of predictions against ground truth")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--out", help="optional run directory for report CSVs")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("inspect", help="render feature-map grids")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True, help="label volume used to pick the mid-prostate slice")
    p.add_argument("--layers", default=",".join(introspection.LAYER_TAPS))
    p.add_argument("--compare-model", help="second checkpoint for the conv7b comparison")
    p.add_argument("--no-normalize-intensity", action="store_true")
    return parser


# --- config resolution ----------------------------------------------------------


def resolve_config(args) -> TrainingConfig:
    """Defaults, then the config file, then explicit flags."""
    cfg = TrainingConfig().to_dict()
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        if "command" in loaded and "config" in loaded:
            loaded = loaded["config"]
        _merge(cfg, loaded)
    flags = {
        "variant": args.variant,
        "labels": args.labels,
        "folds": args.folds,
        "epochs": args.epochs,
        "lr": args.lr,
        "seed": args.seed,
        "l2_lambda": args.l2_lambda,
        "width_scale": args.width_scale,
        "iso_order": args.iso_order,
    }
    for key, value in flags.items():
        if value is not None:
            cfg[key] = value
    if args.weights is not None:
        cfg["label_weights"] = args.weights
    if args.no_norm:
        cfg["normalization"] = False
    if args.no_augment:
        cfg["augmentation"]["enabled"] = False
    if args.target_spacing is not None:
        cfg["target_spacing"] = list(args.target_spacing)
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=JSON, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        *parents, leaf = key.split(".")
        for part in parents:
            if not isinstance(node.get(part), dict):
                raise UsageError(f"unknown config section {part!r}")
            node = node[part]
        if leaf not in node:
            raise UsageError(f"unknown config key {key!r}")
        node[leaf] = value
    weights = cfg.get("label_weights")
    if args.weights is None and weights is not None and len(weights) > cfg["labels"]:
        # inherited weights from a wider label set; explicit flags are never cut
        cfg["label_weights"] = weights[: cfg["labels"]]
    return TrainingConfig.from_dict(cfg)


def _merge(base: dict, update: dict) -> None:
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value


# --- subcommands ----------------------------------------------------------------


def _cmd_synth(args, out: Path) -> None:
    mode = "2label" if args.labels == 3 else "6label"
    for i in range(args.count):
        image, labels, _ = synth_phantom([args.seed, i], args.dims, args.spacing, mode, args.difficulty, args.tz_fraction)
        write_volume(image, out / f"{args.prefix}_{i:03d}_image.zvol")
        write_volume(labels, out / f"{args.prefix}_{i:03d}_labels.zvol")
    cfg = {k: getattr(args, k) for k in ("seed", "dims", "spacing", "labels", "count", "difficulty", "tz_fraction", "prefix")}
    runtime.write_manifest(out, "synth", _jsonable(cfg), {"seed": args.seed}, threads=args.threads_resolved)


def _cmd_stats(args, out: Path) -> None:
    files = sorted(Path(args.data).glob("*_labels.zvol"))
    if not files:
        raise UsageError(f"no *_labels.zvol files in {args.data}")
    dataset = [(f.name[: -len("_labels.zvol")], read_volume(f)) for f in files]
    stats, hist = label_balance_stats(dataset, args.bins)
    write_balance_csv(stats, out / "balance.csv")
    write_histogram_csv(hist, out / "histogram.csv")
    ratios = [s.bg_tz_ratio for s in stats if s.bg_tz_ratio is not None]
    if ratios:
        write_histogram_csv(histogram(ratios, 0.0, max(ratios), args.bins), out / "bg_histogram.csv")
    for s in stats:
        if s.excluded:
            logging.getLogger("zoneseg").warning("%s has no prostate voxels; excluded", s.volume_id)
    runtime.write_manifest(out, "stats", {"data": args.data, "bins": args.bins}, {}, files, args.threads_resolved)


def _cmd_resample(args, out: Path) -> None:
    paths = [Path(p) for p in args.input] if args.input else sorted(Path(args.data).glob("*.zvol"))
    for path in paths:
        vol = read_volume(path)
        write_volume(resample(vol, args.spacing, args.mode), out / path.name)
    cfg = {"spacing": list(args.spacing), "mode": args.mode, "inputs": [str(p) for p in paths]}
    runtime.write_manifest(out, "resample", cfg, {}, paths, args.threads_resolved)


def _cmd_train(args, out: Path) -> None:
    config = resolve_config(args)
    cases = load_dataset(args.data)
    inputs = dataset_files(args.data)
    if args.test_data:
        tests = load_dataset(args.test_data)
        inputs += dataset_files(args.test_data)
        report, _, _ = run_final_test(cases, tests, config, out)
        _print_summary(report)
    else:
        train_only(cases, config, out)
    seeds = {"config_seed": config.seed, "model_seed": config.seed * 1000 + config.folds}
    runtime.write_manifest(out, "train", config.to_dict(), seeds, inputs, args.threads_resolved)


def _cmd_crossval(args, out: Path) -> None:
    config = resolve_config(args)
    cases = load_dataset(args.data)
    result = run_crossval(cases, config, out)
    _print_summary(result.report)
    seeds = {"config_seed": config.seed, "model_seeds": [config.seed * 1000 + s.fold_id for s in result.splits]}
    runtime.write_manifest(out, "crossval", config.to_dict(), seeds, dataset_files(args.data), args.threads_resolved)


def _inference_config(model, target_spacing=None, normalize=True) -> TrainingConfig:
    spec = model.spec
    return TrainingConfig(
        variant=spec.variant,
        labels=spec.labels,
        width_scale=spec.width_scale,
        normalization=spec.normalization,
        iso_order=spec.iso_order,
        target_spacing=target_spacing,
        normalize_intensity=normalize,
    )


def _blank_labels(image: Volume) -> Volume:
    return Volume.labels(np.zeros(image.voxels.shape, np.uint8), image.spacing, LABELS_2)


def _cmd_predict(args, out: Path) -> None:
    model = load_checkpoint(args.model)
    config = _inference_config(model, args.target_spacing, not args.no_normalize_intensity)
    if args.image:
        paths = [Path(p) for p in args.image]
    else:
        paths = sorted(Path(args.data).glob("*_image.zvol"))
    for path in paths:
        image = read_volume(path)
        vid = path.name[: -len("_image.zvol")] if path.name.endswith("_image.zvol") else path.stem
        pc = prepare_case(Case(vid, image, _blank_labels(image)), config)
        pred, _ = predict_case(model, pc)
        write_volume(Volume.labels(pred, pc.spacing, config.label_names), out / f"{vid}_pred.zvol")
    cfg = {"model": args.model, "inference": config.to_dict()}
    runtime.write_manifest(out, "predict", cfg, {}, [args.model, *paths], args.threads_resolved)


def _cmd_evaluate(args, out: Optional[Path]) -> None:
    if len(args.pred) != len(args.truth):
        raise UsageError("--pred and --truth need the same number of files")
    report = DiceReport()
    for pred_path, truth_path in zip(args.pred, args.truth):
        pred, truth = read_volume(pred_path), read_volume(truth_path)
        if pred.header.dims != truth.header.dims:
            raise UsageError(f"{pred_path} and {truth_path} differ in dims")
        names = truth.header.label_names or list(LABELS_2)
        n = max(len(names), len(pred.header.label_names or ()))
        names = list(LABELS_6[:n]) if n > len(names) else names
        t = truth.voxels
        p = pred.voxels
        vid = Path(pred_path).name.replace("_pred.zvol", "").replace(".zvol", "")
        report.add_volume(vid, p, None, t, names)
    for row in report.rows:
        if row.region == "all":
            print(f"{row.volume_id}\t{row.label}\t{row.dice:.6f}")
    if out is not None:
        report.write(out)
        runtime.write_manifest(out, "evaluate", {"pred": args.pred, "truth": args.truth}, {},
                               [*args.pred, *args.truth], args.threads_resolved)


def _cmd_inspect(args, out: Path) -> None:
    model = load_checkpoint(args.model)
    config = _inference_config(model, None, not args.no_normalize_intensity)
    image, labels = read_volume(args.image), read_volume(args.labels)
    pc = prepare_case(Case("inspect", image, labels), config)
    layers = [name.strip() for name in args.layers.split(",") if name.strip()]
    for layer in layers:
        introspection.render_feature_grid(model, pc.image, pc.labels, layer, out / f"{layer}.pgm")
    inputs = [args.model, args.image, args.labels]
    if args.compare_model:
        other = load_checkpoint(args.compare_model)
        introspection.compare_final_layer(model, other, pc.image, pc.labels, out)
        inputs.append(args.compare_model)
    cfg = {"model": args.model, "compare_model": args.compare_model, "layers": layers,
           "normalize_intensity": not args.no_normalize_intensity}
    runtime.write_manifest(out, "inspect", cfg, {}, inputs, args.threads_resolved)


COMMANDS = {
    "synth": _cmd_synth,
    "stats": _cmd_stats,
    "resample": _cmd_resample,
    "train": _cmd_train,
    "crossval": _cmd_crossval,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "inspect": _cmd_inspect,
}


def _print_summary(report: DiceReport) -> None:
    for s in report.summary():
        if s["region"] == "all" and s["n"]:
            print(f"{s['label']}\tn={s['n']}\tmean={s['mean']:.4f}\tsd={s['sd']:.4f}\tstderr={s['stderr']:.4f}")


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.threads_resolved = runtime.resolve_threads(args.threads)
        runtime.set_threads(args.threads_resolved)
        out = Path(args.out) if args.out else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, out)
    except ZonesegError as exc:
        print(f"zoneseg {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"zoneseg {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"zoneseg {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
