"""Command-line interface: detect / train / eval / bench / synth.

Every flag has a default visible in --help; a config file of `key = value`
lines ('#' comments) can supply values, with explicit flags taking
precedence. Output files are written atomically. Exit codes: 0 on success,
2 on decode/weight errors, 1 otherwise.
"""

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import haar, imgio, metrics, nets, pipeline, synth, train
from .fileutil import atomic_write_text
from .validation import check_thresholds

_STAGE_SPECS = {"pnet": nets.build_pnet, "rnet": nets.build_rnet,
                "onet": nets.build_onet}


class CliError(Exception):
    """User-facing failure with an exit code."""

    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


def load_config(path):
    """Parse a `key = value` config file; '#' starts a comment."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{line_no}: expected 'key = value'")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _convert(value, kind):
    if kind is bool:
        if isinstance(value, bool):
            return value
        low = str(value).lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise CliError(f"cannot parse boolean value {value!r}")
    return kind(value)


def _resolve(args, defaults):
    """Fill unset options from --config values, then hard defaults."""
    config = load_config(args.config) if getattr(args, "config", None) else {}
    for key, (kind, default) in defaults.items():
        if getattr(args, key, None) is None:
            if key in config:
                setattr(args, key, _convert(config[key], kind))
            else:
                setattr(args, key, default)
        elif isinstance(getattr(args, key), str) and kind is not str:
            setattr(args, key, _convert(getattr(args, key), kind))
    unknown = set(config) - set(defaults)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return args


def _load_merged_weights(spec_paths):
    stores = []
    for path in spec_paths.split(","):
        path = path.strip()
        try:
            stores.append(nets.load_weights(path))
        except FileNotFoundError:
            raise CliError(f"weight file not found: {path}", code=2)
        except nets.WeightStoreError as exc:
            raise CliError(f"bad weight file {path}: {exc}", code=2)
    try:
        return nets.merge_stores(stores)
    except nets.WeightStoreError as exc:
        raise CliError(f"cannot merge weight files: {exc}", code=2)


def _validated_cascade_store(paths):
    store = _load_merged_weights(paths)
    for build in _STAGE_SPECS.values():
        try:
            nets.validate_store(store, build())
        except nets.WeightStoreError as exc:
            raise CliError(f"weights incomplete: {exc}", code=2)
    return store


def _read_image(path):
    try:
        return imgio.read_pnm(path)
    except FileNotFoundError:
        raise CliError(f"image not found: {path}", code=2)
    except imgio.PnmError as exc:
        raise CliError(f"cannot decode {path}: {exc}", code=2)


def _gather_images(args):
    if bool(args.image) == bool(args.dir):
        raise CliError("exactly one of --image or --dir is required")
    if args.image:
        return [args.image]
    try:
        names = sorted(os.listdir(args.dir))
    except OSError as exc:
        raise CliError(f"cannot list {args.dir}: {exc}", code=2)
    paths = [os.path.join(args.dir, n) for n in names
             if n.lower().endswith((".ppm", ".pgm", ".pnm"))]
    if not paths:
        raise CliError(f"no PNM images under {args.dir}", code=2)
    return paths


DETECT_DEFAULTS = {
    "min_face": (float, 20.0),
    "scale_factor": (float, 0.709),
    "thresholds": (str, "0.6,0.7,0.7"),
    "detector": (str, "mtcnn"),
    "jobs": (int, 1),
    "scale_step": (float, 1.25),
    "window_stride": (int, 2),
}


def cmd_detect(args):
    _resolve(args, DETECT_DEFAULTS)
    paths = _gather_images(args)

    if args.detector == "mtcnn":
        if not args.weights:
            raise CliError("--weights is required for the mtcnn detector", code=2)
        store = _validated_cascade_store(args.weights)
        t1, t2, t3 = check_thresholds(args.thresholds.split(","))
        cfg = pipeline.CascadeConfig(
            thresholds=(t1, t2, t3),
            pyramid=pipeline.PyramidConfig(min_face_size=args.min_face,
                                           scale_factor=args.scale_factor))

        def run(path):
            return pipeline.detect(_read_image(path), store, cfg)
    elif args.detector == "haar":
        if not args.model:
            raise CliError("--model is required for the haar detector", code=2)
        try:
            model = haar.load_cascade(args.model)
        except FileNotFoundError:
            raise CliError(f"model file not found: {args.model}", code=2)
        except haar.CascadeFormatError as exc:
            raise CliError(f"bad cascade model {args.model}: {exc}", code=2)

        def run(path):
            t0 = time.perf_counter()
            dets = haar.detect_haar(_read_image(path), model,
                                    scale_step=args.scale_step,
                                    window_stride=args.window_stride)
            dt = time.perf_counter() - t0
            return pipeline.PipelineResult(dets, {"windows": len(dets)},
                                           {"total": dt})
    else:
        raise CliError(f"unknown detector {args.detector!r}")

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run, paths))
    else:
        results = [run(p) for p in paths]

    records = []
    for path, result in zip(paths, results):
        records.append((os.path.basename(path), result.detections))
        if args.verbose:
            counts = " ".join(f"{k}={v}" for k, v in result.stage_counts.items())
            times = " ".join(f"{k}={1e3 * v:.1f}ms"
                             for k, v in result.stage_times.items())
            print(f"{path}: {counts} | {times}", file=sys.stderr)

    payload = imgio.detections_to_json(records)
    if args.out_json:
        atomic_write_text(args.out_json, payload + "\n")
    else:
        print(payload)

    if args.out_overlay:
        os.makedirs(args.out_overlay, exist_ok=True)
        for path, result in zip(paths, results):
            img = pipeline.ensure_rgb(_read_image(path))
            over = imgio.draw_overlay(img, result.detections)
            stem = os.path.splitext(os.path.basename(path))[0]
            imgio.write_pnm(over, os.path.join(args.out_overlay, f"{stem}.overlay.ppm"))
    return 0


TRAIN_DEFAULTS = {
    "synth_n": (int, 2000),
    "seed": (int, 42),
    "epochs": (int, -1),  # -1: per-stage default
    "lr": (float, 0.1),
    "batch_size": (int, 64),
    "ohem_ratio": (float, 0.7),
}

_STAGE_EPOCHS = {"pnet": 30, "rnet": 12, "onet": 8}


def cmd_train(args):
    _resolve(args, TRAIN_DEFAULTS)
    if args.stage not in _STAGE_SPECS:
        raise CliError(f"unknown stage {args.stage!r}")
    spec = _STAGE_SPECS[args.stage]()
    epochs = args.epochs if args.epochs >= 0 else _STAGE_EPOCHS[args.stage]
    cfg = train.TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                            epochs=epochs, ohem_keep_ratio=args.ohem_ratio,
                            rng_seed=args.seed)
    size = spec.input_size
    dataset = synth.synth_dataset(args.synth_n, size, args.seed)
    init = train.init_weights(spec, rng_seed=args.seed)
    store, history = train.train_stage(spec, init, dataset, cfg)

    heldout = synth.synth_dataset(max(64, args.synth_n // 4), size, args.seed + 1000)
    accuracy = train.classification_accuracy(spec, store, heldout)
    print(f"{args.stage}: trained {epochs} epochs on {len(dataset)} samples; "
          f"held-out classification accuracy {accuracy:.4f}")

    nets.save_weights(store, args.out_weights)
    if args.loss_csv:
        atomic_write_text(args.loss_csv, train.history_csv(history))
    return 0


EVAL_DEFAULTS = {
    "iou": (float, 0.5),
    "detector": (str, ""),
    "min_face": (float, 20.0),
    "scale_factor": (float, 0.709),
    "thresholds": (str, "0.6,0.7,0.7"),
    "scale_step": (float, 1.25),
    "window_stride": (int, 2),
}


def _print_metrics(report, out_csv):
    text = metrics.metrics_text(report)
    sys.stdout.write(text)
    if any(v is None for _, v in metrics.metrics_rows(report)):
        print("note: metrics with zero denominators are undefined")
    if out_csv:
        atomic_write_text(out_csv, metrics.metrics_csv(report))


def cmd_eval(args):
    _resolve(args, EVAL_DEFAULTS)
    if args.matrix:
        try:
            tp, fp, fn, tn = (int(v) for v in args.matrix.split(","))
        except ValueError:
            raise CliError("--matrix expects four integers tp,fp,fn,tn")
        _print_metrics(metrics.compute_metrics(
            metrics.ConfusionMatrix(tp, fp, fn, tn)), args.out_csv)
        return 0

    if not args.truth:
        raise CliError("--truth manifest is required (or use --matrix)")
    truth_entries = metrics.load_manifest(args.truth)
    truth_dir = os.path.dirname(os.path.abspath(args.truth))

    if args.detections_json:
        with open(args.detections_json, "r", encoding="utf-8") as fh:
            records = dict(imgio.detections_from_json(fh.read()))

        def dets_for(name, _path):
            return records.get(name, [])
    elif args.detector == "mtcnn":
        if not args.weights:
            raise CliError("--weights is required for the mtcnn detector", code=2)
        store = _validated_cascade_store(args.weights)
        t1, t2, t3 = check_thresholds(args.thresholds.split(","))
        cfg = pipeline.CascadeConfig(
            thresholds=(t1, t2, t3),
            pyramid=pipeline.PyramidConfig(min_face_size=args.min_face,
                                           scale_factor=args.scale_factor))

        def dets_for(_name, path):
            return pipeline.detect(_read_image(path), store, cfg).detections
    elif args.detector == "haar":
        if not args.model:
            raise CliError("--model is required for the haar detector", code=2)
        model = haar.load_cascade(args.model)

        def dets_for(_name, path):
            return haar.detect_haar(_read_image(path), model,
                                    scale_step=args.scale_step,
                                    window_stride=args.window_stride)
    else:
        raise CliError("supply --detections-json or --detector mtcnn|haar")

    cm = metrics.ConfusionMatrix()
    for name, boxes in truth_entries:
        path = name if os.path.isabs(name) else os.path.join(truth_dir, name)
        dets = dets_for(name, path)
        tp, fp, fn = metrics.match_detection_list(dets, boxes, args.iou)
        cm = cm + metrics.ConfusionMatrix(tp=tp, fp=fp, fn=fn)
    _print_metrics(metrics.compute_metrics(cm), args.out_csv)
    return 0


BENCH_DEFAULTS = {
    "iters": (int, 10),
    "min_face": (float, 20.0),
}


def cmd_bench(args):
    _resolve(args, BENCH_DEFAULTS)
    if args.iters < 1:
        raise CliError("--iters must be at least 1")
    store = _validated_cascade_store(args.weights)
    cfg = pipeline.CascadeConfig(
        pyramid=pipeline.PyramidConfig(min_face_size=args.min_face))
    image = _read_image(args.image)
    rows = {k: [] for k in ("stage1", "stage2", "stage3", "total")}
    for _ in range(args.iters):
        result = pipeline.detect(image, store, cfg)
        for key in rows:
            rows[key].append(result.stage_times[key] * 1e3)
    print("stage,mean_ms,p50_ms,p95_ms")
    for key, values in rows.items():
        values = np.asarray(values)
        print(f"{key},{values.mean():.3f},{np.percentile(values, 50):.3f},"
              f"{np.percentile(values, 95):.3f}")
    return 0


SYNTH_DEFAULTS = {
    "n": (int, 10),
    "seed": (int, 0),
    "width": (int, 128),
    "height": (int, 128),
}


def cmd_synth(args):
    _resolve(args, SYNTH_DEFAULTS)
    if args.n < 1:
        raise CliError("--n must be at least 1")
    os.makedirs(args.out_dir, exist_ok=True)
    scenes = synth.synth_scene_set(args.n, args.seed,
                                   width=args.width, height=args.height)
    entries = []
    for i, (img, boxes, _lmks) in enumerate(scenes):
        name = f"synth_{i:04d}.ppm"
        imgio.write_pnm(img, os.path.join(args.out_dir, name))
        entries.append((name, boxes))
    atomic_write_text(os.path.join(args.out_dir, "manifest.txt"),
                      metrics.manifest_text(entries))
    print(f"wrote {len(scenes)} images and manifest.txt to {args.out_dir}")
    return 0


def _add_config_opt(p):
    p.add_argument("--config", help="key = value config file; flags override it")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cascadeface",
        description="Cascaded CNN face detector with a Haar baseline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="detect faces in PNM images")
    p.add_argument("--image", help="one PNM image")
    p.add_argument("--dir", help="directory of PNM images")
    p.add_argument("--weights", help="weight file(s), comma-separated (mtcnn)")
    p.add_argument("--detector", choices=["mtcnn", "haar"],
                   help="detector to run (default: mtcnn)")
    p.add_argument("--model", help="cascade model file (haar)")
    p.add_argument("--min-face", dest="min_face",
                   help="smallest face size in px (default: 20)")
    p.add_argument("--thresholds",
                   help="stage score thresholds t1,t2,t3 (default: 0.6,0.7,0.7)")
    p.add_argument("--scale-factor", dest="scale_factor",
                   help="pyramid scale factor (default: 0.709)")
    p.add_argument("--scale-step", dest="scale_step",
                   help="haar scan scale step (default: 1.25)")
    p.add_argument("--window-stride", dest="window_stride",
                   help="haar scan stride at base scale (default: 2)")
    p.add_argument("--out-json", dest="out_json", help="write detections JSON here")
    p.add_argument("--out-overlay", dest="out_overlay",
                   help="directory for overlay images")
    p.add_argument("--jobs", help="parallel image workers (default: 1)")
    p.add_argument("--verbose", action="store_true",
                   help="print per-stage counts and timings")
    _add_config_opt(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("train", help="train one stage on synthetic data")
    p.add_argument("--stage", required=True, choices=["pnet", "rnet", "onet"])
    p.add_argument("--synth-n", dest="synth_n",
                   help="synthetic training samples (default: 2000)")
    p.add_argument("--seed", help="rng seed (default: 42)")
    p.add_argument("--epochs", help="training epochs (default: per stage)")
    p.add_argument("--lr", help="learning rate (default: 0.1)")
    p.add_argument("--batch-size", dest="batch_size",
                   help="batch size (default: 64)")
    p.add_argument("--ohem-ratio", dest="ohem_ratio",
                   help="hard-example keep ratio (default: 0.7)")
    p.add_argument("--out-weights", dest="out_weights", required=True,
                   help="output weight file")
    p.add_argument("--loss-csv", dest="loss_csv", help="write loss history CSV here")
    _add_config_opt(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--detections-json", dest="detections_json",
                   help="detections produced by `detect --out-json`")
    p.add_argument("--detector", help="run a detector instead: mtcnn or haar")
    p.add_argument("--weights", help="weight file(s) for --detector mtcnn")
    p.add_argument("--model", help="cascade model for --detector haar")
    p.add_argument("--truth", help="ground-truth manifest")
    p.add_argument("--iou", help="match threshold (default: 0.5)")
    p.add_argument("--matrix", help="tp,fp,fn,tn: compute metrics directly")
    p.add_argument("--min-face", dest="min_face",
                   help="smallest face size in px (default: 20)")
    p.add_argument("--scale-factor", dest="scale_factor",
                   help="pyramid scale factor (default: 0.709)")
    p.add_argument("--thresholds",
                   help="stage thresholds t1,t2,t3 (default: 0.6,0.7,0.7)")
    p.add_argument("--scale-step", dest="scale_step",
                   help="haar scan scale step (default: 1.25)")
    p.add_argument("--window-stride", dest="window_stride",
                   help="haar scan stride (default: 2)")
    p.add_argument("--out-csv", dest="out_csv", help="write metrics CSV here")
    _add_config_opt(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time the cascade stages")
    p.add_argument("--image", required=True, help="PNM image to benchmark on")
    p.add_argument("--weights", required=True, help="weight file(s)")
    p.add_argument("--iters", help="repetitions (default: 10)")
    p.add_argument("--min-face", dest="min_face",
                   help="smallest face size in px (default: 20)")
    _add_config_opt(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="generate synthetic scenes + manifest")
    p.add_argument("--n", help="number of images (default: 10)")
    p.add_argument("--seed", help="rng seed (default: 0)")
    p.add_argument("--width", help="scene width (default: 128)")
    p.add_argument("--height", help="scene height (default: 128)")
    p.add_argument("--out-dir", dest="out_dir", required=True,
                   help="output directory")
    _add_config_opt(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (imgio.PnmError, nets.WeightStoreError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
