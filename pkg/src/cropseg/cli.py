"""``cropseg`` command-line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, arch, baselines, evaluation, imgproc, io, synth, training
from .nn.functional import ShapeError
from .nn.weights import WeightFormatError

log = logging.getLogger("cropseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
MODEL_FILE = "model.cswt"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 128x96, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return w, h


def parse_weights(text: str):
    if text == "auto":
        return "auto"
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("class weights must be 'auto' or three numbers") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("class weights must be 'auto' or three numbers")
    return vals


def worker_count(requested: int | None) -> int:
    env = os.environ.get("CROPSEG_THREADS")
    n = requested or os.cpu_count() or 1
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            raise UsageError(f"CROPSEG_THREADS must be an integer, got {env!r}") from None
    return max(1, n)


def versions() -> dict:
    import cv2
    import PIL
    import scipy
    return {"cropseg": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "opencv": cv2.__version__,
            "pillow": PIL.__version__}


def write_run_record(out_dir, args, config: dict | None = None, extra: dict | None = None):
    record = {"command": args.command, "argv": sys.argv[1:], "seed": args.seed,
              "config": config or {}, "versions": versions()}
    if extra:
        record.update(extra)
    io.write_json(Path(out_dir) / "run.json", record)


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    out = io.ensure_dir(args.out)
    img = io.read_rgb(args.input)
    vol = imgproc.assemble_input_volume(img, args.size, args.channels)
    for k, name in enumerate(vol.names):
        stem = f"{k:02d}_{name}"
        io.atomic_write_bytes(out / f"{stem}.bin", io.encode_channel(vol.data[k], k))
        io.write_gray(out / f"{stem}.png", io.visualize_channel(vol.data[k]))
    write_run_record(out, args, {"size": list(args.size), "channels": args.channels,
                                 "input": str(args.input)},
                     {"channels": list(vol.names), "mean": vol.mean.tolist(),
                      "std": vol.std.tolist()})
    print(f"wrote {len(vol.names)} channels to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    samples = synth.generate_dataset(args.preset, args.count, args.seed, *args.size)
    manifest = io.write_dataset(args.out, samples,
                                extra={"preset": args.preset, "seed": args.seed})
    write_run_record(args.out, args, {"preset": args.preset, "count": args.count,
                                      "size": list(args.size)})
    splits = list(manifest["split"].values())
    print(f"wrote {len(samples)} samples to {args.out} "
          f"(train {splits.count('train')}, val {splits.count('val')}, test {splits.count('test')})")
    return EXIT_OK


def _load_split(root, split):
    samples = io.load_dataset(root, split)
    if not samples:
        raise io.DataError(f"{root}: the {split!r} split is empty")
    return samples


def cmd_train(args) -> int:
    cfg = training.TrainConfig(batch_size=args.batch_size, epochs=args.epochs, lr=args.lr,
                               schedule=args.schedule, class_weights=args.class_weights, augment=not args.no_augment,
                               seed=args.seed, patience=args.patience,
                               min_epochs=args.min_epochs, early_stopping=args.early_stopping,
                               channels=args.channels, size=args.size)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    tr = _load_split(args.data, "train")
    va = _load_split(args.data, "val")
    spec = arch.NetworkSpec(input_channels=imgproc.channel_count(args.channels))
    net = arch.build_network(spec, seed=args.seed)
    net, history = training.train(net, tr, va, cfg)
    out = io.ensure_dir(args.out)
    arch.save_network(out / MODEL_FILE, net)
    io.atomic_write_text(out / "history.csv", history.to_csv())
    summary = {"best_epoch": history.best_epoch, "epochs": history.epochs,
               "epochs_to_95": history.epochs_to_95, "class_weights": history.class_weights}
    test = io.load_dataset(args.data, "test")
    if test:
        report = training.evaluate_network(net, test, args.size, args.channels)
        io.write_json(out / "test_report.json", _jsonable(report.as_dict()))
        print(report.table())
        summary["test_miou"] = report.pixel.miou
    write_run_record(out, args, cfg.to_dict(), {"summary": summary})
    print(json.dumps(_jsonable(summary)))
    return EXIT_OK


def cmd_retrain_head(args) -> int:
    net = arch.load_network(args.model)
    channels = "rgb" if net.spec.input_channels == 3 else "all"
    samples = io.load_dataset(args.data, args.split)
    if args.count:
        samples = samples[:args.count]
    cfg = training.RetrainConfig(max_epochs=args.max_epochs, lr=args.lr, seed=args.seed,
                                 patience=args.patience, min_epochs=args.min_epochs,
                                 channels=channels, size=args.size)
    try:
        net, history = training.retrain_head(net, samples, cfg)
    except ValueError as exc:
        raise io.DataError(str(exc)) from None
    out = io.ensure_dir(args.out)
    arch.save_network(out / MODEL_FILE, net)
    io.atomic_write_text(out / "history.csv", history.to_csv())
    write_run_record(out, args, cfg.to_dict(), {"images": len(samples),
                                                "best_epoch": history.best_epoch})
    print(f"head retrained on {len(samples)} images; best epoch {history.best_epoch}")
    return EXIT_OK


def _preprocess_one(path, size, channels):
    t0 = time.perf_counter()
    img = io.read_rgb(path)
    vol = imgproc.assemble_input_volume(img, size, channels)
    return img, vol, 1e3 * (time.perf_counter() - t0)


def cmd_infer(args) -> int:
    net = arch.load_network(args.model)
    channels = "rgb" if net.spec.input_channels == 3 else "all"
    paths = [p for target in args.images for p in io.image_paths(target)]
    out = io.ensure_dir(args.out)
    timings = {}
    # preprocessing runs on the pool; the network pass stays on this thread
    with ThreadPoolExecutor(worker_count(args.threads)) as pool:
        jobs = [pool.submit(_preprocess_one, p, args.size, channels) for p in paths]
        for path, job in zip(paths, jobs):
            img, vol, pre_ms = job.result()
            t0 = time.perf_counter()
            probs = net.predict(vol.data[None])
            net_ms = 1e3 * (time.perf_counter() - t0)
            mask = probs[0].argmax(axis=0).astype(np.uint8)
            io.write_mask(out / f"{path.stem}_mask.png", mask)
            small = np.clip(imgproc.resize_bilinear(img, *args.size), 0, 1)
            io.write_rgb(out / f"{path.stem}_overlay.png", io.overlay(small, mask))
            timings[path.stem] = {"preprocess_ms": pre_ms, "network_ms": net_ms,
                                  "total_ms": pre_ms + net_ms}
            log.info("%s: preprocess %.1f ms, network %.1f ms", path.name, pre_ms, net_ms)
    io.write_json(out / "timing.json", timings)
    write_run_record(out, args, {"model": str(args.model), "size": list(args.size),
                                 "channels": channels, "images": [str(p) for p in paths]})
    print(json.dumps(timings, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    gt_paths = {p.stem: p for p in io.image_paths(gt_dir)}
    pred_paths = io.image_paths(pred_dir)
    # an infer output directory also holds overlays; use only its masks then
    masks = [p for p in pred_paths if p.stem.endswith("_mask")]
    pairs = []
    for p in masks or pred_paths:
        stem = p.stem[:-5] if p.stem.endswith("_mask") else p.stem
        if stem not in gt_paths:
            raise io.DataError(f"no ground truth for prediction {p.name}")
        pred, gt = io.read_mask(p), io.read_mask(gt_paths[stem])
        if pred.shape != gt.shape:
            gt = training.resize_labels(gt, pred.shape[1], pred.shape[0])
        pairs.append((pred, gt))
    report = evaluation.evaluate(pairs, args.min_area)
    doc = _jsonable(report.as_dict())
    if args.out:
        io.write_json(args.out, doc)
        write_run_record(Path(args.out).parent, args, {"pred": str(pred_dir), "gt": str(gt_dir),
                                                        "min_area": args.min_area})
    print(report.table())
    print(json.dumps(doc))
    return EXIT_OK


def cmd_baseline(args) -> int:
    img = io.read_rgb(args.input)
    exg = imgproc.compute_vegetation_indices(img)[0]
    if args.method == "otsu":
        res = baselines.otsu_threshold(exg)
        mask, info = res.mask, {"threshold": res.threshold, "degenerate": res.degenerate}
    else:
        try:
            mask = baselines.adaptive_threshold(exg, args.window, args.offset)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        info = {"window": args.window, "offset": args.offset}
    io.write_gray(args.out, mask.astype(np.uint8) * 255)
    info.update(method=args.method, vegetation_fraction=baselines.vegetation_fraction(mask))
    write_run_record(Path(args.out).parent, args, {"input": str(args.input)}, info)
    print(json.dumps(_jsonable(info)))
    return EXIT_OK


def _network_for(args):
    if getattr(args, "model", None):
        return arch.load_network(args.model)
    spec = arch.NetworkSpec(input_channels=imgproc.channel_count(args.channels))
    return arch.build_network(spec, seed=args.seed)


def cmd_analyze(args) -> int:
    net = _network_for(args)
    w, h = args.size
    rows = arch.layer_table(net, input_h=h, input_w=w)
    total_params, _ = arch.count_parameters(net)
    total_macs, _ = arch.count_flops(net, h, w)
    if args.csv:
        print("name,kind,output_shape,params,macs_per_position,receptive_field")
        for r in rows:
            shape = "x".join(str(v) for v in r.out_shape)
            print(f"{r.name},{r.kind},{shape},{r.params},{r.macs_per_position},"
                  f"{r.rf[0]}x{r.rf[1]}")
    else:
        print(f"{'layer':<12} {'kind':<11} {'output':>14} {'params':>8} {'MAC/pos':>8} {'RF':>9}")
        for r in rows:
            shape = "x".join(str(v) for v in r.out_shape)
            print(f"{r.name:<12} {r.kind:<11} {shape:>14} {r.params:>8} "
                  f"{r.macs_per_position:>8} {r.rf[0]:>4}x{r.rf[1]:<4}")
        rf = arch.receptive_field(net)
        print(f"total parameters {total_params}, MACs at {w}x{h}: {total_macs:,}, "
              f"encoder receptive field {rf[0]}x{rf[1]}")
    return EXIT_OK


def timing_stats(ms) -> dict:
    ms = np.asarray(ms, dtype=np.float64)
    return {"mean_ms": float(ms.mean()), "p50_ms": float(np.percentile(ms, 50)),
            "p95_ms": float(np.percentile(ms, 95))}


def cmd_bench(args) -> int:
    if args.iterations < 10:
        raise UsageError("--iterations must be >= 10")
    if args.warmup < 3:
        raise UsageError("--warmup must be >= 3")
    net = _network_for(args)
    channels = "rgb" if net.spec.input_channels == 3 else "all"
    w, h = args.size
    if args.image:
        img = io.read_rgb(args.image)
    else:
        img = synth.generate_field(synth.preset_params("home", args.seed, w, h)).image
    pre, fwd = [], []
    for it in range(args.warmup + args.iterations):
        t0 = time.perf_counter()
        vol = imgproc.assemble_input_volume(img, (w, h), channels)
        t1 = time.perf_counter()
        net.predict(vol.data[None])
        t2 = time.perf_counter()
        if it >= args.warmup:
            pre.append(1e3 * (t1 - t0))
            fwd.append(1e3 * (t2 - t1))
    total = [a + b for a, b in zip(pre, fwd)]
    macs, _ = arch.count_flops(net, h, w)
    stats = {"preprocess": timing_stats(pre), "network": timing_stats(fwd),
             "total": timing_stats(total)}
    report = {"size": [w, h], "channels": channels, "iterations": args.iterations,
              "warmup": args.warmup, "stages": stats,
              "fps": 1000.0 / stats["total"]["mean_ms"], "macs": macs}
    if args.out:
        io.write_json(args.out, report)
        write_run_record(Path(args.out).parent, args, {"size": [w, h], "channels": channels})
    print(json.dumps(report, indent=2))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="worker pool size (capped by CROPSEG_THREADS)")

    p = Parser(prog="cropseg", description="Crop/weed/soil segmentation from RGB images.")
    p.add_argument("--version", action="version", version=f"cropseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def add(name, func, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(func=func)
        return sp

    sp = add("preprocess", cmd_preprocess, "write the input channels of one image")
    sp.add_argument("input")
    sp.add_argument("--out", required=True)
    sp.add_argument("--size", type=parse_size, default=imgproc.NETWORK_SIZE)
    sp.add_argument("--channels", choices=("all", "rgb"), default="all")

    sp = add("synth", cmd_synth, "generate a labeled synthetic dataset")
    sp.add_argument("--preset", choices=sorted(synth.PRESETS), default="home")
    sp.add_argument("--count", type=int, default=200)
    sp.add_argument("--size", type=parse_size, default=training.DESK_SIZE)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a network on a dataset directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--channels", choices=("all", "rgb"), default="all")
    sp.add_argument("--size", type=parse_size, default=training.DESK_SIZE)
    sp.add_argument("--epochs", type=int, default=60)
    sp.add_argument("--batch-size", type=int, default=15)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--schedule", choices=training.SCHEDULES, default="constant")
    sp.add_argument("--class-weights", type=parse_weights, default="auto")
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--early-stopping", action="store_true")
    sp.add_argument("--patience", type=int, default=5)
    sp.add_argument("--min-epochs", type=int, default=10)

    sp = add("retrain-head", cmd_retrain_head, "refit the classification head on new-field images")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default=None, help="manifest split to use (default: all)")
    sp.add_argument("--count", type=int, default=None)
    sp.add_argument("--size", type=parse_size, default=training.DESK_SIZE)
    sp.add_argument("--max-epochs", type=int, default=200)
    sp.add_argument("--lr", type=float, default=5e-3)
    sp.add_argument("--patience", type=int, default=5)
    sp.add_argument("--min-epochs", type=int, default=10)

    sp = add("infer", cmd_infer, "segment images with a trained model")
    sp.add_argument("--model", required=True)
    sp.add_argument("images", nargs="+")
    sp.add_argument("--out", required=True)
    sp.add_argument("--size", type=parse_size, default=training.DESK_SIZE)

    sp = add("eval", cmd_eval, "score predicted masks against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--min-area", type=int, default=evaluation.MIN_OBJECT_AREA)
    sp.add_argument("--out", default=None, help="JSON report path")

    sp = add("baseline", cmd_baseline, "threshold the ExG channel of an image")
    sp.add_argument("input")
    sp.add_argument("--method", choices=("otsu", "adaptive"), required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--window", type=int, default=baselines.DEFAULT_WINDOW)
    sp.add_argument("--offset", type=float, default=baselines.DEFAULT_OFFSET)

    sp = add("analyze", cmd_analyze, "per-layer cost table")
    sp.add_argument("--model", default=None)
    sp.add_argument("--channels", choices=("all", "rgb"), default="all")
    sp.add_argument("--size", type=parse_size, default=imgproc.NETWORK_SIZE)
    sp.add_argument("--csv", action="store_true")

    sp = add("bench", cmd_bench, "time preprocessing and the network pass")
    sp.add_argument("--model", default=None)
    sp.add_argument("--image", default=None)
    sp.add_argument("--channels", choices=("all", "rgb"), default="all")
    sp.add_argument("--size", type=parse_size, default=imgproc.NETWORK_SIZE)
    sp.add_argument("--iterations", type=int, default=10)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--out", default=None, help="JSON report path")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cropseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.DataError, WeightFormatError, arch.SpecError, ShapeError,
            FileNotFoundError, IsADirectoryError) as exc:
        print(f"cropseg {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
