"""Command-line entry point: ``iba <command> --out DIR [options]``.

Every run writes its outputs into ``--out`` together with ``manifest.json``
(the resolved options and the sha256 of every input and output file).
Options may also come from a ``key = value`` file given with ``--config``;
command-line flags win over the file. ``IBA_SEED`` overrides ``--seed``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import baselines, evaluation, export
from .bottleneck import (
    BottleneckConfig,
    FeatureStats,
    beta_depth_sweep,
    estimate_stats,
    load_readout,
    save_readout,
    train_readout,
)
from .data import DatasetConfig, ShapesDataset, parse_key_values, write_boxes
from .network import build_default_model, load_model, save_model, train

logger = logging.getLogger("iba.cli")

COMMANDS = ("gen-data", "train", "stats", "attribute", "train-readout", "sweep", "evaluate", "sanity")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv_list(kind=str):
    def parse(text):
        try:
            return [kind(p.strip()) for p in str(text).split(",") if p.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse


def _bottleneck_flags(p):
    p.add_argument("--tap", default="conv3", help="feature map that receives the bottleneck")
    p.add_argument("--beta", type=float, default=10.0, help="beta times k (default 10, i.e. beta = 10/k)")
    p.add_argument("--sigma-s", type=float, default=1.0, help="smoothing std of the mask")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--copies", type=int, default=10, help="noisy copies per optimisation step")
    p.add_argument("--alpha-lr", type=float, default=1.0, help="Adam learning rate of the mask")
    p.add_argument("--target", choices=("label", "predicted"), default="label")
    p.add_argument("--stats", help="feature statistics archive (estimated from --stats-images otherwise)")
    p.add_argument("--stats-images", type=int, default=1000, help="training images used to estimate statistics")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", required=True, help="output directory (must not hold a previous run)")
    common.add_argument("--config", help="key = value file with option defaults")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="parallel per-image workers")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="iba", description="Information bottleneck attribution on a small CNN.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="render the synthetic shapes dataset")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--n-train", type=int, default=4000)
    p.add_argument("--n-val", type=int, default=500)

    p = sub.add_parser("train", parents=[common], help="train the classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--downsample", choices=("maxpool", "stride"), default="maxpool")

    p = sub.add_parser("stats", parents=[common], help="estimate feature statistics at a tap")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--tap", default="conv3")
    p.add_argument("--images", type=int, default=1000)

    p = sub.add_parser("attribute", parents=[common], help="heatmaps for validation images")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--method", default="per-sample", choices=baselines.METHOD_NAMES)
    p.add_argument("--index", type=_csv_list(int), default=[0], help="validation image indices")
    p.add_argument("--readout", help="readout archive (for --method readout)")
    _bottleneck_flags(p)

    p = sub.add_parser("train-readout", parents=[common], help="train the readout network")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--read-taps", type=_csv_list(), default=None, help="taps fed to the readout (default all)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-images", type=int, default=None)
    _bottleneck_flags(p)

    p = sub.add_parser("sweep", parents=[common], help="information and class probability against beta and depth")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--taps", type=_csv_list(), default=None)
    p.add_argument("--betas", type=_csv_list(float), default=[0.1, 1, 10, 100, 1000])
    p.add_argument("--images", type=int, default=20)
    _bottleneck_flags(p)

    p = sub.add_parser("evaluate", parents=[common], help="degradation, Sensitivity-n and bounding-box scores")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--methods", type=_csv_list(), default=["per-sample", "occlusion8", "gradient", "random"])
    p.add_argument("--tile", type=_csv_list(int), default=[8])
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--sens-images", type=int, default=20, help="images used for Sensitivity-n (0 skips it)")
    p.add_argument("--sets-per-n", type=int, default=100)
    p.add_argument("--readout", help="readout archive (for the readout method)")
    p.add_argument("--no-plots", action="store_true")
    _bottleneck_flags(p)

    p = sub.add_parser("sanity", parents=[common], help="cascading randomisation with SSIM")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--method", default="per-sample", choices=baselines.METHOD_NAMES)
    p.add_argument("--images", type=int, default=10)
    p.add_argument("--readout", help="readout archive (for --method readout)")
    _bottleneck_flags(p)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = parse_key_values(Path(args.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in values.items():
            dest = key.replace("-", "_")
            if dest not in known or dest in ("config", "help"):
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            action = known[dest]
            try:
                defaults[dest] = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"bad value for {key}: {raw!r}") from exc
        # config values are defaults; explicit flags still win
        sub.set_defaults(**defaults)
        for action in sub._actions:
            if action.dest in defaults and action.required:
                action.required = False
        args = parser.parse_args(argv)
    env_seed = os.environ.get("IBA_SEED")
    if env_seed is not None:
        try:
            args.seed = int(env_seed)
        except ValueError as exc:
            raise UsageError(f"IBA_SEED must be an integer, got {env_seed!r}") from exc
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    return args


# ---- helpers ------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(outdir: Path, args, inputs: list[Path], outputs: list[Path]) -> Path:
    options = {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose",)}
    manifest = {
        "command": args.command,
        "options": options,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": {str(p.relative_to(outdir)): _sha256(p) for p in sorted(set(outputs))},
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")
    return path


def _map_images(fn, items, jobs: int):
    """Apply ``fn`` to ``items`` in order, optionally with a thread pool."""
    if jobs == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else f"{float(v):.8g}" for v in r])
    return path


def _config(args) -> BottleneckConfig:
    return BottleneckConfig(
        beta_over_k=args.beta, iterations=args.iterations, batch_copies=args.copies,
        lr=args.alpha_lr, sigma_s=args.sigma_s, target=args.target, seed=args.seed,
    )


def _load_inputs(args, inputs):
    data = ShapesDataset.load(args.data)
    model = load_model(args.model)
    inputs += [Path(args.data), Path(args.model)]
    if getattr(args, "tap", None) and args.tap not in model.tap_names:
        raise UsageError(f"unknown tap {args.tap!r}; choose from {model.tap_names}")
    return data, model


def _stats(args, data, model, inputs) -> FeatureStats:
    if args.stats:
        inputs.append(Path(args.stats))
        return FeatureStats.load(args.stats)
    return estimate_stats(model, args.tap, data.x_train[: args.stats_images])


def _method(name: str, args, data, model, inputs, stats=None):
    if name == "per-sample":
        stats = stats if stats is not None else _stats(args, data, model, inputs)
        return baselines.make_method(
            name, tap=args.tap, stats_images=data.x_train[: args.stats_images],
            config=_config(args), stats=stats, model=model, seed=args.seed,
        )
    if name == "readout":
        if not getattr(args, "readout", None):
            raise UsageError("the readout method needs --readout")
        inputs.append(Path(args.readout))
        return baselines.make_method(name, net=load_readout(args.readout))
    if name not in baselines.METHOD_NAMES:
        raise UsageError(f"unknown method {name!r}; choose from {', '.join(baselines.METHOD_NAMES)}")
    return baselines.make_method(name, seed=args.seed)


# ---- commands -----------------------------------------------------------------------


def cmd_gen_data(args, out: Path, inputs):
    cfg = DatasetConfig(args.classes, args.image_size, args.channels, args.n_train, args.n_val, args.seed)
    data = ShapesDataset.generate(cfg)
    data.save(out / "dataset.npz")
    (out / "dataset.cfg").write_text(cfg.to_text())
    write_boxes(out / "boxes_val.txt", data.box_val)
    write_boxes(out / "boxes_train.txt", data.box_train)
    (out / "dataset.sha256").write_text(data.content_hash() + "\n")
    print(data.content_hash())
    return [out / n for n in ("dataset.npz", "dataset.cfg", "boxes_val.txt", "boxes_train.txt", "dataset.sha256")]


def cmd_train(args, out: Path, inputs):
    data = ShapesDataset.load(args.data)
    inputs.append(Path(args.data))
    model = build_default_model(
        data.config.classes, seed=args.seed, input_shape=data.x_train.shape[1:], downsample=args.downsample,
    )
    model, log = train(model, data, epochs=args.epochs, lr=args.lr, seed=args.seed, batch_size=args.batch_size)
    save_model(model, out / "model.ibaw")
    log_path = _write_csv(out / "train_log.csv", ["epoch", "loss", "val_acc"],
                          [(e["epoch"], e["loss"], e["val_acc"]) for e in log])
    print(f"final val accuracy {log[-1]['val_acc']:.4f}")
    return [out / "model.ibaw", out / "model.ibaw.json", log_path]


def cmd_stats(args, out: Path, inputs):
    data, model = _load_inputs(args, inputs)
    stats = estimate_stats(model, args.tap, data.x_train[: args.images])
    path = out / f"stats_{args.tap}.ibaw"
    stats.save(path)
    return [path]


def cmd_attribute(args, out: Path, inputs):
    data, model = _load_inputs(args, inputs)
    method = _method(args.method, args, data, model, inputs)
    n_val = len(data.x_val)
    for i in args.index:
        if not 0 <= i < n_val:
            raise UsageError(f"image index {i} outside 0..{n_val - 1}")

    def run(i):
        h = method(model, data.x_val[i], int(data.y_val[i]), args.seed)
        h.source_id = f"val{i}"
        return h

    written = []
    for i, h in zip(args.index, _map_images(run, args.index, args.jobs)):
        written += export.export_heatmap(h, out / f"{args.method}_val{i}")
    return written


def cmd_train_readout(args, out: Path, inputs):
    data, model = _load_inputs(args, inputs)
    stats = _stats(args, data, model, inputs)
    read_taps = args.read_taps or model.tap_names
    net, log = train_readout(
        model, read_taps, args.tap, stats, data, epochs=args.epochs, lr=args.lr,
        beta_over_k=args.beta, seed=args.seed, batch_size=args.batch_size, sigma_s=args.sigma_s,
        max_images=args.max_images,
    )
    save_readout(net, out / "readout.ibaw")
    log_path = _write_csv(out / "readout_log.csv", ["epoch", "loss", "info_per_k", "class_prob"],
                          [(e["epoch"], e["loss"], e["info_per_k"], e["class_prob"]) for e in log])
    return [out / "readout.ibaw", out / "readout.ibaw.json", log_path]


def cmd_sweep(args, out: Path, inputs):
    data, model = _load_inputs(args, inputs)
    taps = args.taps or model.tap_names
    for t in taps:
        if t not in model.tap_names:
            raise UsageError(f"unknown tap {t!r}; choose from {model.tap_names}")
    stats = {t: estimate_stats(model, t, data.x_train[: args.stats_images]) for t in taps}
    x, y = data.x_val[: args.images], data.y_val[: args.images]
    rows = beta_depth_sweep(model, x, y, args.betas, taps, stats, _config(args))
    path = _write_csv(out / "sweep.csv", ["tap", "beta_over_k", "info_per_k", "class_prob"],
                      [(r["tap"], r["beta_over_k"], r["info_per_k"], r["class_prob"]) for r in rows])
    return [path, export.plot_sweep(rows, out / "sweep.png")]


def cmd_evaluate(args, out: Path, inputs):
    data, model = _load_inputs(args, inputs)
    x, y, boxes = data.x_val[: args.images], data.y_val[: args.images], data.box_val[: args.images]
    stats = _stats(args, data, model, inputs) if "per-sample" in args.methods else None
    methods = {name: _method(name, args, data, model, inputs, stats) for name in args.methods}
    report = evaluation.EvalReport()
    fill = data.channel_mean
    for name, method in methods.items():
        logger.info("evaluating %s on %d images", name, len(x))
        heat = _map_images(lambda i: method(model, x[i], int(y[i]), args.seed).values, range(len(x)), args.jobs)
        scores = report[name]
        for tile in args.tile:
            morf = evaluation.degradation_curve(model, x, heat, tile, "morf", fill=fill)
            lerf = evaluation.degradation_curve(model, x, heat, tile, "lerf", fill=fill)
            scores.curves[tile] = (morf, lerf)
            scores.degradation[tile] = evaluation.degradation_integral(morf, lerf)
        scores.bbox = float(np.mean([evaluation.bbox_ratio(h, b) for h, b in zip(heat, boxes)]))
        if args.sens_images > 0:
            k = min(args.sens_images, len(x))
            scores.sensitivity = evaluation.sensitivity_n(
                model, x[:k], heat[:k], sets_per_n=args.sets_per_n, tile=args.tile[0], seed=args.seed,
            )
    written = report.write(out)
    if not args.no_plots:
        for tile in args.tile:
            curves = {n: m.curves[tile] for n, m in report.methods.items()}
            written.append(export.plot_degradation(curves, out / f"degradation_{tile}.png", f"tile {tile}"))
        sens = {n: m.sensitivity for n, m in report.methods.items() if m.sensitivity is not None}
        if sens:
            written.append(export.plot_sensitivity(sens, out / "sensitivity.png"))
    sys.stdout.write(report.to_tsv())
    return written


def cmd_sanity(args, out: Path, inputs):
    data, model = _load_inputs(args, inputs)
    method = _method(args.method, args, data, model, inputs)
    x, y = data.x_val[: args.images], data.y_val[: args.images]
    res = evaluation.sanity_check(model, method, x, y, seed=args.seed)
    path = _write_csv(out / f"sanity_{args.method}.csv", ["randomized_from", "ssim"], zip(res.layers, res.ssim))
    for layer, s in zip(res.layers, res.ssim):
        print(f"{layer}\t{s:.4f}")
    return [path]


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "stats": cmd_stats,
    "attribute": cmd_attribute,
    "train-readout": cmd_train_readout,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "sanity": cmd_sanity,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"iba: usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    out = Path(args.out)
    if (out / "manifest.json").exists():
        print(f"iba: usage error: {out} already holds a run; choose a new --out", file=sys.stderr)
        return 1
    inputs: list[Path] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        outputs = HANDLERS[args.command](args, out, inputs)
        _write_manifest(out, args, inputs, outputs)
    except UsageError as exc:
        print(f"iba: usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"iba: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
