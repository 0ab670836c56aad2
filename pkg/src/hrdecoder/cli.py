"""Command-line entry point: ``hrdecoder {gen-data,train,eval,bench,sweep}``."""

from __future__ import annotations

import argparse
import csv
import math
import sys
from collections import Counter
from pathlib import Path

from . import runner
from .bench import strategy_runner, time_call
from .config import SECTIONS, RunConfig, derived_seed, read_items
from .costmodel import STRATEGIES, Strategy, count_flops, toy_plan, write_costs_csv
from .data import CLASS_NAMES, GenerationError, SynthConfig, generate, save_dir
from .nets import load_checkpoint

# sweep shorthands -> config keys
SWEEP_ALIASES = {
    "M": "num_crops",
    "delta": "crop_factor",
    "δ": "crop_factor",
    "lambda": "hr_lambda",
    "λ": "hr_lambda",
    "sigma": "sigma",
    "σ": "sigma",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI-style config file; flags override its values")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory")


def _add_data(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data", dest="data_dir", help="dataset directory (default: synthetic)")
    g.add_argument("--count", type=int, help="number of samples")
    g.add_argument("--offset", type=int, help="index of the first sample")
    g.add_argument("--size", type=int, help="synthetic image side")
    g.add_argument("--data-seed", type=int, help="synthetic dataset seed")


def _add_model(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--sigma", type=int)
    g.add_argument("--crops", dest="num_crops", type=int, help="HR crops per step (M)")
    g.add_argument("--crop-factor", type=float, help="crop size jitter (delta)")
    g.add_argument("--lambda", dest="hr_lambda", type=float, help="HR loss weight")
    g.add_argument("--fusion-weight", type=float)
    g.add_argument("--window", help="window H,W in feature cells")
    g.add_argument("--stride", help="stride H,W in feature cells")
    g.add_argument("--lr-size", type=int, help="encoder input side (default: image side / sigma)")
    g.add_argument("--hidden-channels", type=int)


def _add_optim(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("optimiser")
    g.add_argument("--iters", type=int)
    g.add_argument("--optimizer", choices=("adam", "sgd"))
    g.add_argument("--lr", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--adam-eps", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--crop-size", type=int, help="random crop side before training (0: none)")
    g.add_argument("--checkpoint-every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hrdecoder", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _add_common(p)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--offset", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    _add_optim(p)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: OUT/checkpoint.hrsk)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="cost model and measured latency")
    _add_common(p)
    p.add_argument("--strategies", default=",".join(STRATEGIES), help="comma-separated subset of " + ",".join(STRATEGIES))
    p.add_argument("--size", type=int, default=256, help="encoder input side H=W")
    p.add_argument("--sigma", type=int, default=2)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--no-timing", action="store_true", help="cost model only")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="one-at-a-time ablation grid")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    _add_optim(p)
    p.add_argument("--grid", action="append", required=True, help="PARAM=v1,v2,... (PARAM: M, delta, lambda, sigma or a config key)")
    p.add_argument("--eval-count", type=int, default=32, help="held-out samples per grid point")
    p.add_argument("--eval-offset", type=int, help="first held-out sample (default: after the training set)")
    p.set_defaults(func=cmd_sweep)
    return parser


CONFIG_KEYS = {key for keys in SECTIONS.values() for key in keys}


def resolve_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    """``base`` (or defaults), then ``--config`` file values, then flags."""
    cfg = base or RunConfig()
    if getattr(args, "config", None):
        cfg = cfg.updated(read_items(Path(args.config).read_text()))
    flags = {}
    for key, value in vars(args).items():
        if key in CONFIG_KEYS and value is not None:
            flags[key] = str(value) if key in ("window", "stride") else value
    return cfg.updated(flags)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out or "data")
    try:
        samples = generate(SynthConfig(count=args.count, size=(args.size, args.size), seed=seed), offset=args.offset)
    except GenerationError as err:
        print(f"generation failed: {err}", file=sys.stderr)
        return 2
    save_dir(out, samples)
    blobs = Counter(cls for s in samples for cls, _ in s.blobs)
    pixels = Counter()
    for s in samples:
        for cls, area in s.blobs:
            pixels[cls] += area
    parts = [f"{name}={blobs[k]} blobs/{pixels[k]} px" for k, name in enumerate(CLASS_NAMES)]
    print(f"wrote {len(samples)} samples to {out}: " + ", ".join(parts))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out or cfg.out)
    samples = runner.load_samples(cfg)

    def progress(row):
        if not args.quiet and (row.step % 50 == 0 or row.step == cfg.iters - 1):
            print(f"step {row.step:5d}  L={row.loss:.4f}  L_Seg={row.seg_loss:.4f}  L_HR={row.hr_loss:.4f}", flush=True)

    try:
        _, rows = runner.train(cfg, samples, out, progress)
    except runner.TrainingError as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return 2
    if rows:
        print(f"trained {cfg.iters} steps; L {rows[0].loss:.4f} -> {rows[-1].loss:.4f}; checkpoint {out / runner.CHECKPOINT}")
    else:
        print(f"no steps run; initial checkpoint written to {out / runner.CHECKPOINT}")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out or RunConfig().out)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / runner.CHECKPOINT
    ckpt = load_checkpoint(ckpt_path)
    base = RunConfig.from_text(ckpt.config_text) if ckpt.config_text else None
    cfg = resolve_config(args, base)
    try:
        model = runner.load_model(cfg, ckpt_path)
    except ValueError as err:
        print(f"config does not match checkpoint: {err}", file=sys.stderr)
        return 2
    samples = runner.load_samples(cfg)
    summary = runner.evaluate(runner.predictor(model, cfg), samples, cfg.num_classes, out, cfg.header())
    for name, c in zip(runner.class_names(cfg.num_classes), summary["classes"]):
        print(f"{name:>4}  IoU={c['IoU']:.4f}  F={c['F']:.4f}  AUPR={c['AUPR']:.4f}")
    print(f"mean  IoU={summary['mIoU']:.4f}  F={summary['mF']:.4f}  AUPR={summary['mAUPR']:.4f}")
    return 0


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = [k.strip() for k in args.strategies.split(",") if k.strip()]
    enc, dec = cfg.encoder_config(), cfg.decoder_config()
    model = runner.init_model(cfg)
    rows = []
    for kind in kinds:
        strategy = Strategy(kind, sigma=args.sigma)
        rep = count_flops(toy_plan(strategy, enc, dec), (args.size, args.size), args.batch)
        row = {
            "strategy": rep.strategy,
            "gflops": rep.gflops,
            "peak_mb": rep.peak_bytes / 2**20,
            "encoder_passes": rep.encoder_passes,
            "flops": rep.total_flops,
            "latency_ms": math.nan,
        }
        if not args.no_timing:
            fn = strategy_runner(strategy, model, (args.size, args.size), args.batch, seed=cfg.seed)
            row["latency_ms"] = 1000 * time_call(fn, args.runs, args.warmup) / args.batch
        rows.append(row)
    rows.sort(key=lambda r: r["flops"])
    write_costs_csv(out / "costs.csv", rows, cfg.header(), extra_cols=("latency_ms",))
    for r in rows:
        print(f"{r['strategy']:<28} {r['gflops']:9.3f} GFLOPs  {r['peak_mb']:8.2f} MB  {r['encoder_passes']} encoder pass(es)  {r['latency_ms']:9.2f} ms")
    return 0


def parse_grid(specs: list[str]) -> list[tuple[str, list[str]]]:
    grid = []
    for spec in specs:
        if "=" not in spec:
            raise ValueError(f"grid spec {spec!r} is not PARAM=v1,v2,...")
        name, values = spec.split("=", 1)
        key = SWEEP_ALIASES.get(name.strip(), name.strip())
        if key not in CONFIG_KEYS:
            raise ValueError(f"unknown sweep parameter {name!r}")
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ValueError(f"grid spec {spec!r} has no values")
        grid.append((key, vals))
    return grid


def sweep_points(cfg: RunConfig, grid: list[tuple[str, list[str]]]) -> list[tuple[str, str, RunConfig]]:
    """One point per (param, value), the other parameters at their base values."""
    points = []
    for key, values in grid:
        for value in values:
            point = cfg.updated({key: value})
            label = f"{key}={value}"
            points.append((key, value, point.replace(seed=derived_seed(cfg.seed, label))))
    return points


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train_samples = runner.load_samples(cfg)
    offset = args.eval_offset if args.eval_offset is not None else cfg.offset + cfg.count
    test_samples = runner.load_samples(cfg.replace(offset=offset, count=args.eval_count))
    names = runner.class_names(cfg.num_classes) + ["mean"]
    with open(out / "sweep.csv", "w", newline="") as f:
        f.write(f"# {cfg.header()}\n")
        w = csv.writer(f)
        w.writerow(["param", "value", "class", "metric", "score"])
        for key, value, point in sweep_points(cfg, parse_grid(args.grid)):
            point_dir = out / f"{key}={value}"
            print(f"== {key}={value} (seed {point.seed})", flush=True)
            model, _ = runner.train(point, train_samples, point_dir)
            summary = runner.evaluate(runner.predictor(model, point), test_samples, point.num_classes, point_dir, point.header())
            per_class = summary["classes"] + [{"IoU": summary["mIoU"], "F": summary["mF"], "AUPR": summary["mAUPR"]}]
            for name, c in zip(names, per_class):
                for metric in ("IoU", "F", "AUPR"):
                    w.writerow([key, value, name, metric, repr(c[metric])])
            f.flush()
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
