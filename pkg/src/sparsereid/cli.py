"""Command-line entry points: gen-synth, train, eval, bench, visualize."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import bench, checkpoint, data, distill, evaluation, pnm, train, vit

logger = logging.getLogger("sparsereid")


# ---------------------------------------------------------------------------
# configuration


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--key`` flag per RunConfig field, all defaulting to "not given"."""
    group = parser.add_argument_group("run configuration (overrides --config)")
    for f in dataclasses.fields(train.RunConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, default=None,
                           metavar="V")


def resolve_config(args) -> train.RunConfig:
    cfg = train.RunConfig.from_file(args.config) if args.config else train.RunConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return train.RunConfig.from_dict(overrides, cfg)


def _dataset(manifest: str) -> data.ReIDDataset:
    if not manifest:
        raise train.ConfigError("no dataset manifest given (use --manifest)")
    return data.load_dataset(manifest)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args) -> int:
    spec = data.SynthSpec(args.identities, args.images_per_id, args.height, args.width,
                          args.cameras, args.occluders, args.noise, args.seed)
    ds = data.gen_synth(args.out, spec)
    print(f"wrote {len(ds.images)} images and {len(ds.occluders)} occluders to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ds = _dataset(cfg.manifest)
    x, _, _ = ds.subset("train")
    y, _ = ds.train_labels()
    if (x.shape[2], x.shape[3]) != (cfg.height, cfg.width):
        raise train.ConfigError(f"images are {x.shape[2]}x{x.shape[3]} but the config says "
                                f"{cfg.height}x{cfg.width}")
    os.makedirs(cfg.out, exist_ok=True)
    prefix = "teacher" if args.teacher else "student"
    log_path = os.path.join(cfg.out, f"{prefix}_loss.csv")
    echo = cfg.to_dict()
    log = open(log_path, "w", encoding="utf-8")
    log.write(distill.LossParts.HEADER + "\n")

    def log_fn(step, parts):
        log.write(parts.csv_row(step) + "\n")

    def epoch_fn(epoch, result):
        path = os.path.join(cfg.out, f"{prefix}_epoch{epoch + 1:03d}.ckpt")
        checkpoint.save_model(path, result.model, echo)
        print(f"epoch {epoch + 1} loss {result.epoch_loss[-1]:.4f} -> {path}", flush=True)

    try:
        if args.teacher:
            result = train.fit_teacher(x, y, cfg, ds.occluders, log_fn, epoch_fn)
        else:
            teacher = None
            if cfg.npkd:
                if not cfg.teacher_path or not os.path.exists(cfg.teacher_path):
                    raise train.ConfigError(
                        f"distillation is enabled but teacher checkpoint {cfg.teacher_path!r} "
                        "does not exist (train one with 'train --teacher' or set npkd=false)")
                teacher = checkpoint.load_model(cfg.teacher_path)
            result = train.fit_student(x, y, cfg, teacher, ds.occluders, log_fn, epoch_fn)
    finally:
        log.close()
    final = os.path.join(cfg.out, f"{prefix}.ckpt")
    checkpoint.save_model(final, result.model, echo)
    print(f"saved {final}; loss log {log_path}")
    return 0


def cmd_eval(args) -> int:
    model = checkpoint.load_model(args.checkpoint)
    if args.keep_ratio is not None:
        model = model.with_ratio(args.keep_ratio)
    ds = _dataset(args.manifest)
    queries = None
    if args.occluded:
        qx, _, _ = ds.subset("query")
        queries = evaluation.occlude_queries(qx, ds.eval_occluders or ds.occluders, args.seed)
    report = evaluation.evaluate(model, ds, queries)
    print(report.table())
    print(evaluation.EvalReport.HEADER)
    print(report.csv_row())
    if args.csv:
        new = not os.path.exists(args.csv)
        with open(args.csv, "a", encoding="utf-8") as fh:
            if new:
                fh.write(evaluation.EvalReport.HEADER + "\n")
            fh.write(report.csv_row() + "\n")
    return 0


def cmd_bench(args) -> int:
    if args.checkpoint:
        model = checkpoint.load_model(args.checkpoint)
    else:
        model = vit.VisionTransformer(bench.bench_config(), seed=args.seed)
    ratios = args.ratios if model.cfg.sparsify is not None else [1.0]
    results = bench.sweep(model, ratios, args.batch, args.reps, args.warmup, args.seed)
    print(bench.CSV_HEADER)
    for r in results:
        print(r.csv_row())
    if len(results) > 1 and 0.5 in ratios and 1.0 in ratios:
        print(f"speedup p=0.5 vs p=1.0: {bench.speedup(results):.2f}x; "
              f"monotone within 5%: {bench.is_monotone(results)}")
    if args.csv:
        bench.append_csv(args.csv, results)
    return 0


def mask_discarded(image: np.ndarray, kept, grid: tuple, patch: int) -> np.ndarray:
    """Black out every grid cell whose token index is not in ``kept``."""
    out = image.copy()
    rows, cols = grid
    dropped = np.setdiff1d(np.arange(rows * cols), np.asarray(kept))
    for t in dropped:
        r, c = divmod(int(t), cols)
        out[:, r * patch:(r + 1) * patch, c * patch:(c + 1) * patch] = 0.0
    return out


def visualize(model, images) -> list:
    """Per image, one masked copy per stage. Unsparsified models give the inputs back."""
    images = np.asarray(images, dtype=np.float32)
    if model.cfg.sparsify is None:
        return [[img.copy()] for img in images]
    from .numerics import no_grad

    with no_grad():
        out = model.forward_features(images, "infer")
    p = model.cfg.patch
    return [[mask_discarded(img, kept[i], p.grid, p.patch) for kept in out.kept]
            for i, img in enumerate(images)]


def cmd_visualize(args) -> int:
    model = checkpoint.load_model(args.checkpoint)
    if args.keep_ratio is not None and model.cfg.sparsify is not None:
        model = model.with_ratio(args.keep_ratio)
    if model.cfg.sparsify is None:
        print("notice: checkpoint has no sparsify schedule; images are written unchanged")
    images = [pnm.to_chw(pnm.read_ppm(path)) for path in args.images]
    p = model.cfg.patch
    for path, img in zip(args.images, images):
        if img.shape != (p.channels, p.height, p.width):
            raise vit.ConfigError(f"{path}: image is {img.shape[1]}x{img.shape[2]}, "
                                  f"model expects {p.height}x{p.width}")
    os.makedirs(args.out, exist_ok=True)
    for path, stages in zip(args.images, visualize(model, np.stack(images))):
        stem = os.path.splitext(os.path.basename(path))[0]
        for s, img in enumerate(stages):
            name = f"{stem}.ppm" if model.cfg.sparsify is None else f"{stem}_stage{s + 1}.ppm"
            pnm.write_ppm(os.path.join(args.out, name), pnm.to_hwc_uint8(img))
    print(f"wrote {len(args.images)} image set(s) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsereid",
                                     description="Sparse-token person re-identification toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="render a synthetic dataset and occluder library")
    g.add_argument("--out", required=True)
    defaults = data.SynthSpec()
    for f in dataclasses.fields(data.SynthSpec):
        g.add_argument("--" + f.name.replace("_", "-"), type=type(getattr(defaults, f.name)),
                       default=getattr(defaults, f.name))
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train a student (or the teacher with --teacher)")
    t.add_argument("--config", help="key=value configuration file")
    t.add_argument("--teacher", action="store_true", help="train the teacher instead")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="CMC / mAP on the query and gallery split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--keep-ratio", type=float)
    e.add_argument("--occluded", action="store_true",
                   help="paste held-out occluders onto the queries")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--csv", help="append the report row to this file")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="inference throughput across keep ratios")
    b.add_argument("--checkpoint", help="model to time (default: 256x128 benchmark model)")
    b.add_argument("--ratios", type=float, nargs="+", default=list(bench.RATIOS))
    b.add_argument("--batch", type=int, default=32)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--csv", help="append results to this file")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("visualize", help="black out discarded patches per stage")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--keep-ratio", type=float)
    v.add_argument("images", nargs="+", help="P6 images at the model's input size")
    v.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (train.ConfigError, vit.ConfigError, checkpoint.CheckpointError,
            pnm.PNMError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
