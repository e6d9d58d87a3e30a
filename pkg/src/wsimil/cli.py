"""Command-line entry point: synth, tile, train, eval, compare, explain."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from wsimil import bagfile
from wsimil.evaluation import (
    SplitSpec,
    aggregate_runs,
    confusion_metrics,
    format_table,
    split_dataset,
    wilcoxon_signed_rank,
)
from wsimil.interpretation import attention_heatmap, explain_baseline, localization_score
from wsimil.models import (
    BaselineCNN,
    BaselineConfig,
    Encoder,
    EncoderConfig,
    config_dict,
    downscale,
    image_to_chw,
    load_checkpoint,
    save_checkpoint,
)
from wsimil.pooling import (
    AttentionMIL,
    Bag,
    InstancePoolMIL,
    attention_weights,
    export_attention,
)
from wsimil.synth import SynthSpec, generate_bags, generate_slide, render_bag
from wsimil.tiling import (
    dump_patches,
    filter_background,
    grid_shape,
    load_slide,
    normalize_patch,
    read_manifest,
    save_raster,
    tile_image,
    write_manifest,
)
from wsimil.training import VARIANTS, Split, TrainConfig, predict_split, train

log = logging.getLogger("wsimil")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

METHOD_ROWS = {
    "attention": ("patches", "CNN + MIL attention"),
    "max": ("patches", "CNN + MIL max pooling"),
    "mean": ("patches", "CNN + MIL mean pooling"),
    "baseline": ("re-scaled WSI", "end-to-end CNN"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class RunLog:
    """Deterministic record of a command's flags, outputs and failures."""

    def __init__(self, out_dir, command, args):
        self.path = Path(out_dir) / "run_log.json"
        flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                 if k != "func"}
        self.data = {"command": command, "flags": flags, "artifacts": [], "failures": [],
                     "status": "running"}

    def artifact(self, path):
        path = Path(path)
        try:
            path = path.relative_to(self.path.parent)
        except ValueError:
            pass
        self.data["artifacts"].append(str(path))

    def failure(self, what, error):
        self.data["failures"].append({"item": what, "error": str(error)})

    def close(self, status):
        self.data["status"] = status
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True) + "\n")


def _write_json(path, obj, runlog=None):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    if runlog:
        runlog.artifact(path)


def _require_file(path, what):
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")


# ---------------------------------------------------------------------------
# shared model plumbing
# ---------------------------------------------------------------------------


def _load_bags(directory):
    try:
        return bagfile.read_bag_dir(directory)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def _splits(bags, spec: SplitSpec):
    by_id = {b.slide_id: b for b in bags}
    train_ids, val_ids, test_ids = split_dataset(sorted(by_id), spec)
    return tuple([by_id[i] for i in ids] for ids in (train_ids, val_ids, test_ids))


def build_model(variant, feature_dim, attention_dim=128, baseline_cfg=None):
    if variant == "attention":
        return AttentionMIL(feature_dim, attention_dim)
    if variant in ("mean", "max"):
        return InstancePoolMIL(feature_dim, variant)
    if variant == "baseline":
        return BaselineCNN(baseline_cfg or BaselineConfig())
    raise UsageError(f"unknown variant {variant!r}")


def _model_from_config(cfg):
    if cfg["variant"] == "baseline":
        return BaselineCNN(BaselineConfig(**cfg["baseline"]))
    return build_model(cfg["variant"], cfg["feature_dim"], cfg.get("attention_dim", 128))


def baseline_images(bags, size, manifest=None):
    """Downscaled (C, S, S) pixel inputs for the baseline, keyed by slide id.

    With a manifest the original slide rasters are used; otherwise each bag is
    rendered to a surrogate raster of its instance features on the patch grid.
    """
    out = {}
    if manifest:
        records = {str(r["id"]): r for r in read_manifest(manifest)}
        for b in bags:
            if b.slide_id not in records:
                raise UsageError(f"slide {b.slide_id!r} missing from manifest {manifest}")
            slide = load_slide(records[b.slide_id])
            out[b.slide_id] = image_to_chw(downscale(slide.pixels, size))
    else:
        for b in bags:
            out[b.slide_id] = image_to_chw(downscale(render_bag(b), size))
    return out


def _split_obj(bags, variant, images=None) -> Split:
    if variant == "baseline":
        return Split([images[b.slide_id] for b in bags], [b.label for b in bags],
                     [b.slide_id for b in bags])
    return Split.from_bags(bags)


def _train_config(args, variant, seed):
    return TrainConfig(learning_rate=args.lr, momentum=args.momentum, epochs=args.epochs,
                       weight_decay=args.weight_decay, seed=seed, variant=variant)


def _split_spec(args):
    return SplitSpec(args.test_fraction, args.val_fraction, args.split_seed)


def _checkpoint_config(model, args, tcfg, split_spec, kind, epoch, images_from):
    cfg = dict(model.config()) if not isinstance(model, BaselineCNN) else {
        "variant": "baseline", "baseline": config_dict(model.config)}
    cfg.update({
        "train": asdict(tcfg),
        "split": asdict(split_spec),
        "checkpoint": kind,
        "epoch": epoch,
        "baseline_source": images_from,
    })
    return cfg


def _prepare(args, variant, bags):
    m = bags[0].M
    images = None
    source = None
    baseline_cfg = None
    if variant == "baseline":
        images = baseline_images(bags, args.baseline_size, args.manifest)
        channels = next(iter(images.values())).shape[0]
        baseline_cfg = BaselineConfig(input_size=args.baseline_size, in_channels=channels,
                                      channels=tuple(args.baseline_channels))
        source = str(args.manifest) if args.manifest else "bags"
    model = build_model(variant, m, args.attention_dim, baseline_cfg)
    return model, images, source


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, runlog):
    spec = SynthSpec(args.n_bags, args.instances, args.feature_dim, args.signal_fraction,
                     args.signal_shift, args.noise_std, args.positive_rate, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bags, masks = generate_bags(spec)
    for bag, mask in zip(bags, masks):
        bagfile.write_bag(bagfile.bag_path(out, bag.slide_id), bag)
        bagfile.write_mask(bagfile.mask_path(out, bag.slide_id), bag.slide_id, mask)
    runlog.artifact(out / f"{len(bags)} bag files + masks")
    _write_json(out / "synth_spec.json", asdict(spec), runlog)
    n_pos = sum(b.label for b in bags)
    print(f"wrote {len(bags)} bags ({n_pos} positive) to {out}")
    if args.slides:
        _synth_slides(args, out / "slides", runlog)
    return EXIT_OK


def _synth_slides(args, out, runlog):
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    w, h = args.slide_size
    t = args.slide_tile
    rows, cols = grid_shape(w, h, t)
    records = []
    for i in range(args.slides):
        sid = f"slide{i:03d}"
        rects = []
        if rng.random() < args.positive_rate:
            # lesions aligned to whole grid cells
            for _ in range(int(rng.integers(1, 3))):
                r, c = int(rng.integers(rows - (h % t > 0))), int(rng.integers(cols - (w % t > 0)))
                rects.append((c * t, r * t, t, t))
            rects = sorted(set(rects))
        slide = generate_slide(w, h, rects, seed=args.seed * 1000 + i, slide_id=sid)
        path = out / f"{sid}.png"
        save_raster(path, slide.pixels)
        records.append({"id": sid, "image_path": path.name, "label": slide.label,
                        "lesions": [list(r) for r in rects]})
    write_manifest(out / "manifest.jsonl", records)
    runlog.artifact(out / "manifest.jsonl")
    print(f"wrote {len(records)} slides and manifest to {out}")


def cmd_tile(args, runlog):
    _require_file(args.manifest, "manifest")
    records = read_manifest(args.manifest)
    if not records:
        print(f"error: manifest {args.manifest} lists no slides", file=sys.stderr)
        runlog.failure(str(args.manifest), "empty manifest")
        return EXIT_RUNTIME
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    encoder = Encoder(EncoderConfig(conv_blocks=[(c, 3) for c in args.encoder_channels],
                                    activation=args.activation, in_channels=3,
                                    input_tile=args.tile_size))
    params = encoder.init_params(np.random.default_rng(args.seed))
    status = EXIT_OK
    for rec in records:
        try:
            slide = load_slide(rec)
        except Exception as exc:  # noqa: BLE001 - any unreadable raster is recorded
            print(f"{rec['id']}: unreadable image ({exc})", file=sys.stderr)
            runlog.failure(rec["id"], exc)
            status = EXIT_RUNTIME
            continue
        patches = tile_image(slide, args.tile_size)
        kept, stats = filter_background(patches, args.retain_ratio)
        tiles = np.stack([normalize_patch(p) for p in kept])
        if tiles.ndim == 3:
            tiles = np.repeat(tiles[..., None], 3, axis=-1)
        tiles = tiles.transpose(0, 3, 1, 2)
        feats = np.concatenate([encoder.forward(params, tiles[i:i + 64])
                                for i in range(0, len(tiles), 64)])
        coords = [(p.grid_row, p.grid_col) for p in kept]
        bag = Bag(slide.id, feats, coords, slide.label)
        path = bagfile.bag_path(out, slide.id)
        bagfile.write_bag(path, bag)
        runlog.artifact(path)
        if args.dump_patches:
            dump_patches(kept, args.dump_patches)
        print(f"{slide.id}: kept {len(kept)} / {len(patches)} patches "
              f"(filtered {len(patches) - len(kept)}, c_max {stats.c_max:.1f})")
    return status


def _train_one(args, variant, bags, seed, runlog, out):
    model, images, source = _prepare(args, variant, bags)
    spec = _split_spec(args)
    tr, va, te = _splits(bags, spec)
    tcfg = _train_config(args, variant, seed)
    hist = train(model, _split_obj(tr, variant, images), _split_obj(va, variant, images), tcfg)
    out.mkdir(parents=True, exist_ok=True)
    for kind, params, epoch in (("best", hist.best_params, hist.best_epoch),
                                ("final", hist.params, args.epochs - 1)):
        name = "checkpoint.milm" if kind == "best" else "final.milm"
        cfg = _checkpoint_config(model, args, tcfg, spec, kind, epoch, source)
        save_checkpoint(out / name, cfg, params)
        runlog.artifact(out / name)
    _write_json(out / "history.json", hist.to_dict(), runlog)
    return hist


def cmd_train(args, runlog):
    bags = _load_bags(args.bags)
    out = Path(args.out)
    for i in range(args.runs):
        run_out = out if args.runs == 1 else out / f"run_{i:03d}"
        hist = _train_one(args, args.variant, bags, args.seed + i, runlog, run_out)
        print(f"run {i}: seed {hist.seed} final train loss {hist.train_loss[-1]:.4f} "
              f"best epoch {hist.best_epoch}")
    return EXIT_OK


def cmd_eval(args, runlog):
    _require_file(args.checkpoint, "checkpoint")
    cfg, params = load_checkpoint(args.checkpoint)
    bags = _load_bags(args.bags)
    if args.subset != "all":
        tr, va, te = _splits(bags, SplitSpec(**cfg["split"]))
        bags = {"train": tr, "val": va, "test": te}[args.subset]
    model = _model_from_config(cfg)
    images = None
    if cfg["variant"] == "baseline":
        src = cfg.get("baseline_source")
        images = baseline_images(bags, model.config.input_size,
                                 None if src in (None, "bags") else src)
    split = _split_obj(bags, cfg["variant"], images)
    scores = predict_split(model, params, split)
    report = confusion_metrics(split.labels, scores, args.threshold)
    result = {"variant": cfg["variant"], "subset": args.subset, "n": len(split),
              "metrics": report.to_dict(),
              "scores": {i: float(s) for i, s in zip(split.ids, scores)}}
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("metrics.json")
    _write_json(out, result, runlog)
    r = report
    print(f"{cfg['variant']} on {args.subset} (n={len(split)}): accuracy {r.accuracy:.3f} "
          f"F1 {r.f1:.3f} AUC {r.auc:.3f} sensitivity {r.sensitivity:.3f} "
          f"specificity {r.specificity:.3f}")
    return EXIT_OK


def compare_variants(args, bags, variants, runs, progress=print):
    """Train each variant ``runs`` times; return (rows, per-run reports by variant)."""
    spec = _split_spec(args)
    tr, va, te = _splits(bags, spec)
    per_run = {}
    for variant in variants:
        model, images, _ = _prepare(args, variant, bags)
        trs, vas, tes = (_split_obj(s, variant, images) for s in (tr, va, te))
        reports = []
        for i in range(runs):
            hist = train(model, trs, vas, _train_config(args, variant, args.seed + i))
            scores = predict_split(model, hist.best_params, tes)
            reports.append(confusion_metrics(tes.labels, scores, args.threshold))
        per_run[variant] = reports
        agg = aggregate_runs(reports)
        progress(f"{variant}: mean test AUC {agg.mean['auc']:.4f} over {runs} runs")
    rows = []
    for variant in variants:
        data_type, method = METHOD_ROWS[variant]
        p = None
        if variant != "attention" and "attention" in per_run:
            a = [r.auc for r in per_run["attention"]]
            b = [r.auc for r in per_run[variant]]
            try:
                p = wilcoxon_signed_rank(a, b).p_value
            except ValueError:
                p = float("nan")
        rows.append({"variant": variant, "data_type": data_type, "method": method,
                     "aggregate": aggregate_runs(per_run[variant]), "p_value": p})
    rows.sort(key=lambda r: -r["aggregate"].mean["auc"])
    return rows, per_run


def cmd_compare(args, runlog):
    bags = _load_bags(args.bags)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, per_run = compare_variants(args, bags, args.variants, args.runs)
    table = format_table(rows)
    (out / "comparison.txt").write_text(table + "\n")
    runlog.artifact(out / "comparison.txt")
    _write_json(out / "comparison.json", {
        "runs": args.runs,
        "rows": [{**{k: v for k, v in r.items() if k != "aggregate"},
                  "p_value": None if r["p_value"] is None or np.isnan(r["p_value"])
                  else r["p_value"],
                  "mean": r["aggregate"].mean, "std": r["aggregate"].std} for r in rows],
        "per_run": {v: [r.to_dict() for r in reps] for v, reps in per_run.items()},
    }, runlog)
    print(table)
    return EXIT_OK


def cmd_explain(args, runlog):
    _require_file(args.checkpoint, "checkpoint")
    cfg, params = load_checkpoint(args.checkpoint)
    bags = _load_bags(args.bags)
    if args.subset != "all":
        tr, va, te = _splits(bags, SplitSpec(**cfg["split"]))
        bags = {"train": tr, "val": va, "test": te}[args.subset]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "attention":
        if cfg["variant"] != "attention":
            raise UsageError("attention maps need an attention-variant checkpoint")
        records, scores = [], []
        for bag in bags:
            a = attention_weights(bag, params)
            amap = attention_heatmap(bag, a)
            amap.save(out / f"{bag.slide_id}.attention.json")
            amap.note += "; " + amap.save_image(out / f"{bag.slide_id}.attention.png")
            records.append(export_attention(bag, a))
            mpath = bagfile.mask_path(args.bags, bag.slide_id)
            if mpath.exists():
                _, mask = bagfile.read_mask(mpath)
                if mask.any():
                    scores.append(localization_score(a, mask))
        _write_json(out / "attention_weights.json", records, runlog)
        if scores:
            print(f"localization: mean attention mass on signal = "
                  f"{np.mean(scores):.2f} x uniform share over {len(scores)} positive bags")
    else:
        if cfg["variant"] != "baseline":
            raise UsageError("integrated gradients need a baseline-variant checkpoint")
        model = _model_from_config(cfg)
        src = args.manifest or (None if cfg.get("baseline_source") in (None, "bags")
                                else cfg["baseline_source"])
        images = baseline_images(bags, model.config.input_size, src)
        for bag in bags:
            amap = explain_baseline(model, params, images[bag.slide_id], bag.slide_id,
                                    args.ig_steps, args.ig_baseline)
            amap.save(out / f"{bag.slide_id}.ig.json")
            amap.save_image(out / f"{bag.slide_id}.ig.png")
    runlog.artifact(out / f"{len(bags)} attribution maps")
    print(f"wrote {len(bags)} {args.mode} maps to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_training_flags(p):
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.15)
    p.add_argument("--val-fraction", type=float, default=0.20,
                   help="validation share of the non-test data")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--attention-dim", type=int, default=128)
    p.add_argument("--baseline-size", type=int, default=32)
    p.add_argument("--baseline-channels", type=int, nargs=5, default=[8, 16, 16, 32, 32])
    p.add_argument("--manifest", type=Path, default=None,
                   help="slide manifest for baseline inputs (default: rendered bags)")
    p.add_argument("--threshold", type=float, default=0.5)


def build_parser():
    parser = _Parser(prog="wsimil", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic bags and masks")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-bags", type=int, default=300)
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--signal-fraction", type=float, default=0.05)
    p.add_argument("--signal-shift", type=float, default=2.0)
    p.add_argument("--noise-std", type=float, default=1.0)
    p.add_argument("--positive-rate", type=float, default=0.77)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--slides", type=int, default=0, help="also write N synthetic slide images")
    p.add_argument("--slide-size", type=int, nargs=2, default=[160, 96], metavar=("W", "H"))
    p.add_argument("--slide-tile", type=int, default=16)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tile", help="tile, filter and encode slides into bag files")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tile-size", type=int, default=224)
    p.add_argument("--retain-ratio", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0, help="encoder initialization seed")
    p.add_argument("--encoder-channels", type=int, nargs="+", default=[16, 32, 64])
    p.add_argument("--activation", choices=["selu", "relu", "tanh"], default="selu")
    p.add_argument("--dump-patches", type=Path, default=None)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--bags", type=Path, required=True)
    p.add_argument("--variant", choices=VARIANTS, default="attention")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint")
    p.add_argument("--bags", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--subset", choices=["test", "val", "train", "all"], default="test")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train all variants N times and tabulate")
    p.add_argument("--bags", type=Path, required=True)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    _add_training_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("explain", help="attention heatmaps or integrated gradients")
    p.add_argument("--bags", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mode", choices=["attention", "ig"], default="attention")
    p.add_argument("--ig-steps", type=int, default=256)
    p.add_argument("--ig-baseline", choices=["white", "black"], default="white")
    p.add_argument("--subset", choices=["test", "val", "train", "all"], default="all")
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_explain)
    return parser


def _validate(args):
    for name in ("runs", "epochs", "ig_steps", "tile_size", "n_bags", "instances",
                 "feature_dim", "baseline_size"):
        val = getattr(args, name, None)
        if val is not None and val < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1")
    rr = getattr(args, "retain_ratio", None)
    if rr is not None and not 0 < rr <= 1:
        raise UsageError("--retain-ratio must lie in (0, 1]")
    for name in ("bags",):
        path = getattr(args, name, None)
        if path is not None and not Path(path).is_dir():
            raise UsageError(f"--{name} directory not found: {path}")
    if getattr(args, "manifest", None) is not None:
        _require_file(args.manifest, "manifest")
    if getattr(args, "lr", None) is not None:
        try:
            TrainConfig(args.lr, args.momentum, args.epochs, args.weight_decay)
            _split_spec(args)
        except ValueError as exc:
            raise UsageError(str(exc)) from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _validate(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"wsimil: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(args.out) if getattr(args, "out", None) else Path(args.checkpoint).parent
    if args.command == "eval" and args.out:
        out_dir = Path(args.out).parent
    runlog = RunLog(out_dir, args.command, args)
    try:
        status = args.func(args, runlog)
    except UsageError as exc:
        print(f"wsimil: error: {exc}", file=sys.stderr)
        runlog.failure(args.command, exc)
        runlog.close("usage error")
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported in the run log, then exit 2
        log.exception("command failed")
        print(f"wsimil: {args.command} failed: {exc}", file=sys.stderr)
        runlog.failure(args.command, exc)
        runlog.close("failed (partial artifacts)")
        return EXIT_RUNTIME
    if args.command == "tile" and status != EXIT_OK and not runlog.data["artifacts"]:
        return status  # nothing was produced, leave no files behind
    runlog.close("ok" if status == EXIT_OK else "completed with failures")
    return status


if __name__ == "__main__":
    sys.exit(main())
