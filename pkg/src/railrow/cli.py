"""``railrow`` command line: gen, train, eval, infer, bench, flops, cross-scene, grid-sweep.

Every run writes its resolved configuration (flag > config file > default)
and a fingerprint to ``run.json`` in its output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from .baseline import BaselineConfig
from .data import (
    SyntheticDataset,
    generate_synthetic,
    load_image,
    load_manifest,
    thread_count,
)
from .estimator import RowAnchorDetector, SobelRailDetector, config_path
from .evaluate import (
    accuracy,
    bench,
    cross_scene_matrix,
    dense_variant,
    fingerprint,
    gridding_sweep,
    ground_truth,
    matrix_rows,
    scaled_threshold,
    threshold_sweep,
    write_curve,
)
from .exceptions import CheckpointFormatError, RailRowError, ValidationError
from .grid import SCENE_TAGS, RowAnchorGrid, reduction_ratio
from .model import ModelSpec, RowNet, flops_estimate, head_flops, total_flops
from .train import TrainConfig, TrainResult

log = logging.getLogger("railrow")

EXIT_USAGE = 2
EXIT_IO = 6

DEFAULTS = {
    "gen": {"count": None, "seed": 0, "out": "data", "scene_mix": "", "columns": 100,
            "train_fraction": 0.8},
    "train": {"manifest": None, "out": "run", "epochs": 50, "batch_size": 16, "lr": 4e-4,
              "seed": 0, "mid_channels": 8, "hidden_width": 256, "augment": True,
              "rotation": 6.0, "shift": 0.1, "model_config": None},
    "eval": {"manifest": None, "checkpoint": None, "baseline": None, "threshold": None,
             "scenes": "", "split": "val", "sweep_thresholds": None, "out": "eval"},
    "infer": {"checkpoint": None, "image": None, "out": None, "overlay": None},
    "bench": {"checkpoint": None, "model_config": None, "runs": 100, "warmup": 10,
              "threads": None, "compare_dense": False, "out": "bench", "seed": 0},
    "flops": {"model_config": None, "paper": False, "out": None},
    "cross-scene": {"manifest": None, "scenes": "sun,night", "out": "cross_scene", "epochs": 20,
                    "batch_size": 16, "lr": 4e-4, "seed": 0, "mid_channels": 8,
                    "hidden_width": 256, "augment": True, "rotation": 6.0, "shift": 0.1,
                    "model_config": None},
    "grid-sweep": {"manifest": None, "widths": "25,50,100,200", "out": "grid_sweep", "epochs": 20,
                   "batch_size": 16, "lr": 4e-4, "seed": 0, "mid_channels": 8,
                   "hidden_width": 256, "augment": True, "rotation": 6.0, "shift": 0.1,
                   "model_config": None},
}


# -- helpers -----------------------------------------------------------------

def parse_range(text: str) -> list:
    """``"1..12"`` (unit steps), ``"0.5..3:0.5"`` or ``"1,2,4"`` -> list of floats."""
    text = text.strip()
    try:
        if ".." in text:
            lo, rest = text.split("..", 1)
            hi, step = (rest.split(":", 1) + ["1"])[:2]
            lo, hi, step = float(lo), float(hi), float(step)
            if step <= 0 or hi < lo:
                raise ValueError
            n = int(np.floor((hi - lo) / step + 1e-9)) + 1
            return [round(lo + k * step, 10) for k in range(n)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"bad range {text!r}; use a..b[:step] or comma list") from None


def parse_mix(text: str) -> dict:
    mix = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise ValidationError(f"bad scene mix item {part!r}; use tag=fraction")
        k, v = part.split("=", 1)
        mix[k.strip()] = float(v)
    return mix


def parse_scenes(text: str) -> list:
    scenes = [s.strip() for s in (text or "").split(",") if s.strip()]
    bad = [s for s in scenes if s not in SCENE_TAGS]
    if bad:
        raise ValidationError(f"unknown scenes {bad}; choose from {list(SCENE_TAGS)}")
    return scenes


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Flag > config file > built-in default."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        path = Path(args.config)
        file_cfg = json.loads(path.read_text())
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise ValidationError(f"{path}: unknown keys {sorted(unknown)}")
        cfg.update(file_cfg)
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def persist(out_dir, command, cfg, extra=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # the fingerprint identifies the configuration, not where its output went
    stable = {k: v for k, v in cfg.items() if k != "out"}
    record = {"command": command, "config": cfg, "fingerprint": fingerprint([command, stable])}
    if extra:
        record.update(extra)
    path = out / "run.json"
    path.write_text(json.dumps(record, indent=1, sort_keys=True, default=str) + "\n")
    return path


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ValidationError("missing required option(s): "
                              + ", ".join("--" + k.replace("_", "-") for k in missing))


def _manifest_grid(manifest) -> RowAnchorGrid:
    return manifest.grid if manifest.grid is not None else RowAnchorGrid.desk()


def _model_spec(cfg, grid) -> ModelSpec:
    if cfg.get("model_config"):
        return ModelSpec.from_text(Path(cfg["model_config"]).read_text()).with_grid(grid)
    return ModelSpec(grid.image_height, grid.image_width, mid_channels=int(cfg["mid_channels"]),
                     hidden_width=int(cfg["hidden_width"]), grid=grid)


def _train_config(cfg, grid) -> TrainConfig:
    return TrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
                       base_lr=float(cfg["lr"]), seed=int(cfg["seed"]), augment=bool(cfg["augment"]),
                       rotation=float(cfg["rotation"]), shift=float(cfg["shift"]),
                       threshold=scaled_threshold(grid.image_width))


def _dataset(manifest):
    images, annotations = manifest.load()
    grid = _manifest_grid(manifest)
    ds = SyntheticDataset(images, annotations, grid)
    train_idx = [i for i, e in enumerate(manifest.entries) if e.split == "train"]
    val_idx = [i for i, e in enumerate(manifest.entries) if e.split != "train"]
    if not train_idx or not val_idx:
        raise ValidationError("manifest needs both train and val entries")
    return ds, train_idx, val_idx


# -- subcommands -------------------------------------------------------------

def cmd_gen(cfg):
    if cfg["count"] is None or int(cfg["count"]) <= 0:
        raise UsageError("--count must be a positive integer")
    grid = RowAnchorGrid.desk(int(cfg["columns"]))
    ds = generate_synthetic(int(cfg["count"]), parse_mix(cfg["scene_mix"]), grid, int(cfg["seed"]))
    frac = float(cfg["train_fraction"])
    path = ds.write(cfg["out"], (frac, 1.0 - frac), int(cfg["seed"]))
    persist(cfg["out"], "gen", cfg)
    print(f"wrote {len(ds)} images and {path}")


def cmd_train(cfg):
    _require(cfg, "manifest")
    manifest = load_manifest(cfg["manifest"])
    grid = _manifest_grid(manifest)
    train_m, val_m = manifest.by_split("train"), manifest.by_split("val")
    if not len(train_m):
        raise ValidationError(f"{cfg['manifest']}: no train entries")
    images, annotations = train_m.load()
    val = val_m.load() if len(val_m) else None
    spec = _model_spec(cfg, grid)
    tc = _train_config(cfg, grid)
    est = RowAnchorDetector(grid=grid, backbone=spec.backbone, mid_channels=spec.mid_channels,
                            hidden_width=spec.hidden_width, epochs=tc.epochs,
                            batch_size=tc.batch_size, base_lr=tc.base_lr, rotation=tc.rotation,
                            shift=tc.shift, augment=tc.augment, seed=tc.seed)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    est.fit(images, annotations, validation_data=val,
            callback=lambda r: print(f"epoch {r['epoch']:3d} loss {r['loss']:.3f} "
                                     f"train {r['train_acc']:.4f} val {r['val_acc']:.4f}"))
    est.save(out / "model.ckpt")
    TrainResult(est.net_.store, est.trace_).write_trace(out / "trace.csv")
    persist(out, "train", cfg, {"train_config": tc.to_dict()})
    final = est.trace_[-1] if est.trace_ else {}
    print(f"checkpoint {out / 'model.ckpt'}; final val_acc {final.get('val_acc', float('nan')):.4f}")


def cmd_eval(cfg):
    _require(cfg, "manifest")
    if bool(cfg["checkpoint"]) == bool(cfg["baseline"]):
        raise UsageError("give exactly one of --checkpoint or --baseline sobel")
    manifest = load_manifest(cfg["manifest"])
    grid = _manifest_grid(manifest)
    if cfg["split"] != "all":
        manifest = manifest.by_split(cfg["split"])
    scenes = parse_scenes(cfg["scenes"])
    if scenes:
        manifest = manifest.subset(e for e in manifest.entries if set(scenes) & set(e.scenes))
    if not len(manifest):
        raise ValidationError("no images left after split/scene filtering")
    images, annotations = manifest.load()
    if cfg["baseline"]:
        if cfg["baseline"] != "sobel":
            raise UsageError(f"unknown baseline {cfg['baseline']!r}; only 'sobel'")
        est = SobelRailDetector(grid=grid).fit(images)
    else:
        est = RowAnchorDetector.load(cfg["checkpoint"])
        if est.spec_.grid != grid:
            raise ValidationError("checkpoint grid differs from the manifest grid")
    pred = est.predict(images)
    gt = ground_truth(annotations, grid)
    threshold = scaled_threshold(grid.image_width) if cfg["threshold"] is None else float(cfg["threshold"])
    report = accuracy(pred, gt, threshold, [a.scene_tags for a in annotations])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_text())
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    if cfg["sweep_thresholds"]:
        curve = threshold_sweep(pred, gt, parse_range(cfg["sweep_thresholds"]))
        write_curve(out / "sweep.csv", curve, ["threshold", "accuracy"])
    persist(out, "eval", cfg)
    print(report.to_text(), end="")


def cmd_infer(cfg):
    _require(cfg, "checkpoint", "image")
    est = RowAnchorDetector.load(cfg["checkpoint"])
    grid = est.spec_.grid
    img = load_image(cfg["image"])
    H, W = img.shape
    sx, sy = W / grid.image_width, H / grid.image_height
    resized = (H, W) != (grid.image_height, grid.image_width)
    if resized:
        print(f"notice: image is {W}x{H}, model expects {grid.image_width}x{grid.image_height}; "
              "resizing for inference and rescaling predictions back", file=sys.stderr)
        img = np.asarray(Image.fromarray(img).resize((grid.image_width, grid.image_height),
                                                     Image.BILINEAR))
    rails = est.predict_rails(img[None])[0]
    result = {"image": str(cfg["image"]), "width": W, "height": H, "resized": resized, "rails": []}
    for r in rails.to_dict()["rails"]:
        r["anchors"] = [round(y * sy, 4) for y in r["anchors"]]
        r["x"] = [round(x * sx, 4) for x in r["x"]]
        result["rails"].append(r)
    text = json.dumps(result, indent=1) + "\n"
    out = Path(cfg["out"]) if cfg["out"] else Path(str(cfg["image"]) + ".rails.json")
    out.write_text(text)
    if cfg["overlay"]:
        draw_overlay(load_image(cfg["image"]), result).save(cfg["overlay"])
    n = sum(1 for r in result["rails"] if r["x"])
    print(f"{n} rail(s) detected; wrote {out}")


SLOT_COLORS = [(255, 64, 64), (64, 255, 64), (64, 128, 255), (255, 220, 0)]


def draw_overlay(image, result) -> Image.Image:
    from PIL import ImageDraw

    im = Image.fromarray(image).convert("RGB")
    draw = ImageDraw.Draw(im)
    for r in result["rails"]:
        color = SLOT_COLORS[r["slot"] % len(SLOT_COLORS)]
        for x, y in zip(r["x"], r["anchors"]):
            draw.ellipse([x - 1.5, y - 1.5, x + 1.5, y + 1.5], fill=color)
    return im


def _load_for_bench(cfg):
    if cfg["checkpoint"]:
        return RowAnchorDetector.load(cfg["checkpoint"]).net_
    spec = ModelSpec.from_text(Path(cfg["model_config"]).read_text()) if cfg["model_config"] \
        else ModelSpec()
    return RowNet(spec, seed=int(cfg["seed"]))


def cmd_bench(cfg):
    threads = int(cfg["threads"]) if cfg["threads"] is not None else thread_count()
    net = _load_for_bench(cfg)
    shape = (1, net.spec.in_channels, net.spec.input_height, net.spec.input_width)
    reports = {"row": bench(net.forward, shape, int(cfg["warmup"]), int(cfg["runs"]), threads,
                            config=net.spec.to_text())}
    if cfg["compare_dense"]:
        dense = RowNet(dense_variant(net.spec), seed=int(cfg["seed"]))
        reports["dense"] = bench(dense.forward, shape, int(cfg["warmup"]), int(cfg["runs"]),
                                 threads, config=dense.spec.to_text())
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows = [[k, r.runs, r.warmup, r.threads, f"{r.mean_latency:.6e}", f"{r.std_latency:.6e}",
             f"{r.fps:.3f}", r.fingerprint] for k, r in reports.items()]
    write_curve(out / "bench.csv", rows,
                ["head", "runs", "warmup", "threads", "mean_latency_s", "std_latency_s", "fps",
                 "fingerprint"])
    persist(out, "bench", cfg)
    for k, r in reports.items():
        print(f"[{k}] " + r.to_text().replace("\n", "; ").rstrip("; "))


def cmd_flops(cfg):
    if cfg["paper"]:
        spec = ModelSpec.paper()
    elif cfg["model_config"]:
        spec = ModelSpec.from_text(Path(cfg["model_config"]).read_text())
    else:
        spec = ModelSpec()
    rows = flops_estimate(spec)
    lines = [f"{'layer':<14} {'kind':<12} {'output':>14} {'params':>12} {'FLOPs':>16}"]
    for r in rows:
        lines.append(f"{r.name:<14} {r.kind:<12} {'x'.join(map(str, r.output_shape)):>14} "
                     f"{r.params:>12,} {r.flops:>16,}")
    g = spec.grid
    ratio = reduction_ratio(spec.input_height, spec.input_width, g.num_anchors, g.num_columns)
    lines.append(f"head total: {head_flops(rows):,}")
    lines.append(f"total: {total_flops(rows):,} ({total_flops(rows) / 1e9:.3f} G)")
    lines.append(f"reduction ratio: {ratio:.2f}")
    print("\n".join(lines))
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_curve(out / "flops.csv",
                    [[r.name, r.kind, r.params, r.flops] for r in rows]
                    + [["head_total", "", "", head_flops(rows)], ["total", "", "", total_flops(rows)]],
                    ["layer", "kind", "params", "flops"])
        persist(out, "flops", cfg, {"reduction_ratio": ratio})


def cmd_cross_scene(cfg):
    _require(cfg, "manifest")
    manifest = load_manifest(cfg["manifest"])
    ds, train_idx, val_idx = _dataset(manifest)
    scenes = parse_scenes(cfg["scenes"])
    if len(scenes) < 2:
        raise ValidationError("cross-scene needs at least two scenes")
    matrix = cross_scene_matrix(ds, scenes, train_idx, val_idx, _model_spec(cfg, ds.grid),
                                _train_config(cfg, ds.grid), seed=int(cfg["seed"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows = matrix_rows(matrix)
    write_curve(out / "matrix.csv", rows[1:], rows[0])
    persist(out, "cross-scene", cfg)
    for r in rows:
        print("  ".join(f"{c:>10}" for c in r))


def cmd_grid_sweep(cfg):
    _require(cfg, "manifest")
    manifest = load_manifest(cfg["manifest"])
    ds, train_idx, val_idx = _dataset(manifest)
    widths = [int(w) for w in parse_range(cfg["widths"])]
    rows = gridding_sweep(ds, train_idx, val_idx, widths, _model_spec(cfg, ds.grid),
                          _train_config(cfg, ds.grid), seed=int(cfg["seed"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_curve(out / "gridding.csv", [[r["w"], f"{r['top1']:.6f}", f"{r['accuracy']:.6f}"]
                                       for r in rows], ["w", "top1", "accuracy"])
    persist(out, "grid-sweep", cfg)
    for r in rows:
        print(f"w={r['w']:4d}  top1 {r['top1']:.4f}  accuracy {r['accuracy']:.4f}")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "bench": cmd_bench, "flops": cmd_flops, "cross-scene": cmd_cross_scene,
            "grid-sweep": cmd_grid_sweep}


class UsageError(RailRowError):
    exit_code = EXIT_USAGE


# -- parser ------------------------------------------------------------------

def _training_flags(p):
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--mid-channels", type=int)
    p.add_argument("--hidden-width", type=int)
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    p.add_argument("--rotation", type=float, help="max augmentation rotation, degrees")
    p.add_argument("--shift", type=float, help="max augmentation shift, fraction of size")
    p.add_argument("--model-config", help="ModelSpec key=value file")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="railrow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file of option values (flags override it)")
        return p

    p = add("gen", "render a synthetic dataset with annotations and a manifest")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--scene-mix", help="e.g. sun=0.5,night=0.5")
    p.add_argument("--columns", type=int, help="gridding number w of the saved grid")
    p.add_argument("--train-fraction", type=float)

    _training_flags(add("train", "train a row-anchor model"))

    p = add("eval", "point accuracy of a checkpoint or the Sobel baseline")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", help="'sobel'")
    p.add_argument("--threshold", type=float, help="pixels at model resolution")
    p.add_argument("--scenes", help="comma-separated scene filter")
    p.add_argument("--split", choices=["train", "val", "all"])
    p.add_argument("--sweep-thresholds", help="e.g. 1..12")
    p.add_argument("--out")

    p = add("infer", "decode rails on one image to JSON")
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--out")
    p.add_argument("--overlay", help="optional PNG with decoded points drawn")

    p = add("bench", "single-image latency and FPS")
    p.add_argument("--checkpoint")
    p.add_argument("--model-config")
    p.add_argument("--runs", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--compare-dense", action="store_const", const=True)
    p.add_argument("--out")

    p = add("flops", "per-layer FLOPs table and reduction ratio")
    p.add_argument("--model-config")
    p.add_argument("--paper", action="store_const", const=True,
                   help="288x800 input, 52 anchors, w=200, hidden 2048")
    p.add_argument("--out")

    p = add("cross-scene", "train per scene (and on all) and evaluate on every scene")
    _training_flags(p)
    p.add_argument("--scenes")

    p = add("grid-sweep", "retrain across gridding numbers")
    _training_flags(p)
    p.add_argument("--widths")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        with threadpool_limits(limits=thread_count()):
            COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.error(str(exc))  # exits with EXIT_USAGE
    except CheckpointFormatError as exc:
        print(f"railrow: checkpoint error: {exc}", file=sys.stderr)
        return exc.exit_code
    except RailRowError as exc:
        print(f"railrow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except json.JSONDecodeError as exc:
        print(f"railrow: invalid config file: {exc}", file=sys.stderr)
        return ValidationError.exit_code
    except OSError as exc:
        print(f"railrow: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
