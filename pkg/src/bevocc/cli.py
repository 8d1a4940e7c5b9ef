"""Command-line entry point: ``bevocc <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, layout_sequence, resolve_config, write_config

log = logging.getLogger("bevocc")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

_FREEZE_MODES = {
    "backbone": "freeze_backbone_bottleneck",
    "agg_head": "freeze_agg_head",
    "none": "none",
}


# config sections archived next to each command's outputs
_SECTIONS = {
    "synth": ("scene",),
    "train": ("grid", "model", "train"),
    "finetune": ("grid", "train", "finetune"),
    "eval": ("grid", "model", "train"),
    "ablate": ("grid", "model", "train", "ablate"),
    "predict": ("grid", "model", "train"),
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _flag(p, *names, key, **kw):
    """Register a flag that overrides config ``key`` only when given."""
    p.add_argument(*names, dest=f"cfg:{key}", default=argparse.SUPPRESS, **kw)


def _common(p):
    p.add_argument("--config", help="YAML run config")
    _flag(p, "--data-root", key="data_root", help="dataset directory (env BEVOCC_DATA_ROOT)")
    _flag(p, "--out", key="output", help="output directory")
    _flag(p, "--seed", key="seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _grid_flags(p):
    _flag(p, "--grid-size", key="grid.size", type=int, help="BEV cells per side")
    _flag(p, "--resolution", key="grid.resolution", type=float, help="cell size in meters")
    _flag(p, "--grid-max-range", key="grid.max_range", type=float, help="camera coverage range in meters")
    _flag(p, "--sigma", key="grid.pedestrian_sigma", type=float, help="pedestrian Gaussian sigma in cells")


def _model_flags(p):
    _flag(p, "--aggregator", key="model.aggregator", choices=["late", "conv", "deformable", "avgpool"])
    _flag(p, "--background", key="model.use_background", action="store_const", const=True)
    _flag(p, "--channels", key="model.backbone_channels", type=int)
    _flag(p, "--bottleneck", key="model.bottleneck_channels", type=int)
    _flag(p, "--head-channels", key="model.head_channels", type=int)
    _flag(p, "--deform-heads", key="model.deform_heads", type=int)
    _flag(p, "--deform-points", key="model.deform_points", type=int)


def _train_flags(p):
    _flag(p, "--epochs", key="train.epochs", type=int)
    _flag(p, "--lr", key="train.learning_rate", type=float)
    _flag(p, "--batch-size", key="train.batch_size", type=int)
    _flag(p, "--lambda-v", key="train.lambda_v", type=float)
    _flag(p, "--lambda-p", key="train.lambda_p", type=float)
    _flag(p, "--focal", key="train.focal", action="store_const", const=True)
    _flag(p, "--heldout", key="train.heldout_scenes", type=int, help="trailing scenes held out for evaluation")
    _flag(p, "--max-frames", key="train.max_frames", type=int, help="use at most this many frames per scene")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bevocc", description="Multi-camera BEV road-occupancy toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic multi-camera dataset")
    _common(p)
    _flag(p, "--scenes", key="scene.num_scenes", type=int)
    _flag(p, "--frames", key="scene.num_frames", type=int)
    _flag(p, "--layout-mix", key="scene.layout_mix", help="standard (8:6:6, alias: paper), uniform, or a single layout")
    _flag(p, "--cameras", key="scene.num_cameras", type=int)
    _flag(p, "--image-size", key="scene.image_size", type=int, nargs=2, metavar=("W", "H"))
    _flag(p, "--camera-height", key="scene.camera_height_range", type=float, nargs=2, metavar=("LO", "HI"))
    _flag(p, "--road-albedo", key="scene.road_albedo_range", type=float, nargs=2, metavar=("LO", "HI"))
    _flag(p, "--vehicles", key="scene.vehicle_count_range", type=int, nargs=2, metavar=("LO", "HI"))
    _flag(p, "--pedestrians", key="scene.pedestrian_count_range", type=int, nargs=2, metavar=("LO", "HI"))
    _flag(p, "--frame-interval", key="scene.frame_interval", type=float)
    p.add_argument("--force", action="store_true", help="replace an existing dataset")

    p = sub.add_parser("train", help="train a fusion model")
    _common(p)
    _grid_flags(p)
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("finetune", help="few-shot fine-tune a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    _flag(p, "--freeze", key="finetune.freeze", choices=sorted(_FREEZE_MODES))
    _flag(p, "--samples", key="finetune.samples", type=int)
    _flag(p, "--ft-epochs", key="finetune.epochs", type=int)
    _flag(p, "--ft-lr", key="finetune.learning_rate", type=float)
    _flag(p, "--heldout", key="train.heldout_scenes", type=int)
    _flag(p, "--max-frames", key="train.max_frames", type=int)
    _flag(p, "--sigma", key="grid.pedestrian_sigma", type=float)

    p = sub.add_parser("eval", help="score a checkpoint or the ground-truth oracle")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    p.add_argument("--split", choices=["heldout", "all"], default="heldout")
    _grid_flags(p)
    _model_flags(p)
    _flag(p, "--heldout", key="train.heldout_scenes", type=int)
    _flag(p, "--max-frames", key="train.max_frames", type=int)

    p = sub.add_parser("ablate", help="single-camera or grid-size ablation")
    _common(p)
    _flag(p, "--mode", key="ablate.mode", choices=["single-camera", "grid-size"])
    _flag(p, "--camera", key="ablate.camera", type=int, help="1-based camera number")
    _flag(p, "--sizes", key="ablate.sizes", type=int, nargs="+")
    _flag(p, "--extent", key="ablate.extent", type=float, help="grid side in meters (grid-size mode)")
    p.add_argument("--checkpoint", help="model to ablate (single-camera mode)")
    _grid_flags(p)
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("predict", help="write prediction heatmaps for frames")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", help="scene id (default: first held-out scene)")
    p.add_argument("--frame", type=int, nargs="+", default=[0])
    p.add_argument("--scale", type=int, default=4, help="pixels per grid cell")
    _model_flags(p)
    _flag(p, "--heldout", key="train.heldout_scenes", type=int)
    _flag(p, "--sigma", key="grid.pedestrian_sigma", type=float)
    return parser


def _overrides(args) -> dict:
    out: dict = {}
    for name, value in vars(args).items():
        if not name.startswith("cfg:"):
            continue
        node = out
        *parents, leaf = name[4:].split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return out


def _require_root(cfg: RunConfig) -> Path:
    if not cfg.data_root:
        raise ConfigError("no data root: pass --data-root or set BEVOCC_DATA_ROOT")
    return Path(cfg.data_root)


def _output(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.output) if cfg.output else Path("bevocc-out") / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split(scene_ids: list[str], heldout: int) -> tuple[list[str], list[str]]:
    if heldout >= len(scene_ids):
        raise ConfigError(f"dataset has {len(scene_ids)} scenes; cannot hold out {heldout} and still train")
    if heldout == 0:
        return scene_ids, []
    return scene_ids[:-heldout], scene_ids[-heldout:]


def _scene_ids(root: Path) -> list[str]:
    from .scenegen import DatasetManifest

    return [s.scene_id for s in DatasetManifest.load(root).scenes]


def _load(root: Path, grid, ids, cfg: RunConfig):
    from .data import load_dataset

    return load_dataset(root, grid, ids, cfg.train.max_frames)


def _load_model(path: str, cfg: RunConfig, overrides: dict):
    """Load a checkpoint; explicitly requested model settings must match it."""
    from .models import load_checkpoint

    model, extra = load_checkpoint(path)
    asked = overrides.get("model", {})
    if asked:
        expected = replace(model.cfg, **asked)
        if expected != model.cfg:
            diff = model.cfg.diff(expected)
            lines = ", ".join(f"{k}: checkpoint={a!r} requested={b!r}" for k, (a, b) in sorted(diff.items()))
            raise ConfigError(f"checkpoint config mismatch: {lines}")
    return model, extra


def _grid_of(model_cfg, cfg: RunConfig):
    from .data import GridConfig

    return GridConfig(model_cfg.grid_size, model_cfg.grid_resolution, model_cfg.max_range, cfg.grid.pedestrian_sigma)


def _model_id(model_cfg) -> str:
    return model_cfg.aggregator + ("+bg" if model_cfg.use_background else "")


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg: RunConfig, overrides: dict) -> int:
    from .scenegen import SceneSpec, export_dataset, generate_scene

    root = _require_root(cfg)
    if root.exists() and any(root.iterdir()):
        if not args.force:
            raise ConfigError(f"{root} is not empty; use --force to replace it")
        if not (root / "manifest.json").exists():
            raise ConfigError(f"{root} is not a bevocc dataset; refusing to delete it")
        shutil.rmtree(root)
    s = cfg.scene
    layouts = layout_sequence(s.layout_mix, s.num_scenes, cfg.seed)
    scenes = []
    for k, layout in enumerate(layouts):
        spec = SceneSpec(
            scene_id=f"scene{k:03d}", layout=layout, num_cameras=s.num_cameras,
            camera_height_range=tuple(s.camera_height_range), camera_max_range=s.camera_max_range,
            rng_seed=cfg.seed * 1_000_003 + k, num_frames=s.num_frames,
            vehicle_count_range=tuple(s.vehicle_count_range), pedestrian_count_range=tuple(s.pedestrian_count_range),
            image_size=tuple(s.image_size), fov_deg=s.fov_deg, frame_interval=s.frame_interval,
            camera_pitch_range_deg=tuple(s.camera_pitch_range_deg), road_albedo_range=tuple(s.road_albedo_range),
        )
        scenes.append(generate_scene(spec))
    manifest = export_dataset(scenes, root)
    write_config(cfg, root / "synth_config.yaml", _SECTIONS["synth"])
    counts = {name: layouts.count(name) for name in sorted(set(layouts))}
    print(f"wrote {len(manifest.scenes)} scenes x {s.num_frames} frames x {s.num_cameras} cameras to {root}")
    print("layouts: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, overrides: dict) -> int:
    import torch

    from .evaluation import ModelPredictor, evaluate
    from .models import BevOccupancyModel, save_checkpoint
    from .training import train

    root = _require_root(cfg)
    out = _output(cfg, "train")
    write_config(cfg, out / "run_config.yaml", _SECTIONS["train"])
    train_ids, held_ids = _split(_scene_ids(root), cfg.train.heldout_scenes)
    grid = cfg.grid.build()
    tr = _load(root, grid, train_ids, cfg)
    ho = _load(root, grid, held_ids, cfg) if held_ids else []
    model_cfg = cfg.model.build(cfg.grid, tr[0].num_views)
    tcfg = cfg.train.build(model_cfg.aggregator, cfg.seed)
    torch.manual_seed(cfg.seed)
    model = BevOccupancyModel(model_cfg)
    metrics = out / "metrics.jsonl"
    metrics.unlink(missing_ok=True)
    train(model, tr, tcfg, heldout=ho, metrics_path=metrics)
    save_checkpoint(model, out / "model.pt", {"train_config": tcfg.to_dict(), "train_scenes": train_ids,
                                              "heldout_scenes": held_ids})
    if ho:
        report = evaluate(ModelPredictor(model), ho, model_id=_model_id(model_cfg), tag="heldout")
        report.save(out / "eval_heldout.json")
        (out / "eval_heldout.txt").write_text(report.to_text() + "\n")
        print(report.to_text())
    print(f"checkpoint: {out / 'model.pt'}")
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig, overrides: dict) -> int:
    from .evaluation import ModelPredictor, evaluate
    from .models import save_checkpoint
    from .training import TrainConfig, finetune

    root = _require_root(cfg)
    out = _output(cfg, "finetune")
    write_config(cfg, out / "run_config.yaml", _SECTIONS["finetune"])
    model, _ = _load_model(args.checkpoint, cfg, overrides)
    grid = _grid_of(model.cfg, cfg)
    train_ids, held_ids = _split(_scene_ids(root), cfg.train.heldout_scenes)
    if not held_ids:
        raise ConfigError("fine-tuning needs held-out scenes to report zero-shot vs fine-tuned IoU")
    pool = _load(root, grid, train_ids, cfg)
    ho = _load(root, grid, held_ids, cfg)
    mid = _model_id(model.cfg)
    zero = evaluate(ModelPredictor(model), ho, model_id=mid, tag="zero-shot")
    ft = cfg.finetune
    tcfg = TrainConfig(learning_rate=ft.learning_rate, batch_size=ft.batch_size, epochs=ft.epochs, seed=cfg.seed)
    metrics = out / "metrics.jsonl"
    metrics.unlink(missing_ok=True)
    model, used = finetune(model, pool, _FREEZE_MODES[ft.freeze], tcfg, ft.samples, metrics)
    tuned = evaluate(ModelPredictor(model), ho, model_id=mid, tag=f"finetuned-{ft.freeze}-{ft.samples}")
    save_checkpoint(model, out / "model.pt", {"finetune": ft.model_dump(), "samples": used})
    summary = {"zero_shot": zero.to_dict(), "finetuned": tuned.to_dict(), "samples": used, "freeze": ft.freeze}
    (out / "finetune_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(zero.to_text())
    print(tuned.to_text())
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, overrides: dict) -> int:
    from .evaluation import ModelPredictor, OraclePredictor, evaluate

    root = _require_root(cfg)
    out = _output(cfg, "eval")
    write_config(cfg, out / "run_config.yaml", _SECTIONS["eval"])
    if args.oracle:
        predictor, grid, mid = OraclePredictor(), cfg.grid.build(), "oracle"
    else:
        model, _ = _load_model(args.checkpoint, cfg, overrides)
        predictor, grid, mid = ModelPredictor(model), _grid_of(model.cfg, cfg), _model_id(model.cfg)
    ids = _scene_ids(root)
    if args.split == "heldout":
        ids = _split(ids, cfg.train.heldout_scenes)[1] or ids
    report = evaluate(predictor, _load(root, grid, ids, cfg), model_id=mid, tag=args.split)
    report.save(out / "eval.json")
    (out / "eval.txt").write_text(report.to_text() + "\n")
    print(report.to_text())
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig, overrides: dict) -> int:
    from .evaluation import grid_size_sweep, single_camera_ablation, sweep_table

    root = _require_root(cfg)
    out = _output(cfg, "ablate")
    write_config(cfg, out / "run_config.yaml", _SECTIONS["ablate"])
    ids = _scene_ids(root)
    train_ids, held_ids = _split(ids, cfg.train.heldout_scenes)
    if cfg.ablate.mode == "single-camera":
        if not args.checkpoint:
            raise ConfigError("single-camera ablation needs --checkpoint")
        model, _ = _load_model(args.checkpoint, cfg, overrides)
        cam = cfg.ablate.camera
        if cam > model.cfg.num_views:
            raise ConfigError(f"camera {cam} does not exist; the model has {model.cfg.num_views} cameras")
        scenes = _load(root, _grid_of(model.cfg, cfg), held_ids or ids, cfg)
        res = single_camera_ablation(model, scenes, cam - 1, model_id=_model_id(model.cfg))
        summary = {k: r.to_dict() for k, r in res.items()}
        (out / "single_camera.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        for r in res.values():
            print(r.to_text())
        return EXIT_OK

    from .data import GridConfig

    if not held_ids:
        raise ConfigError("grid-size sweep needs held-out scenes")
    extent = cfg.ablate.extent or cfg.grid.size * cfg.grid.resolution
    num_views = len(json.loads((root / train_ids[0] / "calibration.json").read_text())["cameras"])
    model_cfg = cfg.model.build(cfg.grid, num_views)
    tcfg = cfg.train.build(model_cfg.aggregator, cfg.seed)

    def load_split(gcfg: GridConfig):
        gcfg = replace(gcfg, pedestrian_sigma=cfg.grid.pedestrian_sigma)
        return _load(root, gcfg, train_ids, cfg), _load(root, gcfg, held_ids, cfg)

    rows = grid_size_sweep(load_split, model_cfg, tcfg, cfg.ablate.sizes, extent, cfg.grid.max_range)
    table = sweep_table(rows)
    (out / "grid_sweep.txt").write_text(table + "\n")
    serial = [{k: v for k, v in r.items() if k != "report"} | {"report": r["report"].to_dict()} for r in rows]
    (out / "grid_sweep.json").write_text(json.dumps(serial, indent=2, sort_keys=True))
    print(table)
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig, overrides: dict) -> int:
    from .data import load_scene, make_batch
    from .evaluation import ModelPredictor, emit_heatmap

    root = _require_root(cfg)
    out = _output(cfg, "predict")
    write_config(cfg, out / "run_config.yaml", _SECTIONS["predict"])
    model, _ = _load_model(args.checkpoint, cfg, overrides)
    ids = _scene_ids(root)
    sid = args.scene or (_split(ids, cfg.train.heldout_scenes)[1] or ids)[0]
    scene = load_scene(root, sid, _grid_of(model.cfg, cfg), args.frame)
    predictor = ModelPredictor(model)
    for k, f in enumerate(args.frame):
        batch = make_batch([(scene, k)])
        pred = predictor(batch)[0].numpy()
        gt = batch.targets[0].numpy()
        stem = out / f"{sid}_frame{f:04d}"
        emit_heatmap(pred, f"{stem}_pred.png", args.scale)
        emit_heatmap(gt, f"{stem}_gt.png", args.scale)
        emit_heatmap(pred, f"{stem}_compare.png", args.scale, compare=gt)
        print(f"wrote {stem}_{{pred,gt,compare}}.png")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = _overrides(args)
    try:
        cfg = resolve_config(args.config, overrides)
        return COMMANDS[args.command](args, cfg, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, KeyError) as e:
        msg = e.args[0] if e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
