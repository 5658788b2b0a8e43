"""Command line entry point: ``monoscale {synthgen,prepare,train,eval,report}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data_ingest import (
    DataError,
    DatasetManifest,
    Origin,
    concat_manifests,
    find_exports,
    kitti_split_presets,
    read_kitti,
    read_simulator_export,
)
from .evaluation import EvaluationError, evaluate, format_table, histogram, load_report, per_frame_curve_plot, trajectory_error_plot, worst_k
from .geometry import CANONICAL_CAMERA, CameraModel, GeometryError
from .model import CheckpointError, ModelCheckpoint, NumericalError
from .presets import PRESETS, resolve_preset
from .synthgen import DESK_CAMERA, MAP_PRESETS, DriveError, build_scene, generate_drive, mono_rig, random_profile, stereo_rig
from .training import TrainConfig, train_cnn, train_lstm

log = logging.getLogger("monoscale")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


def _write_stamp(out: Path, command: str, args: argparse.Namespace, **extra) -> None:
    stamp = {
        "command": command,
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "workers": getattr(args, "workers", None),
        **extra,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "stamp.json").write_text(json.dumps(stamp, indent=2, sort_keys=True, default=str))


def _camera(name: str) -> CameraModel:
    if name == "desk":
        return DESK_CAMERA
    if name == "canonical":
        return CANONICAL_CAMERA
    raise ConfigError(f"unknown camera {name!r} (desk, canonical)")


# -- subcommands ---------------------------------------------------------------


def cmd_synthgen(args: argparse.Namespace) -> int:
    out = Path(args.out)
    tags = args.map_tags.split(",") if args.map_tags else list(MAP_PRESETS)[: args.maps]
    unknown = [t for t in tags if t not in MAP_PRESETS]
    if unknown:
        raise ConfigError(f"unknown map presets {unknown}; available: {', '.join(MAP_PRESETS)}")
    if args.frames < 2:
        raise ConfigError("--frames must be >= 2")
    cam = _camera(args.camera)
    rig = stereo_rig(cam) if args.rig == "stereo" else mono_rig(cam)
    dt = 0.1
    for m, tag in enumerate(tags):
        rng = np.random.default_rng([args.seed, m])
        profiles = [
            random_profile(rng, (args.frames - 1) * dt, speed_range=(args.min_speed, args.max_speed), smooth=args.smooth)
            for _ in range(args.episodes)
        ]
        generate_drive(build_scene(MAP_PRESETS[tag]), profiles, rig, out / tag, seed=args.seed * 1000 + m, workers=args.workers)
        log.info("wrote %s", out / tag)
    _write_stamp(out, "synthgen", args, maps=tags, frames=args.frames, episodes=args.episodes, camera=cam.to_dict(), rig=args.rig)
    return EXIT_OK


def cmd_prepare(args: argparse.Namespace) -> int:
    manifests = []
    if args.kind == "kitti":
        train, test = kitti_split_presets()
        seqs = args.sequences.split(",") if args.sequences else (test if args.split == "test" else train)
        for src in args.source:
            manifests.append(read_kitti(src, seqs, args.cameras.split(","), args.split))
    else:
        origin = Origin.SYNTHGEN if args.kind == "synthgen" else Origin.SIMULATOR_EXPORT
        for src in args.source:
            roots = find_exports(src)
            if not roots:
                raise DataError(f"no simulator export (meta.json) under {src}")
            for root in roots:
                manifests.append(read_simulator_export(root, args.split, origin))
    manifest = concat_manifests(manifests)
    manifest = DatasetManifest(manifest.frames, args.split, manifest.origin)
    if args.map_tags:
        manifest = manifest.filter_maps(args.map_tags.split(","))
    out = Path(args.out)
    path = out if out.suffix == ".json" else out / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(path)
    print(f"{path}: {len(manifest)} frames, {len(manifest.trajectories())} trajectories, maps {manifest.map_tags()}")
    return EXIT_OK


def _train_config(args: argparse.Namespace) -> TrainConfig:
    if args.preset:
        try:
            cfg = resolve_preset(args.preset).config
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None
    else:
        cfg = TrainConfig()
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        try:
            cfg = TrainConfig.from_dict({**cfg.to_dict(), **doc})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config {args.config}: {exc}") from None
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["total_iterations"] = args.iterations
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.manifest:
        overrides["train_manifests"] = tuple(args.manifest)
    return replace(cfg, **overrides) if overrides else cfg


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _train_config(args)
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if not cfg.train_manifests:
        raise ConfigError("no training manifest given (--manifest or train_manifests in --config)")
    manifest = concat_manifests(DatasetManifest.load(p) for p in cfg.train_manifests)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    resume = ModelCheckpoint.load(args.resume) if args.resume else None
    if cfg.phase == "cnn":
        ckpt = train_cnn(cfg, manifest, out, resume=resume)
    else:
        init = ModelCheckpoint.load(args.checkpoint) if args.checkpoint else None
        ckpt = train_lstm(cfg, manifest, init, out, resume=resume)
    _write_stamp(out, "train", args, preset=args.preset, config=cfg.to_dict(), config_fingerprint=ckpt.config_fingerprint, param_fingerprint=ckpt.param_fingerprint())
    print(f"{out / 'final.npz'}: step {ckpt.step}, params {ckpt.param_fingerprint()}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = ModelCheckpoint.load(args.checkpoint)
    manifest = concat_manifests(DatasetManifest.load(p) for p in args.manifest)
    h, w, _ = ckpt.cnn_config.input_shape
    target = CANONICAL_CAMERA if (h, w) == (120, 280) else DESK_CAMERA if (h, w) == (60, 140) else None
    if "train_config" in ckpt.extra:
        target = CameraModel.from_dict(ckpt.extra["train_config"]["target_camera"])
    report = evaluate(ckpt, manifest, target)
    out = Path(args.out)
    report.save(out)
    (out / "table.txt").write_text(format_table([(args.name or ckpt.kind, report.to_dict())]))
    if args.plots:
        covered = [r for r in report.records if r.covered]
        histogram([r.error for r in covered], args.bin_width, out / "histogram.png")
        worst_k(report.records, min(args.worst, len(covered)), manifest, out / "worst.png")
        for traj in manifest.trajectories():
            recs = [r for r in report.records if r.sequence_id == traj.sequence_id and r.camera_id == traj.camera_id.value]
            safe = f"{traj.sequence_id}_{traj.camera_id.value}".replace("/", "_")
            errs = [0.0 if r.error is None else r.error for r in recs]
            if len(errs) == len(traj) - 1 and errs:
                trajectory_error_plot(traj, errs, out / f"trajectory_{safe}.png")
            cov = [r for r in recs if r.covered]
            if cov:
                per_frame_curve_plot([r.gt for r in cov], [r.pred for r in cov], out / f"curve_{safe}.png", [r.frame_i for r in cov])
    _write_stamp(out, "eval", args, checkpoint_config=ckpt.config_fingerprint, checkpoint_params=ckpt.param_fingerprint())
    sys.stdout.write(format_table([(args.name or ckpt.kind, report.to_dict())]))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    names = args.names.split(",") if args.names else []
    rows = []
    for k, path in enumerate(args.reports):
        name = names[k] if k < len(names) else Path(path).parent.name or Path(path).stem
        try:
            rows.append((name, load_report(path)))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read report {path}: {exc}") from None
    table = format_table(rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="monoscale", description="Absolute inter-frame distance estimation for monocular cameras")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthgen", help="render procedural drives in the simulator-export format")
    s.add_argument("--out", required=True)
    s.add_argument("--maps", type=int, default=6)
    s.add_argument("--map-tags", default=None, help="comma-separated map presets (overrides --maps)")
    s.add_argument("--frames", type=int, default=200, help="frames per episode")
    s.add_argument("--episodes", type=int, default=1)
    s.add_argument("--rig", choices=["stereo", "mono"], default="stereo")
    s.add_argument("--camera", default="desk", help="desk (140x60) or canonical (280x120)")
    s.add_argument("--min-speed", type=float, default=3.0)
    s.add_argument("--max-speed", type=float, default=15.0)
    s.add_argument("--smooth", action="store_true", help="ramp speeds between segments")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_synthgen)

    s = sub.add_parser("prepare", help="build a dataset manifest")
    s.add_argument("--source", action="append", required=True)
    s.add_argument("--kind", choices=["kitti", "export", "synthgen"], default="synthgen")
    s.add_argument("--split", choices=["train", "test"], default="train")
    s.add_argument("--sequences", default=None, help="KITTI sequence ids (default: split preset)")
    s.add_argument("--cameras", default="left,right")
    s.add_argument("--map-tags", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train a CNN or LSTM model")
    s.add_argument("--preset", default=None, help=f"one of: {', '.join(sorted(PRESETS))}")
    s.add_argument("--config", default=None)
    s.add_argument("--manifest", action="append", default=[])
    s.add_argument("--out", default="runs/train")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--checkpoint", default=None, help="CNN checkpoint initializing an LSTM run")
    s.add_argument("--resume", default=None, help="checkpoint to continue from")
    s.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on consecutive pairs")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", action="append", required=True)
    s.add_argument("--out", default="runs/eval")
    s.add_argument("--name", default=None)
    s.add_argument("--plots", action="store_true")
    s.add_argument("--bin-width", type=float, default=0.02)
    s.add_argument("--worst", type=int, default=8)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="table of several evaluation reports")
    s.add_argument("reports", nargs="+")
    s.add_argument("--names", default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, EvaluationError, GeometryError, DriveError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
