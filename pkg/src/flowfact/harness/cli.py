"""Command line entry point.

Exit codes: 0 on success, 2 for configuration or input errors, 3 when
training or evaluation hits non-finite numbers.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from ..midlevel import RepresentationSpecError
from ..sac import CheckpointMismatchError, TrainingDivergedError
from . import experiments
from .config import ConfigError, load_config
from .formats import FileFormatError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# Flags that map directly onto [experiment] options.
_EXPERIMENT_FLAGS = {
    "environment": "environment",
    "representations": "representations",
    "train_speed": "train_speed",
    "eval_speeds": "eval_speeds",
    "train_fps": "train_fps",
    "eval_fps": "eval_fps",
    "seeds": "seeds",
    "eval_episodes": "eval_episodes",
    "output": "output_dir",
}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--environment")
    p.add_argument("--representations", help="e.g. ego+obj or seg2,depth2")
    p.add_argument("--train-speed", dest="train_speed")
    p.add_argument("--eval-speeds", dest="eval_speeds", help="comma separated speed modes")
    p.add_argument("--train-fps", dest="train_fps")
    p.add_argument("--eval-fps", dest="eval_fps", help="comma separated frame rates")
    p.add_argument("--seeds", help="comma separated seeds")
    p.add_argument("--eval-episodes", dest="eval_episodes")
    p.add_argument("--total-steps", dest="total_steps")
    p.add_argument("--output", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config option, e.g. --set scene.width=32")


def _config_from_args(args):
    overrides: dict[str, dict[str, str]] = {}
    for flag, key in _EXPERIMENT_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides.setdefault("experiment", {})[key] = str(v)
    if getattr(args, "total_steps", None) is not None:
        overrides.setdefault("training", {})["total_steps"] = str(args.total_steps)
    for item in getattr(args, "set", []):
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        overrides.setdefault(section.strip(), {})[key.strip()] = value
    return load_config(args.config, overrides)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


def cmd_factorize(args) -> int:
    from .dataset import factorize_files

    res = factorize_files(args.flow, args.depth, args.pose, args.intrinsics, args.out_prefix,
                          args.far_depth, args.flow_scale)
    _print({"ego": args.out_prefix + "_ego.flo", "obj": args.out_prefix + "_obj.flo",
            "valid_pixels": int(res.valid.sum())})
    return EXIT_OK


def cmd_render_dataset(args) -> int:
    from .dataset import export_dataset

    cfg = _config_from_args(args)
    out = Path(args.output) if args.output else experiments.output_root(cfg) / "dataset"
    records = export_dataset(out, cfg.environment, cfg.train_fps, args.frames, args.seed, cfg.train_speed,
                             args.static, cfg.scene, cfg.midlevel.far_depth)
    _print({"output": str(out), "frames": len(records)})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    root = experiments.output_root(cfg)
    seed = cfg.seeds[0]
    out = experiments.run_dir(root, cfg.representations, seed)
    ckpt = experiments.train_run(cfg, cfg.representations, seed, out, reuse=not args.force)
    _print({"checkpoint": str(ckpt), "eval": json.loads((out / "eval.json").read_text())["success_rate"]})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    speed = args.speed or cfg.train_speed
    fps = float(args.fps) if args.fps else cfg.train_fps
    rep = experiments.evaluate_cell(cfg, args.checkpoint, speed, fps)
    result = {"checkpoint": args.checkpoint, "speed": speed, "fps": fps, "seed": cfg.eval_seed, **rep.to_dict()}
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2))
    result.pop("results")
    _print(result)
    return EXIT_OK


def _sweep(fn):
    def run(args) -> int:
        rows = fn(_config_from_args(args))
        print(experiments.format_tsv(rows), end="")
        return EXIT_OK

    return run


def cmd_report(args) -> int:
    rows = experiments.report_from_dir(args.directory)
    print(experiments.format_tsv(rows), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowfact", description="Factorized optical flow navigation experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("factorize", help="split a raw flow file into ego and object flow")
    p.add_argument("flow")
    p.add_argument("depth")
    p.add_argument("pose", help="current camera to prior camera transform")
    p.add_argument("intrinsics")
    p.add_argument("out_prefix")
    p.add_argument("--far-depth", type=float, default=100.0)
    p.add_argument("--flow-scale", type=float, default=None)
    p.set_defaults(func=cmd_factorize)

    p = sub.add_parser("render-dataset", help="export simulator frames as flow/depth/seg/pose files")
    _add_config_args(p)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--static", action="store_true", help="freeze all pedestrians")
    p.set_defaults(func=cmd_render_dataset)

    p = sub.add_parser("train", help="train one agent (first seed of the config)")
    _add_config_args(p)
    p.add_argument("--force", action="store_true", help="retrain even if a matching run exists")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_args(p)
    p.add_argument("checkpoint")
    p.add_argument("--speed")
    p.add_argument("--fps")
    p.add_argument("--out", help="write per-episode results as JSON")
    p.set_defaults(func=cmd_eval)

    for name, fn in (("sweep-composition", experiments.sweep_composition),
                     ("sweep-complementarity", experiments.sweep_complementarity),
                     ("sweep-fps", experiments.sweep_fps)):
        p = sub.add_parser(name)
        _add_config_args(p)
        p.set_defaults(func=_sweep(fn))

    p = sub.add_parser("report", help="recompute a sweep report from its episode records")
    p.add_argument("directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    threads = os.environ.get(experiments.WORKERS_ENV)
    if threads:
        os.environ.setdefault("OMP_NUM_THREADS", threads)
    try:
        return args.func(args)
    except (ConfigError, RepresentationSpecError, FileFormatError, CheckpointMismatchError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
