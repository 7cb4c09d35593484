"""
Operator command line: ``python -m app <command>``.

Every command reads one RunConfig JSON file (``--config``) and applies
``--set a.b.c=value`` overrides plus the ``--seed``, ``--workers``,
``--generalize`` and ``--plot`` flags on top. Engine errors map to exit
codes: 1 config, 2 parse, 3 numeric, 4 empty result.
"""

import argparse
import json
import logging
import sys
from typing import Dict, List, Optional, Sequence

from app.config import settings
from app.core import pipeline
from app.core.errors import ConfigError, EngineError
from app.models.base import ActionType
from app.models.cues import ActionCue, InitialState

logger = logging.getLogger(__name__)

# config sections each command reads
HONORED: Dict[str, List[str]] = {
    "db build": ["paths.clips_dir", "paths.skeleton_file", "paths.output_dir", "paths.database", "database."],
    "optimize": ["paths.", "database.", "scene.", "synthesizer.", "reward.", "termination.", "ppo.", "metrics.ablation_seeds",
                 "seed", "workers", "generalize"],
    "synthesize": ["paths.", "database.", "scene.", "synthesizer.", "reward.", "termination.", "seed"],
    "edit": ["paths.", "database.", "editor."],
    "train-autoencoder": ["paths.clips_dir", "paths.skeleton_file", "paths.output_dir", "paths.autoencoder",
                          "database.", "editor.", "seed"],
    "eval": ["paths.", "database.", "scene."],
    "sweep": ["paths.", "database.", "scene.", "synthesizer.", "reward.", "termination.", "metrics.",
              "seed", "workers", "plot"],
    "export": ["paths.", "database."],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def honored_keys(command: str) -> List[str]:
    prefixes = HONORED[command]
    return [k for k in pipeline.config_keys() if any(k == p or (p.endswith(".") and k.startswith(p)) for p in prefixes)]


def _epilog(command: str) -> str:
    return "config keys (--set KEY=VALUE):\n" + "\n".join(f"  {k}" for k in honored_keys(command))


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="RunConfig JSON file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int, help="parallel workers (default: available cores)")
    parser.add_argument("--generalize", action="store_true", default=None,
                        help="resample start and cue every episode")
    parser.add_argument("--plot", action="store_true", default=None, help="write PNG plots")


def _command(subparsers, name: str, key: str, help: str) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(name, help=help, description=help, epilog=_epilog(key),
                                   formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(parser)
    parser.set_defaults(command=key)
    return parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="python -m app", description="Scene-aware motion synthesis and editing")
    parser.add_argument("--log-level", default=settings.log_level, help="logging level (env MOTION_LOG_LEVEL)")
    subparsers = parser.add_subparsers(dest="group", required=True, parser_class=_Parser)

    db = subparsers.add_parser("db", help="motion database commands")
    db_sub = db.add_subparsers(dest="db_command", required=True, parser_class=_Parser)
    _command(db_sub, "build", "db build", "parse the clip directory and write the database cache")

    optimize = _command(subparsers, "optimize", "optimize", "optimize the action controller with PPO")
    optimize.add_argument("--iterations", type=int)
    optimize.add_argument("--init-policy", help="warm-start from an existing policy checkpoint")
    optimize.add_argument("--ablation", action="store_true",
                          help="run the collision-reward ablation over metrics.ablation_seeds seeds")

    synthesize = _command(subparsers, "synthesize", "synthesize", "roll out the stored policy")
    synthesize.add_argument("--position", type=float, nargs=3, metavar=("X", "Y", "Z"))
    synthesize.add_argument("--yaw", type=float, default=0.0)
    synthesize.add_argument("--action", choices=[ActionType.sit.value, ActionType.stop.value])
    synthesize.add_argument("--target", type=float, nargs=3, metavar=("X", "Y", "Z"), help="cue root target")
    synthesize.add_argument("--facing", type=float, default=0.0, help="cue facing yaw (rad)")
    synthesize.add_argument("--stochastic", action="store_true", help="sample actions instead of the mean")
    synthesize.add_argument("--name", default="motion")

    edit = _command(subparsers, "edit", "edit", "edit a motion segment toward manipulation waypoints")
    edit.add_argument("--motion", help="motion JSON or BVH (default paths.motion)")
    edit.add_argument("--segment", type=int, nargs=2, metavar=("START", "STOP"))
    edit.add_argument("--method", choices=["manifold", "ik"], default="manifold")
    edit.add_argument("--splice", type=int, default=0, help="frames to hold at the segment start")

    train = _command(subparsers, "train-autoencoder", "train-autoencoder", "train the motion autoencoder")
    train.add_argument("--epochs", type=int)

    evaluate = _command(subparsers, "eval", "eval", "contact and penetration metrics of a motion")
    evaluate.add_argument("--motion", help="motion JSON or BVH (default paths.motion)")

    _command(subparsers, "sweep", "sweep", "robustness sweep of the stored policy over start positions")

    export = _command(subparsers, "export", "export", "write a motion as BVH")
    export.add_argument("--motion", help="motion JSON or BVH (default paths.motion)")
    export.add_argument("--output")
    export.add_argument("--frame-rate", type=float, default=30.0)
    return parser


def _motion_path(args, config) -> str:
    path = args.motion or config.paths.motion
    if not path:
        raise ConfigError("no motion given (--motion or paths.motion)")
    return path


def _run(args) -> dict:
    config = pipeline.load_run_config(args.config, args.overrides, args.seed, args.workers, args.generalize, args.plot)
    command = args.command

    if command == "db build":
        db, path = pipeline.build_database_cmd(config)
        return pipeline.database_summary(db, path).model_dump(mode="json")

    if command == "optimize":
        if args.ablation:
            return pipeline.ablation(config, iterations=args.iterations).model_dump(mode="json")
        result = pipeline.optimize(config, iterations=args.iterations, init_policy=args.init_policy)
        return {"policy": str(result.policy_path), "training_log": str(result.log_path),
                "best_average_return": result.best_average_return, "iterations": len(result.rows)}

    if command == "synthesize":
        initial = InitialState(position=args.position, yaw=args.yaw) if args.position else None
        cue = None
        if args.target:
            cue = ActionCue(action=ActionType(args.action or ActionType.sit.value), q_root=args.target, r_root=args.facing)
        result = pipeline.synthesize(config, initial, cue, greedy=not args.stochastic, name=args.name)
        return {"motion": str(result.json_path), "bvh": str(result.bvh_path), "frames": len(result.motion),
                "success": result.trajectory.success, "reason": result.trajectory.reason, "seconds": result.seconds}

    if command == "edit":
        result, path = pipeline.edit_motion(config, _motion_path(args, config), segment=args.segment,
                                            method=args.method, splice=args.splice)
        return {"motion": str(path), "method": result.method, "initial_error": result.initial_error,
                "final_error": result.final_error, "frames": len(result.motion)}

    if command == "train-autoencoder":
        result, path = pipeline.train_autoencoder_cmd(config, args.epochs)
        last = result.history[-1] if result.history else {}
        return {"autoencoder": str(path), "epochs": len(result.history), "aborted": result.aborted, **last}

    if command == "eval":
        return pipeline.evaluate(config, _motion_path(args, config)).model_dump(mode="json")

    if command == "sweep":
        report = pipeline.sweep(config)
        return {"ratio": report.ratio, "targets": [t.model_dump(mode="json") for t in report.targets],
                "contact_cm": report.contact_cm, "penetration_percent": report.penetration_percent,
                "seconds_per_trial": report.seconds_per_trial}

    if command == "export":
        path, frames = pipeline.export(config, _motion_path(args, config), args.output, args.frame_rate)
        return {"bvh": str(path), "frames": frames}

    raise ConfigError(f"unknown command '{command}'")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=str(args.log_level).upper())
    try:
        summary = _run(args)
    except EngineError as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        return e.exit_code
    print(json.dumps(summary, indent=2, default=str))
    return 0
