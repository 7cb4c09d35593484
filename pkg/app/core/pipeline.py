"""
Command implementations shared by the CLI and the HTTP API: run-config
loading with dotted overrides, artifact resolution, and one function per
operator command (db build, optimize, synthesize, edit, train-autoencoder,
eval, sweep, export, ablation).
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from app.config import settings
from app.core.bvh import load_bvh, save_bvh
from app.core.controller import Environment, Trajectory, run_episode
from app.core.editor import (
    EditResult, TrainingResult, edit, generate_cue, ik_edit, splice_manipulation, train_autoencoder,
    windows_from_clips,
)
from app.core.errors import ConfigError, EmptyDatabase, ParseError
from app.core.metrics import (
    TrialOutcome, collision_ablation, evaluate_motion, plot_sweep_heatmap, robustness_sweep, sweep_positions,
    write_eval_csv, write_json, write_sweep_csv,
)
from app.core.motion import MotionClip, resample
from app.core.motion_db import MotionDatabase, build_database, save_database
from app.core.ppo import (
    GridSampler, PolicyBundle, bundle_for, optimize_generalized, ppo_optimize, warm_start, write_training_log,
)
from app.core.scene import SceneWorld, from_triangles, penetration_metric
from app.core.skeleton import Skeleton, default_skeleton
from app.database.store import get_store
from app.models.base import ActionType, RunConfig, SceneConfig
from app.models.cues import ActionCue, CueFile, InitialState, ManipulationCue
from app.models.reports import AblationReport, DatabaseSummary, EvalReport, SweepReport

logger = logging.getLogger(__name__)

DATABASE_FILE = "database.ckpt"
POLICY_FILE = "policy.ckpt"
AUTOENCODER_FILE = "autoencoder.ckpt"
TRAINING_LOG = "training_log.csv"
AUTOENCODER_LOG = "autoencoder_log.csv"


# ---------------------------------------------------------------- run config

def config_keys(model: Type[BaseModel] = RunConfig, prefix: str = "") -> List[str]:
    """Dotted keys of every leaf setting of a pydantic config model"""
    keys = []
    for name, info in model.model_fields.items():
        annotation = info.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            keys.extend(config_keys(annotation, f"{prefix}{name}."))
        else:
            keys.append(f"{prefix}{name}")
    return keys


def format_validation_error(exc: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors())


def parse_override(item: str) -> Tuple[str, Any]:
    """'a.b.c=value' with value parsed as JSON when possible, a bare string otherwise"""
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    known = config_keys()
    if key not in known and not any(key.startswith(k + ".") for k in known):
        raise ConfigError(f"unknown config key '{key}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for item in overrides:
        key, value = parse_override(item)
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override '{item}': '{part}' is not a section")
            node = child
        node[parts[-1]] = value
    return data


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = (),
                    seed: Optional[int] = None, workers: Optional[int] = None,
                    generalize: Optional[bool] = None, plot: Optional[bool] = None) -> RunConfig:
    """Read a RunConfig JSON file (or defaults) and layer dotted overrides and flags on top"""
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"run config not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ParseError(f"run config {path} is not valid JSON: {e.msg}", e.lineno)
        if not isinstance(data, dict):
            raise ConfigError(f"run config {path} must hold a JSON object")
    apply_overrides(data, overrides)
    for key, value in (("seed", seed), ("workers", workers), ("generalize", generalize), ("plot", plot)):
        if value is not None:
            data[key] = value
    return with_scene_config(validate_run_config(data))


def with_scene_config(config: RunConfig) -> RunConfig:
    """
    Layer the scene config JSON named by paths.scene_config under the scene
    settings the run config sets explicitly.
    """
    source = config.paths.scene_config
    if not source:
        return config
    source = Path(source)
    if not source.exists():
        raise ConfigError(f"paths.scene_config does not exist: {source}")
    try:
        scene = json.loads(source.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"scene config {source} is not valid JSON: {e.msg}", e.lineno)
    if not isinstance(scene, dict):
        raise ConfigError(f"scene config {source} must hold a JSON object")
    own = config.scene.model_dump(exclude_unset=True)
    if isinstance(scene.get("grid"), dict) and "grid" in own:
        own["grid"] = {**scene["grid"], **own["grid"]}
    try:
        merged = SceneConfig.model_validate({**scene, **own})
    except ValidationError as e:
        raise ConfigError(f"invalid scene config {source}: {format_validation_error(e)}")
    return config.model_copy(update={"scene": merged})


def validate_run_config(data: Union[Dict[str, Any], RunConfig]) -> RunConfig:
    if isinstance(data, RunConfig):
        return data
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid run config: {format_validation_error(e)}")


def require_paths(config: RunConfig, *names: str):
    """Referenced input paths must be set and exist"""
    for name in names:
        value = getattr(config.paths, name)
        if value is None:
            raise ConfigError(f"paths.{name} is not set")
        if not Path(value).exists():
            raise ConfigError(f"paths.{name} does not exist: {value}")


def resolve_workers(config: RunConfig) -> int:
    return config.workers or settings.default_workers


def output_dir(config: RunConfig) -> Path:
    path = Path(config.paths.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def artifact_path(config: RunConfig, name: str, default: str) -> Path:
    value = getattr(config.paths, name)
    return Path(value) if value else output_dir(config) / default


# ---------------------------------------------------------------- inputs

def load_skeleton(config: RunConfig) -> Skeleton:
    if config.paths.skeleton_file:
        require_paths(config, "skeleton_file")
        return Skeleton.load(config.paths.skeleton_file)
    return default_skeleton()


def clip_action(path: Path) -> ActionType:
    """Action label from the parent directory (walk/, sit/, stop/) or the file name prefix"""
    values = {a.value for a in ActionType}
    if path.parent.name in values:
        return ActionType(path.parent.name)
    prefix = path.stem.replace("-", "_").split("_")[0].lower()
    return ActionType(prefix) if prefix in values else ActionType.walk


def load_clips(config: RunConfig, skeleton: Optional[Skeleton] = None) -> List[MotionClip]:
    require_paths(config, "clips_dir")
    skeleton = skeleton or load_skeleton(config)
    files = sorted(Path(config.paths.clips_dir).glob("**/*.bvh"))
    if not files:
        raise EmptyDatabase(f"no .bvh clips under {config.paths.clips_dir}")
    clips = [
        load_bvh(f, unit_scale=config.database.bvh_unit_scale, skeleton=skeleton, action=clip_action(f),
                 target_rate=config.database.frame_rate)
        for f in files
    ]
    logger.info(f"Loaded {len(clips)} clips from {config.paths.clips_dir}")
    return clips


def load_motion(path: Union[str, Path], config: RunConfig, skeleton: Optional[Skeleton] = None) -> MotionClip:
    """A motion from its JSON trajectory or a BVH file"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"motion not found: {path}")
    skeleton = skeleton or load_skeleton(config)
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ParseError(f"motion {path} is not valid JSON: {e.msg}", e.lineno)
        return MotionClip.from_json(data, skeleton)
    if path.suffix.lower() == ".bvh":
        return load_bvh(path, unit_scale=config.database.bvh_unit_scale, skeleton=skeleton,
                        target_rate=config.database.frame_rate)
    raise ParseError(f"unsupported motion format '{path.suffix}'")


def get_database(config: RunConfig) -> MotionDatabase:
    path = artifact_path(config, "database", DATABASE_FILE)
    if not path.exists():
        raise ConfigError(f"no motion database at {path}; run 'db build' first")
    return get_store().database(path)


def get_scene(config: RunConfig) -> SceneWorld:
    if config.paths.scene_mesh:
        require_paths(config, "scene_mesh")
        return get_store().scene(config.paths.scene_mesh, config.scene)
    logger.info("No scene mesh configured; using an empty scene")
    return from_triangles(np.zeros((0, 3, 3)), config.scene.floor_height, config.scene.hash_cell, "empty")


def read_cues(config: RunConfig) -> CueFile:
    if not config.paths.cue_file:
        return CueFile()
    require_paths(config, "cue_file")
    try:
        return CueFile.model_validate_json(Path(config.paths.cue_file).read_text())
    except ValidationError as e:
        raise ConfigError(f"invalid cue file {config.paths.cue_file}: {format_validation_error(e)}")


def _bounds_xz(scene: SceneWorld) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    box = scene.bbox
    if box is None:
        return None
    return box[0][[0, 2]], box[1][[0, 2]]


def make_environment(config: RunConfig, db: MotionDatabase, scene: SceneWorld, cues: Optional[CueFile] = None,
                     initial: Optional[InitialState] = None, cue: Optional[ActionCue] = None) -> Environment:
    """A fixed (initial, cue) environment, or a resampling one when config.generalize is set"""
    cues = cues or CueFile()
    initial = initial or cues.initial
    cue = cue or cues.action or (cues.targets[0] if cues.targets else None)
    env = Environment(db, scene, config, initial, cue)
    if config.generalize:
        targets = cues.targets or ([cue] if cue is not None else [])
        env.sampler = GridSampler(env.grid, targets, _bounds_xz(scene), config.ppo.max_resample)
    elif initial is None or cue is None:
        raise ConfigError("an initial state and an action cue are required (cue file 'initial' and 'action')")
    return env


def _check_dims(bundle: PolicyBundle, env: Environment, source: str):
    expected = (env.observation_dim, env.type_count, env.continuous_dim)
    found = (bundle.obs_dim, bundle.type_count, bundle.continuous)
    if expected != found:
        raise ConfigError(f"policy {source} has dims {found}, environment needs {expected}")


# ---------------------------------------------------------------- db build

def database_summary(db: MotionDatabase, path: Path) -> DatabaseSummary:
    return DatabaseSummary(path=str(path), frames=db.frame_count, clips=len(db.clips), partitions=db.summary())


def build_database_cmd(config: RunConfig) -> Tuple[MotionDatabase, Path]:
    clips = load_clips(config)
    db = build_database(clips, config.database)
    path = save_database(db, artifact_path(config, "database", DATABASE_FILE))
    return db, path


# ---------------------------------------------------------------- optimize

@dataclass
class OptimizeResult:
    bundle: PolicyBundle
    policy_path: Path
    log_path: Path
    rows: List[Dict[str, float]] = field(default_factory=list)

    @property
    def best_average_return(self) -> float:
        return float(self.bundle.meta.get("best_average_return", float("nan")))


def optimize(config: RunConfig, cues: Optional[CueFile] = None, iterations: Optional[int] = None,
             init_policy: Optional[Union[str, Path]] = None, max_frames: Optional[int] = None) -> OptimizeResult:
    db = get_database(config)
    scene = get_scene(config)
    env = make_environment(config, db, scene, cues if cues is not None else read_cues(config))
    if init_policy:
        bundle = warm_start(init_policy, env)
        logger.info(f"Fine-tuning policy from {init_policy}")
    else:
        bundle = bundle_for(env, config.ppo, config.seed, meta={"seed": config.seed, "generalize": config.generalize})
    options = dict(iterations=iterations, seed=config.seed, workers=resolve_workers(config), max_frames=max_frames)
    if config.generalize:
        best, rows = optimize_generalized(bundle, env, env.sampler, config.ppo, **options)
    else:
        best, rows = ppo_optimize(bundle, env, config.ppo, **options)
    policy_path = best.save(artifact_path(config, "policy", POLICY_FILE))
    log_path = write_training_log(rows, output_dir(config) / TRAINING_LOG)
    return OptimizeResult(best, policy_path, log_path, rows)


def ablation(config: RunConfig, seeds: Optional[Sequence[int]] = None, iterations: Optional[int] = None,
             max_frames: Optional[int] = None) -> AblationReport:
    """Optimize with and without the collision reward per seed and compare greedy-rollout penetration"""
    db = get_database(config)
    scene = get_scene(config)
    cues = read_cues(config)
    seeds = list(seeds) if seeds is not None else list(range(config.metrics.ablation_seeds))

    def run(use_collision: bool, seed: int) -> float:
        variant = config.model_copy(deep=True)
        variant.reward.use_collision = use_collision
        variant.seed = seed
        env = make_environment(variant, db, scene, cues)
        bundle = bundle_for(env, variant.ppo, seed)
        best, _ = ppo_optimize(bundle, env, variant.ppo, iterations, seed=seed, workers=resolve_workers(variant),
                               max_frames=max_frames)
        rollout = run_episode(best, env, np.random.default_rng(seed), greedy=True, keep_motion=True)
        sc = variant.scene
        return penetration_metric(rollout.motion, scene, sc.leg_threshold, sc.arm_threshold, sc.point_tolerance)

    report = collision_ablation(run, seeds)
    write_json(report, output_dir(config) / "ablation.json")
    return report


# ---------------------------------------------------------------- synthesize

@dataclass
class SynthesisResult:
    motion: MotionClip
    trajectory: Trajectory
    seconds: float
    bvh_path: Path
    json_path: Path


def load_policy(config: RunConfig, env: Environment) -> PolicyBundle:
    path = artifact_path(config, "policy", POLICY_FILE)
    bundle = get_store().policy(path)
    _check_dims(bundle, env, str(path))
    return bundle


def synthesize(config: RunConfig, initial: Optional[InitialState] = None, cue: Optional[ActionCue] = None,
               greedy: bool = True, name: str = "motion") -> SynthesisResult:
    """Roll out the stored policy for one (initial state, cue) pair without further optimization"""
    db = get_database(config)
    scene = get_scene(config)
    inference = config.model_copy(update={"generalize": False})
    env = make_environment(inference, db, scene, read_cues(config), initial, cue)
    bundle = load_policy(config, env)

    started = time.perf_counter()
    trajectory = run_episode(bundle, env, np.random.default_rng(config.seed), greedy=greedy, keep_motion=True)
    seconds = time.perf_counter() - started
    motion = trajectory.motion
    motion.name = name

    out = output_dir(config)
    bvh_path = save_bvh(motion, out / f"{name}.bvh", config.database.bvh_unit_scale)
    json_path = out / f"{name}.json"
    motion.save_json(json_path)
    summary = {
        "motion": str(json_path), "bvh": str(bvh_path), "frames": len(motion), "success": trajectory.success,
        "reason": trajectory.reason, "return": trajectory.episode_return, "seconds": seconds,
        "initial": env.initial.model_dump(mode="json"), "cue": env.cue.model_dump(mode="json"),
    }
    (out / f"{name}_summary.json").write_text(json.dumps(summary, indent=2))
    logger.info(f"Synthesized {len(motion)} frames in {seconds:.2f}s ({trajectory.reason})")
    return SynthesisResult(motion, trajectory, seconds, bvh_path, json_path)


# ---------------------------------------------------------------- editing

def train_autoencoder_cmd(config: RunConfig, epochs: Optional[int] = None) -> Tuple[TrainingResult, Path]:
    clips = load_clips(config)
    windows = windows_from_clips(clips, config.editor.window, contact_config=config.database.contacts)
    result = train_autoencoder(windows, clips[0].skeleton, config.editor, np.random.default_rng(config.seed), epochs)
    path = result.autoencoder.save(artifact_path(config, "autoencoder", AUTOENCODER_FILE))
    write_training_log(result.history, output_dir(config) / AUTOENCODER_LOG)
    return result, path


def resolve_manipulation(cues: CueFile, cue: Optional[ManipulationCue] = None) -> ManipulationCue:
    if cue is not None:
        return cue
    if cues.manipulation is not None:
        return cues.manipulation
    if cues.articulation is not None:
        return generate_cue(cues.articulation)
    raise ConfigError("no manipulation cue: give waypoints or an articulation spec")


def edit_motion(config: RunConfig, motion_path: Union[str, Path], cue: Optional[ManipulationCue] = None,
                segment: Optional[Tuple[int, int]] = None, method: str = "manifold", splice: int = 0,
                cues: Optional[CueFile] = None) -> Tuple[EditResult, Path]:
    """
    Edit a segment of a motion toward manipulation waypoints. With `splice`,
    the segment start frame is held for that many extra frames first and the
    segment grows by the same amount; waypoint times index the spliced motion.
    """
    cues = cues if cues is not None else read_cues(config)
    manipulation = resolve_manipulation(cues, cue)
    segment = segment or cues.segment
    if segment is None:
        raise ConfigError("an edit segment (start, stop) is required")
    start, stop = int(segment[0]), int(segment[1])
    clip = load_motion(motion_path, config)
    if splice:
        clip = splice_manipulation(clip, splice, start)
        stop += splice

    if method == "manifold":
        ae = get_store().autoencoder(artifact_path(config, "autoencoder", AUTOENCODER_FILE))
        result = edit(clip, manipulation, (start, stop), ae, config.editor)
    elif method == "ik":
        result = ik_edit(clip, manipulation, (start, stop), config.editor)
    else:
        raise ConfigError(f"unknown edit method '{method}'")

    out = output_dir(config)
    path = out / f"{result.motion.name}.json"
    result.motion.save_json(path)
    save_bvh(result.motion, path.with_suffix(".bvh"), config.database.bvh_unit_scale)
    return result, path


# ---------------------------------------------------------------- evaluation

def evaluate(config: RunConfig, motion_path: Union[str, Path]) -> EvalReport:
    clip = load_motion(motion_path, config)
    report = evaluate_motion(clip, get_scene(config), config.scene, config.database.contacts)
    out = output_dir(config)
    write_json(report, out / f"{clip.name}_eval.json")
    write_eval_csv(report, out / f"{clip.name}_eval.csv")
    return report


class PolicyTrial:
    """One sweep trial: a rollout of a fixed policy from a given start toward a given cue"""

    def __init__(self, env: Environment, bundle: PolicyBundle, greedy: bool = True, keep_motion: bool = True):
        self.env = env
        self.bundle = bundle
        self.greedy = greedy
        self.keep_motion = keep_motion

    def __call__(self, initial: InitialState, cue: ActionCue, rng: np.random.Generator) -> TrialOutcome:
        self.env.sampler = None
        self.env.initial, self.env.cue = initial, cue
        started = time.perf_counter()
        trajectory = run_episode(self.bundle, self.env, rng, greedy=self.greedy, keep_motion=self.keep_motion)
        early = trajectory.terminated and not trajectory.success
        return TrialOutcome(trajectory.success, early, trajectory.motion, time.perf_counter() - started)


def sweep(config: RunConfig, targets: Optional[Sequence[ActionCue]] = None) -> SweepReport:
    db = get_database(config)
    scene = get_scene(config)
    cues = read_cues(config)
    targets = list(targets) if targets else (cues.targets or ([cues.action] if cues.action else []))
    if not targets:
        raise ConfigError("a sweep needs at least one target cue")
    env = Environment(db, scene, config)
    bundle = load_policy(config, env)
    positions = sweep_positions(env.grid, config.metrics.sweep_cell, _bounds_xz(scene))
    logger.info(f"Sweeping {len(positions)} start cells x {len(targets)} targets x {config.metrics.trials} trials")
    report = robustness_sweep(PolicyTrial(env, bundle), positions, targets, config.metrics, config.seed,
                              resolve_workers(config), scene=scene, scene_config=config.scene)

    out = output_dir(config)
    write_json(report, out / "sweep.json")
    write_sweep_csv(report, out / "sweep.csv")
    if config.plot:
        for t in range(len(targets)):
            plot_sweep_heatmap(report, out / f"sweep_target{t}.png", target=t)
    return report


# ---------------------------------------------------------------- export

def export(config: RunConfig, motion_path: Union[str, Path], destination: Optional[Union[str, Path]] = None,
           frame_rate: float = 30.0) -> Tuple[Path, int]:
    """Write a motion as BVH at `frame_rate`; returns the path and the written frame count"""
    clip = resample(load_motion(motion_path, config), frame_rate)
    destination = Path(destination) if destination else output_dir(config) / f"{clip.name}.bvh"
    return save_bvh(clip, destination, config.database.bvh_unit_scale), len(clip)
