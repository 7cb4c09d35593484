"""
Motion quality metrics, the robustness sweep over grid-sampled starts, the
collision-reward ablation and report writers.
"""

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.core.controller import Trajectory  # noqa: E402
from app.core.errors import ConfigError  # noqa: E402
from app.core.motion import MotionClip  # noqa: E402
from app.core.scene import OccupancyGrid, SceneWorld, penetration_metric  # noqa: E402
from app.models.base import ContactConfig, MetricsConfig, SceneConfig  # noqa: E402
from app.models.cues import ActionCue, InitialState  # noqa: E402
from app.models.reports import (  # noqa: E402
    AblationReport, AblationRun, ContactResult, EvalReport, SweepCell, SweepReport, SweepTarget,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- motion metrics

def contact_metric(clip: MotionClip, contact_config: ContactConfig = None) -> ContactResult:
    """
    Foot skating in cm: XZ displacement of each foot between consecutive
    frames that are both labelled as contact, averaged over those frame
    pairs. The all-frames variant divides the same total by every frame step.
    """
    if len(clip) < 2:
        raise ConfigError(f"contact metric needs at least two frames, motion '{clip.name}' has {len(clip)}")
    if clip.contacts is None:
        clip = clip.with_contacts(contact_config)
    feet = clip.positions()[:, list(clip.skeleton.feet)][..., [0, 2]]  # (T, 2, 2)
    step = np.linalg.norm(np.diff(feet, axis=0), axis=-1)  # (T-1, 2)
    planted = (clip.contacts[1:] >= 1.0) & (clip.contacts[:-1] >= 1.0)
    count = int(planted.sum())
    if count == 0:
        logger.warning(f"Motion '{clip.name}' has no contact frames; contact metric reported as 0")
        return ContactResult(contact_cm=0.0, all_frames_cm=0.0, contact_frames=0, no_contact=True)
    total = float(step[planted].sum())
    return ContactResult(
        contact_cm=100.0 * total / count,
        all_frames_cm=100.0 * total / (len(clip) - 1),
        contact_frames=count,
    )


def evaluate_motion(clip: MotionClip, scene: SceneWorld, scene_config: SceneConfig = None,
                    contact_config: ContactConfig = None, trajectories: Sequence[Trajectory] = ()) -> EvalReport:
    scene_config = scene_config or SceneConfig()
    contact = contact_metric(clip, contact_config)
    penetration = penetration_metric(clip, scene, scene_config.leg_threshold, scene_config.arm_threshold,
                                     scene_config.point_tolerance)
    terms: Dict[str, List[float]] = {}
    for traj in trajectories:
        for step_terms in traj.terms:
            for key, value in step_terms.items():
                terms.setdefault(key, []).append(value)
    return EvalReport(
        motion=clip.name,
        frames=len(clip),
        contact_cm=contact.contact_cm,
        contact_all_frames_cm=contact.all_frames_cm,
        contact_warning=contact.no_contact,
        penetration_percent=penetration,
        successes=[t.success for t in trajectories],
        episode_lengths=[len(t) for t in trajectories],
        termination_reasons=[t.reason for t in trajectories],
        reward_terms={k: float(np.mean(v)) for k, v in sorted(terms.items())},
    )


# ---------------------------------------------------------------- robustness sweep

@dataclass
class TrialOutcome:
    success: bool
    early: bool = False
    motion: Optional[MotionClip] = None
    seconds: float = 0.0


TrialFn = Callable[[InitialState, ActionCue, np.random.Generator], TrialOutcome]


def sweep_positions(grid: OccupancyGrid, step: float, bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None
                    ) -> List[Tuple[Tuple[int, int], np.ndarray]]:
    """Lattice points at `step` spacing over the grid (or bounds) whose occupancy cell is free"""
    lo = grid.origin
    hi = grid.origin + np.array(grid.bits.shape, dtype=np.float64) * grid.cell
    if bounds is not None:
        lo = np.maximum(lo, np.asarray(bounds[0], dtype=np.float64))
        hi = np.minimum(hi, np.asarray(bounds[1], dtype=np.float64))
    xs = np.arange(lo[0] + step / 2, hi[0], step)
    zs = np.arange(lo[1] + step / 2, hi[1], step)
    out = []
    for i, x in enumerate(xs):
        for k, z in enumerate(zs):
            xz = np.array([x, z])
            if not grid.occupied(xz):
                out.append(((i, k), xz))
    return out


_sweep_trial: Optional[TrialFn] = None


def _init_sweep_worker(trial: TrialFn):
    global _sweep_trial
    _sweep_trial = trial


def _run_task(trial: TrialFn, task) -> TrialOutcome:
    initial, cue, seed = task
    rng = np.random.default_rng(np.random.SeedSequence(list(seed)))
    started = time.perf_counter()
    outcome = trial(initial, cue, rng)
    if not outcome.seconds:
        outcome.seconds = time.perf_counter() - started
    return outcome


def _run_task_in_worker(task) -> TrialOutcome:
    return _run_task(_sweep_trial, task)


def robustness_sweep(trial: TrialFn, positions: Sequence[Tuple[Tuple[int, int], np.ndarray]],
                     targets: Sequence[ActionCue], config: MetricsConfig = None, seed: int = 0,
                     workers: int = 1, height: float = 0.0, scene: Optional[SceneWorld] = None,
                     scene_config: SceneConfig = None) -> SweepReport:
    """
    Run `config.trials` trials per (target, start cell), each with its own
    random facing. A cell succeeds when at least `config.min_success` trials
    fulfil the cue without early termination. Outcomes are reduced in task
    order, so the report depends only on the seed.
    """
    config = config or MetricsConfig()
    tasks, keys = [], []
    for t, cue in enumerate(targets):
        for c, (cell, xz) in enumerate(positions):
            for k in range(config.trials):
                yaw_rng = np.random.default_rng(np.random.SeedSequence([seed, t, c, k, 0]))
                initial = InitialState(position=[float(xz[0]), height, float(xz[1])],
                                       yaw=float(yaw_rng.uniform(-math.pi, math.pi)))
                tasks.append((initial, cue, (seed, t, c, k, 1)))
                keys.append((t, c))

    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_sweep_worker, initargs=(trial,)) as pool:
            outcomes = list(pool.map(_run_task_in_worker, tasks))
    else:
        outcomes = [_run_task(trial, task) for task in tasks]

    fulfilled: Dict[Tuple[int, int], int] = {}
    for key, outcome in zip(keys, outcomes):
        fulfilled[key] = fulfilled.get(key, 0) + int(outcome.success and not outcome.early)

    cells, summaries = [], []
    for t, cue in enumerate(targets):
        good = 0
        for c, (cell, xz) in enumerate(positions):
            count = fulfilled.get((t, c), 0)
            success = count >= config.min_success
            good += success
            cells.append(SweepCell(target=t, cell=tuple(cell), position=(float(xz[0]), float(xz[1])),
                                   successes=count, trials=config.trials, success=success))
        ratio = good / len(positions) if positions else 0.0
        summaries.append(SweepTarget(target=t, cue=cue, cells=len(positions), successful_cells=good, ratio=ratio))
        logger.info(f"Sweep target {t}: {good}/{len(positions)} cells succeed")

    report = SweepReport(
        cells=cells, targets=summaries, trials=config.trials, min_success=config.min_success,
        ratio=float(np.mean([s.ratio for s in summaries])) if summaries else 0.0,
        seconds_per_trial=float(np.mean([o.seconds for o in outcomes])) if outcomes else None,
    )
    motions = [o.motion for o in outcomes if o.motion is not None and len(o.motion) >= 2]
    if motions:
        scene_config = scene_config or SceneConfig()
        report.contact_cm = float(np.mean([contact_metric(m).contact_cm for m in motions]))
        if scene is not None:
            report.penetration_percent = float(np.mean([
                penetration_metric(m, scene, scene_config.leg_threshold, scene_config.arm_threshold,
                                   scene_config.point_tolerance)
                for m in motions
            ]))
    return report


def collision_ablation(run: Callable[[bool, int], float], seeds: Sequence[int]) -> AblationReport:
    """
    `run(use_collision, seed)` optimizes a policy and returns the penetration
    percentage of its greedy rollout; both settings run for every seed.
    """
    runs = []
    for seed in seeds:
        with_c = run(True, seed)
        without_c = run(False, seed)
        runs.append(AblationRun(seed=seed, with_collision=with_c, without_collision=without_c))
        logger.info(f"Ablation seed {seed}: penetration {with_c:.2f}% with collision reward, {without_c:.2f}% without")
    mean_with = float(np.mean([r.with_collision for r in runs])) if runs else 0.0
    mean_without = float(np.mean([r.without_collision for r in runs])) if runs else 0.0
    ratio = mean_without / mean_with if mean_with > 0 else None
    return AblationReport(runs=runs, mean_with_collision=mean_with, mean_without_collision=mean_without, ratio=ratio)


# ---------------------------------------------------------------- reports

def write_json(report, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2))
    logger.info(f"Wrote {path}")
    return path


def write_sweep_csv(report: SweepReport, path: Union[str, Path]) -> Path:
    """One row per (target, cell): target, i, k, x, z, successes, trials, success"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["target", "i", "k", "x", "z", "successes", "trials", "success"])
        for cell in report.cells:
            writer.writerow([cell.target, cell.cell[0], cell.cell[1], f"{cell.position[0]:.4f}",
                             f"{cell.position[1]:.4f}", cell.successes, cell.trials, int(cell.success)])
    return path


def write_eval_csv(report: EvalReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    row = report.model_dump(exclude={"successes", "episode_lengths", "termination_reasons", "reward_terms"})
    row.update({f"reward_{k}": v for k, v in report.reward_terms.items()})
    with path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)
    return path


def plot_sweep_heatmap(report: SweepReport, path: Union[str, Path], target: Optional[int] = None) -> Path:
    """Success fraction per start cell; cells never sampled stay blank"""
    cells = [c for c in report.cells if target is None or c.target == target]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if cells:
        ni = max(c.cell[0] for c in cells) + 1
        nk = max(c.cell[1] for c in cells) + 1
        total = np.zeros((nk, ni))
        count = np.zeros((nk, ni))
        for c in cells:
            total[c.cell[1], c.cell[0]] += float(c.success)
            count[c.cell[1], c.cell[0]] += 1
        grid = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    else:
        grid = np.full((1, 1), np.nan)

    fig, ax = plt.subplots(figsize=(5, 4))
    image = ax.imshow(grid, origin="lower", cmap="viridis", vmin=0.0, vmax=1.0, interpolation="nearest")
    fig.colorbar(image, ax=ax, label="success fraction")
    ax.set_xlabel("x cell")
    ax.set_ylabel("z cell")
    ax.set_title(f"robustness {report.ratio:.1%}")
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Wrote heatmap {path}")
    return path
