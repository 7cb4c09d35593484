"""
Policy bundle and clipped-surrogate policy optimization with generalized
advantage estimation. Rollouts run inline or in a process pool; every
(iteration, worker) pair gets its own seed and results are gathered in
worker order.
"""

import copy
import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core import checkpoint
from app.core import numerics as nx
from app.core.controller import Decision, Trajectory, run_episode
from app.core.errors import ConfigError, NumericalError, ParseError
from app.core.nn import MLP
from app.core.scene import OccupancyGrid
from app.models.base import PPOConfig
from app.models.cues import ActionCue, InitialState

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------- observation normalization

@dataclass
class RunningNorm:
    mean: np.ndarray
    var: np.ndarray
    count: float = 0.0
    clip: float = 10.0

    @classmethod
    def create(cls, dim: int, clip: float = 10.0) -> "RunningNorm":
        return cls(np.zeros(dim), np.ones(dim), 0.0, clip)

    def update(self, batch: np.ndarray):
        batch = np.asarray(batch, dtype=np.float64).reshape(-1, len(self.mean))
        n = len(batch)
        if n == 0:
            return
        b_mean, b_var = batch.mean(axis=0), batch.var(axis=0)
        total = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * n + delta ** 2 * self.count * n / total
        self.mean = self.mean + delta * n / total
        self.var = m2 / total
        self.count = total

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        z = (np.asarray(obs, dtype=np.float64) - self.mean) / np.sqrt(self.var + 1e-8)
        return np.clip(z, -self.clip, self.clip)


# ---------------------------------------------------------------- policy bundle

@dataclass
class PolicyBundle:
    obs_dim: int
    type_count: int
    continuous: int
    policy_net: MLP
    value_net: MLP
    params: Dict[str, np.ndarray]
    norm: RunningNorm
    policy_opt: nx.AdamState
    value_opt: nx.AdamState
    meta: Dict = field(default_factory=dict)

    @classmethod
    def create(cls, obs_dim: int, type_count: int, continuous: int, config: PPOConfig,
               rng: np.random.Generator, meta: Dict = None) -> "PolicyBundle":
        policy_net = MLP("policy", [obs_dim] + list(config.policy_hidden) + [type_count + continuous], "tanh")
        value_net = MLP("value", [obs_dim] + list(config.value_hidden) + [1], "relu")
        params = {}
        params.update(policy_net.init(rng, output_scale=0.01))
        params.update(value_net.init(rng))
        params["policy.log_std"] = np.full(continuous, config.log_std_init)
        return cls(
            obs_dim=obs_dim, type_count=type_count, continuous=continuous,
            policy_net=policy_net, value_net=value_net, params=params,
            norm=RunningNorm.create(obs_dim, config.obs_clip),
            policy_opt=nx.AdamState(lr=config.policy_lr),
            value_opt=nx.AdamState(lr=config.value_lr),
            meta=dict(meta or {}),
        )

    def policy_params(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith("policy.")}

    def value_params(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith("value.")}

    def heads(self, obs_norm: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        with nx.no_grad():
            out = self.policy_net(self.params, obs_norm).data
        return out[..., :self.type_count], out[..., self.type_count:]

    def value(self, obs: np.ndarray) -> float:
        with nx.no_grad():
            return float(self.value_net(self.params, self.norm(obs)).data.reshape(-1)[0])

    def act(self, obs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> Decision:
        z = self.norm(obs)
        logits, mean = self.heads(z)
        logits = logits - logits.max()
        probs = np.exp(logits) / np.exp(logits).sum()
        log_std = self.params["policy.log_std"]
        if greedy:
            type_index = int(np.argmax(probs))
            u = mean.copy()
        else:
            type_index = int(rng.choice(self.type_count, p=probs))
            u = mean + np.exp(log_std) * rng.standard_normal(self.continuous)
        logp = math.log(max(probs[type_index], 1e-300)) + gaussian_logp(u, mean, log_std)
        with nx.no_grad():
            value = float(self.value_net(self.params, z).data.reshape(-1)[0])
        return Decision(type_index, u, logp, value, probs)

    def copy(self) -> "PolicyBundle":
        return copy.deepcopy(self)

    # checkpoint I/O
    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"param.{k}": v for k, v in self.params.items()}
        arrays["norm.mean"] = self.norm.mean
        arrays["norm.var"] = self.norm.var
        for tag, state in (("policy", self.policy_opt), ("value", self.value_opt)):
            for k, v in state.m.items():
                arrays[f"adam.{tag}.m.{k}"] = v
            for k, v in state.v.items():
                arrays[f"adam.{tag}.v.{k}"] = v
        return arrays

    def save(self, path: Union[str, Path]) -> Path:
        meta = {
            "kind": "policy_bundle",
            "obs_dim": self.obs_dim,
            "type_count": self.type_count,
            "continuous": self.continuous,
            "policy_sizes": list(self.policy_net.sizes),
            "value_sizes": list(self.value_net.sizes),
            "norm_count": self.norm.count,
            "norm_clip": self.norm.clip,
            "adam": {
                tag: {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "step": s.step}
                for tag, s in (("policy", self.policy_opt), ("value", self.value_opt))
            },
            "extra": self.meta,
        }
        return checkpoint.save(path, self.to_arrays(), meta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PolicyBundle":
        arrays, meta = checkpoint.load(path)
        if meta.get("kind") != "policy_bundle":
            raise ParseError(f"{path} is not a policy checkpoint")
        params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
        states = {}
        for tag in ("policy", "value"):
            info = meta["adam"][tag]
            state = nx.AdamState(lr=info["lr"], beta1=info["beta1"], beta2=info["beta2"], eps=info["eps"], step=info["step"])
            state.m = {k[len(f"adam.{tag}.m."):]: v for k, v in arrays.items() if k.startswith(f"adam.{tag}.m.")}
            state.v = {k[len(f"adam.{tag}.v."):]: v for k, v in arrays.items() if k.startswith(f"adam.{tag}.v.")}
            states[tag] = state
        bundle = cls(
            obs_dim=meta["obs_dim"], type_count=meta["type_count"], continuous=meta["continuous"],
            policy_net=MLP("policy", meta["policy_sizes"], "tanh"),
            value_net=MLP("value", meta["value_sizes"], "relu"),
            params=params,
            norm=RunningNorm(arrays["norm.mean"], arrays["norm.var"], meta["norm_count"], meta["norm_clip"]),
            policy_opt=states["policy"], value_opt=states["value"], meta=meta.get("extra", {}),
        )
        if not np.all(np.isfinite(bundle.params["policy.log_std"])):
            raise ParseError("policy checkpoint has a non-finite log-std")
        logger.info(f"Loaded policy bundle from {path}")
        return bundle


def gaussian_logp(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> float:
    z = (np.asarray(u) - mean) * np.exp(-log_std)
    return float(-0.5 * np.sum(z * z) - np.sum(log_std) - 0.5 * len(log_std) * LOG_2PI)


# ---------------------------------------------------------------- advantages

def compute_gae(rewards: Sequence[float], values: Sequence[float], bootstrap: float,
                gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generalized advantage estimates and value targets for one episode.
    `bootstrap` is V(s_T) for a truncated episode and 0 for a terminated one.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    next_values = np.append(values[1:], bootstrap)
    deltas = rewards + gamma * next_values - values
    advantages = np.zeros_like(deltas)
    running = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        running = deltas[t] + gamma * lam * running
        advantages[t] = running
    return advantages, advantages + values


@dataclass
class Batch:
    obs: np.ndarray
    types: np.ndarray
    actions: np.ndarray
    logps: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.types)


def build_batch(trajectories: Sequence[Trajectory], config: PPOConfig) -> Batch:
    obs, types, actions, logps, advs, rets = [], [], [], [], [], []
    for traj in trajectories:
        if len(traj) == 0:
            continue
        bootstrap = traj.bootstrap if traj.truncated else 0.0
        adv, ret = compute_gae(traj.rewards, traj.values, bootstrap, config.gamma, config.lam)
        obs.extend(traj.obs)
        types.extend(traj.types)
        actions.extend(traj.actions)
        logps.extend(traj.logps)
        advs.append(adv)
        rets.append(ret)
    return Batch(
        obs=np.asarray(obs, dtype=np.float64), types=np.asarray(types, dtype=np.int64),
        actions=np.asarray(actions, dtype=np.float64), logps=np.asarray(logps, dtype=np.float64),
        advantages=np.concatenate(advs), returns=np.concatenate(rets),
    )


# ---------------------------------------------------------------- update

def _policy_loss(bundle: PolicyBundle, tensors: Dict[str, nx.Tensor], z: np.ndarray, types: np.ndarray,
                 actions: np.ndarray, old_logps: np.ndarray, advantages: np.ndarray, config: PPOConfig):
    out = bundle.policy_net(tensors, z)
    k = bundle.type_count
    logits = nx.getitem(out, (slice(None), slice(0, k)))
    mean = nx.getitem(out, (slice(None), slice(k, None)))
    log_std = tensors["policy.log_std"]

    one_hot = np.eye(k)[types]
    log_probs = nx.log_softmax(logits, axis=1)
    logp_type = nx.tsum(nx.mul(log_probs, one_hot), axis=1)
    scaled = nx.mul(nx.sub(actions, mean), nx.exp(nx.neg(log_std)))
    logp_cont = nx.sub(nx.mul(nx.tsum(nx.power(scaled, 2.0), axis=1), -0.5),
                       nx.add(nx.tsum(log_std), 0.5 * bundle.continuous * LOG_2PI))
    logp = nx.add(logp_type, logp_cont)

    ratio = nx.exp(nx.sub(logp, old_logps))
    r = ratio.data
    unclipped = r * advantages
    clipped = np.clip(r, 1.0 - config.clip, 1.0 + config.clip) * advantages
    take = unclipped <= clipped
    surrogate = nx.add(nx.mul(ratio, advantages * take), np.where(take, 0.0, clipped))
    loss = nx.neg(nx.mean(surrogate))
    if config.entropy_coef > 0:
        probs = nx.exp(log_probs)
        cat_entropy = nx.neg(nx.mean(nx.tsum(nx.mul(probs, log_probs), axis=1)))
        gauss_entropy = nx.add(nx.tsum(log_std), 0.5 * bundle.continuous * (1.0 + LOG_2PI))
        loss = nx.sub(loss, nx.mul(nx.add(cat_entropy, gauss_entropy), config.entropy_coef))
    clip_fraction = float(np.mean(~take))
    return loss, clip_fraction


def _apply(bundle: PolicyBundle, loss: nx.Tensor, tensors: Dict[str, nx.Tensor], state: nx.AdamState, what: str) -> bool:
    if not np.isfinite(loss.item()):
        logger.warning(f"Skipping {what} update: non-finite loss")
        return False
    nx.backward(loss)
    grads = nx.collect_grads(tensors)
    try:
        nx.adam_step(bundle.params, grads, state)
    except NumericalError as exc:
        logger.warning(f"Skipping {what} update: {exc}")
        return False
    return True


def ppo_update(bundle: PolicyBundle, batch: Batch, config: PPOConfig, rng: np.random.Generator,
               norm: Optional[RunningNorm] = None) -> Dict[str, float]:
    """
    Clipped-surrogate epochs over shuffled minibatches. Observations are
    normalized with `norm`, the statistics the batch was collected under.
    """
    norm = norm or bundle.norm
    z_all = norm(batch.obs)
    adv = batch.advantages
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    policy_losses, value_losses, clip_fractions = [], [], []
    skipped = 0
    n = len(batch)
    for _ in range(config.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            rows = order[start:start + config.minibatch]
            z = z_all[rows]

            tensors = nx.leaves(bundle.policy_params())
            loss, clip_fraction = _policy_loss(bundle, tensors, z, batch.types[rows], batch.actions[rows],
                                               batch.logps[rows], adv[rows], config)
            if _apply(bundle, loss, tensors, bundle.policy_opt, "policy"):
                policy_losses.append(loss.item())
                clip_fractions.append(clip_fraction)
            else:
                skipped += 1

            tensors = nx.leaves(bundle.value_params())
            predicted = bundle.value_net(tensors, z)
            v_loss = nx.mse(predicted, batch.returns[rows][:, None])
            if _apply(bundle, v_loss, tensors, bundle.value_opt, "value"):
                value_losses.append(v_loss.item())
            else:
                skipped += 1
    return {
        "policy_loss": float(np.mean(policy_losses)) if policy_losses else float("nan"),
        "value_loss": float(np.mean(value_losses)) if value_losses else float("nan"),
        "clip_fraction": float(np.mean(clip_fractions)) if clip_fractions else 0.0,
        "skipped": skipped,
    }


# ---------------------------------------------------------------- rollout collection

_worker_env = None


def _init_worker(env):
    global _worker_env
    _worker_env = env


def collect(bundle: PolicyBundle, env, quota: int, rng: np.random.Generator,
            max_frames: Optional[int] = None) -> List[Trajectory]:
    """Run episodes until `quota` transitions exist; the last episode is cut at the quota and bootstrapped"""
    trajectories = []
    count = 0
    while count < quota:
        limit = quota - count
        if max_frames is not None:
            limit = min(limit, max_frames)
        traj = run_episode(bundle, env, rng, max_frames=limit, value_fn=bundle.value)
        if len(traj) == 0:
            break
        trajectories.append(traj)
        count += len(traj)
    return trajectories


def _collect_in_worker(bundle: PolicyBundle, quota: int, seed: Sequence[int], max_frames: Optional[int]):
    return collect(bundle, _worker_env, quota, np.random.default_rng(np.random.SeedSequence(list(seed))), max_frames)


class RolloutPool:
    """Inline collection for one worker, a process pool otherwise. Results come back in worker order."""

    def __init__(self, env, workers: int = 1):
        self.env = env
        self.workers = max(1, int(workers))
        self._executor: Optional[ProcessPoolExecutor] = None

    def __enter__(self):
        if self.workers > 1:
            self._executor = ProcessPoolExecutor(max_workers=self.workers, initializer=_init_worker, initargs=(self.env,))
        return self

    def __exit__(self, *exc):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def collect(self, bundle: PolicyBundle, tuples: int, seed: int, iteration: int,
                max_frames: Optional[int] = None) -> List[Trajectory]:
        quota = math.ceil(tuples / self.workers)
        seeds = [(seed, iteration, w) for w in range(self.workers)]
        if self._executor is None:
            out = []
            for s in seeds:
                out.extend(collect(bundle, self.env, quota, np.random.default_rng(np.random.SeedSequence(list(s))), max_frames))
            return out
        futures = [self._executor.submit(_collect_in_worker, bundle, quota, s, max_frames) for s in seeds]
        out = []
        for future in futures:
            out.extend(future.result())
        return out


# ---------------------------------------------------------------- optimization

TERM_KEYS = ("r_coli", "r_pos", "r_vel", "R_tr", "r_inter", "R_act", "R_reg")
WALL_CLOCK_KEYS = ("seconds",)


def summarize(iteration: int, trajectories: Sequence[Trajectory], stats: Dict[str, float], seconds: float) -> Dict[str, float]:
    complete = [t for t in trajectories if len(t)]
    row = {
        "iteration": iteration,
        "average_return": float(np.mean([t.episode_return for t in complete])) if complete else 0.0,
        "episode_length": float(np.mean([len(t) for t in complete])) if complete else 0.0,
        "success_rate": float(np.mean([t.success for t in complete])) if complete else 0.0,
        "episodes": len(complete),
        "seconds": seconds,
    }
    terms = [term for t in complete for term in t.terms]
    for key in TERM_KEYS:
        values = [term[key] for term in terms if key in term]
        row[key] = float(np.mean(values)) if values else float("nan")
    row.update(stats)
    return row


def ppo_optimize(bundle: PolicyBundle, env, config: PPOConfig, iterations: Optional[int] = None,
                 seed: int = 0, workers: int = 1, max_frames: Optional[int] = None,
                 callback: Optional[Callable[[Dict[str, float]], None]] = None) -> Tuple[PolicyBundle, List[Dict[str, float]]]:
    """
    Optimize `bundle` in place against `env`. Returns the snapshot with the
    best average return over all iterations and the training log rows.
    """
    iterations = iterations if iterations is not None else config.iterations
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2 ** 31 - 1]))
    log: List[Dict[str, float]] = []
    best: Optional[PolicyBundle] = None
    best_return = -math.inf

    with RolloutPool(env, workers) as pool:
        for iteration in range(iterations):
            started = time.perf_counter()
            snapshot = bundle.copy()
            trajectories = pool.collect(snapshot, config.tuples_per_update, seed, iteration, max_frames)
            batch = build_batch(trajectories, config)
            stats = ppo_update(bundle, batch, config, rng, norm=snapshot.norm)
            bundle.norm.update(batch.obs)

            row = summarize(iteration, trajectories, stats, time.perf_counter() - started)
            log.append(row)
            if row["average_return"] > best_return:
                best_return = row["average_return"]
                best = snapshot
            logger.info(
                f"iteration {iteration}: return {row['average_return']:.3f}, length {row['episode_length']:.1f}, "
                f"success {row['success_rate']:.2f}, {row['seconds']:.1f}s"
            )
            if callback is not None:
                callback(row)

    if best is None:
        best = bundle.copy()
    best.meta["best_average_return"] = best_return
    return best, log


# ---------------------------------------------------------------- generalization

class GridSampler:
    """
    Uniform initial positions over the free cells of an occupancy grid with a
    random facing, and a cue drawn from a target list.
    """

    def __init__(self, grid: OccupancyGrid, targets: Sequence[ActionCue], bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                 max_resample: int = 100, height: float = 0.0):
        if not targets:
            raise ConfigError("generalized optimization needs at least one target cue")
        self.grid = grid
        self.targets = list(targets)
        self.max_resample = max_resample
        self.height = height
        lo = grid.origin
        hi = grid.origin + np.array(grid.bits.shape, dtype=np.float64) * grid.cell
        if bounds is not None:
            lo = np.maximum(lo, np.asarray(bounds[0], dtype=np.float64))
            hi = np.minimum(hi, np.asarray(bounds[1], dtype=np.float64))
        self.lo, self.hi = lo, hi

    def sample_position(self, rng: np.random.Generator) -> np.ndarray:
        for attempt in range(self.max_resample):
            xz = rng.uniform(self.lo, self.hi)
            if not self.grid.occupied(xz):
                return np.array([xz[0], self.height, xz[1]])
            logger.debug(f"Rejected occupied initial position {xz} (attempt {attempt + 1})")
        raise ConfigError(f"no free initial position after {self.max_resample} draws")

    def sample(self, rng: np.random.Generator) -> Tuple[InitialState, ActionCue]:
        position = self.sample_position(rng)
        yaw = float(rng.uniform(-math.pi, math.pi))
        cue = self.targets[int(rng.integers(len(self.targets)))]
        return InitialState(position=position.tolist(), yaw=yaw), cue


def optimize_generalized(bundle: PolicyBundle, env, sampler, config: PPOConfig, **kwargs):
    """ppo_optimize with the start state and cue resampled from `sampler` every episode"""
    env.sampler = sampler
    return ppo_optimize(bundle, env, config, **kwargs)


def bundle_for(env, config: PPOConfig, seed: int = 0, meta: Dict = None) -> PolicyBundle:
    return PolicyBundle.create(env.observation_dim, env.type_count, env.continuous_dim, config,
                               np.random.default_rng(seed), meta)


def warm_start(path: Union[str, Path], env) -> PolicyBundle:
    """Load a stored bundle for fine-tuning; its dimensions must match the environment"""
    bundle = PolicyBundle.load(path)
    expected = (env.observation_dim, env.type_count, env.continuous_dim)
    found = (bundle.obs_dim, bundle.type_count, bundle.continuous)
    if expected != found:
        raise ConfigError(f"policy {path} has dims {found}, environment needs {expected}")
    return bundle


def write_training_log(rows: Sequence[Dict[str, float]], path: Union[str, Path]) -> Path:
    """CSV of per-iteration summaries; wall-clock columns are left out so equal seeds give equal files"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = [k for k in dict.fromkeys(k for row in rows for k in row) if k not in WALL_CLOCK_KEYS] or ["iteration"]
    with path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    logger.info(f"Wrote training log ({len(rows)} rows) to {path}")
    return path
