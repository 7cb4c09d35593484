"""
Motion manifold editing.

Motion segments are packed into fixed-length windows (6D joint rotations,
root height, per-frame root deltas in the previous heading frame, foot
contacts), compressed by a temporal convolutional autoencoder, and edited by
optimizing the latent code so that decoded joints follow a manipulation cue.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from app.core import checkpoint
from app.core import numerics as nx
from app.core import rotations as rot
from app.core.errors import ConfigError, CueError, NumericalError, ParseError
from app.core.motion import MotionClip
from app.core.nn import Conv1d, ConvTranspose1d, length_schedule, parameter_count
from app.core.skeleton import Skeleton
from app.models.base import ContactConfig, EditorConfig
from app.models.cues import ArticulationSpec, ManipulationCue, Waypoint

logger = logging.getLogger(__name__)

CONTACT_CHANNELS = 2
IK_SMOOTHNESS = 1.0
IK_ANCHOR = 0.1
MIN_EDIT_LR = 1e-10


# ---------------------------------------------------------------- window representation

@dataclass(frozen=True)
class ChannelLayout:
    joints: int

    @property
    def rotations(self) -> slice:
        return slice(0, 6 * self.joints)

    @property
    def height(self) -> int:
        return 6 * self.joints

    @property
    def root(self) -> slice:
        """height, dx, dz, dyaw"""
        return slice(6 * self.joints, 6 * self.joints + 4)

    @property
    def contacts(self) -> slice:
        start = 6 * self.joints + 4
        return slice(start, start + CONTACT_CHANNELS)

    @property
    def count(self) -> int:
        return 6 * self.joints + 4 + CONTACT_CHANNELS


@dataclass
class MotionWindow:
    data: np.ndarray  # (window, C); frames past `length` are zero
    mask: np.ndarray  # (window,)
    start_xz: np.ndarray
    start_yaw: float
    length: int

    @property
    def window(self) -> int:
        return self.data.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.data[:self.length]


def window_encode_motion(clip: MotionClip, window: int = 120) -> MotionWindow:
    """Pack a clip of at most `window` frames; shorter clips are zero-padded and masked"""
    length = len(clip)
    if length == 0 or length > window:
        raise ConfigError(f"segment of {length} frames does not fit a {window}-frame window")
    layout = ChannelLayout(len(clip.skeleton))
    R_root = rot.axis_angle_to_matrix(clip.rotations[:, 0])
    yaw = rot.heading_of(R_root)
    local = rot.axis_angle_to_matrix(clip.rotations)
    local[:, 0] = rot.yaw_matrix(-yaw) @ R_root

    xz = clip.root_pos[:, [0, 2]]
    d_world = np.diff(xz, axis=0, prepend=xz[:1])
    prev_yaw = np.concatenate([yaw[:1], yaw[:-1]])
    d_local = rot.rotate_xz(d_world, -prev_yaw)
    d_yaw = rot.wrap_angle(np.diff(yaw, prepend=yaw[:1]))

    data = np.zeros((window, layout.count))
    data[:length, layout.rotations] = rot.matrix_to_rot6d(local).reshape(length, -1)
    data[:length, layout.height] = clip.root_pos[:, 1]
    data[:length, layout.height + 1] = d_local[:, 0]
    data[:length, layout.height + 2] = d_local[:, 1]
    data[:length, layout.height + 3] = d_yaw
    if clip.contacts is not None:
        data[:length, layout.contacts] = clip.contacts
    mask = np.zeros(window)
    mask[:length] = 1.0
    return MotionWindow(data, mask, xz[0].copy(), float(yaw[0]), length)


def _yaw_matrix_t(yaw: nx.Tensor) -> nx.Tensor:
    c, s = nx.cos(yaw), nx.sin(yaw)
    zero, one = np.zeros(yaw.shape), np.ones(yaw.shape)
    return nx.stack([
        nx.stack([c, zero, s], axis=-1),
        nx.stack([zero, one, zero], axis=-1),
        nx.stack([nx.neg(s), zero, c], axis=-1),
    ], axis=-2)


def forward_kinematics_t(root_pos: nx.Tensor, root_R: nx.Tensor, local_R: nx.Tensor, skeleton: Skeleton) -> nx.Tensor:
    """Differentiable FK: (..., 3), (..., 3, 3), (..., J, 3, 3) -> (..., J, 3)"""
    globals_ = [root_R]
    positions = [nx.as_tensor(root_pos)]
    for j in range(1, len(skeleton)):
        p = skeleton.parents[j]
        parent_R = globals_[p]
        positions.append(positions[p] + nx.matmul(parent_R, skeleton.offsets[j]))
        globals_.append(nx.matmul(parent_R, local_R[..., j, :, :]))
    return nx.stack(positions, axis=-2)


def decode_channels_t(x, skeleton: Skeleton, start_xz: np.ndarray, start_yaw: np.ndarray) -> Tuple[nx.Tensor, nx.Tensor]:
    """
    Joint positions (B, L, J, 3) and root XZ (B, L, 2) from raw window
    channels (B, L, C); the root path is reintegrated from per-frame deltas.
    """
    x = nx.as_tensor(x)
    batch, length, _ = x.shape
    layout = ChannelLayout(len(skeleton))
    h = layout.height
    six = nx.reshape(x[..., layout.rotations], (batch, length, layout.joints, 6))
    local = rot.rot6d_to_matrix_t(six)

    d_yaw = x[..., h + 3]
    yaw = nx.add(nx.cumsum(d_yaw, axis=1), np.asarray(start_yaw, dtype=np.float64).reshape(batch, 1))
    prev = nx.sub(yaw, d_yaw)
    c, s = nx.cos(prev), nx.sin(prev)
    dx, dz = x[..., h + 1], x[..., h + 2]
    wx = c * dx + s * dz
    wz = nx.neg(s) * dx + c * dz
    start_xz = np.asarray(start_xz, dtype=np.float64).reshape(batch, 2)
    root_x = nx.add(nx.cumsum(wx, axis=1), start_xz[:, 0:1])
    root_z = nx.add(nx.cumsum(wz, axis=1), start_xz[:, 1:2])
    root_pos = nx.stack([root_x, x[..., h], root_z], axis=-1)
    root_R = nx.matmul(_yaw_matrix_t(yaw), local[..., 0, :, :])
    positions = forward_kinematics_t(root_pos, root_R, local, skeleton)
    return positions, nx.stack([root_x, root_z], axis=-1)


def window_decode_motion(window: MotionWindow, skeleton: Skeleton, data: Optional[np.ndarray] = None,
                         name: str = "window", contact_threshold: float = 0.5) -> MotionClip:
    """Postures of the valid frames; `data` overrides the stored channels (e.g. a decoded window)"""
    data = window.data if data is None else np.asarray(data, dtype=np.float64)
    data = data[:window.length]
    layout = ChannelLayout(len(skeleton))
    h = layout.height
    local = rot.rot6d_to_matrix(data[:, layout.rotations].reshape(window.length, layout.joints, 6))
    d_yaw = data[:, h + 3]
    yaw = window.start_yaw + np.cumsum(d_yaw)
    prev = yaw - d_yaw
    d_world = rot.rotate_xz(data[:, [h + 1, h + 2]], prev)
    xz = window.start_xz + np.cumsum(d_world, axis=0)

    rotations = rot.matrix_to_axis_angle(local)
    rotations[:, 0] = rot.matrix_to_axis_angle(rot.yaw_matrix(yaw) @ local[:, 0])
    root_pos = np.stack([xz[:, 0], data[:, h], xz[:, 1]], axis=-1)
    contacts = data[:, layout.contacts].copy()
    if contact_threshold is not None:
        contacts = np.where(contacts >= contact_threshold, np.round(contacts * 2.0) / 2.0, 0.0)
    return MotionClip(skeleton=skeleton, root_pos=root_pos, rotations=rotations, contacts=contacts, name=name)


def windows_from_clips(clips: Sequence[MotionClip], window: int = 120, hop: Optional[int] = None,
                       contact_config: ContactConfig = None) -> List[MotionWindow]:
    hop = hop or max(window // 2, 1)
    out = []
    for clip in clips:
        if clip.contacts is None:
            clip = clip.with_contacts(contact_config)
        if len(clip) <= window:
            out.append(window_encode_motion(clip, window))
            continue
        for start in range(0, len(clip) - window + 1, hop):
            out.append(window_encode_motion(clip.slice(start, start + window), window))
    return out


# ---------------------------------------------------------------- autoencoder

@dataclass
class Autoencoder:
    skeleton: Skeleton
    config: EditorConfig
    params: Dict[str, np.ndarray]
    mean: np.ndarray
    std: np.ndarray

    @property
    def layout(self) -> ChannelLayout:
        return ChannelLayout(len(self.skeleton))

    @property
    def window(self) -> int:
        return self.config.window

    @property
    def lengths(self) -> List[int]:
        return length_schedule(self.config.window, self.config.stride, self.config.layers)

    @property
    def encoder(self) -> List[Conv1d]:
        c = self.config
        return [Conv1d(f"enc.{i}", self.layout.count if i == 0 else c.channels, c.channels, c.kernel, c.stride)
                for i in range(c.layers)]

    @property
    def decoder(self) -> List[ConvTranspose1d]:
        c = self.config
        return [ConvTranspose1d(f"dec.{i}", c.channels, self.layout.count if i == c.layers - 1 else c.channels,
                                c.kernel, c.stride)
                for i in range(c.layers)]

    @classmethod
    def create(cls, skeleton: Skeleton, config: EditorConfig, mean: np.ndarray, std: np.ndarray,
               rng: np.random.Generator) -> "Autoencoder":
        ae = cls(skeleton, config, {}, np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64))
        for layer in ae.encoder + ae.decoder:
            ae.params.update(layer.init(rng))
        logger.info(f"Autoencoder with {parameter_count(ae.params)} parameters, "
                    f"latent {config.channels}x{ae.lengths[-1]}")
        return ae

    def normalize(self, data: np.ndarray) -> np.ndarray:
        return (np.asarray(data, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x):
        return nx.add(nx.mul(x, self.std), self.mean)

    def encode(self, xn, params=None) -> nx.Tensor:
        """(B, L, C) normalized channels -> latent (B, channels, L / stride^layers)"""
        params = self.params if params is None else params
        h = nx.transpose(nx.as_tensor(xn), (0, 2, 1))
        layers = self.encoder
        for i, layer in enumerate(layers):
            h = layer(params, h)
            if i < len(layers) - 1:
                h = nx.relu(h)
        return h

    def decode(self, z, params=None) -> nx.Tensor:
        """latent -> (B, L, C) normalized channels"""
        params = self.params if params is None else params
        h = nx.as_tensor(z)
        lengths = list(reversed(self.lengths[:-1]))
        layers = self.decoder
        for i, layer in enumerate(layers):
            h = layer(params, h, lengths[i])
            if i < len(layers) - 1:
                h = nx.relu(h)
        return nx.transpose(h, (0, 2, 1))

    def reconstruct(self, window: MotionWindow) -> np.ndarray:
        """Raw channels of Ψ⁻¹(Ψ(X)) for one window, padding rows zeroed"""
        xn = self.normalize(window.data) * window.mask[:, None]
        with nx.no_grad():
            out = self.denormalize(self.decode(self.encode(xn[None]))).data[0]
        return out * window.mask[:, None]

    def mpjpe(self, windows: Sequence[MotionWindow]) -> float:
        """Mean per-joint global position error of reconstructions (m)"""
        errors = []
        for w in windows:
            with nx.no_grad():
                target, _ = decode_channels_t(w.data[None, :w.length], self.skeleton, w.start_xz, w.start_yaw)
                pred, _ = decode_channels_t(self.reconstruct(w)[None, :w.length], self.skeleton, w.start_xz, w.start_yaw)
            errors.append(np.linalg.norm(pred.data - target.data, axis=-1).mean())
        return float(np.mean(errors)) if errors else float("nan")

    def save(self, path: Union[str, Path]) -> Path:
        arrays = {f"param.{k}": v for k, v in self.params.items()}
        arrays["norm.mean"] = self.mean
        arrays["norm.std"] = self.std
        meta = {"kind": "autoencoder", "config": self.config.model_dump(), "skeleton": self.skeleton.to_dict()}
        return checkpoint.save(path, arrays, meta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Autoencoder":
        arrays, meta = checkpoint.load(path)
        if meta.get("kind") != "autoencoder":
            raise ParseError(f"{path} is not an autoencoder checkpoint")
        params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
        ae = cls(Skeleton.from_dict(meta["skeleton"]), EditorConfig(**meta["config"]), params,
                 arrays["norm.mean"], arrays["norm.std"])
        logger.info(f"Loaded autoencoder from {path}")
        return ae


def _masked_mse(a: nx.Tensor, b, mask: np.ndarray) -> nx.Tensor:
    """Mean squared error over entries whose mask is set; mask broadcasts against a"""
    diff = nx.sub(a, b)
    count = max(float(np.broadcast_to(mask, a.shape).sum()), 1.0)
    return nx.div(nx.tsum(nx.mul(nx.mul(diff, diff), mask)), count)


def _root_centric(positions: nx.Tensor) -> nx.Tensor:
    return nx.sub(positions, positions[..., 0:1, :])


def reconstruction_loss(ae: Autoencoder, out: nx.Tensor, target_n: np.ndarray, target_pos: np.ndarray,
                        mask: np.ndarray, root_centric: bool) -> Tuple[nx.Tensor, Dict[str, float]]:
    c = ae.config
    layout = ae.layout
    m = mask[..., None]
    l_quat = _masked_mse(out[..., layout.rotations], target_n[..., layout.rotations], m)
    l_root = _masked_mse(out[..., layout.root], target_n[..., layout.root], m)
    l_contact = _masked_mse(out[..., layout.contacts], target_n[..., layout.contacts], m)
    batch = out.shape[0]
    positions, _ = decode_channels_t(ae.denormalize(out), ae.skeleton, np.zeros((batch, 2)), np.zeros(batch))
    target = target_pos
    if root_centric:
        positions = _root_centric(positions)
        target = target - target[..., 0:1, :]
    l_pos = _masked_mse(positions, target, mask[..., None, None])
    loss = c.w_c * l_contact + c.w_r * l_root + c.w_q * l_quat + c.w_p * l_pos
    return loss, {"contact": l_contact.item(), "root": l_root.item(), "rotation": l_quat.item(), "position": l_pos.item()}


@dataclass
class TrainingResult:
    autoencoder: Autoencoder
    history: List[Dict[str, float]] = field(default_factory=list)
    aborted: bool = False
    validation: List[MotionWindow] = field(default_factory=list)


def channel_statistics(windows: Sequence[MotionWindow]) -> Tuple[np.ndarray, np.ndarray]:
    rows = np.concatenate([w.valid for w in windows])
    mean, std = rows.mean(axis=0), rows.std(axis=0)
    std[std < 1e-8] = 1.0
    return mean, std


def train_autoencoder(windows: Sequence[MotionWindow], skeleton: Skeleton, config: EditorConfig = None,
                      rng: Optional[np.random.Generator] = None, epochs: Optional[int] = None,
                      lr: Optional[float] = None) -> TrainingResult:
    """
    Fit the autoencoder to motion windows. Noise is added to the normalized
    input; the positional term is root-centric for the warmup epochs and
    global afterwards. A non-finite loss restores the last good parameters
    and stops training.
    """
    config = config or EditorConfig()
    rng = rng or np.random.default_rng(0)
    epochs = epochs if epochs is not None else config.ae_epochs
    if not windows:
        raise ConfigError("autoencoder training needs at least one window")
    for w in windows:
        if w.window != config.window:
            raise ConfigError(f"window of {w.window} frames, autoencoder expects {config.window}")

    order = rng.permutation(len(windows))
    n_val = min(int(round(len(windows) * config.val_fraction)), len(windows) - 1)
    validation = [windows[i] for i in order[:n_val]]
    training = [windows[i] for i in order[n_val:]]

    mean, std = channel_statistics(training)
    ae = Autoencoder.create(skeleton, config, mean, std, rng)
    state = nx.AdamState(lr=lr if lr is not None else config.ae_lr)

    data = np.stack([w.data for w in training])
    masks = np.stack([w.mask for w in training])
    target_n = ae.normalize(data) * masks[..., None]
    with nx.no_grad():
        target_pos, _ = decode_channels_t(data, skeleton, np.zeros((len(data), 2)), np.zeros(len(data)))
    target_pos = target_pos.data

    warmup = int(math.ceil(epochs * config.warmup_fraction))
    result = TrainingResult(ae, validation=validation)
    last_good = {k: v.copy() for k, v in ae.params.items()}
    for epoch in range(epochs):
        perm = rng.permutation(len(training))
        losses = []
        for start in range(0, len(training), config.batch_size):
            rows = perm[start:start + config.batch_size]
            noise = rng.standard_normal(target_n[rows].shape) * config.noise_scale * masks[rows][..., None]
            tensors = nx.leaves(ae.params)
            out = ae.decode(ae.encode(target_n[rows] + noise, tensors), tensors)
            loss, parts = reconstruction_loss(ae, out, target_n[rows], target_pos[rows], masks[rows], epoch < warmup)
            value = loss.item()
            try:
                if not np.isfinite(value):
                    raise NumericalError(f"reconstruction loss is {value}")
                nx.backward(loss)
                nx.adam_step(ae.params, nx.collect_grads(tensors), state)
            except NumericalError as exc:
                logger.error(f"Autoencoder training diverged at epoch {epoch}: {exc}; keeping last good parameters")
                ae.params = last_good
                result.aborted = True
                return result
            losses.append(value)
        last_good = {k: v.copy() for k, v in ae.params.items()}
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if (epoch + 1) % 50 == 0 or epoch == epochs - 1:
            if validation:
                row["val_mpjpe"] = ae.mpjpe(validation)
            logger.info(f"autoencoder epoch {epoch + 1}/{epochs}: loss {row['loss']:.6f}"
                        + (f", validation MPJPE {row['val_mpjpe']:.4f} m" if "val_mpjpe" in row else ""))
        result.history.append(row)
    return result


# ---------------------------------------------------------------- editing

@dataclass
class EditResult:
    motion: MotionClip
    losses: List[float]
    initial_error: float
    final_error: float
    method: str = "manifold"


def _resolve_waypoints(cue: ManipulationCue, skeleton: Skeleton, start: int, stop: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    frames, joints, targets = [], [], []
    for wp in cue.waypoints:
        j = skeleton.index(wp.joint)
        if not start <= wp.time < stop:
            raise CueError(f"waypoint at frame {wp.time} lies outside the edited segment [{start}, {stop})")
        frames.append(wp.time - start)
        joints.append(j)
        targets.append(wp.xyz)
    if not frames:
        raise CueError("manipulation cue has no waypoints")
    return np.array(frames), np.array(joints), np.array(targets, dtype=np.float64)


def _check_segment(clip: MotionClip, segment: Tuple[int, int], window: int) -> Tuple[int, int]:
    start, stop = int(segment[0]), int(segment[1])
    if not 0 <= start < stop <= len(clip):
        raise ConfigError(f"segment [{start}, {stop}) is outside the {len(clip)}-frame motion")
    if stop - start > window:
        raise ConfigError(f"segment of {stop - start} frames exceeds the {window}-frame window")
    return start, stop


def _waypoint_error(positions: np.ndarray, frames, joints, targets) -> float:
    return float(np.linalg.norm(positions[frames, joints] - targets, axis=-1).mean())


def descend(evaluate: Callable[[np.ndarray], Tuple[float, np.ndarray]], x0: np.ndarray, lr: float,
            epochs: int, label: str = "edit") -> Tuple[np.ndarray, List[float]]:
    """
    Adam with step halving: a step that raises the loss is undone and the
    learning rate halves, so the accepted loss sequence never increases.
    """
    state = nx.AdamState(lr=lr)
    x = np.array(x0, dtype=np.float64)
    loss, grad = evaluate(x)
    history = [loss]
    for epoch in range(epochs):
        candidate = {"x": x.copy()}
        trial = state.copy()
        try:
            nx.adam_step(candidate, {"x": grad}, trial)
        except NumericalError as exc:
            logger.warning(f"{label}: stopping at epoch {epoch}: {exc}")
            break
        new_loss, new_grad = evaluate(candidate["x"])
        if np.isfinite(new_loss) and new_loss <= loss:
            x, loss, grad, state = candidate["x"], new_loss, new_grad, trial
        else:
            state.lr *= 0.5
            if state.lr < MIN_EDIT_LR:
                logger.info(f"{label}: learning rate exhausted at epoch {epoch}")
                break
        history.append(loss)
        if (epoch + 1) % 50 == 0:
            logger.info(f"{label} epoch {epoch + 1}/{epochs}: loss {loss:.6f}")
    return x, history


def _crossfade(original: MotionClip, edited: MotionClip, start: int, frames: int) -> MotionClip:
    """Write `edited` over original[start:], blending `frames` frames at both ends of the segment"""
    out = original.copy()
    length = len(edited)
    root_pos, rotations = edited.root_pos.copy(), edited.rotations.copy()
    if frames > 0 and length > 2 * frames:
        for k in range(length):
            if k < frames:
                alpha = (k + 1) / (frames + 1)
            elif k >= length - frames:
                alpha = (length - k) / (frames + 1)
            else:
                continue
            t = start + k
            root_pos[k] = (1.0 - alpha) * original.root_pos[t] + alpha * edited.root_pos[k]
            rotations[k] = rot.slerp_axis_angle(original.rotations[t], edited.rotations[k], alpha)
    out.root_pos[start:start + length] = root_pos
    out.rotations[start:start + length] = rotations
    return out


def edit_objective(ae: Autoencoder, window: MotionWindow, source: MotionClip, frames: np.ndarray,
                   joints: np.ndarray, targets: np.ndarray, config: EditorConfig) -> Callable[[nx.Tensor], nx.Tensor]:
    """Latent code -> editing loss: waypoint reach plus contact-frame feet and root path of `source`"""
    length = window.length
    source_pos = source.positions()
    source_xz = source.root_pos[:, [0, 2]]
    feet = list(source.skeleton.feet)
    contact = (source.contacts >= 1.0).astype(np.float64)[..., None]
    d_source = np.diff(source_xz, axis=0)

    def loss(z: nx.Tensor) -> nx.Tensor:
        raw = ae.denormalize(ae.decode(z))[:, :length]
        positions, root_xz = decode_channels_t(raw, ae.skeleton, window.start_xz, np.array([window.start_yaw]))
        positions, root_xz = positions[0], root_xz[0]
        l_target = nx.div(nx.tsum(nx.power(nx.sub(positions[frames, joints], targets), 2.0)), len(frames))
        # x3 and x2 turn per-coordinate means into per-point squared norms
        l_foot = _masked_mse(positions[:, feet, :], source_pos[:, feet, :], contact) * 3.0
        l_root = nx.mean(nx.power(nx.sub(root_xz, source_xz), 2.0)) * 2.0
        if length > 1:
            velocity = nx.sub(root_xz[1:], root_xz[:-1])
            l_root = l_root + config.edit_w_dr * nx.mean(nx.power(nx.sub(velocity, d_source), 2.0)) * 2.0
        return config.edit_w_p * l_target + config.edit_w_f * l_foot + config.edit_w_r * l_root

    return loss


def edit(clip: MotionClip, cue: ManipulationCue, segment: Tuple[int, int], ae: Autoencoder,
         config: EditorConfig = None, epochs: Optional[int] = None, lr: Optional[float] = None) -> EditResult:
    """
    Optimize the latent code of a motion segment so decoded joints reach the
    cue waypoints while contact-frame feet and the root path stay put.
    """
    config = config or ae.config
    epochs = epochs if epochs is not None else config.edit_epochs
    lr = lr if lr is not None else config.edit_lr
    start, stop = _check_segment(clip, segment, ae.window)
    frames, joints, targets = _resolve_waypoints(cue, clip.skeleton, start, stop)
    if clip.contacts is None:
        clip = clip.with_contacts()

    source = clip.slice(start, stop)
    window = window_encode_motion(source, ae.window)
    objective = edit_objective(ae, window, source, frames, joints, targets, config)

    def evaluate(z: np.ndarray) -> Tuple[float, np.ndarray]:
        zt = nx.Tensor(z, requires_grad=True)
        loss = objective(zt)
        nx.backward(loss)
        return loss.item(), zt.grad

    xn = ae.normalize(window.data) * window.mask[:, None]
    with nx.no_grad():
        z0 = ae.encode(xn[None]).data
    initial_error = _waypoint_error(source.positions(), frames, joints, targets)
    z, history = descend(evaluate, z0, lr, epochs, "manifold edit")

    with nx.no_grad():
        decoded = ae.denormalize(ae.decode(z)).data[0]
    segment_clip = window_decode_motion(window, clip.skeleton, decoded, name=f"{clip.name}_edit")
    motion = _crossfade(clip, segment_clip, start, config.crossfade)
    motion.name = f"{clip.name}_edited"
    final_error = _waypoint_error(motion.slice(start, stop).positions(), frames, joints, targets)
    logger.info(f"Edited [{start}, {stop}): waypoint error {initial_error:.4f} -> {final_error:.4f} m")
    return EditResult(motion, history, initial_error, final_error, "manifold")


def ik_edit(clip: MotionClip, cue: ManipulationCue, segment: Tuple[int, int], config: EditorConfig = None,
            epochs: Optional[int] = None, lr: Optional[float] = None) -> EditResult:
    """Per-frame rotation optimization without the learned manifold; the root path is held fixed"""
    config = config or EditorConfig()
    epochs = epochs if epochs is not None else config.edit_epochs
    lr = lr if lr is not None else config.edit_lr
    start, stop = _check_segment(clip, segment, len(clip))
    frames, joints, targets = _resolve_waypoints(cue, clip.skeleton, start, stop)
    if clip.contacts is None:
        clip = clip.with_contacts()

    source = clip.slice(start, stop)
    skeleton = clip.skeleton
    source_pos = source.positions()
    six0 = rot.matrix_to_rot6d(rot.axis_angle_to_matrix(source.rotations))
    feet = list(skeleton.feet)
    contact = (source.contacts >= 1.0).astype(np.float64)[..., None]

    def evaluate(six: np.ndarray) -> Tuple[float, np.ndarray]:
        st = nx.Tensor(six, requires_grad=True)
        local = rot.rot6d_to_matrix_t(st)
        positions = forward_kinematics_t(source.root_pos, local[:, 0], local, skeleton)
        l_target = nx.div(nx.tsum(nx.power(nx.sub(positions[frames, joints], targets), 2.0)), len(frames))
        l_foot = _masked_mse(positions[:, feet, :], source_pos[:, feet, :], contact) * 3.0
        l_anchor = nx.mean(nx.power(nx.sub(st, six0), 2.0))
        loss = config.edit_w_p * l_target + config.edit_w_f * l_foot + IK_ANCHOR * l_anchor
        if len(six) > 1:
            loss = loss + IK_SMOOTHNESS * nx.mean(nx.power(nx.sub(st[1:], st[:-1]), 2.0))
        nx.backward(loss)
        return loss.item(), st.grad

    initial_error = _waypoint_error(source_pos, frames, joints, targets)
    six, history = descend(evaluate, six0, lr, epochs, "ik edit")
    edited = replace(source, rotations=rot.matrix_to_axis_angle(rot.rot6d_to_matrix(six)))
    motion = _crossfade(clip, edited, start, config.crossfade)
    motion.name = f"{clip.name}_ik"
    final_error = _waypoint_error(motion.slice(start, stop).positions(), frames, joints, targets)
    logger.info(f"IK edited [{start}, {stop}): waypoint error {initial_error:.4f} -> {final_error:.4f} m")
    return EditResult(motion, history, initial_error, final_error, "ik")


# ---------------------------------------------------------------- manipulation cues

def splice_manipulation(clip: MotionClip, tau: int, t_target: int) -> MotionClip:
    """Hold frame t_target for tau extra frames; the held frames carry no foot contact"""
    if not 0 <= t_target < len(clip):
        raise ConfigError(f"splice frame {t_target} outside the {len(clip)}-frame motion")
    if tau < 0:
        raise ConfigError("splice length must be non-negative")
    if tau == 0:
        return clip.copy()
    index = np.concatenate([np.arange(t_target + 1), np.full(tau, t_target), np.arange(t_target + 1, len(clip))])
    contacts = None
    if clip.contacts is not None:
        contacts = clip.contacts[index].copy()
        contacts[t_target + 1:t_target + 1 + tau] = 0.0
    out = replace(clip, root_pos=clip.root_pos[index].copy(), rotations=clip.rotations[index].copy(),
                  contacts=contacts, meta=dict(clip.meta))
    out.meta["spliced"] = {"frame": t_target, "length": tau}
    return out


def generate_cue(spec: ArticulationSpec) -> ManipulationCue:
    """Trace the contact vertex of an articulated part through its schedule into joint waypoints"""
    axis = np.asarray(spec.axis_direction, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        raise CueError("articulation axis has zero length")
    axis = axis / norm
    origin = np.asarray(spec.axis_origin, dtype=np.float64)
    vertex = np.asarray(spec.contact_vertex, dtype=np.float64)
    placement = Rotation.from_rotvec(np.asarray(spec.rotation, dtype=np.float64))
    translation = np.asarray(spec.translation, dtype=np.float64)

    waypoints = []
    for t, theta in enumerate(spec.theta):
        if spec.type == "revolute":
            local = origin + Rotation.from_rotvec(axis * theta).apply(vertex - origin)
        else:
            local = vertex + axis * theta
        q = placement.apply(local) + translation
        waypoints.append(Waypoint(time=spec.start_frame + t, joint=spec.joint, xyz=q.tolist()))
    return ManipulationCue(waypoints=waypoints)
