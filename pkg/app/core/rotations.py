"""Rotation representation conversions (numpy and differentiable forms)."""

import numpy as np
from scipy.spatial.transform import Rotation

from app.core import numerics as nx
from app.core.errors import DegenerateRotation

_DEGENERATE_EPS = 1e-8


def axis_angle_to_matrix(v: np.ndarray) -> np.ndarray:
    """Rodrigues map so(3) -> SO(3); accepts (..., 3)"""
    v = np.asarray(v, dtype=np.float64)
    flat = v.reshape(-1, 3)
    return Rotation.from_rotvec(flat).as_matrix().reshape(v.shape[:-1] + (3, 3))


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    return Rotation.from_matrix(flat).as_rotvec().reshape(R.shape[:-2] + (3,))


def rot6d_to_matrix(r: np.ndarray) -> np.ndarray:
    """Gram-Schmidt on the two stored columns; accepts (..., 6)"""
    r = np.asarray(r, dtype=np.float64)
    a1, a2 = r[..., 0:3], r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= _DEGENERATE_EPS):
        raise DegenerateRotation("first 6D column has (near) zero length")
    b1 = a1 / n1
    b2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(b2, axis=-1, keepdims=True)
    if np.any(n2 <= _DEGENERATE_EPS):
        raise DegenerateRotation("6D columns are (near) parallel")
    b2 = b2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rot6d_to_matrix_t(r: nx.Tensor, eps: float = 1e-12) -> nx.Tensor:
    """Differentiable rot6d_to_matrix for decoded channels"""
    a1 = r[..., 0:3]
    a2 = r[..., 3:6]
    b1 = a1 / nx.sqrt(nx.tsum(a1 * a1, axis=-1, keepdims=True) + eps)
    b2 = a2 - nx.tsum(b1 * a2, axis=-1, keepdims=True) * b1
    b2 = b2 / nx.sqrt(nx.tsum(b2 * b2, axis=-1, keepdims=True) + eps)
    b3 = nx.cross(b1, b2)
    return nx.stack([b1, b2, b3], axis=-1)


def yaw_matrix(theta: np.ndarray) -> np.ndarray:
    """Rotation about +Y; accepts scalar or (...,)"""
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(theta), np.ones_like(theta)
    return np.stack([
        np.stack([c, z, s], axis=-1),
        np.stack([z, o, z], axis=-1),
        np.stack([-s, z, c], axis=-1),
    ], axis=-2)


def heading_of(R: np.ndarray) -> np.ndarray:
    """Yaw of the body forward axis (+Z) projected on the floor"""
    R = np.asarray(R)
    return np.arctan2(R[..., 0, 2], R[..., 2, 2])


def rotate_xz(xz: np.ndarray, theta) -> np.ndarray:
    """Apply yaw theta to floor-plane vectors stored as (x, z)"""
    xz = np.asarray(xz, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    x, z = xz[..., 0], xz[..., 1]
    return np.stack([c * x + s * z, -s * x + c * z], axis=-1)


def wrap_angle(a):
    return np.arctan2(np.sin(a), np.cos(a))


def geodesic_angle(R_a: np.ndarray, R_b: np.ndarray) -> np.ndarray:
    rel = np.swapaxes(R_a, -1, -2) @ R_b
    cos = np.clip((np.trace(rel, axis1=-2, axis2=-1) - 1.0) * 0.5, -1.0, 1.0)
    return np.arccos(cos)


def compose_axis_angle(r: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Local rotation r followed by a local delta, both axis-angle"""
    return (Rotation.from_rotvec(r) * Rotation.from_rotvec(delta)).as_rotvec()


def slerp_axis_angle(r_a: np.ndarray, r_b: np.ndarray, alpha: float) -> np.ndarray:
    """Per-joint geodesic interpolation between two (J, 3) axis-angle sets"""
    ra = Rotation.from_rotvec(np.asarray(r_a).reshape(-1, 3))
    rb = Rotation.from_rotvec(np.asarray(r_b).reshape(-1, 3))
    step = Rotation.from_rotvec((ra.inv() * rb).as_rotvec() * alpha)
    return (ra * step).as_rotvec().reshape(np.shape(r_a))


def clamp_norm(v: np.ndarray, limit: float) -> np.ndarray:
    """Scale rows of (..., 3) so that their norm does not exceed limit"""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    scale = np.where(norm > limit, limit / np.maximum(norm, 1e-300), 1.0)
    return v * scale
