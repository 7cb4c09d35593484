"""
Scene geometry: OBJ triangle soups, floor-plane occupancy grids, limb box
nodes and the segment/triangle intersection counts that drive the collision
reward and the penetration metric.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core import rotations as rot
from app.core.errors import ParseError
from app.core.motion import MotionClip, forward_kinematics
from app.core.skeleton import Skeleton
from app.models.base import GridConfig, SceneConfig

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
BARYCENTRIC_EPS = 1e-12
PARALLEL_EPS = 1e-14


class SpatialHash:
    """Uniform 3D hash from cell to the sorted indices of triangles whose AABB touches it"""

    def __init__(self, triangles: np.ndarray, cell: float):
        self.cell = cell
        self.cells: Dict[Tuple[int, int, int], np.ndarray] = {}
        buckets: Dict[Tuple[int, int, int], List[int]] = {}
        if len(triangles):
            lo = np.floor(triangles.min(axis=1) / cell).astype(np.int64)
            hi = np.floor(triangles.max(axis=1) / cell).astype(np.int64)
            for index, (a, b) in enumerate(zip(lo, hi)):
                for i in range(a[0], b[0] + 1):
                    for j in range(a[1], b[1] + 1):
                        for k in range(a[2], b[2] + 1):
                            buckets.setdefault((i, j, k), []).append(index)
        self.cells = {key: np.array(v, dtype=np.int64) for key, v in buckets.items()}

    def candidates(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Triangle indices whose cells overlap the box [lo, hi], ascending"""
        a = np.floor(np.asarray(lo) / self.cell).astype(np.int64)
        b = np.floor(np.asarray(hi) / self.cell).astype(np.int64)
        found = []
        for i in range(a[0], b[0] + 1):
            for j in range(a[1], b[1] + 1):
                for k in range(a[2], b[2] + 1):
                    bucket = self.cells.get((i, j, k))
                    if bucket is not None:
                        found.append(bucket)
        if not found:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(found))


@dataclass
class SceneWorld:
    triangles: np.ndarray  # (M, 3, 3) meters, Y up
    floor_height: float = 0.0
    hash_cell: float = 0.25
    name: str = "scene"
    spatial_hash: SpatialHash = field(init=False, repr=False)

    def __post_init__(self):
        self.triangles = np.asarray(self.triangles, dtype=np.float64).reshape(-1, 3, 3)
        self.spatial_hash = SpatialHash(self.triangles, self.hash_cell)

    def __len__(self):
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    @property
    def bbox(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        if self.is_empty:
            return None
        points = self.triangles.reshape(-1, 3)
        return points.min(axis=0), points.max(axis=0)

    def contains_xz(self, xz) -> bool:
        """Floor-plane containment in the scene bounding box; an empty scene has no bound"""
        box = self.bbox
        if box is None:
            return True
        lo, hi = box
        x, z = float(xz[0]), float(xz[1])
        return lo[0] <= x <= hi[0] and lo[2] <= z <= hi[2]

    def transformed(self, R: np.ndarray, t) -> "SceneWorld":
        tris = self.triangles @ np.asarray(R).T + np.asarray(t, dtype=np.float64)
        return SceneWorld(tris, self.floor_height, self.hash_cell, self.name)


def _triangle_areas(tris: np.ndarray) -> np.ndarray:
    return 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)


def from_triangles(triangles, floor_height: float = 0.0, hash_cell: float = 0.25, name: str = "scene") -> SceneWorld:
    tris = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    if len(tris):
        keep = _triangle_areas(tris) >= DEGENERATE_AREA
        if not np.all(keep):
            logger.warning(f"Skipping {int((~keep).sum())} degenerate triangles in {name}")
        tris = tris[keep]
    return SceneWorld(tris, floor_height, hash_cell, name)


def load_mesh(text: str, unit_scale: float = 1.0, floor_height: float = 0.0, hash_cell: float = 0.25,
              name: str = "scene") -> SceneWorld:
    """Parse Wavefront OBJ `v`/`f` records; faces with more than three vertices are fan-triangulated"""
    vertices: List[Tuple[float, float, float]] = []
    faces: List[Tuple[int, List[int]]] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise ParseError("vertex needs three coordinates", number)
            try:
                vertices.append((float(parts[1]), float(parts[2]), float(parts[3])))
            except ValueError:
                raise ParseError(f"non-numeric vertex: {raw.strip()}", number)
        elif parts[0] == "f":
            if len(parts) < 4:
                raise ParseError("face needs at least three vertices", number)
            refs = []
            for token in parts[1:]:
                try:
                    refs.append(int(token.split("/")[0]))
                except ValueError:
                    raise ParseError(f"bad face index '{token}'", number)
            faces.append((number, refs))

    triangles = []
    count = len(vertices)
    for number, refs in faces:
        resolved = []
        for ref in refs:
            index = ref - 1 if ref > 0 else count + ref
            if ref == 0 or not 0 <= index < count:
                raise ParseError(f"face index {ref} out of range (1..{count})", number)
            resolved.append(index)
        for k in range(1, len(resolved) - 1):
            triangles.append((resolved[0], resolved[k], resolved[k + 1]))

    points = np.array(vertices, dtype=np.float64).reshape(-1, 3) * unit_scale
    tris = points[np.array(triangles, dtype=np.int64)] if triangles else np.zeros((0, 3, 3))
    scene = from_triangles(tris, floor_height, hash_cell, name)
    logger.info(f"Loaded scene {name}: {len(vertices)} vertices, {len(scene)} triangles")
    return scene


def load_scene(path: Union[str, Path], config: SceneConfig = None) -> SceneWorld:
    config = config or SceneConfig()
    path = Path(path)
    if not path.exists():
        raise ParseError(f"scene mesh not found: {path}")
    return load_mesh(path.read_text(), config.unit_scale, config.floor_height, config.hash_cell, path.stem)


# ---------------------------------------------------------------- occupancy

@dataclass
class OccupancyGrid:
    """bits[ix, iz] covers x in [x0 + ix*cell, x0 + (ix+1)*cell), likewise z"""
    bits: np.ndarray
    cell: float
    origin: np.ndarray  # (x0, z0)
    band: Tuple[float, float]

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        self.origin = np.asarray(self.origin, dtype=np.float64)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape

    def cell_coords(self, xz) -> np.ndarray:
        """Continuous grid coordinates of a floor point"""
        return (np.asarray(xz, dtype=np.float64) - self.origin) / self.cell

    def cell_index(self, xz) -> Tuple[int, int]:
        c = np.floor(self.cell_coords(xz)).astype(np.int64)
        return int(c[0]), int(c[1])

    def inside(self, xz) -> bool:
        i, k = self.cell_index(xz)
        return 0 <= i < self.bits.shape[0] and 0 <= k < self.bits.shape[1]

    def occupied(self, xz) -> bool:
        """Outside the grid counts as occupied"""
        if not self.inside(xz):
            return True
        i, k = self.cell_index(xz)
        return bool(self.bits[i, k])


def _overlaps_cells(tri_xz: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """2D separating-axis test of one projected triangle against many rectangles"""
    hit = np.ones(len(lo), dtype=bool)
    tmin, tmax = tri_xz.min(axis=0), tri_xz.max(axis=0)
    for axis in (0, 1):
        hit &= ~((tmax[axis] < lo[:, axis]) | (tmin[axis] > hi[:, axis]))
    corners = np.stack([lo, np.stack([lo[:, 0], hi[:, 1]], 1), hi, np.stack([hi[:, 0], lo[:, 1]], 1)], axis=1)
    for e in range(3):
        a, b = tri_xz[e], tri_xz[(e + 1) % 3]
        normal = np.array([a[1] - b[1], b[0] - a[0]])
        if not np.any(normal):
            continue
        proj_tri = tri_xz @ normal
        proj_box = corners @ normal
        hit &= ~((proj_tri.max() < proj_box.min(axis=1)) | (proj_tri.min() > proj_box.max(axis=1)))
    return hit


def build_occupancy(scene: SceneWorld, n: int, cell: float, band: Tuple[float, float],
                    origin=None, n_z: Optional[int] = None) -> OccupancyGrid:
    """
    Mark every cell whose XZ rectangle overlaps the projection of a triangle
    whose vertical extent meets the height band (relative to the floor).
    Default origin centers an n x n grid on (0, 0).
    """
    n_z = n if n_z is None else n_z
    if origin is None:
        origin = (-0.5 * n * cell, -0.5 * n_z * cell)
    origin = np.asarray(origin, dtype=np.float64)
    bits = np.zeros((n, n_z), dtype=np.uint8)
    if not scene.is_empty:
        _rasterize(_band_triangles(scene, band)[:, :, [0, 2]], bits, origin, cell)
    return OccupancyGrid(bits, cell, origin, band)


def _band_triangles(scene: SceneWorld, band: Tuple[float, float]) -> np.ndarray:
    heights = scene.triangles[:, :, 1] - scene.floor_height
    in_band = (heights.max(axis=1) >= band[0]) & (heights.min(axis=1) <= band[1])
    return scene.triangles[in_band]


def _rasterize(tris_xz: np.ndarray, bits: np.ndarray, origin: np.ndarray, cell: float) -> None:
    """Set every cell of bits overlapped by one of the projected (m, 3, 2) triangles"""
    n, n_z = bits.shape
    for xz in tris_xz:
        lo = np.floor((xz.min(axis=0) - origin) / cell).astype(np.int64)
        hi = np.floor((xz.max(axis=0) - origin) / cell).astype(np.int64)
        lo = np.maximum(lo - 1, 0)
        hi = np.minimum(hi + 1, [n - 1, n_z - 1])
        if lo[0] > hi[0] or lo[1] > hi[1]:
            continue
        ii, kk = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing="ij")
        ii, kk = ii.reshape(-1), kk.reshape(-1)
        cell_lo = origin + np.stack([ii, kk], axis=1) * cell
        hit = _overlaps_cells(xz, cell_lo, cell_lo + cell)
        bits[ii[hit], kk[hit]] = 1


def person_window(scene: SceneWorld, root_xz, yaw: float, n: int, cell: float,
                  band: Tuple[float, float]) -> np.ndarray:
    """
    n x n occupancy centered on the root in the person frame: axis 0 runs
    along the character's side, axis 1 along its facing. Triangles are moved
    into that frame before rasterizing, so the window turns with the body.
    """
    bits = np.zeros((n, n), dtype=np.uint8)
    if scene.is_empty:
        return bits
    half = 0.5 * n * cell
    reach = half * math.sqrt(2.0) + cell
    tris = _band_triangles(scene, band)[:, :, [0, 2]] - np.asarray(root_xz, dtype=np.float64)
    near = np.all(tris.min(axis=1) <= reach, axis=1) & np.all(tris.max(axis=1) >= -reach, axis=1)
    local = rot.rotate_xz(tris[near], -yaw)
    _rasterize(local, bits, np.array([-half, -half]), cell)
    return bits


def build_global_grid(scene: SceneWorld, config: GridConfig = None) -> OccupancyGrid:
    """Grid over the scene's floor footprint plus a margin; empty scenes get a square around the origin"""
    config = config or GridConfig()
    band = (config.band_min, config.band_max)
    if scene.is_empty:
        count = int(math.ceil(config.empty_extent / config.cell))
        half = 0.5 * count * config.cell
        return build_occupancy(scene, count, config.cell, band, origin=(-half, -half))
    lo, hi = scene.bbox
    origin = np.array([lo[0], lo[2]]) - config.margin
    extent = np.array([hi[0], hi[2]]) + config.margin - origin
    counts = np.maximum(np.ceil(extent / config.cell).astype(int), 1)
    grid = build_occupancy(scene, int(counts[0]), config.cell, band, origin=origin, n_z=int(counts[1]))
    logger.info(f"Built {counts[0]}x{counts[1]} occupancy grid for {scene.name}, {int(grid.bits.sum())} occupied cells")
    return grid


# ---------------------------------------------------------------- box nodes

def _perpendicular_frame(axis: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = helper - np.dot(helper, n) * n
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


def box_node_edges(positions: np.ndarray, orientations: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """
    (nodes, 4, 2, 3) long edges of each limb box. The cross-section axes are
    fixed in the first joint's frame, so the edges move rigidly with the body.
    """
    edges = np.zeros((len(skeleton.box_nodes), 4, 2, 3))
    signs = ((1, 1), (1, -1), (-1, 1), (-1, -1))
    for b, node in enumerate(skeleton.box_nodes):
        j0, j1 = node.joints
        u_local, v_local = _perpendicular_frame(skeleton.offsets[j1])
        R = orientations[j0]
        u, v = R @ u_local, R @ v_local
        half = 0.5 * node.width
        for e, (su, sv) in enumerate(signs):
            shift = half * (su * u + sv * v)
            edges[b, e, 0] = positions[j0] + shift
            edges[b, e, 1] = positions[j1] + shift
    return edges


# ---------------------------------------------------------------- intersections

def segment_triangle_hits(p0: np.ndarray, p1: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """
    Vectorized Moller-Trumbore restricted to the segment (t in [0, 1]).
    Returns the hit points in triangle order. Segments lying in a triangle's
    plane produce no points.
    """
    if len(tris) == 0:
        return np.zeros((0, 3))
    d = p1 - p0
    with np.errstate(divide="ignore", invalid="ignore"):
        e1 = tris[:, 1] - tris[:, 0]
        e2 = tris[:, 2] - tris[:, 0]
        h = np.cross(d, e2)
        det = np.sum(e1 * h, axis=1)
        inv = 1.0 / det
        s = p0 - tris[:, 0]
        u = np.sum(s * h, axis=1) * inv
        q = np.cross(s, e1)
        v = np.sum(d * q, axis=1) * inv
        t = np.sum(e2 * q, axis=1) * inv
        eps = BARYCENTRIC_EPS
        ok = (np.abs(det) > PARALLEL_EPS) \
            & (u >= -eps) & (u <= 1 + eps) \
            & (v >= -eps) & (u + v <= 1 + eps) \
            & (t >= -eps) & (t <= 1 + eps)
    return p0 + t[ok, None] * d


def _dedup(points: Sequence[np.ndarray], tolerance: float) -> int:
    kept: List[np.ndarray] = []
    for p in points:
        if not any(np.linalg.norm(p - k) <= tolerance for k in kept):
            kept.append(p)
    return len(kept)


def count_intersections(segments: np.ndarray, scene: SceneWorld, tolerance: float = 1e-7) -> int:
    """Unique segment/triangle intersection points over a set of segments (S, 2, 3)"""
    if scene.is_empty:
        return 0
    hits = []
    for p0, p1 in np.asarray(segments, dtype=np.float64).reshape(-1, 2, 3):
        index = scene.spatial_hash.candidates(np.minimum(p0, p1), np.maximum(p0, p1))
        if len(index):
            hits.extend(segment_triangle_hits(p0, p1, scene.triangles[index]))
    return _dedup(hits, tolerance)


def count_intersections_naive(segments: np.ndarray, scene: SceneWorld, tolerance: float = 1e-7) -> int:
    """All-pairs reference without the spatial hash"""
    hits = []
    for p0, p1 in np.asarray(segments, dtype=np.float64).reshape(-1, 2, 3):
        hits.extend(segment_triangle_hits(p0, p1, scene.triangles))
    return _dedup(hits, tolerance)


def node_intersections(positions: np.ndarray, orientations: np.ndarray, skeleton: Skeleton,
                       scene: SceneWorld, tolerance: float = 1e-7) -> np.ndarray:
    """rho per box node for one posture"""
    counts = np.zeros(len(skeleton.box_nodes), dtype=np.int64)
    if scene.is_empty:
        return counts
    edges = box_node_edges(positions, orientations, skeleton)
    for b in range(len(skeleton.box_nodes)):
        counts[b] = count_intersections(edges[b], scene, tolerance)
    return counts


def motion_intersections(clip: MotionClip, scene: SceneWorld, tolerance: float = 1e-7) -> np.ndarray:
    """(T, nodes) rho for every frame of a clip"""
    positions, orientations = forward_kinematics(clip.root_pos, clip.rotations, clip.skeleton)
    out = np.zeros((len(clip), len(clip.skeleton.box_nodes)), dtype=np.int64)
    if scene.is_empty:
        return out
    for t in range(len(clip)):
        out[t] = node_intersections(positions[t], orientations[t], clip.skeleton, scene, tolerance)
    return out


def penetration_frames(clip: MotionClip, scene: SceneWorld, leg_threshold: int = 10, arm_threshold: int = 7,
                       tolerance: float = 1e-7) -> np.ndarray:
    """Boolean per frame: summed leg rho above leg_threshold or arm rho above arm_threshold"""
    counts = motion_intersections(clip, scene, tolerance)
    limbs = np.array([node.limb for node in clip.skeleton.box_nodes])
    legs = counts[:, limbs == "leg"].sum(axis=1) if len(limbs) else np.zeros(len(clip))
    arms = counts[:, limbs == "arm"].sum(axis=1) if len(limbs) else np.zeros(len(clip))
    return (legs > leg_threshold) | (arms > arm_threshold)


def penetration_metric(clip: MotionClip, scene: SceneWorld, leg_threshold: int = 10, arm_threshold: int = 7,
                       tolerance: float = 1e-7) -> float:
    """Percentage of penetrating frames"""
    if len(clip) == 0 or scene.is_empty:
        return 0.0
    flags = penetration_frames(clip, scene, leg_threshold, arm_threshold, tolerance)
    return 100.0 * float(flags.sum()) / len(clip)
