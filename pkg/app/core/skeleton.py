import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from app.core.errors import CueError, ParseError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BoxNodeSpec:
    name: str
    joints: Tuple[int, int]
    width: float
    limb: str  # "leg" or "arm"


@dataclass
class Skeleton:
    names: List[str]
    parents: List[int]
    offsets: np.ndarray  # (J+1, 3) meters
    end_effectors: List[int]
    box_nodes: List[BoxNodeSpec]
    mirror_pairs: List[Tuple[int, int]] = field(default_factory=list)
    feet: Tuple[int, int] = (0, 0)  # (left, right)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        self.validate()
        self._index = {name: i for i, name in enumerate(self.names)}

    @property
    def joint_count(self) -> int:
        """Joints excluding the root"""
        return len(self.names) - 1

    def __len__(self):
        return len(self.names)

    def validate(self):
        n = len(self.names)
        if len(self.parents) != n or self.offsets.shape[0] != n:
            raise ParseError("skeleton names, parents and offsets differ in length")
        roots = [i for i, p in enumerate(self.parents) if p < 0]
        if roots != [0]:
            raise ParseError("skeleton must have exactly one root at index 0")
        for i, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < i:
                raise ParseError(f"joint {self.names[i]} has parent {p}; joints must be topologically sorted")
        for node in self.box_nodes:
            if any(not 0 <= j < n for j in node.joints):
                raise ParseError(f"box node {node.name} references a missing joint")
        for a, b in self.mirror_pairs:
            if not (0 <= a < n and 0 <= b < n):
                raise ParseError(f"mirror pair ({a}, {b}) references a missing joint")

    def index(self, joint: Union[str, int]) -> int:
        if isinstance(joint, int):
            if not 0 <= joint < len(self.names):
                raise CueError(f"unknown joint index {joint}")
            return joint
        if joint not in self._index:
            raise CueError(f"unknown joint '{joint}'")
        return self._index[joint]

    def indices(self, joints: Sequence[Union[str, int]]) -> List[int]:
        return [self.index(j) for j in joints]

    def mirror_permutation(self) -> np.ndarray:
        perm = np.arange(len(self.names))
        for a, b in self.mirror_pairs:
            perm[a], perm[b] = b, a
        return perm

    def children(self, joint: int) -> List[int]:
        return [i for i, p in enumerate(self.parents) if p == joint]

    def to_dict(self) -> Dict:
        return {
            "joints": [
                {"name": n, "parent": p, "offset": [float(x) for x in o]}
                for n, p, o in zip(self.names, self.parents, self.offsets)
            ],
            "end_effectors": [self.names[i] for i in self.end_effectors],
            "feet": [self.names[i] for i in self.feet],
            "box_nodes": [
                {"name": b.name, "joints": [self.names[j] for j in b.joints], "width": b.width, "limb": b.limb}
                for b in self.box_nodes
            ],
            "mirror_pairs": [[self.names[a], self.names[b]] for a, b in self.mirror_pairs],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Skeleton":
        try:
            joints = data["joints"]
            names = [j["name"] for j in joints]
            index = {n: i for i, n in enumerate(names)}

            def resolve(ref):
                return ref if isinstance(ref, int) else index[ref]

            parents = [(-1 if j["parent"] in (None, -1) else resolve(j["parent"])) for j in joints]
            offsets = np.array([j["offset"] for j in joints], dtype=np.float64)
            box_nodes = [
                BoxNodeSpec(b["name"], (resolve(b["joints"][0]), resolve(b["joints"][1])), float(b.get("width", 0.08)), b["limb"])
                for b in data.get("box_nodes", [])
            ]
            return cls(
                names=names,
                parents=parents,
                offsets=offsets,
                end_effectors=[resolve(e) for e in data.get("end_effectors", [])],
                box_nodes=box_nodes,
                mirror_pairs=[(resolve(a), resolve(b)) for a, b in data.get("mirror_pairs", [])],
                feet=tuple(resolve(f) for f in data.get("feet", [0, 0])),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"invalid skeleton definition: {e}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Skeleton":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ParseError(f"skeleton file is not JSON: {e.msg}", e.lineno)
        except FileNotFoundError:
            raise ParseError(f"skeleton file not found: {path}")
        return cls.from_dict(data)

    def save(self, path: Union[str, Path]):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


# Canonical 22-joint layout, Y up, meters, character facing +Z
_CANONICAL = [
    ("root", -1, (0.0, 0.0, 0.0)),
    ("spine", 0, (0.0, 0.10, 0.0)),
    ("spine1", 1, (0.0, 0.12, 0.0)),
    ("spine2", 2, (0.0, 0.12, 0.0)),
    ("neck", 3, (0.0, 0.15, 0.0)),
    ("head", 4, (0.0, 0.10, 0.0)),
    ("l_shoulder", 3, (0.07, 0.10, 0.0)),
    ("l_upper_arm", 6, (0.12, 0.0, 0.0)),
    ("l_forearm", 7, (0.28, 0.0, 0.0)),
    ("l_hand", 8, (0.25, 0.0, 0.0)),
    ("r_shoulder", 3, (-0.07, 0.10, 0.0)),
    ("r_upper_arm", 10, (-0.12, 0.0, 0.0)),
    ("r_forearm", 11, (-0.28, 0.0, 0.0)),
    ("r_hand", 12, (-0.25, 0.0, 0.0)),
    ("l_hip", 0, (0.05, 0.0, 0.0)),
    ("l_upper_leg", 14, (0.04, -0.05, 0.0)),
    ("l_lower_leg", 15, (0.0, -0.42, 0.0)),
    ("l_foot", 16, (0.0, -0.42, 0.0)),
    ("r_hip", 0, (-0.05, 0.0, 0.0)),
    ("r_upper_leg", 18, (-0.04, -0.05, 0.0)),
    ("r_lower_leg", 19, (0.0, -0.42, 0.0)),
    ("r_foot", 20, (0.0, -0.42, 0.0)),
]

STANDING_ROOT_HEIGHT = 0.91


def default_skeleton(box_width: float = 0.08) -> Skeleton:
    names = [j[0] for j in _CANONICAL]
    index = {n: i for i, n in enumerate(names)}
    boxes = []
    for side in ("l", "r"):
        boxes += [
            BoxNodeSpec(f"{side}_upper_arm", (index[f"{side}_upper_arm"], index[f"{side}_forearm"]), box_width, "arm"),
            BoxNodeSpec(f"{side}_forearm", (index[f"{side}_forearm"], index[f"{side}_hand"]), box_width, "arm"),
            BoxNodeSpec(f"{side}_upper_leg", (index[f"{side}_upper_leg"], index[f"{side}_lower_leg"]), box_width, "leg"),
            BoxNodeSpec(f"{side}_lower_leg", (index[f"{side}_lower_leg"], index[f"{side}_foot"]), box_width, "leg"),
        ]
    pairs = [
        (index[f"l_{part}"], index[f"r_{part}"])
        for part in ("shoulder", "upper_arm", "forearm", "hand", "hip", "upper_leg", "lower_leg", "foot")
    ]
    return Skeleton(
        names=names,
        parents=[j[1] for j in _CANONICAL],
        offsets=np.array([j[2] for j in _CANONICAL]),
        end_effectors=[index["head"], index["l_hand"], index["r_hand"], index["l_foot"], index["r_foot"]],
        box_nodes=boxes,
        mirror_pairs=pairs,
        feet=(index["l_foot"], index["r_foot"]),
    )
