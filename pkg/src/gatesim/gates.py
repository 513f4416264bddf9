"""Racing gates and track maps.

A gate is a square obstacle whose four inner corners are the known
landmarks.  Gate frame: x along the gate normal (race direction through
the gate), y left, z up; the corners lie in the x = 0 plane and are
ordered TL, TR, BR, BL as seen by a camera approaching from the -x side.

Gate dimensions follow league standard hardware: 1.524 m (5 ft) square
inner opening inside a 2.1336 m (7 ft) square frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .geom import Pose, quat_from_yaw

INNER_HALF_SIZE = 0.762  # 5 ft opening / 2
OUTER_HALF_SIZE = 1.0668  # 7 ft frame / 2


@dataclass(frozen=True)
class Gate:
    id: int
    center: np.ndarray
    yaw: float
    half_size: float = INNER_HALF_SIZE

    @property
    def pose(self) -> Pose:
        """World-from-gate transform."""
        return Pose(quat_from_yaw(self.yaw), np.asarray(self.center, dtype=float))

    @property
    def normal(self) -> np.ndarray:
        """Gate x-axis (race direction) in world coordinates."""
        return np.array([np.cos(self.yaw), np.sin(self.yaw), 0.0])

    def corners_gate(self) -> np.ndarray:
        """Inner corners in gate frame, ordered TL, TR, BR, BL (4x3)."""
        h = self.half_size
        return np.array(
            [
                [0.0, h, h],
                [0.0, -h, h],
                [0.0, -h, -h],
                [0.0, h, -h],
            ]
        )

    def corners_world(self) -> np.ndarray:
        P = self.pose
        return np.array([P.apply(c) for c in self.corners_gate()])


@dataclass(frozen=True)
class GateMap:
    """Ordered set of gates defining a track (race sequence order)."""

    gates: tuple[Gate, ...]
    name: str = ""
    split_s_ids: frozenset[int] = frozenset()
    arena: tuple[float, float, float, float, float, float] | None = None

    def __len__(self) -> int:
        return len(self.gates)

    def __iter__(self):
        return iter(self.gates)

    def __getitem__(self, i: int) -> Gate:
        return self.gates[i]

    def by_id(self, gate_id: int) -> Gate:
        for g in self.gates:
            if g.id == gate_id:
                return g
        raise KeyError(f"no gate with id {gate_id}")

    @staticmethod
    def from_json(path) -> "GateMap":
        """Load a track file.

        Accepts either a bare JSON array of
        ``{id, center: [x,y,z], yaw_rad, half_size}`` or an object with
        a ``gates`` array plus optional ``name`` and ``split_s`` id list.
        """
        with open(path) as f:
            data = json.load(f)
        return GateMap._from_obj(data)

    @staticmethod
    def _from_obj(data) -> "GateMap":
        if isinstance(data, dict):
            name = data.get("name", "")
            split_s = frozenset(int(i) for i in data.get("split_s", []))
            entries = data["gates"]
            arena = tuple(float(x) for x in data["arena"]) if "arena" in data else None
        else:
            name = ""
            split_s = frozenset()
            entries = data
            arena = None
        gates = tuple(
            Gate(
                id=int(e["id"]),
                center=np.asarray(e["center"], dtype=float),
                yaw=float(e["yaw_rad"]),
                half_size=float(e.get("half_size", INNER_HALF_SIZE)),
            )
            for e in entries
        )
        if not gates:
            raise ValueError("track file contains no gates")
        return GateMap(gates, name=name, split_s_ids=split_s, arena=arena)

    def to_json(self, path) -> None:
        data = {
            "name": self.name,
            "split_s": sorted(self.split_s_ids),
            "gates": [
                {
                    "id": g.id,
                    "center": list(map(float, g.center)),
                    "yaw_rad": float(g.yaw),
                    "half_size": float(g.half_size),
                }
                for g in self.gates
            ],
        }
        if self.arena is not None:
            data["arena"] = list(self.arena)
        with open(path, "w") as f:
            json.dump(data, f, indent=2)


def bundled_track(name: str) -> GateMap:
    """Load one of the tracks shipped with the package.

    Available: ``ratm`` (hairpin + spiral + Split-S) and ``split_s``.
    Both are geometrically plausible reconstructions of published
    layouts, not surveyed gate positions.
    """
    ref = resources.files("gatesim.tracks").joinpath(f"{name}.json")
    with ref.open() as f:
        return GateMap._from_obj(json.load(f))
