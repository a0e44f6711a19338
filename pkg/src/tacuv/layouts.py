"""Glove sensor layout and the cross-layout correspondence tables.

The shipped glove layout annotates 137 rectangular sensors on the canonical
hand template, each through its four corner vertex indices:

    region   sensors   placement
    thumb       20     4 column blocks x 5 ring bands on the tube front
    index       24     4 x 6
    middle      24     4 x 6
    ring        24     4 x 6
    pinky       20     4 x 5
    palm        20     5 column blocks x 4 row bands, palm-side grid
    bend         5     one per finger at the knuckle line, back-side grid

Blocks never cross a tube's UV seam, so every sensor maps to a proper
rectangle inside its part's UV island.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .hand import (FINGER_NAMES, FINGER_RINGS, PALM_COLS, PALM_ROWS, RING_SEGS,
                   HandTemplate)

GLOVE_REGIONS = ("thumb", "index", "middle", "ring", "pinky", "palm", "bend")
N_GLOVE = 137

# P_H keypoint layout: 20 non-wrist keypoints, 4 per finger, wrist-relative
KEYPOINT_FINGER = sum(([f] * 4 for f in FINGER_NAMES), [])
# robot actuated joints, in the declaration order of the default hand
ROBOT_JOINT_FINGER = ("index", "middle", "ring", "pinky", "thumb", "thumb")


@dataclass
class GloveSensor:
    id: int
    region: str
    corners: tuple  # (v00, v10, v01, v11) vertex indices


@dataclass
class GloveLayout:
    sensors: list[GloveSensor]

    def validate(self):
        if len(self.sensors) != N_GLOVE:
            raise DataError(f"glove layout needs {N_GLOVE} sensors, got {len(self.sensors)}")
        regions = {s.region for s in self.sensors}
        missing = set(GLOVE_REGIONS) - regions
        if missing:
            raise DataError(f"glove layout missing regions: {sorted(missing)}")
        for s in self.sensors:
            if len(set(s.corners)) != 4:
                raise DataError(f"sensor {s.id}: corner vertices must be distinct")
        return self

    def region_slices(self) -> dict[str, slice]:
        """Contiguous index ranges per region (sensors are declared grouped)."""
        out = {}
        start = 0
        cur = self.sensors[0].region
        for i, s in enumerate(self.sensors):
            if s.region != cur:
                out[cur] = slice(start, i)
                cur, start = s.region, i
        out[cur] = slice(start, len(self.sensors))
        return out

    def sensor_finger(self, sensor: GloveSensor) -> str | None:
        if sensor.region in FINGER_NAMES:
            return sensor.region
        return None

    def to_json(self) -> str:
        return json.dumps({"sensors": [
            {"id": s.id, "region": s.region, "corners": list(s.corners)}
            for s in self.sensors]}, indent=1)

    @classmethod
    def from_json(cls, text) -> "GloveLayout":
        doc = json.loads(text)
        sensors = [GloveSensor(int(s["id"]), s["region"], tuple(s["corners"]))
                   for s in doc["sensors"]]
        return cls(sensors).validate()


def _tube_vertex(finger_idx, ring, seg):
    off = sum(FINGER_RINGS[i] * RING_SEGS + 2 for i in range(finger_idx))
    return off + ring * RING_SEGS + (seg % RING_SEGS)


def _palm_vertex(row, col, bottom):
    off = sum(FINGER_RINGS[i] * RING_SEGS + 2 for i in range(len(FINGER_NAMES)))
    if bottom:
        off += PALM_ROWS * PALM_COLS
    return off + row * PALM_COLS + col


def default_glove_layout() -> GloveLayout:
    sensors = []

    def add(region, corners):
        sensors.append(GloveSensor(len(sensors), region, corners))

    col_blocks = ((0, 2), (2, 4), (4, 6), (6, 7))  # tube segments, seam avoided
    for fi, name in enumerate(FINGER_NAMES):
        n_rings = FINGER_RINGS[fi]
        bands = [(l, min(l + 2, n_rings - 1)) for l in range(0, n_rings - 1, 2)]
        for l0, l1 in bands:
            for s0, s1 in col_blocks:
                add(name, (_tube_vertex(fi, l0, s0), _tube_vertex(fi, l0, s1),
                           _tube_vertex(fi, l1, s0), _tube_vertex(fi, l1, s1)))
    palm_cols = ((0, 3), (3, 6), (6, 9), (9, 12), (12, 15))
    for r0, r1 in ((0, 2), (2, 4), (4, 6), (6, 8)):
        for c0, c1 in palm_cols:
            add("palm", (_palm_vertex(r0, c0, True), _palm_vertex(r0, c1, True),
                         _palm_vertex(r1, c0, True), _palm_vertex(r1, c1, True)))
    for c0, c1 in palm_cols:  # knuckle-line flexion sensors on the back grid
        add("bend", (_palm_vertex(8, c0, False), _palm_vertex(8, c1, False),
                     _palm_vertex(9, c0, False), _palm_vertex(9, c1, False)))
    return GloveLayout(sensors).validate()


# ---------------------------------------------------------------------
# PatchMatch correspondence table
# ---------------------------------------------------------------------

@dataclass
class MatchTable:
    """One-to-one partition pairing between the glove and taxel layouts.

    Every glove sensor and every robot taxel must appear in exactly one
    partition; the mapped signal broadcasts the source partition's mean.
    """

    pairs: list[dict]  # {"name", "glove": [sensor ids], "robot": [taxel ids]}

    def validate(self, n_glove=N_GLOVE, n_robot=1062):
        g = sorted(i for p in self.pairs for i in p["glove"])
        r = sorted(i for p in self.pairs for i in p["robot"])
        if g != list(range(n_glove)):
            raise DataError("match table does not partition the glove sensors")
        if r != list(range(n_robot)):
            raise DataError("match table does not partition the robot taxels")
        return self


def default_match_table(glove: GloveLayout, robot_model) -> MatchTable:
    """Finger-to-finger pairing; the palm partition absorbs the glove's
    bend sensors so both sides stay a full partition."""
    taxel_fingers = []
    for p in robot_model.patches:
        taxel_fingers.extend([p.finger] * (p.rows * p.cols))
    pairs = []
    for f in FINGER_NAMES:
        pairs.append({
            "name": f,
            "glove": [s.id for s in glove.sensors if s.region == f],
            "robot": [i for i, tf in enumerate(taxel_fingers) if tf == f],
        })
    pairs.append({
        "name": "palm",
        "glove": [s.id for s in glove.sensors if s.region in ("palm", "bend")],
        "robot": [i for i, tf in enumerate(taxel_fingers) if tf is None],
    })
    return MatchTable(pairs).validate()


def template_vertex_fingers(template: HandTemplate) -> np.ndarray:
    """0=palm, 1..5=thumb..pinky per vertex (from construction metadata or
    dominant skinning joint)."""
    from .hand import vertex_part_labels
    return vertex_part_labels(template)
