"""Robot dexterous hand: URDF-subset parsing, kinematics, taxel geometry.

The parser accepts a deliberately small grammar: robot/link/joint elements,
box/cylinder primitives and inline-array meshes, revolute and fixed joints.
Taxel patches and keypoint markers come from a companion layout JSON:

    {"patches":  [{name, link, rows, cols, origin, axis_u, axis_v, pitch,
                   finger (optional)}],
     "keypoints": [{link, offset, finger (optional)}]}

A shipped 6-DoF five-finger hand fixture (17 patches, 1062 taxels) is
generated by `default_hand()`.
"""

from __future__ import annotations

import io
import json
import math
import xml.etree.ElementTree as ET
import xml.parsers.expat
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UrdfError

N_TAXELS = 1062
N_PATCHES = 17
N_ACTUATED = 6

# patch grid classes and the branch each one routes to in the encoder
BRANCH_OF_GRID = {(3, 3): "small", (12, 8): "standard", (10, 8): "standard",
                  (8, 14): "large"}


@dataclass
class Joint:
    name: str
    kind: str                  # "revolute" | "fixed"
    parent: str
    child: str
    origin: np.ndarray         # (4,4) fixed transform
    axis: np.ndarray           # (3,) unit, revolute only
    limits: tuple | None       # (lower, upper) radians
    line: int = 0


@dataclass
class Link:
    name: str
    vertices: np.ndarray       # (n,3) local frame
    faces: np.ndarray          # (m,3)
    line: int = 0


@dataclass
class PatchSpec:
    name: str
    link: str
    rows: int
    cols: int
    origin: np.ndarray         # (3,)
    axis_u: np.ndarray         # (3,) unit
    axis_v: np.ndarray         # (3,) unit
    pitch: float               # meters per cell
    branch: str = ""
    finger: str | None = None


@dataclass
class RobotHandModel:
    links: dict[str, Link]
    joints: list[Joint]
    root: str
    actuated: list[str]        # joint names, declaration order
    keypoints: list[tuple[str, np.ndarray, str | None]]   # (link, offset, finger)
    patches: list[PatchSpec]
    warnings: list[str] = field(default_factory=list)

    @property
    def n_taxels(self):
        return sum(p.rows * p.cols for p in self.patches)


@dataclass
class RobotState:
    q: np.ndarray                       # (6,) joint angles
    wrist_rot: np.ndarray = None        # (3,) axis-angle
    wrist_pos: np.ndarray = None        # (3,)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.wrist_rot = np.zeros(3) if self.wrist_rot is None else np.asarray(self.wrist_rot, float)
        self.wrist_pos = np.zeros(3) if self.wrist_pos is None else np.asarray(self.wrist_pos, float)


# ---------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------

def _rodrigues(axis_angle):
    a = np.asarray(axis_angle, dtype=np.float64)
    angle = np.linalg.norm(a)
    if angle < 1e-12:
        return np.eye(3)
    k = a / angle
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def _transform(rpy, xyz):
    r, p, y = rpy
    Rx = _rodrigues([r, 0, 0])
    Ry = _rodrigues([0, p, 0])
    Rz = _rodrigues([0, 0, y])
    T = np.eye(4)
    T[:3, :3] = Rz @ Ry @ Rx
    T[:3, 3] = xyz
    return T


def triangulate_box(size):
    sx, sy, sz = (s / 2 for s in size)
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    f = np.array([
        [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],   # x faces
        [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],   # y faces
        [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],   # z faces
    ])
    return v, f


def triangulate_cylinder(radius, length, segments=12):
    """Axis along +y, base at y=0, deterministic tessellation."""
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), np.zeros(segments), radius * np.sin(ang)], axis=1)
    bot = ring.copy()
    top = ring + np.array([0.0, length, 0.0])
    centers = np.array([[0.0, 0.0, 0.0], [0.0, length, 0.0]])
    v = np.vstack([bot, top, centers])
    cb, ct = 2 * segments, 2 * segments + 1
    f = []
    for s in range(segments):
        s2 = (s + 1) % segments
        f.append([s, s2, segments + s2])
        f.append([s, segments + s2, segments + s])
        f.append([cb, s2, s])
        f.append([ct, segments + s, segments + s2])
    return v, np.asarray(f)


# ---------------------------------------------------------------------
# URDF-subset parsing
# ---------------------------------------------------------------------

def _parse_xml_with_lines(text):
    """expat-driven ElementTree build that stamps a `_line` attribute on
    every element (the C-accelerated ET parser hides source positions)."""
    builder = ET.TreeBuilder()
    p = xml.parsers.expat.ParserCreate()

    def start(tag, attrs):
        el = builder.start(tag, attrs)
        el.set("_line", str(p.CurrentLineNumber))

    p.StartElementHandler = start
    p.EndElementHandler = builder.end
    p.CharacterDataHandler = builder.data
    try:
        p.Parse(text, True)
    except xml.parsers.expat.ExpatError as e:
        raise UrdfError(f"malformed XML: {xml.parsers.expat.errors.messages[e.code]}",
                        e.lineno) from e
    return builder.close()


def _floats(text, n=None):
    vals = [float(t) for t in text.replace(",", " ").split()]
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} numbers, got {len(vals)}")
    return vals


def _elem_line(el):
    return int(el.get("_line", 0))


def _parse_geometry(geo_el, line):
    box = geo_el.find("box")
    if box is not None:
        return triangulate_box(_floats(box.get("size"), 3))
    cyl = geo_el.find("cylinder")
    if cyl is not None:
        return triangulate_cylinder(float(cyl.get("radius")), float(cyl.get("length")))
    mesh = geo_el.find("mesh")
    if mesh is not None:
        v = np.asarray(_floats(mesh.get("vertices")), dtype=np.float64)
        f = np.asarray([int(t) for t in mesh.get("faces").split()], dtype=np.int64)
        if v.size % 3 or f.size % 3:
            raise UrdfError("inline mesh arrays must be multiples of 3", line)
        v, f = v.reshape(-1, 3), f.reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise UrdfError("inline mesh face index out of range", line)
        return v, f
    raise UrdfError("geometry needs box, cylinder, or inline mesh", line)


def parse_urdf(text, layout=None) -> RobotHandModel:
    """Parse the URDF subset plus a layout dict (or JSON string)."""
    root_el = _parse_xml_with_lines(text)
    if root_el.tag != "robot":
        raise UrdfError(f"root element must be <robot>, got <{root_el.tag}>",
                        _elem_line(root_el))

    known = {"link", "joint"}
    warnings = []
    links: dict[str, Link] = {}
    joints: list[Joint] = []
    for el in root_el:
        line = _elem_line(el)
        if el.tag not in known:
            warnings.append(f"line {line}: ignored element <{el.tag}>")
            continue
        if el.tag == "link":
            name = el.get("name")
            if name is None:
                raise UrdfError("link without a name", line)
            if name in links:
                raise UrdfError(f"duplicate link name {name!r}", line)
            vis = el.find("visual")
            geo = vis.find("geometry") if vis is not None else None
            origin_el = vis.find("origin") if vis is not None else None
            if geo is None:
                v = np.zeros((0, 3))
                f = np.zeros((0, 3), dtype=np.int64)
            else:
                try:
                    v, f = _parse_geometry(geo, line)
                except ValueError as e:
                    raise UrdfError(str(e), line) from e
            if origin_el is not None:
                T = _transform(_floats(origin_el.get("rpy", "0 0 0"), 3),
                               _floats(origin_el.get("xyz", "0 0 0"), 3))
                v = v @ T[:3, :3].T + T[:3, 3]
            links[name] = Link(name, v, f, line)
        else:
            name = el.get("name") or f"joint_{len(joints)}"
            kind = el.get("type")
            if kind not in ("revolute", "fixed"):
                raise UrdfError(f"unsupported joint type {kind!r}", line)
            parent_el, child_el = el.find("parent"), el.find("child")
            if parent_el is None or child_el is None:
                raise UrdfError(f"joint {name!r} missing parent/child", line)
            origin_el = el.find("origin")
            T = np.eye(4)
            if origin_el is not None:
                T = _transform(_floats(origin_el.get("rpy", "0 0 0"), 3),
                               _floats(origin_el.get("xyz", "0 0 0"), 3))
            axis = np.array([1.0, 0.0, 0.0])
            axis_el = el.find("axis")
            if axis_el is not None:
                axis = np.asarray(_floats(axis_el.get("xyz"), 3))
                n = np.linalg.norm(axis)
                if n < 1e-12:
                    raise UrdfError(f"joint {name!r} has a zero axis", line)
                axis = axis / n
            limits = None
            lim_el = el.find("limit")
            if lim_el is not None:
                limits = (float(lim_el.get("lower", "-1e9")),
                          float(lim_el.get("upper", "1e9")))
            if kind == "revolute" and limits is None:
                raise UrdfError(f"revolute joint {name!r} needs limits", line)
            joints.append(Joint(name, kind, parent_el.get("link"),
                                child_el.get("link"), T, axis, limits, line))

    # structural validation
    children = set()
    for j in joints:
        if j.parent not in links:
            raise UrdfError(f"joint {j.name!r}: missing parent link {j.parent!r}", j.line)
        if j.child not in links:
            raise UrdfError(f"joint {j.name!r}: missing child link {j.child!r}", j.line)
        if j.child in children:
            raise UrdfError(f"link {j.child!r} has two parent joints", j.line)
        children.add(j.child)
    roots = [n for n in links if n not in children]
    if len(roots) != 1:
        raise UrdfError(f"kinematic tree needs exactly one root, found {roots}",
                        _elem_line(root_el))
    root = roots[0]
    # reachability doubles as the cycle check: every link must hang off the root
    reach = {root}
    frontier = [root]
    by_parent: dict[str, list[Joint]] = {}
    for j in joints:
        by_parent.setdefault(j.parent, []).append(j)
    while frontier:
        cur = frontier.pop()
        for j in by_parent.get(cur, ()):
            reach.add(j.child)
            frontier.append(j.child)
    unreachable = set(links) - reach
    if unreachable:
        raise UrdfError(f"links not reachable from root (cycle?): {sorted(unreachable)}",
                        _elem_line(root_el))

    actuated = [j.name for j in joints if j.kind == "revolute"]
    if len(actuated) != N_ACTUATED:
        raise UrdfError(f"hand needs exactly {N_ACTUATED} actuated joints, "
                        f"found {len(actuated)}", _elem_line(root_el))

    model = RobotHandModel(links=links, joints=joints, root=root,
                           actuated=actuated, keypoints=[], patches=[],
                           warnings=warnings)
    if layout is not None:
        attach_layout(model, layout)
    return model


def attach_layout(model: RobotHandModel, layout) -> None:
    if isinstance(layout, str):
        layout = json.loads(layout)
    patches = []
    for p in layout.get("patches", ()):
        if p["link"] not in model.links:
            raise DataError(f"patch {p['name']!r}: unknown link {p['link']!r}")
        rows, cols = int(p["rows"]), int(p["cols"])
        if rows < 1 or cols < 1:
            raise DataError(f"patch {p['name']!r}: bad grid {rows}x{cols}")
        branch = BRANCH_OF_GRID.get((rows, cols))
        if branch is None:
            # nearest class by cell count, recorded as a warning
            ref = min(BRANCH_OF_GRID, key=lambda g: abs(g[0] * g[1] - rows * cols))
            branch = BRANCH_OF_GRID[ref]
            model.warnings.append(
                f"patch {p['name']!r}: grid {rows}x{cols} not a standard class, "
                f"using nearest branch {branch!r}")
        u = np.asarray(p["axis_u"], dtype=np.float64)
        v = np.asarray(p["axis_v"], dtype=np.float64)
        patches.append(PatchSpec(p["name"], p["link"], rows, cols,
                                 np.asarray(p["origin"], dtype=np.float64),
                                 u / np.linalg.norm(u), v / np.linalg.norm(v),
                                 float(p["pitch"]), branch, p.get("finger")))
    keypoints = []
    for k in layout.get("keypoints", ()):
        if k["link"] not in model.links:
            raise DataError(f"keypoint on unknown link {k['link']!r}")
        keypoints.append((k["link"], np.asarray(k["offset"], dtype=np.float64),
                          k.get("finger")))
    if len(keypoints) != 21:
        raise DataError(f"layout must define 21 keypoints, got {len(keypoints)}")
    total = sum(p.rows * p.cols for p in patches)
    if len(patches) != N_PATCHES or total != N_TAXELS:
        raise DataError(f"layout must define {N_PATCHES} patches / {N_TAXELS} taxels, "
                        f"got {len(patches)} / {total}")
    model.patches = patches
    model.keypoints = keypoints


# ---------------------------------------------------------------------
# forward kinematics and sampling
# ---------------------------------------------------------------------

def link_transforms(model: RobotHandModel, state: RobotState) -> dict[str, np.ndarray]:
    q_of = dict(zip(model.actuated, state.q))
    if len(state.q) != len(model.actuated):
        raise DataError(f"state has {len(state.q)} angles, model has "
                        f"{len(model.actuated)} actuated joints")
    for j in model.joints:
        if j.kind == "revolute":
            lo, hi = j.limits
            qj = q_of[j.name]
            if qj < lo - 1e-6 or qj > hi + 1e-6:
                raise DataError(f"joint {j.name!r}: angle {qj:.4f} outside "
                                f"[{lo:.4f}, {hi:.4f}]")
    base = np.eye(4)
    base[:3, :3] = _rodrigues(state.wrist_rot)
    base[:3, 3] = state.wrist_pos
    out = {model.root: base}
    by_parent: dict[str, list[Joint]] = {}
    for j in model.joints:
        by_parent.setdefault(j.parent, []).append(j)
    stack = [model.root]
    while stack:
        cur = stack.pop()
        for j in by_parent.get(cur, ()):
            T = out[cur] @ j.origin
            if j.kind == "revolute":
                R = np.eye(4)
                R[:3, :3] = _rodrigues(j.axis * q_of[j.name])
                T = T @ R
            out[j.child] = T
            stack.append(j.child)
    return out


def robot_keypoints(model: RobotHandModel, state: RobotState) -> np.ndarray:
    tf = link_transforms(model, state)
    pts = np.empty((len(model.keypoints), 3))
    for i, (link, off, _) in enumerate(model.keypoints):
        T = tf[link]
        pts[i] = T[:3, :3] @ off + T[:3, 3]
    return pts


def _largest_remainder(weights, total):
    exact = weights / weights.sum() * total
    counts = np.floor(exact).astype(int)
    rem = total - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def sample_surface(model: RobotHandModel, state: RobotState, n=4096, seed=0):
    """`n` points sampled area-uniformly across all link meshes (world frame)."""
    if n < 1:
        raise DataError(f"sample_surface: n must be >= 1, got {n}")
    tf = link_transforms(model, state)
    names = [nm for nm in model.links if len(model.links[nm].faces)]
    areas = []
    for nm in names:
        lk = model.links[nm]
        v = lk.vertices
        tri = v[lk.faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        areas.append(0.5 * np.linalg.norm(cross, axis=1))
    link_area = np.array([a.sum() for a in areas])
    per_link = _largest_remainder(link_area, n)
    rng = np.random.Generator(np.random.PCG64(seed))
    pts = []
    for nm, tri_area, count in zip(names, areas, per_link):
        if count == 0:
            continue
        lk = model.links[nm]
        per_tri = _largest_remainder(tri_area, count)
        tri = lk.vertices[lk.faces]
        for t_idx in np.nonzero(per_tri)[0]:
            k = per_tri[t_idx]
            r1 = np.sqrt(rng.random(k))
            r2 = rng.random(k)
            a, b, c = tri[t_idx]
            local = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
            T = tf[nm]
            pts.append(local @ T[:3, :3].T + T[:3, 3])
    return np.vstack(pts)


def taxel_world_quads(model: RobotHandModel, state: RobotState) -> np.ndarray:
    """(1062, 4, 3) cell-corner positions; patch declaration order, then
    row-major within each patch."""
    tf = link_transforms(model, state)
    quads = np.empty((model.n_taxels, 4, 3))
    i = 0
    for p in model.patches:
        T = tf[p.link]
        R, t = T[:3, :3], T[:3, 3]
        o = R @ p.origin + t
        u = R @ p.axis_u * p.pitch
        v = R @ p.axis_v * p.pitch
        for r in range(p.rows):
            for c in range(p.cols):
                base = o + c * u + r * v
                quads[i, 0] = base
                quads[i, 1] = base + u
                quads[i, 2] = base + u + v
                quads[i, 3] = base + v
                i += 1
    return quads


def taxel_finger_labels(model: RobotHandModel) -> list:
    """Per-taxel finger tag (or None), following the quad ordering."""
    out = []
    for p in model.patches:
        out.extend([p.finger] * (p.rows * p.cols))
    return out


# ---------------------------------------------------------------------
# shipped 6-DoF hand fixture
# ---------------------------------------------------------------------

_FINGERS = ("index", "middle", "ring", "pinky")
_FINGER_X = {"index": -0.033, "middle": -0.011, "ring": 0.011, "pinky": 0.033}


def default_hand_urdf() -> str:
    """Five fingers, 6 actuated joints (4 finger curls + 2 thumb), primitive
    geometry only. Dimensions roughly follow the canonical hand template so
    shape fitting and retargeting are well posed."""
    out = io.StringIO()
    out.write('<robot name="hand6">\n')
    out.write('  <link name="palm">\n'
              '    <visual><origin xyz="0 0.045 0"/>'
              '<geometry><box size="0.086 0.092 0.024"/></geometry></visual>\n'
              '  </link>\n')
    for f in _FINGERS:
        x = _FINGER_X[f]
        out.write(f'  <link name="{f}_prox">\n'
                  f'    <visual><geometry><cylinder radius="0.008 " length="0.038"/>'
                  f'</geometry></visual>\n  </link>\n')
        out.write(f'  <link name="{f}_dist">\n'
                  f'    <visual><geometry><cylinder radius="0.007" length="0.032"/>'
                  f'</geometry></visual>\n  </link>\n')
        out.write(f'  <joint name="{f}_mcp" type="revolute">\n'
                  f'    <parent link="palm"/><child link="{f}_prox"/>\n'
                  f'    <origin xyz="{x} 0.09 0"/><axis xyz="1 0 0"/>\n'
                  f'    <limit lower="-1.65" upper="0.2"/>\n'
                  f'  </joint>\n')
        out.write(f'  <joint name="{f}_distal" type="fixed">\n'
                  f'    <parent link="{f}_prox"/><child link="{f}_dist"/>\n'
                  f'    <origin xyz="0 0.038 0" rpy="-0.15 0 0"/>\n'
                  f'  </joint>\n')
    out.write('  <link name="thumb_meta">\n'
              '    <visual><geometry><cylinder radius="0.010" length="0.024"/>'
              '</geometry></visual>\n  </link>\n'
              '  <link name="thumb_prox">\n'
              '    <visual><geometry><cylinder radius="0.009" length="0.034"/>'
              '</geometry></visual>\n  </link>\n'
              '  <link name="thumb_dist">\n'
              '    <visual><geometry><cylinder radius="0.008" length="0.028"/>'
              '</geometry></visual>\n  </link>\n')
    out.write('  <joint name="thumb_abd" type="revolute">\n'
              '    <parent link="palm"/><child link="thumb_meta"/>\n'
              '    <origin xyz="-0.048 0.026 0" rpy="0 0 0.62"/><axis xyz="0 0 1"/>\n'
              '    <limit lower="-0.4" upper="1.3"/>\n'
              '  </joint>\n'
              '  <joint name="thumb_mcp" type="revolute">\n'
              '    <parent link="thumb_meta"/><child link="thumb_prox"/>\n'
              '    <origin xyz="0 0.024 0" rpy="0 0.25 0"/><axis xyz="1 0 0"/>\n'
              '    <limit lower="-1.65" upper="0.2"/>\n'
              '  </joint>\n'
              '  <joint name="thumb_distal" type="fixed">\n'
              '    <parent link="thumb_prox"/><child link="thumb_dist"/>\n'
              '    <origin xyz="0 0.034 0" rpy="-0.1 0 0"/>\n'
              '  </joint>\n')
    out.write('</robot>\n')
    return out.getvalue()


def default_hand_layout() -> dict:
    """17 patches / 1062 taxels built only from the supported grid classes:
    6 x (3x3) + 6 x (12x8) + 4 x (10x8) + 1 x (8x14) = 1062."""
    patches = []

    def pad(name, link, rows, cols, origin, pitch, finger):
        patches.append({"name": name, "link": link, "rows": rows, "cols": cols,
                        "origin": list(origin), "axis_u": [1.0, 0.0, 0.0],
                        "axis_v": [0.0, 1.0, 0.0], "pitch": pitch,
                        "finger": finger})

    for f in _FINGERS:
        pad(f"{f}_tip", f"{f}_dist", 3, 3, (-0.0033, 0.022, -0.0075), 0.0022, f)
        pad(f"{f}_mid", f"{f}_dist", 10, 8, (-0.0088, 0.000, -0.0075), 0.0022, f)
        pad(f"{f}_prox", f"{f}_prox", 12, 8, (-0.0098, 0.004, -0.0085), 0.0024, f)
    pad("thumb_tip", "thumb_dist", 3, 3, (-0.0033, 0.018, -0.008), 0.0022, "thumb")
    pad("thumb_prox", "thumb_prox", 12, 8, (-0.0098, 0.002, -0.009), 0.0024, "thumb")
    pad("thumb_base", "thumb_meta", 3, 3, (-0.0033, 0.008, -0.0095), 0.0022, "thumb")
    pad("palm_main", "palm", 8, 14, (-0.035, 0.030, -0.0125), 0.005, None)
    pad("palm_heel", "palm", 12, 8, (-0.012, 0.002, -0.0125), 0.0024, None)
    assert len(patches) == N_PATCHES
    assert sum(p["rows"] * p["cols"] for p in patches) == N_TAXELS

    keypoints = [{"link": "palm", "offset": [0.0, 0.004, 0.0], "finger": None}]
    thumb_chain = (("thumb_meta", 0.0), ("thumb_prox", 0.0), ("thumb_prox", 0.024),
                   ("thumb_dist", 0.028))
    for link, y in thumb_chain:
        keypoints.append({"link": link, "offset": [0.0, y, 0.0], "finger": "thumb"})
    for f in _FINGERS:
        chain = ((f"{f}_prox", 0.0), (f"{f}_prox", 0.026), (f"{f}_dist", 0.008),
                 (f"{f}_dist", 0.032))
        for link, y in chain:
            keypoints.append({"link": link, "offset": [0.0, y, 0.0], "finger": f})
    assert len(keypoints) == 21
    return {"patches": patches, "keypoints": keypoints}


def default_hand() -> RobotHandModel:
    return parse_urdf(default_hand_urdf(), default_hand_layout())
