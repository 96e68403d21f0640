"""Point-cloud and mesh primitives.

Meshes come in via OFF / ASCII-OBJ parsing or via the procedural box-composite
shape families used by the synthetic benchmark.  Point clouds are plain
(N, 3) float64 arrays; every training or ground-truth cloud lives in the
canonical frame produced by :func:`normalize_cloud` (centroid at the origin,
furthest point at distance 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshParseError(ValueError):
    """Raised when a mesh file cannot be parsed; message carries the line number."""


class DegenerateCloudError(ValueError):
    """Raised when a point cloud has no usable extent (all points coincident)."""


class ShapeParamError(ValueError):
    """Raised when shape-family parameters fall outside their declared ranges."""


# ---------------------------------------------------------------------------
# mesh type


@dataclass(frozen=True)
class TriMesh:
    """Triangle mesh: (V, 3) float64 vertices, (F, 3) int64 vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {v.shape}")
        if f.size == 0:
            raise MeshParseError("mesh has no faces")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {f.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite vertex coordinates")
        if f.min() < 0 or f.max() >= len(v):
            bad = int(np.argwhere((f < 0) | (f >= len(v)))[0, 0])
            raise MeshParseError(f"face {bad} references vertex index out of range")
        same = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if same.any():
            raise MeshParseError(f"face {int(np.argwhere(same)[0, 0])} has repeated vertex indices")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if face_areas(self).max() <= 0.0:
            raise MeshParseError("mesh has no face with nonzero area")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


def face_areas(mesh: TriMesh) -> np.ndarray:
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


# ---------------------------------------------------------------------------
# mesh parsing


def _fan_triangulate(idx: list[int]) -> list[tuple[int, int, int]]:
    return [(idx[0], idx[i], idx[i + 1]) for i in range(1, len(idx) - 1)]


def _parse_off(lines: list[str], path: str) -> TriMesh:
    # strip comments / blanks, keeping original line numbers for errors
    rows = [(i + 1, ln.split("#", 1)[0].strip()) for i, ln in enumerate(lines)]
    rows = [(n, ln) for n, ln in rows if ln]
    if not rows:
        raise MeshParseError(f"{path}: empty OFF file")
    n0, head = rows[0]
    if head != "OFF":
        # allow the single-line "OFF V F E" header variant
        if head.startswith("OFF"):
            rows[0] = (n0, head[3:].strip())
        else:
            raise MeshParseError(f"{path}:{n0}: expected OFF header")
    else:
        rows = rows[1:]
    if not rows:
        raise MeshParseError(f"{path}: missing OFF count line")
    n_line, counts = rows[0]
    try:
        nv, nf = [int(t) for t in counts.split()[:2]]
    except ValueError as e:
        raise MeshParseError(f"{path}:{n_line}: bad count line {counts!r}") from e
    body = rows[1:]
    if len(body) < nv + nf:
        raise MeshParseError(f"{path}:{n_line}: declared {nv} vertices / {nf} faces, file too short")
    verts = np.empty((nv, 3), dtype=np.float64)
    for i in range(nv):
        n, ln = body[i]
        try:
            verts[i] = [float(t) for t in ln.split()[:3]]
        except ValueError as e:
            raise MeshParseError(f"{path}:{n}: bad vertex line {ln!r}") from e
    faces: list[tuple[int, int, int]] = []
    for i in range(nf):
        n, ln = body[nv + i]
        toks = ln.split()
        try:
            cnt = int(toks[0])
            idx = [int(t) for t in toks[1 : 1 + cnt]]
        except (ValueError, IndexError) as e:
            raise MeshParseError(f"{path}:{n}: bad face line {ln!r}") from e
        if cnt < 3 or len(idx) != cnt:
            raise MeshParseError(f"{path}:{n}: face needs >= 3 indices")
        faces.extend(_fan_triangulate(idx))
    try:
        return TriMesh(verts, np.array(faces, dtype=np.int64))
    except MeshParseError as e:
        raise MeshParseError(f"{path}: {e}") from e


def _parse_obj(lines: list[str], path: str, triangulate_quads: bool) -> TriMesh:
    verts: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    for lineno, raw in enumerate(lines, start=1):
        ln = raw.split("#", 1)[0].strip()
        if not ln:
            continue
        toks = ln.split()
        if toks[0] == "v":
            try:
                verts.append([float(t) for t in toks[1:4]])
            except ValueError as e:
                raise MeshParseError(f"{path}:{lineno}: bad vertex line {ln!r}") from e
        elif toks[0] == "f":
            idx = []
            for t in toks[1:]:
                try:
                    vi = int(t.split("/", 1)[0])
                except ValueError as e:
                    raise MeshParseError(f"{path}:{lineno}: bad face token {t!r}") from e
                if vi < 0:
                    raise MeshParseError(f"{path}:{lineno}: negative OBJ indices unsupported")
                idx.append(vi - 1)
            if len(idx) < 3:
                raise MeshParseError(f"{path}:{lineno}: face needs >= 3 indices")
            if len(idx) > 3 and not triangulate_quads:
                raise MeshParseError(f"{path}:{lineno}: non-triangular face (triangulation disabled)")
            faces.extend(_fan_triangulate(idx))
        # other directives (vn, vt, o, g, usemtl, ...) ignored
    if not verts:
        raise MeshParseError(f"{path}: no vertices")
    try:
        return TriMesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64))
    except MeshParseError as e:
        raise MeshParseError(f"{path}: {e}") from e


def load_mesh(path: str | Path, triangulate_quads: bool = True) -> TriMesh:
    """Parse an OFF or ASCII-OBJ file.

    Polygonal faces are fan-triangulated by default; pass
    ``triangulate_quads=False`` to reject non-triangles instead.
    """
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    head = ""
    for ln in lines:
        s = ln.split("#", 1)[0].strip()
        if s:
            head = s
            break
    if head.startswith("OFF"):
        return _parse_off(lines, str(path))
    return _parse_obj(lines, str(path), triangulate_quads)


def save_off(path: str | Path, mesh: TriMesh) -> None:
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_faces} 0\n")
        for v in mesh.vertices:
            fh.write("%.9g %.9g %.9g\n" % (v[0], v[1], v[2]))
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# ---------------------------------------------------------------------------
# sampling and normalization


def sample_surface(mesh: TriMesh, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` points area-uniformly from the mesh surface.

    Faces are chosen proportionally to area; positions within a face are
    barycentric-uniform (square-root warp).  Deterministic given ``seed``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = face_areas(mesh)
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("mesh has zero total surface area")
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(mesh.n_faces, size=n, p=areas / total)
    a = mesh.vertices[mesh.faces[face_idx, 0]]
    b = mesh.vertices[mesh.faces[face_idx, 1]]
    c = mesh.vertices[mesh.faces[face_idx, 2]]
    su = np.sqrt(rng.random(n))[:, None]
    v = rng.random(n)[:, None]
    return (1.0 - su) * a + su * (1.0 - v) * b + su * v * c


def normalize_cloud(points: np.ndarray) -> np.ndarray:
    """Map a cloud to the canonical frame: centroid at origin, max norm 1."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
        raise ValueError(f"expected (N, 3) cloud, got {pts.shape}")
    centered = pts - pts.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius < 1e-12:
        raise DegenerateCloudError("all points coincident")
    return centered / radius


# ---------------------------------------------------------------------------
# cloud file formats (ASCII XYZ and ASCII PLY, 9 significant digits)


def save_xyz(path: str | Path, points: np.ndarray) -> None:
    with open(path, "w") as fh:
        for p in np.asarray(points, dtype=np.float64):
            fh.write("%.9g %.9g %.9g\n" % (p[0], p[1], p[2]))


def load_xyz(path: str | Path) -> np.ndarray:
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if pts.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 columns, got {pts.shape[1]}")
    return pts


def save_ply(path: str | Path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write("end_header\n")
        for p in pts:
            fh.write("%.9g %.9g %.9g\n" % (p[0], p[1], p[2]))


def load_ply(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    body_at = None
    for i, ln in enumerate(lines[1:], start=1):
        toks = ln.split()
        if toks[:2] == ["element", "vertex"]:
            n = int(toks[2])
        elif toks and toks[0] == "end_header":
            body_at = i + 1
            break
    if n is None or body_at is None:
        raise ValueError(f"{path}: malformed PLY header")
    pts = np.array(
        [[float(t) for t in lines[body_at + i].split()[:3]] for i in range(n)],
        dtype=np.float64,
    )
    return pts.reshape(n, 3)


# ---------------------------------------------------------------------------
# procedural shape families (box composites)
#
# All families are pure functions of (family, params); randomness only
# drives parameter sampling.  Box counts: box-table = 6 (top, apron, 4 legs),
# slat-chair = 6 (seat, back, 4 legs), sofa-block = 4 (base, back, 2 arms).

FAMILY_NAMES = ("box-table", "slat-chair", "sofa-block")

_DEFAULT_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "box-table": {
        "top_w": (0.8, 1.6),
        "top_d": (0.6, 1.2),
        "top_t": (0.04, 0.10),
        "height": (0.6, 1.0),
        "leg_t": (0.05, 0.12),
        "apron_drop": (0.06, 0.16),
    },
    "slat-chair": {
        "seat_w": (0.40, 0.70),
        "seat_d": (0.40, 0.65),
        "seat_h": (0.35, 0.55),
        "seat_t": (0.04, 0.09),
        "back_h": (0.35, 0.80),
        "back_t": (0.04, 0.09),
        "leg_t": (0.04, 0.09),
    },
    "sofa-block": {
        "width": (1.2, 2.2),
        "depth": (0.7, 1.1),
        "seat_h": (0.30, 0.50),
        "back_h": (0.30, 0.60),
        "arm_w": (0.10, 0.25),
        "arm_h": (0.10, 0.30),
    },
}


@dataclass(frozen=True)
class ShapeFamilySpec:
    """A parametric family of box-composite furniture shapes."""

    family: str
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILY_NAMES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILY_NAMES}")
        merged = dict(_DEFAULT_RANGES[self.family])
        for k, (lo, hi) in self.ranges.items():
            if k not in merged:
                raise ValueError(f"unknown parameter {k!r} for family {self.family}")
            if not (lo <= hi):
                raise ValueError(f"empty interval for {k!r}: ({lo}, {hi})")
            merged[k] = (float(lo), float(hi))
        object.__setattr__(self, "ranges", merged)

    @property
    def param_names(self) -> list[str]:
        return list(self.ranges)

    def midpoint_params(self) -> np.ndarray:
        return np.array([(lo + hi) / 2.0 for lo, hi in self.ranges.values()])


def sample_params(spec: ShapeFamilySpec, rng: np.random.Generator) -> np.ndarray:
    lo = np.array([r[0] for r in spec.ranges.values()])
    hi = np.array([r[1] for r in spec.ranges.values()])
    return lo + rng.random(len(lo)) * (hi - lo)


def _box(cx, cy, cz, sx, sy, sz):
    """Axis-aligned box: center (cx,cy,cz), full sizes (sx,sy,sz). 8 verts, 12 tris."""
    hx, hy, hz = sx / 2.0, sy / 2.0, sz / 2.0
    signs = np.array(
        [[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
         [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]],
        dtype=np.float64,
    )
    verts = signs * [hx, hy, hz] + [cx, cy, cz]
    faces = np.array(
        [[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
         [0, 1, 5], [0, 5, 4], [2, 3, 7], [2, 7, 6],
         [1, 2, 6], [1, 6, 5], [3, 0, 4], [3, 4, 7]],
        dtype=np.int64,
    )
    return verts, faces


def _assemble(boxes) -> TriMesh:
    verts, faces, off = [], [], 0
    for v, f in boxes:
        verts.append(v)
        faces.append(f + off)
        off += len(v)
    return TriMesh(np.vstack(verts), np.vstack(faces))


def generate_shape(spec: ShapeFamilySpec, params: np.ndarray) -> TriMesh:
    """Build the box-composite mesh for ``params``.  Pure in (family, params).

    z is up; the ground plane is z = 0.
    """
    params = np.asarray(params, dtype=np.float64)
    names = spec.param_names
    if params.shape != (len(names),):
        raise ShapeParamError(f"expected {len(names)} parameters, got shape {params.shape}")
    p = dict(zip(names, params))
    for k, (lo, hi) in spec.ranges.items():
        if not (lo <= p[k] <= hi):
            raise ShapeParamError(f"parameter {k}={p[k]:.6g} outside [{lo}, {hi}]")

    if spec.family == "box-table":
        w, d, t, h = p["top_w"], p["top_d"], p["top_t"], p["height"]
        lt, drop = p["leg_t"], p["apron_drop"]
        boxes = [
            _box(0, 0, h - t / 2, w, d, t),                      # top slab
            _box(0, 0, h - t - drop / 2, w - 2 * lt, d - 2 * lt, drop),  # apron
        ]
        leg_h = h - t
        for sx in (-1, 1):
            for sy in (-1, 1):
                boxes.append(_box(sx * (w - lt) / 2, sy * (d - lt) / 2, leg_h / 2, lt, lt, leg_h))
        return _assemble(boxes)

    if spec.family == "slat-chair":
        w, d, h, t = p["seat_w"], p["seat_d"], p["seat_h"], p["seat_t"]
        bh, bt, lt = p["back_h"], p["back_t"], p["leg_t"]
        boxes = [
            _box(0, 0, h - t / 2, w, d, t),                           # seat
            _box(0, -(d - bt) / 2, h + bh / 2, w, bt, bh),            # back
        ]
        leg_h = h - t
        for sx in (-1, 1):
            for sy in (-1, 1):
                boxes.append(_box(sx * (w - lt) / 2, sy * (d - lt) / 2, leg_h / 2, lt, lt, leg_h))
        return _assemble(boxes)

    # sofa-block
    w, d, sh = p["width"], p["depth"], p["seat_h"]
    bh, aw, ah = p["back_h"], p["arm_w"], p["arm_h"]
    boxes = [
        _box(0, 0, sh / 2, w, d, sh),                              # base
        _box(0, -(d - 0.2 * d) / 2, sh + bh / 2, w, 0.2 * d, bh),  # back
        _box(-(w - aw) / 2, 0, sh + ah / 2, aw, d, ah),            # arms
        _box((w - aw) / 2, 0, sh + ah / 2, aw, d, ah),
    ]
    return _assemble(boxes)
