"""Triangle meshes: validation, ASCII PLY/OBJ I/O, primitives, surface sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Malformed mesh file or mesh violating an invariant."""


class MeshParseError(MeshError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


class MeshInvariantError(MeshError):
    def __init__(self, invariant: str, detail: str = ""):
        super().__init__(f"mesh invariant violated: {invariant}" + (f" ({detail})" if detail else ""))
        self.invariant = invariant


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        V = np.array(self.vertices, dtype=np.float64)
        F = np.array(self.triangles, dtype=np.int64)
        if V.ndim != 2 or V.shape[1] != 3:
            raise MeshInvariantError("vertices are 3-vectors", f"shape {V.shape}")
        if F.ndim != 2 or F.shape[1] != 3:
            if F.size == 0:
                F = F.reshape(0, 3)
            else:
                raise MeshInvariantError("triangles are index triples", f"shape {F.shape}")
        if len(V) < 3:
            raise MeshInvariantError("vertex count >= 3", f"got {len(V)}")
        if len(F) < 1:
            raise MeshInvariantError("triangle count >= 1", "got 0")
        if not np.isfinite(V).all():
            raise MeshInvariantError("finite vertex coordinates")
        if F.min() < 0 or F.max() >= len(V):
            raise MeshInvariantError(
                "triangle indices < vertex count",
                f"index range [{F.min()}, {F.max()}] with {len(V)} vertices",
            )
        V.setflags(write=False)
        F.setflags(write=False)
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "triangles", F)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def diameter(self) -> float:
        """Max pairwise vertex distance."""
        from scipy.spatial.distance import pdist

        V = self.vertices
        if len(V) > 3000:
            from scipy.spatial import ConvexHull

            V = V[ConvexHull(V).vertices]
        return float(pdist(V).max())

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def scaled(self, s: float) -> "TriangleMesh":
        return TriangleMesh(self.vertices * s, self.triangles)

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.triangles)


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface, (n, 3)."""
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise MeshError("cannot sample a mesh with zero surface area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


# ---------------------------------------------------------------- file I/O


def _fan(poly: list[int]) -> list[tuple[int, int, int]]:
    return [(poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]


def _parse_float(tok: str, path, line_no: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise MeshParseError(path, line_no, f"expected a number, got {tok!r}") from None


def _load_obj(path: Path) -> TriangleMesh:
    verts, tris = [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshParseError(path, line_no, "vertex needs 3 coordinates")
                verts.append([_parse_float(p, path, line_no) for p in parts[1:4]])
            elif tag == "f":
                if len(parts) < 4:
                    raise MeshParseError(path, line_no, "face needs at least 3 vertices")
                poly = []
                for tok in parts[1:]:
                    head = tok.split("/", 1)[0]
                    try:
                        idx = int(head)
                    except ValueError:
                        raise MeshParseError(path, line_no, f"bad face index {tok!r}") from None
                    if idx == 0:
                        raise MeshParseError(path, line_no, "OBJ indices are 1-based; got 0")
                    # negative indices are relative to the vertices read so far
                    poly.append(idx - 1 if idx > 0 else len(verts) + idx)
                tris.extend(_fan(poly))
            # vn, vt, o, g, s, usemtl, mtllib: ignored
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))


def _load_ply(path: Path) -> TriangleMesh:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshParseError(path, 1, "missing 'ply' magic")
    elements: list[list] = []  # [name, count, [props]]
    line_no = 1
    fmt = None
    while True:
        line_no += 1
        if line_no > len(lines):
            raise MeshParseError(path, line_no - 1, "header not terminated by end_header")
        parts = lines[line_no - 1].split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else None
            if fmt != "ascii":
                raise MeshParseError(path, line_no, f"only ASCII PLY is supported, got {fmt!r}")
        elif parts[0] == "element":
            if len(parts) != 3:
                raise MeshParseError(path, line_no, "malformed element line")
            try:
                elements.append([parts[1], int(parts[2]), []])
            except ValueError:
                raise MeshParseError(path, line_no, f"bad element count {parts[2]!r}") from None
        elif parts[0] == "property":
            if not elements:
                raise MeshParseError(path, line_no, "property before any element")
            elements[-1][2].append(parts[1:])
        elif parts[0] == "end_header":
            break
        else:
            raise MeshParseError(path, line_no, f"unexpected header keyword {parts[0]!r}")
    if fmt is None:
        raise MeshParseError(path, line_no, "missing format line")

    verts, tris = [], []
    cursor = line_no
    for name, count, props in elements:
        for _ in range(count):
            cursor += 1
            while cursor <= len(lines) and not lines[cursor - 1].strip():
                cursor += 1
            if cursor > len(lines):
                raise MeshParseError(path, cursor, f"unexpected end of file in element {name!r}")
            toks = lines[cursor - 1].split()
            if name == "vertex":
                names = [p[-1] for p in props]
                try:
                    ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
                except ValueError:
                    raise MeshParseError(path, cursor, "vertex element lacks x/y/z") from None
                if len(toks) < len(props):
                    raise MeshParseError(path, cursor, "too few vertex properties")
                verts.append([_parse_float(toks[i], path, cursor) for i in (ix, iy, iz)])
            elif name == "face":
                try:
                    n = int(toks[0])
                    poly = [int(t) for t in toks[1 : 1 + n]]
                except (ValueError, IndexError):
                    raise MeshParseError(path, cursor, "malformed face record") from None
                if n < 3 or len(poly) != n:
                    raise MeshParseError(path, cursor, f"face declares {n} indices")
                tris.extend(_fan(poly))
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))


def load_mesh(path) -> TriangleMesh:
    """Read an ASCII PLY or OBJ file. Polygons are fan-triangulated from their first vertex."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _load_obj(path)
    if suffix == ".ply":
        return _load_ply(path)
    raise MeshError(f"unsupported mesh format {suffix!r} (expected .ply or .obj)")


def save_mesh(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    # repr() round-trips float64 exactly
    if suffix == ".obj":
        lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    elif suffix == ".ply":
        lines = [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(mesh.vertices)}",
            "property double x",
            "property double y",
            "property double z",
            f"element face {len(mesh.triangles)}",
            "property list uchar int vertex_indices",
            "end_header",
        ]
        lines += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
        lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    else:
        raise MeshError(f"unsupported mesh format {suffix!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- primitives

_BOX_FACES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # z = lo
        [4, 5, 6], [4, 6, 7],  # z = hi
        [0, 1, 5], [0, 5, 4],  # y = lo
        [3, 7, 6], [3, 6, 2],  # y = hi
        [0, 4, 7], [0, 7, 3],  # x = lo
        [1, 2, 6], [1, 6, 5],  # x = hi
    ]
)


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriangleMesh:
    """Axis-aligned box, 8 vertices and 12 outward-wound triangles."""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    V = np.array(
        [
            [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
            [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
        ],
        dtype=np.float64,
    )
    return TriangleMesh(V, _BOX_FACES)


def cube_mesh(edge: float) -> TriangleMesh:
    h = edge / 2.0
    return box_mesh((-h, -h, -h), (h, h, h))


def merge_meshes(meshes) -> TriangleMesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    return TriangleMesh(np.vstack(verts), np.vstack(tris))


def tool_mesh() -> TriangleMesh:
    """Asymmetric gripper-like test object (~60 mm long), centred near its origin.

    A jaw body with two unequal prongs and an off-axis stub, so no
    non-trivial rotation maps it onto itself.
    """
    parts = [
        box_mesh((-30.0, -6.0, -5.0), (10.0, 6.0, 5.0)),   # body
        box_mesh((10.0, 1.0, -3.0), (30.0, 6.0, 3.0)),     # long prong
        box_mesh((10.0, -6.0, -2.0), (20.0, -2.0, 4.0)),   # short prong, offset in z
        box_mesh((-22.0, 6.0, -5.0), (-14.0, 16.0, 1.0)),  # side stub
    ]
    return merge_meshes(parts)


def plate_mesh(size: float = 30.0, thickness: float = 4.0) -> TriangleMesh:
    """Square slab, a convenient occluder."""
    h, t = size / 2.0, thickness / 2.0
    return box_mesh((-h, -h, -t), (h, h, t))


BUILTIN_MESHES = {
    "tool": tool_mesh,
    "cube20": lambda: cube_mesh(20.0),
    "plate": plate_mesh,
}


def resolve_mesh(source: str) -> TriangleMesh:
    """Load `source` from disk, or build it when given as ``builtin:<name>``."""
    if source.startswith("builtin:"):
        name = source.split(":", 1)[1]
        if name not in BUILTIN_MESHES:
            raise MeshError(f"unknown builtin mesh {name!r}; choose from {sorted(BUILTIN_MESHES)}")
        return BUILTIN_MESHES[name]()
    return load_mesh(source)
