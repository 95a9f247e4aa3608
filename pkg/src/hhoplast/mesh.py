"""Polygonal / polyhedral meshes with planar faces.

Cells in 2D are stored as counter-clockwise vertex loops; every consecutive
pair of loop vertices is a face.  A cell obtained by merging two quads keeps
the end points of the removed edge in its loop, so hanging nodes need no
special treatment: the merged cell simply owns more faces than it has
geometric sides.  Cells in 3D are sets of planar polygonal faces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class MeshError(ValueError):
    """Raised for invalid mesh input (degenerate boxes, broken topology...)."""


@dataclass(frozen=True)
class Face:
    vertex_ids: tuple[int, ...]
    points: np.ndarray
    centroid: np.ndarray
    normal: np.ndarray
    measure: float
    diameter: float
    cells: tuple[int, ...]
    tag: str | None = None

    @property
    def is_boundary(self) -> bool:
        return len(self.cells) == 1

    @property
    def tangents(self) -> np.ndarray:
        """Orthonormal in-plane frame, shape (d-1, d)."""
        return _face_frame(self.points, self.normal)


@dataclass(frozen=True)
class Cell:
    vertex_ids: tuple[int, ...]
    face_ids: tuple[int, ...]
    face_signs: tuple[int, ...]
    kind: str
    centroid: np.ndarray
    volume: float
    diameter: float
    points: np.ndarray
    # sub-simplices (ns, d+1, d) tiling the cell, used by the quadrature
    simplices: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class Mesh:
    dimension: int
    vertices: np.ndarray
    cells: tuple[Cell, ...]
    faces: tuple[Face, ...]
    # 2D: per-cell vertex loops; 3D: per-cell element connectivity
    connectivity: tuple[tuple[int, ...], ...] = field(repr=False)
    element_kind: str = "polygon"

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def boundary_tags(self) -> dict[int, str]:
        return {i: f.tag for i, f in enumerate(self.faces) if f.tag is not None}

    def faces_with_tag(self, tag: str) -> list[int]:
        return [i for i, f in enumerate(self.faces) if f.tag == tag]

    def boundary_faces(self) -> list[int]:
        return [i for i, f in enumerate(self.faces) if f.is_boundary]

    def outward_normals(self, cell_id: int) -> np.ndarray:
        c = self.cells[cell_id]
        return np.array([s * self.faces[f].normal for f, s in zip(c.face_ids, c.face_signs)])

    def retag(self, tagger: Callable[[Face], str | None]) -> "Mesh":
        """Return a copy whose boundary faces are tagged by ``tagger(face)``."""
        faces = tuple(
            _replace_tag(f, tagger(f) if f.is_boundary else None) for f in self.faces
        )
        return Mesh(self.dimension, self.vertices, self.cells, faces, self.connectivity,
                    self.element_kind)

    def transformed(self, mapping: Callable[[np.ndarray], np.ndarray]) -> "Mesh":
        """Apply ``mapping`` to the vertex coordinates, keeping topology and tags."""
        new_vertices = np.asarray(mapping(self.vertices.copy()), dtype=float)
        if new_vertices.shape != self.vertices.shape:
            raise MeshError("vertex mapping must preserve the coordinate array shape")
        tags = _tags_by_key(self)
        if self.dimension == 2:
            return mesh_from_polygons(new_vertices, self.connectivity, tags=tags)
        return mesh_from_elements(new_vertices, self.connectivity, self.element_kind, tags=tags)


def _replace_tag(face: Face, tag: str | None) -> Face:
    return Face(face.vertex_ids, face.points, face.centroid, face.normal, face.measure,
                face.diameter, face.cells, tag)


def _tags_by_key(mesh: Mesh) -> dict[tuple[int, ...], str]:
    return {tuple(sorted(f.vertex_ids)): f.tag for f in mesh.faces if f.tag is not None}


def _face_frame(points: np.ndarray, normal: np.ndarray) -> np.ndarray:
    d = points.shape[1]
    if d == 2:
        return np.array([[-normal[1], normal[0]]])
    t1 = points[1] - points[0]
    t1 = t1 - np.dot(t1, normal) * normal
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(normal, t1)
    return np.array([t1, t2])


def _diameter(points: np.ndarray) -> float:
    diff = points[:, None, :] - points[None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1)).max())


def polygon_area_centroid(points: np.ndarray) -> tuple[float, np.ndarray]:
    """Signed area (positive for counter-clockwise loops) and area centroid."""
    x, y = points[:, 0], points[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    if area == 0.0:
        return 0.0, points.mean(axis=0)
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return float(area), np.array([cx, cy])


def _is_simple_polygon(points: np.ndarray) -> bool:
    n = len(points)
    for i in range(n):
        a, b = points[i], points[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            c, e = points[j], points[(j + 1) % n]
            if _segments_cross(a, b, c, e):
                return False
    return True


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _segments_cross(a, b, c, d) -> bool:
    o1, o2 = _orient(a, b, c), _orient(a, b, d)
    o3, o4 = _orient(c, d, a), _orient(c, d, b)
    return (o1 * o2 < 0) and (o3 * o4 < 0)


def star_center(points: np.ndarray, centroid: np.ndarray) -> np.ndarray | None:
    """Point from which the fan sub-triangulation has only positive triangles.

    Tries the area centroid first, then the vertex average and a sweep of
    interior candidates.  Returns None when no candidate works.
    """
    def fan_ok(p):
        q = np.roll(points, -1, axis=0)
        areas = (points[:, 0] - p[0]) * (q[:, 1] - p[1]) - (q[:, 0] - p[0]) * (points[:, 1] - p[1])
        scale = _diameter(points) ** 2
        return bool(np.all(areas > 1e-12 * scale))

    candidates = [centroid, points.mean(axis=0)]
    n = len(points)
    for i in range(n):
        for t in (0.25, 0.5, 0.75):
            candidates.append((1 - t) * centroid + t * 0.5 * (points[i] + points[(i + 1) % n]))
            candidates.append((1 - t) * centroid + t * points[i])
    for p in candidates:
        if fan_ok(p):
            return np.asarray(p, dtype=float)
    return None


def _polygon_cell(vertices: np.ndarray, loop: Sequence[int], cell_id: int) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    pts = vertices[list(loop)]
    if len(set(loop)) != len(loop) or len(loop) < 3:
        raise MeshError(f"cell {cell_id}: degenerate vertex loop {tuple(loop)}")
    area, centroid = polygon_area_centroid(pts)
    if area <= 0.0:
        raise MeshError(f"cell {cell_id}: non-positive area ({area:.3e}); loop must be counter-clockwise")
    if len(loop) > 3 and not _is_simple_polygon(pts):
        raise MeshError(f"cell {cell_id}: self-intersecting vertex loop {tuple(loop)}")
    if len(loop) == 3:
        simplices = pts[None, :, :].copy()
    else:
        center = star_center(pts, centroid)
        if center is None:
            raise MeshError(f"cell {cell_id}: no interior point admits a positive fan sub-triangulation")
        nxt = np.roll(pts, -1, axis=0)
        simplices = np.stack([np.broadcast_to(center, pts.shape), pts, nxt], axis=1)
    return pts, area, centroid, simplices


def mesh_from_polygons(
    vertices: np.ndarray,
    loops: Iterable[Sequence[int]],
    tags: Mapping[tuple[int, ...], str] | None = None,
) -> Mesh:
    """Build a 2D mesh from counter-clockwise vertex loops.

    ``tags`` maps sorted vertex-id pairs of boundary edges to a tag name.
    """
    vertices = np.asarray(vertices, dtype=float)
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshError("2D meshes need an (n, 2) vertex array")
    loops = tuple(tuple(int(v) for v in loop) for loop in loops)
    nv = len(vertices)
    face_index: dict[tuple[int, int], int] = {}
    face_verts: list[tuple[int, int]] = []
    face_cells: list[list[int]] = []
    cell_faces: list[tuple[list[int], list[int]]] = []
    for cid, loop in enumerate(loops):
        bad = [v for v in loop if v < 0 or v >= nv]
        if bad:
            raise MeshError(f"cell {cid}: unknown vertex ids {bad}")
        fids, signs = [], []
        for i, a in enumerate(loop):
            b = loop[(i + 1) % len(loop)]
            key = (min(a, b), max(a, b))
            fid = face_index.get(key)
            if fid is None:
                fid = len(face_verts)
                face_index[key] = fid
                face_verts.append((a, b))
                face_cells.append([])
                signs.append(1)
            else:
                if face_verts[fid] == (a, b):
                    raise MeshError(f"cell {cid}: edge {key} traversed in the same direction as in cell {face_cells[fid][0]} (inverted or overlapping cell)")
                signs.append(-1)
            if len(face_cells[fid]) >= 2:
                raise MeshError(f"cell {cid}: edge {key} shared by more than two cells")
            face_cells[fid].append(cid)
            fids.append(fid)
        cell_faces.append((fids, signs))

    tags = dict(tags or {})
    faces = []
    for fid, (a, b) in enumerate(face_verts):
        pts = vertices[[a, b]]
        t = pts[1] - pts[0]
        length = float(np.linalg.norm(t))
        if length == 0.0:
            raise MeshError(f"face {fid}: zero length")
        normal = np.array([t[1], -t[0]]) / length
        cells = tuple(face_cells[fid])
        tag = tags.get((min(a, b), max(a, b))) if len(cells) == 1 else None
        faces.append(Face((a, b), pts, pts.mean(axis=0), normal, length, length, cells, tag))

    cells = []
    for cid, loop in enumerate(loops):
        pts, area, centroid, simplices = _polygon_cell(vertices, loop, cid)
        kind = {3: "triangle", 4: "quad"}.get(len(loop), "polygon")
        fids, signs = cell_faces[cid]
        cells.append(Cell(loop, tuple(fids), tuple(signs), kind, centroid, area,
                          _diameter(pts), pts, simplices))
    return Mesh(2, vertices, tuple(cells), tuple(faces), loops, "polygon")


# local faces of 3D reference elements, oriented outward for positively oriented elements
_TET_FACES = ((1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1))
_HEX_FACES = ((0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4), (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7))


def _tet_volume(p: np.ndarray) -> float:
    return float(np.linalg.det(np.array([p[1] - p[0], p[2] - p[0], p[3] - p[0]])) / 6.0)


def _polygon3d(points: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    """Unit normal (right-hand rule), area and centroid of a planar 3D polygon."""
    c0 = points.mean(axis=0)
    nxt = np.roll(points, -1, axis=0)
    cr = np.cross(points - c0, nxt - c0)
    vec = 0.5 * cr.sum(axis=0)
    area = float(np.linalg.norm(vec))
    if area == 0.0:
        return np.zeros(3), 0.0, c0
    tri_area = 0.5 * cr @ (vec / area)
    tri_cent = (points + nxt + c0) / 3.0
    centroid = (tri_area[:, None] * tri_cent).sum(axis=0) / tri_area.sum()
    return vec / area, area, centroid


def mesh_from_elements(
    vertices: np.ndarray,
    elements: Iterable[Sequence[int]],
    kind: str,
    tags: Mapping[tuple[int, ...], str] | None = None,
    planarity_tol: float = 1e-12,
) -> Mesh:
    """Build a 3D mesh from tetrahedra (``kind='tet'``) or hexahedra (``'hex'``)."""
    vertices = np.asarray(vertices, dtype=float)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise MeshError("3D meshes need an (n, 3) vertex array")
    if kind not in ("tet", "hex"):
        raise MeshError(f"unsupported 3D element kind {kind!r}")
    table = _TET_FACES if kind == "tet" else _HEX_FACES
    nloc = 4 if kind == "tet" else 8
    nv = len(vertices)
    elements = [tuple(int(v) for v in e) for e in elements]
    face_index: dict[tuple[int, ...], int] = {}
    face_loops: list[tuple[int, ...]] = []
    face_cells: list[list[int]] = []
    cell_data = []
    fixed = []
    for cid, elem in enumerate(elements):
        if len(elem) != nloc:
            raise MeshError(f"cell {cid}: expected {nloc} vertices, got {len(elem)}")
        bad = [v for v in elem if v < 0 or v >= nv]
        if bad:
            raise MeshError(f"cell {cid}: unknown vertex ids {bad}")
        if len(set(elem)) != nloc:
            raise MeshError(f"cell {cid}: repeated vertex ids {elem}")
        if kind == "tet":
            vol = _tet_volume(vertices[list(elem)])
            scale = _diameter(vertices[list(elem)]) ** 3
            if abs(vol) <= 1e-14 * scale:
                raise MeshError(f"cell {cid}: degenerate tetrahedron")
            if vol < 0:
                elem = (elem[0], elem[2], elem[1], elem[3])
        fixed.append(elem)
        fids, signs = [], []
        for lf in table:
            loop = tuple(elem[i] for i in lf)
            key = tuple(sorted(loop))
            fid = face_index.get(key)
            if fid is None:
                fid = len(face_loops)
                face_index[key] = fid
                face_loops.append(loop)
                face_cells.append([])
                signs.append(1)
            else:
                signs.append(-1)
            if len(face_cells[fid]) >= 2:
                raise MeshError(f"cell {cid}: face {key} shared by more than two cells")
            face_cells[fid].append(cid)
            fids.append(fid)
        cell_data.append((fids, signs))

    tags = dict(tags or {})
    faces = []
    for fid, loop in enumerate(face_loops):
        pts = vertices[list(loop)]
        normal, area, centroid = _polygon3d(pts)
        if area == 0.0:
            raise MeshError(f"face {fid}: zero area")
        diam = _diameter(pts)
        dev = np.abs((pts - centroid) @ normal).max()
        if dev > planarity_tol * diam:
            raise MeshError(f"face {fid} (cell {face_cells[fid][0]}): non-planar, deviation {dev:.3e}")
        cells = tuple(face_cells[fid])
        tag = tags.get(tuple(sorted(loop))) if len(cells) == 1 else None
        faces.append(Face(loop, pts, centroid, normal, area, diam, cells, tag))

    cells = []
    for cid, elem in enumerate(fixed):
        fids, signs = cell_data[cid]
        pts = vertices[list(elem)]
        if kind == "tet":
            simplices = pts[None].copy()
        else:
            center = pts.mean(axis=0)
            sims = []
            for fid, s in zip(fids, signs):
                loop = faces[fid].points if s > 0 else faces[fid].points[::-1]
                for j in range(1, len(loop) - 1):
                    sims.append([center, loop[0], loop[j], loop[j + 1]])
            simplices = np.array(sims)
        vols = np.array([_tet_volume(s) for s in simplices])
        if np.any(vols <= 0):
            raise MeshError(f"cell {cid}: inverted or non star-shaped element")
        volume = float(vols.sum())
        centroid = (vols[:, None] * simplices.mean(axis=1)).sum(axis=0) / volume
        cells.append(Cell(elem, tuple(fids), tuple(signs), kind, centroid, volume,
                          _diameter(pts), pts, simplices))
    return Mesh(3, vertices, tuple(cells), tuple(faces), tuple(fixed), kind)


def _side_tagger(lo: np.ndarray, hi: np.ndarray, tol: float) -> Callable[[Face], str | None]:
    names = (("xmin", "xmax"), ("ymin", "ymax"), ("zmin", "zmax"))

    def tagger(face: Face) -> str | None:
        for axis in range(len(lo)):
            coords = face.points[:, axis]
            if np.all(np.abs(coords - lo[axis]) <= tol):
                return names[axis][0]
            if np.all(np.abs(coords - hi[axis]) <= tol):
                return names[axis][1]
        return None

    return tagger


def build_structured_mesh(kind: str, divisions: Sequence[int], box: Sequence[Sequence[float]]) -> Mesh:
    """Conforming structured mesh of an axis-aligned box.

    ``kind`` is one of ``quad``, ``triangle`` (2D) or ``hex``, ``tet`` (3D).
    ``box`` is ``[[xmin, ymin(, zmin)], [xmax, ymax(, zmax)]]``.  Boundary faces
    are tagged ``xmin``, ``xmax``, ``ymin``, ... after the side they lie on.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    dim = 2 if kind in ("quad", "triangle") else 3 if kind in ("hex", "tet") else None
    if dim is None:
        raise MeshError(f"unknown mesh kind {kind!r}")
    divisions = [int(n) for n in divisions]
    if len(divisions) != dim or lo.shape != (dim,) or hi.shape != (dim,):
        raise MeshError(f"{kind} mesh needs {dim} divisions and a {dim}D box")
    if any(n < 1 for n in divisions):
        raise MeshError(f"divisions must be >= 1, got {divisions}")
    if np.any(hi - lo <= 0) or not np.all(np.isfinite(hi - lo)):
        raise MeshError(f"degenerate box {lo.tolist()} -> {hi.tolist()}")

    axes = [np.linspace(lo[i], hi[i], divisions[i] + 1) for i in range(dim)]
    tol = 1e-12 * float(np.max(hi - lo))
    if dim == 2:
        nx, ny = divisions
        X, Y = np.meshgrid(axes[0], axes[1], indexing="xy")
        vertices = np.column_stack([X.ravel(), Y.ravel()])
        vid = lambda i, j: j * (nx + 1) + i  # noqa: E731
        loops = []
        for j in range(ny):
            for i in range(nx):
                a, b, c, e = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
                if kind == "quad":
                    loops.append((a, b, c, e))
                else:
                    loops.extend([(a, b, c), (a, c, e)])
        mesh = mesh_from_polygons(vertices, loops)
    else:
        nx, ny, nz = divisions
        X, Y, Z = np.meshgrid(axes[0], axes[1], axes[2], indexing="ij")
        vertices = np.column_stack([X.transpose(2, 1, 0).ravel(), Y.transpose(2, 1, 0).ravel(),
                                    Z.transpose(2, 1, 0).ravel()])
        vid = lambda i, j, k: (k * (ny + 1) + j) * (nx + 1) + i  # noqa: E731
        elements = []
        for k in range(nz):
            for j in range(ny):
                for i in range(nx):
                    c = [vid(i, j, k), vid(i + 1, j, k), vid(i + 1, j + 1, k), vid(i, j + 1, k),
                         vid(i, j, k + 1), vid(i + 1, j, k + 1), vid(i + 1, j + 1, k + 1), vid(i, j + 1, k + 1)]
                    if kind == "hex":
                        elements.append(tuple(c))
                    else:
                        # Kuhn split along the 0-6 diagonal: conforming across cubes
                        for path in ((1, 2), (1, 5), (3, 2), (3, 7), (4, 5), (4, 7)):
                            elements.append((c[0], c[path[0]], c[path[1]], c[6]))
        mesh = mesh_from_elements(vertices, elements, kind)
    return mesh.retag(_side_tagger(lo, hi, tol))


def merge_cells(mesh: Mesh, fraction: float, seed: int = 0) -> Mesh:
    """Merge random pairs of neighbouring quads into polygons with hanging nodes.

    About ``fraction`` of the cells take part in a merge.  The removed common
    edge disappears; its end points stay in the merged vertex loop so the
    neighbours keep their original faces.  Pairs whose union is not a simple,
    fan-triangulable polygon are skipped.
    """
    if mesh.dimension != 2:
        raise MeshError("cell merging is only supported for 2D meshes")
    if not 0.0 <= fraction <= 1.0:
        raise MeshError(f"fraction must lie in [0, 1], got {fraction}")
    n_pairs = int(round(fraction * mesh.n_cells)) // 2
    if n_pairs == 0:
        return mesh
    rng = np.random.default_rng(seed)
    interior = [i for i, f in enumerate(mesh.faces) if len(f.cells) == 2]
    order = rng.permutation(len(interior))
    used = np.zeros(mesh.n_cells, dtype=bool)
    loops = list(mesh.connectivity)
    merged: list[tuple[int, ...]] = []
    removed: set[int] = set()
    for idx in order:
        if len(merged) >= n_pairs:
            break
        fid = interior[idx]
        a, b = mesh.faces[fid].cells
        if used[a] or used[b] or mesh.cells[a].kind != "quad" or mesh.cells[b].kind != "quad":
            continue
        loop = _merge_loops(loops[a], loops[b], mesh.faces[fid].vertex_ids)
        if loop is None:
            continue
        pts = mesh.vertices[list(loop)]
        area, centroid = polygon_area_centroid(pts)
        if area <= 0 or not _is_simple_polygon(pts) or star_center(pts, centroid) is None:
            continue
        used[a] = used[b] = True
        removed.update((a, b))
        merged.append(loop)
    new_loops = [lp for i, lp in enumerate(loops) if i not in removed] + merged
    return mesh_from_polygons(mesh.vertices, new_loops, tags=_tags_by_key(mesh))


def _merge_loops(la: Sequence[int], lb: Sequence[int], edge: Sequence[int]) -> tuple[int, ...] | None:
    """Union of two CCW loops sharing ``edge``; the edge is traversed a->b in one, b->a in the other."""
    u, v = edge
    na = len(la)
    ia = next((i for i in range(na) if {la[i], la[(i + 1) % na]} == {u, v}), None)
    if ia is None:
        return None
    # rotate la so that it ends with the shared edge: [..., p, q] with (p, q) shared
    start = (ia + 2) % na
    ra = [la[(start + i) % na] for i in range(na)]
    p, q = ra[-2], ra[-1]
    nb = len(lb)
    ib = lb.index(q)
    if lb[(ib + 1) % nb] != p:
        return None
    # lb traverses q -> p; walk lb from p onwards, stopping before q
    rb = [lb[(ib + 1 + i) % nb] for i in range(nb)]  # starts at p, ends at q
    loop = ra[:-1] + rb[1:-1] + [q]
    if len(set(loop)) != len(loop):
        return None
    return tuple(loop)


@dataclass
class MeshIssue:
    kind: str
    entity: str
    index: int
    message: str

    def __str__(self) -> str:
        return f"{self.entity} {self.index}: {self.kind}: {self.message}"


@dataclass
class ValidationReport:
    issues: list[MeshIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        return "mesh valid" if self.ok else "\n".join(map(str, self.issues))


def validate_mesh(mesh: Mesh, rtol: float = 1e-12) -> ValidationReport:
    """Check every mesh invariant; report all violations instead of raising."""
    report = ValidationReport()
    add = lambda *a: report.issues.append(MeshIssue(*a))  # noqa: E731
    d = mesh.dimension
    for fid, f in enumerate(mesh.faces):
        if len(f.cells) not in (1, 2):
            add("adjacency", "face", fid, f"shared by {len(f.cells)} cells")
        if not f.measure > 0:
            add("measure", "face", fid, f"non-positive measure {f.measure}")
        if abs(np.linalg.norm(f.normal) - 1.0) > 1e-12:
            add("normal", "face", fid, "normal is not unit length")
        if d == 3:
            dev = np.abs((f.points - f.centroid) @ f.normal).max()
            if dev > rtol * f.diameter:
                add("planarity", "face", fid, f"vertex deviation {dev:.3e} from face plane")
        if len(f.cells) == 2:
            ca, cb = (mesh.cells[c] for c in f.cells)
            sa = ca.face_signs[ca.face_ids.index(fid)]
            sb = cb.face_signs[cb.face_ids.index(fid)]
            if sa * sb != -1:
                add("orientation", "face", fid, "adjacent cells do not see opposite normals")
    for cid, c in enumerate(mesh.cells):
        if d == 2:
            area, _ = polygon_area_centroid(c.points)
            if area <= 0:
                add("inverted", "cell", cid, f"signed area {area:.3e} <= 0")
                continue
            perimeter = np.linalg.norm(np.roll(c.points, -1, axis=0) - c.points, axis=1).sum()
            fsum = sum(mesh.faces[f].measure for f in c.face_ids)
            if abs(fsum - perimeter) > rtol * perimeter:
                add("tiling", "cell", cid, f"face measures {fsum} != perimeter {perimeter}")
        if not c.volume > 0:
            add("volume", "cell", cid, f"non-positive volume {c.volume}")
            continue
        # closedness: sum_F |F| n_TF = 0 and divergence-theorem volume
        normals = mesh.outward_normals(cid)
        meas = np.array([mesh.faces[f].measure for f in c.face_ids])
        cents = np.array([mesh.faces[f].centroid for f in c.face_ids])
        closure = np.linalg.norm((meas[:, None] * normals).sum(axis=0))
        bmeasure = meas.sum()
        if closure > 1e-10 * bmeasure:
            add("tiling", "cell", cid, f"faces do not close the cell (|sum |F| n| = {closure:.3e})")
        vol = (meas * np.einsum("ij,ij->i", cents - c.centroid, normals)).sum() / d
        if abs(vol - c.volume) > 1e-10 * c.volume:
            add("orientation", "cell", cid, f"divergence volume {vol:.6e} != {c.volume:.6e}")
    return report
