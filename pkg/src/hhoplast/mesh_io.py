"""Gmsh MSH 2.2 ASCII import and export.

Supported element types: 1 (2-node line), 2 (3-node triangle), 3 (4-node
quadrangle), 4 (4-node tetrahedron), 5 (8-node hexahedron).  Elements of the
highest dimension present become cells; elements one dimension lower carry
boundary tags through their physical group names.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .mesh import Mesh, MeshError, mesh_from_elements, mesh_from_polygons

_NODES_PER_TYPE = {1: 2, 2: 3, 3: 4, 4: 4, 5: 8}
_TYPE_DIM = {1: 1, 2: 2, 3: 2, 4: 3, 5: 3}
_CELL_TYPE = {"tet": 4, "hex": 5}
_FACE_TYPE_BY_SIZE = {2: 1, 3: 2, 4: 3}


class MeshLoadError(MeshError):
    """Raised when a mesh file cannot be turned into a valid mesh."""


def _sections(text: str) -> dict[str, list[tuple[int, str]]]:
    """Split the file into ``$Name ... $EndName`` blocks of numbered lines."""
    blocks: dict[str, list[tuple[int, str]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("$End"):
            if current is None or line[4:] != current:
                raise MeshLoadError(f"line {lineno}: unexpected {line}")
            current = None
        elif line.startswith("$"):
            if current is not None:
                raise MeshLoadError(f"line {lineno}: section ${current} is not closed")
            current = line[1:]
            if current in blocks:
                raise MeshLoadError(f"line {lineno}: duplicate section ${current}")
            blocks[current] = []
        elif current is not None:
            blocks[current].append((lineno, line))
    if current is not None:
        raise MeshLoadError(f"section ${current} is not closed")
    return blocks


def _counted(block: list[tuple[int, str]], name: str) -> list[tuple[int, str]]:
    if not block:
        raise MeshLoadError(f"section ${name} is empty")
    lineno, head = block[0]
    try:
        n = int(head)
    except ValueError:
        raise MeshLoadError(f"line {lineno}: expected an entry count in ${name}") from None
    if len(block) - 1 != n:
        raise MeshLoadError(f"${name} announces {n} entries but has {len(block) - 1}")
    return block[1:]


def parse_msh(text: str) -> Mesh:
    """Build a mesh from the contents of an MSH 2.2 ASCII file."""
    blocks = _sections(text)
    for required in ("MeshFormat", "Nodes", "Elements"):
        if required not in blocks:
            raise MeshLoadError(f"missing section ${required}")
    fmt = blocks["MeshFormat"][0][1].split() if blocks["MeshFormat"] else []
    if len(fmt) < 2 or not fmt[0].startswith("2.") or fmt[1] != "0":
        raise MeshLoadError(f"only ASCII MSH 2.x is supported, got format line {' '.join(fmt)!r}")

    names: dict[int, str] = {}
    for lineno, line in _counted(blocks["PhysicalNames"], "PhysicalNames") if "PhysicalNames" in blocks else []:
        m = re.fullmatch(r"(\d+)\s+(\d+)\s+\"(.*)\"", line)
        if m is None:
            raise MeshLoadError(f"line {lineno}: malformed physical name")
        names[int(m.group(2))] = m.group(3)

    node_index: dict[int, int] = {}
    coords = []
    for lineno, line in _counted(blocks["Nodes"], "Nodes"):
        parts = line.split()
        try:
            nid, xyz = int(parts[0]), [float(v) for v in parts[1:4]]
        except (ValueError, IndexError):
            raise MeshLoadError(f"line {lineno}: malformed node") from None
        if len(xyz) != 3:
            raise MeshLoadError(f"line {lineno}: node {nid} needs three coordinates")
        if nid in node_index:
            raise MeshLoadError(f"line {lineno}: duplicate node id {nid}")
        node_index[nid] = len(coords)
        coords.append(xyz)
    coords = np.array(coords, dtype=float).reshape(-1, 3)

    elements = []
    for lineno, line in _counted(blocks["Elements"], "Elements"):
        try:
            parts = [int(v) for v in line.split()]
            eid, etype, ntags = parts[:3]
        except ValueError:
            raise MeshLoadError(f"line {lineno}: malformed element") from None
        if etype not in _NODES_PER_TYPE:
            raise MeshLoadError(f"element {eid}: unsupported element type {etype}")
        nodes = parts[3 + ntags:]
        if len(nodes) != _NODES_PER_TYPE[etype]:
            raise MeshLoadError(f"element {eid}: type {etype} needs {_NODES_PER_TYPE[etype]} nodes, got {len(nodes)}")
        unknown = [n for n in nodes if n not in node_index]
        if unknown:
            raise MeshLoadError(f"element {eid}: unknown node ids {unknown}")
        if len(set(nodes)) != len(nodes):
            raise MeshLoadError(f"element {eid}: repeated node ids {nodes}")
        physical = parts[3] if ntags > 0 else 0
        elements.append((eid, etype, physical, [node_index[n] for n in nodes]))

    if not elements:
        raise MeshLoadError("file contains no elements")
    dim = max(_TYPE_DIM[e[1]] for e in elements)
    if dim < 2:
        raise MeshLoadError("file contains no 2D or 3D cells")
    cells = [e for e in elements if _TYPE_DIM[e[1]] == dim]
    bnd = [e for e in elements if _TYPE_DIM[e[1]] == dim - 1]

    # keep only referenced nodes, in file order
    used = np.zeros(len(coords), dtype=bool)
    for e in cells:
        used[e[3]] = True
    renumber = -np.ones(len(coords), dtype=int)
    renumber[used] = np.arange(used.sum())
    vertices = coords[used]
    if dim == 2:
        if np.ptp(vertices[:, 2]) > 0:
            raise MeshLoadError("2D mesh with non-constant z coordinates")
        vertices = vertices[:, :2]

    tags = {}
    for eid, _, physical, nodes in bnd:
        if not all(used[n] for n in nodes):
            raise MeshLoadError(f"element {eid}: boundary element is not attached to any cell")
        tags[tuple(sorted(int(renumber[n]) for n in nodes))] = names.get(physical, str(physical))

    conn = [[int(renumber[n]) for n in e[3]] for e in cells]
    try:
        if dim == 2:
            loops = []
            for (eid, *_), loop in zip(cells, conn):
                pts = vertices[loop]
                x, y = pts[:, 0], pts[:, 1]
                area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
                if area < 0:
                    loop = loop[::-1]
                loops.append(tuple(loop))
            mesh = mesh_from_polygons(vertices, loops, tags)
        else:
            kinds = {e[1] for e in cells}
            if len(kinds) != 1:
                raise MeshLoadError("mixed tetrahedral and hexahedral meshes are not supported")
            mesh = mesh_from_elements(vertices, conn, "tet" if kinds == {4} else "hex", tags)
    except MeshLoadError:
        raise
    except MeshError as exc:
        raise MeshLoadError(_rename_cells(str(exc), [e[0] for e in cells])) from None

    boundary_keys = {tuple(sorted(f.vertex_ids)) for f in mesh.faces if f.is_boundary}
    for eid, _, _, nodes in bnd:
        key = tuple(sorted(int(renumber[n]) for n in nodes))
        if key not in boundary_keys:
            raise MeshLoadError(f"element {eid}: orphan boundary element, no boundary face with nodes {key}")
    return mesh


def _rename_cells(message: str, element_ids: list[int]) -> str:
    """Translate internal cell indices in a builder message to file element ids."""
    return re.sub(r"\bcell (\d+)", lambda m: f"element {element_ids[int(m.group(1))]}", message)


def load_msh(path: str | Path) -> Mesh:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise MeshLoadError(f"cannot read mesh file {path}: {exc}") from None
    return parse_msh(text)


def format_msh(mesh: Mesh) -> str:
    """Serialize a tri/quad/tet/hex mesh with its boundary tags."""
    d = mesh.dimension
    cell_types = []
    for cid, conn in enumerate(mesh.connectivity):
        if d == 2:
            etype = {3: 2, 4: 3}.get(len(conn))
        else:
            etype = _CELL_TYPE.get(mesh.element_kind)
        if etype is None:
            raise MeshError(f"cell {cid}: {len(conn)}-vertex polygon cannot be written in MSH 2.2")
        cell_types.append(etype)

    tag_names = sorted({f.tag for f in mesh.faces if f.tag is not None})
    tag_ids = {name: i + 1 for i, name in enumerate(tag_names)}
    domain_id = len(tag_names) + 1
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$PhysicalNames", str(len(tag_names) + 1)]
    out += [f'{d - 1} {tag_ids[n]} "{n}"' for n in tag_names]
    out += [f'{d} {domain_id} "domain"', "$EndPhysicalNames", "$Nodes", str(len(mesh.vertices))]
    for i, v in enumerate(mesh.vertices):
        xyz = list(v) + [0.0] * (3 - d)
        out.append(f"{i + 1} " + " ".join(f"{c:.17g}" for c in xyz))
    out.append("$EndNodes")

    rows = []
    for f in mesh.faces:
        if f.tag is not None:
            ftype = _FACE_TYPE_BY_SIZE[len(f.vertex_ids)]
            rows.append((ftype, tag_ids[f.tag], f.vertex_ids))
    rows += [(t, domain_id, conn) for t, conn in zip(cell_types, mesh.connectivity)]
    out += ["$Elements", str(len(rows))]
    for eid, (etype, phys, nodes) in enumerate(rows, start=1):
        out.append(f"{eid} {etype} 2 {phys} {phys} " + " ".join(str(n + 1) for n in nodes))
    out.append("$EndElements")
    return "\n".join(out) + "\n"


def save_msh(mesh: Mesh, path: str | Path) -> None:
    Path(path).write_text(format_msh(mesh))
