"""OBJ and PLY mesh I/O.

OBJ is read geometry-only. PLY is read and written in ASCII or
binary-little-endian with an optional per-face integer "label" property and
uchar red/green/blue face colors. Binary little-endian is the write default.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import LengthMismatch, ParseError
from .mesh import TriMesh, check_topology

# Fixed 17-entry palette; label ids index it modulo the table.
LABEL_PALETTE = np.array(
    [
        (160, 160, 160),
        (230, 25, 75),
        (60, 180, 75),
        (255, 225, 25),
        (0, 130, 200),
        (245, 130, 48),
        (145, 30, 180),
        (70, 240, 240),
        (240, 50, 230),
        (210, 245, 60),
        (250, 190, 190),
        (0, 128, 128),
        (230, 190, 255),
        (170, 110, 40),
        (128, 0, 0),
        (170, 255, 195),
        (128, 128, 0),
    ],
    dtype=np.uint8,
)

_PLY_TYPES = {
    "char": "b", "int8": "b",
    "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h",
    "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i",
    "uint": "I", "uint32": "I",
    "float": "f", "float32": "f",
    "double": "d", "float64": "d",
}


def label_color(label: int) -> tuple[int, int, int]:
    return tuple(int(v) for v in LABEL_PALETTE[label % len(LABEL_PALETTE)])


def load_mesh(path) -> TriMesh:
    """Load an OBJ or PLY file into a validated TriMesh.

    Per-face integer "label" properties in PLY files populate face_labels.
    Raises ParseError for malformed files and TopologyError for out-of-range
    indices or degenerate faces.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        mesh = _load_obj(path)
    elif suffix == ".ply":
        mesh = _load_ply(path)
    else:
        raise ParseError(f"unsupported mesh format: {path.name}")
    check_topology(mesh)
    return mesh


def _load_obj(path: Path) -> TriMesh:
    vertices, faces = [], []
    try:
        text = path.read_text()
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    for ln, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise ParseError(f"{path.name}:{ln}: vertex needs 3 coordinates")
            try:
                vertices.append([float(x) for x in parts[1:4]])
            except ValueError as e:
                raise ParseError(f"{path.name}:{ln}: bad vertex coordinate") from e
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                try:
                    i = int(tok.split("/")[0])
                except ValueError as e:
                    raise ParseError(f"{path.name}:{ln}: bad face index {tok!r}") from e
                # OBJ indices are 1-based; negatives count from the end.
                idx.append(i - 1 if i > 0 else len(vertices) + i)
            if len(idx) < 3:
                raise ParseError(f"{path.name}:{ln}: face needs >= 3 indices")
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    if not vertices:
        raise ParseError(f"{path.name}: no vertices")
    return TriMesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3))


def _parse_ply_header(raw: bytes, path: Path):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError(f"{path.name}: not a PLY file")
    end = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii", errors="replace")

    fmt = None
    elements = []  # (name, count, [(prop_name, type, list_count_type|None)])
    for line in header.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError(f"{path.name}: property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], parts[3], parts[2]))
            else:
                elements[-1][2].append((parts[2], parts[1], None))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"{path.name}: unsupported PLY format {fmt!r}")
    return fmt, elements, raw[end:]


def _load_ply(path: Path) -> TriMesh:
    raw = path.read_bytes()
    fmt, elements, body = _parse_ply_header(raw, path)

    parsed: dict[str, list[dict]] = {}
    if fmt == "ascii":
        tokens = body.decode("ascii", errors="replace").split()
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(tokens):
                raise ParseError(f"{path.name}: truncated PLY body")
            out = tokens[pos:pos + n]
            pos += n
            return out

        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for pname, ptype, ltype in props:
                    if ltype is None:
                        tok = take(1)[0]
                        row[pname] = float(tok) if ptype in ("float", "float32", "double", "float64") else int(tok)
                    else:
                        n = int(take(1)[0])
                        row[pname] = [int(float(t)) for t in take(n)]
                rows.append(row)
            parsed[name] = rows
    else:
        offset = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for pname, ptype, ltype in props:
                    if ltype is None:
                        code = _PLY_TYPES.get(ptype)
                        if code is None:
                            raise ParseError(f"{path.name}: unknown PLY type {ptype!r}")
                        size = struct.calcsize(code)
                        if offset + size > len(body):
                            raise ParseError(f"{path.name}: truncated PLY body")
                        (row[pname],) = struct.unpack_from("<" + code, body, offset)
                        offset += size
                    else:
                        ccode, icode = _PLY_TYPES.get(ltype), _PLY_TYPES.get(ptype)
                        if ccode is None or icode is None:
                            raise ParseError(f"{path.name}: unknown PLY list type")
                        (n,) = struct.unpack_from("<" + ccode, body, offset)
                        offset += struct.calcsize(ccode)
                        size = struct.calcsize(icode) * n
                        if offset + size > len(body):
                            raise ParseError(f"{path.name}: truncated PLY body")
                        row[pname] = list(struct.unpack_from(f"<{n}{icode}", body, offset))
                        offset += size
                rows.append(row)
            parsed[name] = rows

    if "vertex" not in parsed or "face" not in parsed:
        raise ParseError(f"{path.name}: PLY missing vertex or face element")
    try:
        vertices = np.array([[r["x"], r["y"], r["z"]] for r in parsed["vertex"]], dtype=np.float64)
    except KeyError as e:
        raise ParseError(f"{path.name}: vertex element missing {e}") from e

    faces, labels = [], []
    has_labels = bool(parsed["face"]) and "label" in parsed["face"][0]
    for r in parsed["face"]:
        idx = r.get("vertex_indices", r.get("vertex_index"))
        if idx is None:
            raise ParseError(f"{path.name}: face element has no vertex index list")
        for k in range(1, len(idx) - 1):
            faces.append([idx[0], idx[k], idx[k + 1]])
            if has_labels:
                labels.append(int(r["label"]))
    return TriMesh(
        vertices,
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        np.array(labels, dtype=np.int64) if has_labels else None,
    )


def export_labeled_ply(mesh: TriMesh, labels, path, binary: bool = True) -> None:
    """Write a PLY with per-face int32 "label" and palette-derived RGB colors.

    Raises LengthMismatch when len(labels) != face count; I/O failures
    propagate as OSError.
    """
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if len(labels) != mesh.n_faces:
        raise LengthMismatch(f"{len(labels)} labels for {mesh.n_faces} faces")
    path = Path(path)

    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        "comment skelfuse labeled mesh",
        f"element vertex {mesh.n_vertices}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {mesh.n_faces}",
        "property list uchar int vertex_indices",
        "property int label",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    colors = LABEL_PALETTE[labels % len(LABEL_PALETTE)]

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
            rec = []
            for (a, b, c), lab, (r, g, bl) in zip(mesh.faces, labels, colors):
                rec.append(struct.pack("<B3iiBBB", 3, a, b, c, lab, r, g, bl))
            fh.write(b"".join(rec))
        else:
            lines = [f"{float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in mesh.vertices]
            for (a, b, c), lab, (r, g, bl) in zip(mesh.faces, labels, colors):
                lines.append(f"3 {a} {b} {c} {lab} {r} {g} {bl}")
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def save_obj(mesh: TriMesh, path) -> None:
    lines = [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")
