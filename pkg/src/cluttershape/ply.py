"""PLY reading and writing for point clouds and triangle meshes.

Vertices are stored as 32-bit float x/y/z properties.  Clouds may carry an
integer per-vertex "instance" property holding their labels; meshes add the
usual face element with a vertex_indices list.  Both ASCII and
binary-little-endian variants are supported.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import PointCloud, TriangleMesh

_PLY_TYPES = {
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "i2",
    "int16": "i2",
    "ushort": "u2",
    "uint16": "u2",
    "int": "i4",
    "int32": "i4",
    "uint": "u4",
    "uint32": "u4",
    "float": "f4",
    "float32": "f4",
    "double": "f8",
    "float64": "f8",
}


def _format_ascii(value) -> str:
    if np.issubdtype(type(value), np.integer) or isinstance(value, int):
        return str(int(value))
    return repr(float(value))


def write_ply(path, obj, *, binary: bool = True) -> None:
    """Write a PointCloud or TriangleMesh to ``path``."""
    path = Path(path)
    if isinstance(obj, TriangleMesh):
        points, labels, faces = obj.vertices, None, obj.triangles
    elif isinstance(obj, PointCloud):
        points, labels, faces = obj.points, obj.labels, None
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__} as PLY")

    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {len(points)}")
    header += ["property float x", "property float y", "property float z"]
    if labels is not None:
        header.append("property int instance")
    if faces is not None:
        header.append(f"element face {len(faces)}")
        header.append("property list uchar int vertex_indices")
    header.append("end_header")

    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if labels is not None:
        fields.append(("instance", "<i4"))
    vertex = np.empty(len(points), dtype=np.dtype(fields))
    pts32 = points.astype(np.float32)
    vertex["x"], vertex["y"], vertex["z"] = pts32[:, 0], pts32[:, 1], pts32[:, 2]
    if labels is not None:
        vertex["instance"] = labels.astype(np.int32)

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(vertex.tobytes())
            if faces is not None:
                face = np.empty(len(faces), dtype=np.dtype([("n", "u1"), ("v", "<i4", (3,))]))
                face["n"] = 3
                face["v"] = faces.astype(np.int32)
                fh.write(face.tobytes())
        else:
            lines = []
            for row in vertex:
                lines.append(" ".join(_format_ascii(row[name]) for name in vertex.dtype.names))
            if faces is not None:
                for tri in faces:
                    lines.append("3 " + " ".join(str(int(i)) for i in tri))
            fh.write(("\n".join(lines) + "\n").encode("ascii") if lines else b"")


class _Header:
    def __init__(self):
        self.binary = False
        self.elements = []  # (name, count, [(prop_name, dtype_code or 'list')])


def _parse_header(raw: bytes) -> tuple[_Header, int]:
    end = raw.find(b"end_header\n")
    if end < 0:
        raise ValueError("not a PLY file: missing end_header")
    body_start = end + len(b"end_header\n")
    lines = raw[:end].decode("ascii").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError("not a PLY file: missing magic")
    header = _Header()
    current = None
    for line in lines[1:]:
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1] == "ascii":
                header.binary = False
            elif tokens[1] == "binary_little_endian":
                header.binary = True
            else:
                raise ValueError(f"unsupported PLY format {tokens[1]!r}")
        elif tokens[0] == "element":
            current = (tokens[1], int(tokens[2]), [])
            header.elements.append(current)
        elif tokens[0] == "property":
            if current is None:
                raise ValueError("property before any element")
            if tokens[1] == "list":
                current[2].append((tokens[4], "list", _PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]]))
            else:
                current[2].append((tokens[-1], _PLY_TYPES[tokens[1]]))
    return header, body_start


def _read_elements(path) -> dict:
    raw = Path(path).read_bytes()
    header, offset = _parse_header(raw)
    out = {}
    if header.binary:
        pos = offset
        for name, count, props in header.elements:
            if any(p[1] == "list" for p in props):
                # faces: fixed 3-vertex lists are the only shape we produce/accept
                if len(props) != 1:
                    raise ValueError("mixed list/scalar face elements are unsupported")
                _, _, count_code, index_code = props[0]
                dtype = np.dtype([("n", "<" + count_code), ("v", "<" + index_code, (3,))])
                data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
                if count and (data["n"] != 3).any():
                    raise ValueError("only triangular faces are supported")
                pos += dtype.itemsize * count
                out[name] = {"vertex_indices": data["v"].astype(int)}
            else:
                dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
                data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
                pos += dtype.itemsize * count
                out[name] = {p[0]: data[p[0]] for p in props}
    else:
        text = raw[offset:].decode("ascii").split()
        cursor = 0
        for name, count, props in header.elements:
            if any(p[1] == "list" for p in props):
                rows = np.empty((count, 3), dtype=int)
                for i in range(count):
                    n = int(text[cursor])
                    if n != 3:
                        raise ValueError("only triangular faces are supported")
                    rows[i] = [int(t) for t in text[cursor + 1 : cursor + 4]]
                    cursor += 4
                out[name] = {"vertex_indices": rows}
            else:
                width = len(props)
                block = text[cursor : cursor + count * width]
                cursor += count * width
                cols = {}
                for j, (pname, code) in enumerate(props):
                    values = block[j::width]
                    cols[pname] = np.array(values, dtype="<" + code)
                out[name] = cols
    return out


def read_ply_cloud(path) -> PointCloud:
    """Read a PLY vertex element as a labeled point cloud."""
    elements = _read_elements(path)
    if "vertex" not in elements:
        raise ValueError(f"{path}: no vertex element")
    vert = elements["vertex"]
    for axis in ("x", "y", "z"):
        if axis not in vert:
            raise ValueError(f"{path}: vertex element lacks {axis}")
    points = np.column_stack([vert["x"], vert["y"], vert["z"]]).astype(float)
    labels = vert["instance"].astype(int) if "instance" in vert else None
    return PointCloud(points, labels)


def read_ply_mesh(path) -> TriangleMesh:
    elements = _read_elements(path)
    if "face" not in elements:
        raise ValueError(f"{path}: no face element, not a mesh")
    cloud = read_ply_cloud(path)
    return TriangleMesh(cloud.points, elements["face"]["vertex_indices"])
