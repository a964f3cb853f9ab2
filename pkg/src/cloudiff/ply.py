"""Minimal PLY point cloud reader/writer (xyz only).

Writes binary little-endian float64 vertices; reads ascii and binary
little-endian files with float32 or float64 x/y/z leading properties.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import PointCloud


def write_ply(path, cloud: PointCloud) -> None:
    pts = np.ascontiguousarray(cloud.points, dtype="<f8")
    header = "\n".join([
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(pts.tobytes())


def read_ply(path, frame_id: str = "") -> PointCloud:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if end < 0:
        raise ValueError(f"{path}: missing PLY header")
    end = raw.index(b"\n", end) + 1
    header_lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    n_vertex = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in header_lines:
        parts = line.strip().split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append((parts[1], parts[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
    if n_vertex is None:
        raise ValueError(f"{path}: no vertex element")
    names = [name for _, name in props]
    if names[:3] != ["x", "y", "z"]:
        raise ValueError(f"{path}: expected x, y, z as leading vertex properties")

    if fmt == "ascii":
        body = raw[end:].decode("ascii")
        rows = [line.split() for line in body.splitlines() if line.strip()]
        if len(rows) < n_vertex:
            raise ValueError(f"{path}: truncated PLY body")
        pts = np.array([[float(r[0]), float(r[1]), float(r[2])]
                        for r in rows[:n_vertex]])
        return PointCloud(pts, frame_id=frame_id)

    type_map = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
                "uchar": "u1", "uint8": "u1", "int": "<i4", "int32": "<i4",
                "uint": "<u4", "uint32": "<u4", "short": "<i2", "ushort": "<u2"}
    try:
        dtype = np.dtype([(name, type_map[t]) for t, name in props])
    except KeyError as exc:
        raise ValueError(f"{path}: unsupported property type {exc}") from exc
    data = np.frombuffer(raw, dtype=dtype, count=n_vertex, offset=end)
    pts = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    return PointCloud(pts, frame_id=frame_id)
