"""File formats: XYZ point clouds (text or binary f32), OBJ meshes, checkpoints."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from atlasforge.atlas import MinimalAtlas, atlas_from_bytes, atlas_to_bytes
from atlasforge.errors import InvalidInput
from atlasforge.geom import TriangleMesh, as_cloud

BINARY_SUFFIXES = (".bin", ".f32")


def write_xyz(path, points) -> None:
    """One point per line, three whitespace-separated values at round-trip precision."""
    pts = as_cloud(points, allow_empty=True)
    with open(path, "w") as fh:
        for x, y, z in pts.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")


def read_xyz(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) < 3:
                raise InvalidInput(f"{path}:{lineno}: expected 3 coordinates")
            rows.append([float(p) for p in parts[:3]])
    return as_cloud(np.array(rows, dtype=np.float64).reshape(-1, 3), allow_empty=True)


def write_xyz_binary(path, points) -> None:
    """Little-endian float32 triples, no header."""
    Path(path).write_bytes(as_cloud(points, allow_empty=True).astype("<f4").tobytes())


def read_xyz_binary(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) % 12:
        raise InvalidInput(f"{path}: size {len(data)} is not a multiple of 12 bytes")
    return np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(-1, 3)


def read_points(path) -> np.ndarray:
    if Path(path).suffix.lower() in BINARY_SUFFIXES:
        return read_xyz_binary(path)
    return read_xyz(path)


def write_points(path, points) -> None:
    if Path(path).suffix.lower() in BINARY_SUFFIXES:
        write_xyz_binary(path, points)
    else:
        write_xyz(path, points)


def write_obj(path, mesh: TriangleMesh) -> None:
    """Wavefront OBJ with ``v`` and ``f`` records only (1-based indices)."""
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in (mesh.triangles + 1).tolist():
            fh.write(f"f {a} {b} {c}\n")


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                # keep only the vertex index of "v/vt/vn" references
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                for i in range(1, len(idx) - 1):
                    faces.append([idx[0] - 1, idx[i] - 1, idx[i + 1] - 1])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_provenance(path, chart, uv) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chart", "u", "v"])
        for k, (u, v) in zip(chart, uv):
            w.writerow([int(k), repr(float(u)), repr(float(v))])


def save_atlas(path, atlas: MinimalAtlas, metadata: dict | None = None) -> None:
    Path(path).write_bytes(atlas_to_bytes(atlas, metadata))


def load_atlas(path) -> tuple[MinimalAtlas, dict]:
    return atlas_from_bytes(Path(path).read_bytes())
