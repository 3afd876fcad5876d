"""File formats: DPTC point clouds, Wavefront OBJ meshes, JSON reports and JSONL logs."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .surface import Mesh

DPTC_MAGIC = b"DPTC"
NORMALS_TAG = b"NRML"


class FormatError(ValueError):
    pass


def write_dptc(path, points, normals=None) -> None:
    """Magic, u32 count, little-endian f32 xyz triples; optionally a tagged section of normals."""
    pts = np.ascontiguousarray(points, dtype="<f4").reshape(-1, 3)
    with open(path, "wb") as f:
        f.write(DPTC_MAGIC + struct.pack("<I", len(pts)))
        f.write(pts.tobytes())
        if normals is not None:
            nrm = np.ascontiguousarray(normals, dtype="<f4").reshape(-1, 3)
            if len(nrm) != len(pts):
                raise FormatError(f"{len(nrm)} normals for {len(pts)} points")
            f.write(NORMALS_TAG + nrm.tobytes())


def read_dptc(path) -> tuple[np.ndarray, np.ndarray | None]:
    buf = Path(path).read_bytes()
    if len(buf) < 8 or buf[:4] != DPTC_MAGIC:
        raise FormatError(f"{path}: not a DPTC file")
    (n,) = struct.unpack_from("<I", buf, 4)
    end = 8 + 12 * n
    if len(buf) < end:
        raise FormatError(f"{path}: truncated, header says {n} points")
    pts = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=8).reshape(n, 3).copy()
    rest = buf[end:]
    if not rest:
        return pts, None
    if rest[:4] != NORMALS_TAG or len(rest) != 4 + 12 * n:
        raise FormatError(f"{path}: unexpected {len(rest)} trailing bytes")
    nrm = np.frombuffer(rest, dtype="<f4", count=3 * n, offset=4).reshape(n, 3).copy()
    return pts, nrm


def write_obj(path, mesh: Mesh) -> None:
    normals = mesh.normals if mesh.normals is not None else (mesh.vertex_normals() if not mesh.is_empty else None)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    if normals is not None and len(normals):
        lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in normals]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.triangles + 1]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in mesh.triangles + 1]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> Mesh:
    verts, normals, faces = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                normals.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    nrm = np.array(normals, dtype=np.float64).reshape(-1, 3) if len(normals) == len(verts) and normals else None
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), nrm)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
