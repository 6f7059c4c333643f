"""Wavefront OBJ subset: ``v x y z [r g b]`` and ``f i j k`` (one-based)."""
from __future__ import annotations

import numpy as np

from .geometry import TriangleMesh

__all__ = ["read_obj", "write_obj"]


def read_obj(path) -> TriangleMesh:
    verts, colors, faces = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "v":
                vals = [float(x) for x in parts[1:]]
                if len(vals) not in (3, 6):
                    raise ValueError(f"{path}:{lineno}: vertex needs 3 or 6 numbers")
                verts.append(vals[:3])
                colors.append(vals[3:] if len(vals) == 6 else None)
            elif tag == "f":
                # keep only the position index of "i/t/n" tokens
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                if len(idx) != 3:
                    raise ValueError(f"{path}:{lineno}: only triangular faces are supported")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    has_color = bool(colors) and all(c is not None for c in colors)
    return TriangleMesh(
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        np.array(colors, dtype=np.float64) if has_color else None,
    )


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = []
    if mesh.colors is not None:
        for p, c in zip(mesh.vertices, mesh.colors):
            lines.append("v %r %r %r %r %r %r" % (*map(float, p), *map(float, c)))
    else:
        for p in mesh.vertices:
            lines.append("v %r %r %r" % tuple(map(float, p)))
    for a, b, c in mesh.triangles + 1:
        lines.append(f"f {a} {b} {c}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
