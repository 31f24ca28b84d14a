"""Legacy VTK text writers: structured points for field snapshots and an
unstructured tetrahedral grid for mesh inspection, plus a minimal reader
for round-trip checks."""

from __future__ import annotations

import numpy as np


def write_structured_points(path, origin, spacing, dims,
                            point_fields: dict[str, np.ndarray]) -> None:
    """dims = node counts per axis; each field is a flat array in x-fastest
    (VTK) order or an (nx, ny, nz) array."""
    nx, ny, nz = dims
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write("field snapshot\n")
        f.write("ASCII\n")
        f.write("DATASET STRUCTURED_POINTS\n")
        f.write(f"DIMENSIONS {nx} {ny} {nz}\n")
        f.write(f"ORIGIN {origin[0]:.12g} {origin[1]:.12g} {origin[2]:.12g}\n")
        f.write(f"SPACING {spacing:.12g} {spacing:.12g} {spacing:.12g}\n")
        f.write(f"POINT_DATA {nx * ny * nz}\n")
        for name, data in point_fields.items():
            arr = np.asarray(data)
            if arr.ndim == 3:
                arr = arr.transpose(2, 1, 0).ravel()  # z,y,x -> x fastest
            f.write(f"SCALARS {name} double 1\n")
            f.write("LOOKUP_TABLE default\n")
            for i in range(0, arr.size, 6):
                f.write(" ".join(f"{v:.9g}" for v in arr[i:i + 6]) + "\n")


def read_structured_points(path):
    """Minimal reader for the files written above: returns (origin,
    spacing, dims, fields dict of (nx,ny,nz) arrays)."""
    with open(path) as f:
        lines = [ln.strip() for ln in f]
    dims = spacing = origin = None
    fields = {}
    i = 0
    while i < len(lines):
        ln = lines[i]
        if ln.startswith("DIMENSIONS"):
            dims = tuple(int(v) for v in ln.split()[1:4])
        elif ln.startswith("ORIGIN"):
            origin = tuple(float(v) for v in ln.split()[1:4])
        elif ln.startswith("SPACING"):
            spacing = float(ln.split()[1])
        elif ln.startswith("SCALARS"):
            name = ln.split()[1]
            i += 1  # LOOKUP_TABLE line
            vals = []
            n = dims[0] * dims[1] * dims[2]
            while len(vals) < n:
                i += 1
                vals.extend(float(v) for v in lines[i].split())
            arr = np.array(vals).reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
            fields[name] = arr
        i += 1
    return origin, spacing, dims, fields


def write_unstructured_tets(path, points: np.ndarray, tets: np.ndarray,
                            cell_tags: np.ndarray | None = None) -> None:
    """Legacy unstructured-grid dump (cell type 10 = tetrahedron) with an
    optional integer classification tag per cell."""
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write("tetrahedral mesh\n")
        f.write("ASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {len(points)} double\n")
        for p in points:
            f.write(f"{p[0]:.12g} {p[1]:.12g} {p[2]:.12g}\n")
        f.write(f"CELLS {len(tets)} {len(tets) * 5}\n")
        for t in tets:
            f.write(f"4 {t[0]} {t[1]} {t[2]} {t[3]}\n")
        f.write(f"CELL_TYPES {len(tets)}\n")
        for _ in range(len(tets)):
            f.write("10\n")
        if cell_tags is not None:
            f.write(f"CELL_DATA {len(tets)}\n")
            f.write("SCALARS classification int 1\n")
            f.write("LOOKUP_TABLE default\n")
            for v in cell_tags:
                f.write(f"{int(v)}\n")
