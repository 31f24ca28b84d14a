"""Uniform Cartesian PIC mesh, 5-tetrahedra cell split, and per-subdomain
local meshes with two guard cells per interior side.

Cube corners are numbered by bits, index = dx + 2*dy + 4*dz. Even-parity
cells (i+j+k even) put the four corner tetrahedra at the even-bit-sum
corners {0,3,5,6}; odd-parity cells use the x-mirrored split so shared
faces between neighbors carry identical diagonals (conforming mesh).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import LevelSetGeometry, eval_level_set

# Element classification tags
TAG_INTERIOR = -1   # all vertices in the material region
TAG_EXTERIOR = +1   # all vertices in the plasma region
TAG_INTERFACE = 0

# corner offsets of a unit cube, index = dx + 2*dy + 4*dz
CUBE_CORNERS = np.array(
    [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
     [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]], dtype=np.int64)

# 5-tet splits; four corner tets first, central tet last; all positively
# oriented (det of edge matrix > 0)
TETS_EVEN = np.array(
    [[0, 1, 2, 4],
     [3, 1, 7, 2],
     [5, 1, 4, 7],
     [6, 2, 7, 4],
     [1, 2, 4, 7]], dtype=np.int64)
TETS_ODD = np.array(
    [[1, 0, 5, 3],
     [2, 0, 3, 6],
     [4, 0, 6, 5],
     [7, 3, 5, 6],
     [0, 3, 6, 5]], dtype=np.int64)

CENTRAL_TET = 4


class MeshError(ValueError):
    pass


class OutOfDomainError(MeshError):
    pass


@dataclass(frozen=True)
class GlobalMeshSpec:
    """Global uniform Cartesian mesh: extents in Debye lengths, one cell
    size h for all dimensions."""
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    h: float

    def __post_init__(self):
        for ax in range(3):
            ext = self.hi[ax] - self.lo[ax]
            if ext <= 0:
                raise MeshError(f"empty extent on axis {ax}")
            n = ext / self.h
            if abs(n - round(n)) > 1e-9 * max(1.0, abs(n)):
                raise MeshError(f"extent on axis {ax} not divisible by h")
            if round(n) < 4:
                raise MeshError(f"need at least 4 cells per axis, got {round(n)} on axis {ax}")

    @property
    def ncells(self) -> tuple[int, int, int]:
        return tuple(int(round((self.hi[a] - self.lo[a]) / self.h)) for a in range(3))

    @property
    def nnodes(self) -> tuple[int, int, int]:
        nc = self.ncells
        return (nc[0] + 1, nc[1] + 1, nc[2] + 1)

    def node_position(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=float)
        return np.asarray(self.lo) + idx * self.h


def split_cell_into_tets(cell_index) -> np.ndarray:
    """Corner indices (5 tets x 4 corners, values 0..7) for one cell.

    The parity of i+j+k selects the mirrored variant so faces conform
    across cell boundaries.
    """
    i, j, k = (int(v) for v in cell_index)
    return TETS_EVEN if (i + j + k) % 2 == 0 else TETS_ODD


def tet_volume(verts) -> float:
    v = np.asarray(verts, dtype=float)
    return float(np.linalg.det(v[1:] - v[0]) / 6.0)


def classify_element(tet_values) -> tuple[int, np.ndarray | None]:
    """Classify one tetrahedron from its (snapped, nonzero) vertex
    level-set values; for interface tets, return the fractional cut
    positions t on each sign-changing edge as (edge a, edge b, t)."""
    s = np.asarray(tet_values, dtype=float)
    if np.any(s == 0.0):
        raise MeshError("level-set values must be snapped away from zero")
    if np.all(s < 0):
        return TAG_INTERIOR, None
    if np.all(s > 0):
        return TAG_EXTERIOR, None
    cuts = []
    for a in range(4):
        for b in range(a + 1, 4):
            if s[a] * s[b] < 0:
                cuts.append((a, b, s[a] / (s[a] - s[b])))
    return TAG_INTERFACE, np.array(cuts, dtype=float)


def barycentric(verts, point) -> np.ndarray:
    """Barycentric coordinates of a point in a tetrahedron."""
    v = np.asarray(verts, dtype=float)
    T = (v[1:] - v[0]).T
    lam = np.linalg.solve(T, np.asarray(point, dtype=float) - v[0])
    return np.concatenate([[1.0 - lam.sum()], lam])


@dataclass(frozen=True)
class ParticleLocation:
    cell: tuple[int, int, int]
    tet: int
    bary: np.ndarray


@dataclass
class InterfaceCut:
    """Per interface-element cut data: cut points, fitted plane (unit
    normal pointing material -> plasma, offset), polygon area/centroid."""
    points: np.ndarray        # (ncut, 3)
    normal: np.ndarray        # (3,)
    offset: float             # plane is {x : n·x = offset}
    area: float
    centroid: np.ndarray


def fit_cut_plane(points: np.ndarray, plus_point: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares plane through the cut points, normal oriented toward
    the plasma-side reference point."""
    c = points.mean(axis=0)
    q = points - c
    if len(points) == 3:
        n = np.cross(q[1] - q[0], q[2] - q[0])
    else:
        # smallest principal direction of the point cloud
        _, _, vt = np.linalg.svd(q, full_matrices=False)
        n = vt[-1]
    nn = np.linalg.norm(n)
    if nn < 1e-14:
        raise MeshError("degenerate cut plane")
    n = n / nn
    if np.dot(n, plus_point - c) < 0:
        n = -n
    return n, float(np.dot(n, c))


def cut_polygon_geometry(points: np.ndarray, normal: np.ndarray) -> tuple[float, np.ndarray]:
    """Area and centroid of the (3- or 4-point) cut polygon, ordering the
    points by angle around their mean within the cut plane."""
    c = points.mean(axis=0)
    t1 = points[0] - c
    t1 -= normal * np.dot(t1, normal)
    n1 = np.linalg.norm(t1)
    if n1 < 1e-14:
        t1 = np.array([1.0, 0.0, 0.0]) - normal * normal[0]
        n1 = np.linalg.norm(t1)
    t1 /= n1
    t2 = np.cross(normal, t1)
    ang = np.arctan2((points - c) @ t2, (points - c) @ t1)
    order = np.argsort(ang)
    p = points[order]
    area_vec = np.zeros(3)
    for i in range(len(p)):
        area_vec += np.cross(p[i], p[(i + 1) % len(p)])
    area = 0.5 * abs(np.dot(area_vec, normal))
    if area < 1e-300:
        return 0.0, c
    centroid = np.zeros(3)
    total = 0.0
    for i in range(1, len(p) - 1):
        a2 = 0.5 * np.linalg.norm(np.cross(p[i] - p[0], p[i + 1] - p[0]))
        centroid += a2 * (p[0] + p[i] + p[i + 1]) / 3.0
        total += a2
    return area, centroid / total if total > 0 else c


@dataclass
class SubdomainMesh:
    """One rank's guarded local mesh over the globally uniform grid.

    Owned cells are [own_lo, own_hi) per axis; the guarded extent adds two
    cells on each side that has a neighbor. Nodes are indexed locally by
    (ni, nj, nk) over the guarded node grid; global node index = local +
    glo (per axis).
    """
    spec: GlobalMeshSpec
    coords: tuple[int, int, int]
    own_lo: tuple[int, int, int]
    own_hi: tuple[int, int, int]
    glo: tuple[int, int, int]          # guarded cell range start (global)
    ghi: tuple[int, int, int]          # guarded cell range end (global, exclusive)
    level_set: np.ndarray = field(default=None, repr=False)  # snapped, nodal
    tags: np.ndarray = field(default=None, repr=False)       # (ncell5,) int8
    elem_nodes: np.ndarray = field(default=None, repr=False)  # (ncell5, 4) int32 local node ids
    interface_ids: np.ndarray = field(default=None, repr=False)
    cuts: list = field(default_factory=list, repr=False)

    # ---- shapes -------------------------------------------------------
    @property
    def ncells(self) -> tuple[int, int, int]:
        return tuple(self.ghi[a] - self.glo[a] for a in range(3))

    @property
    def nnodes(self) -> tuple[int, int, int]:
        nc = self.ncells
        return (nc[0] + 1, nc[1] + 1, nc[2] + 1)

    @property
    def n_local_nodes(self) -> int:
        nn = self.nnodes
        return nn[0] * nn[1] * nn[2]

    @property
    def origin(self) -> np.ndarray:
        return self.spec.node_position(self.glo)

    def global_node_position(self, gi, gj, gk) -> np.ndarray:
        """Positions from *global* integer indices: lo + idx*h per axis, so
        every rank computes bit-identical coordinates for shared nodes."""
        lo = self.spec.lo
        h = self.spec.h
        return np.stack([lo[0] + np.asarray(gi) * h,
                         lo[1] + np.asarray(gj) * h,
                         lo[2] + np.asarray(gk) * h], axis=-1)

    def node_id(self, i, j, k):
        nn = self.nnodes
        return (np.asarray(i) * nn[1] + np.asarray(j)) * nn[2] + np.asarray(k)

    def node_ijk(self, nid):
        nn = self.nnodes
        nid = np.asarray(nid)
        k = nid % nn[2]
        j = (nid // nn[2]) % nn[1]
        i = nid // (nn[1] * nn[2])
        return i, j, k

    def node_positions(self) -> np.ndarray:
        nn = self.nnodes
        i, j, k = np.meshgrid(np.arange(nn[0]), np.arange(nn[1]), np.arange(nn[2]),
                              indexing="ij")
        return self.global_node_position(i.ravel() + self.glo[0],
                                         j.ravel() + self.glo[1],
                                         k.ravel() + self.glo[2])

    def cell_parity(self, ci, cj, ck):
        return (ci + self.glo[0] + cj + self.glo[1] + ck + self.glo[2]) % 2

    def elem_id(self, ci, cj, ck, tet):
        nc = self.ncells
        return (((np.asarray(ci) * nc[1]) + np.asarray(cj)) * nc[2] + np.asarray(ck)) * 5 + tet

    # ---- construction -------------------------------------------------
    def build(self, geom: LevelSetGeometry):
        """Sample + snap the level set at nodes, build element
        connectivity, classify all tetrahedra, and compute cut data."""
        h = self.spec.h
        pos = self.node_positions()
        ls = np.asarray(eval_level_set(geom, pos), dtype=float)
        snap = 1e-10 * h
        ls[np.abs(ls) < snap] = snap  # degenerate nodes pushed into plasma
        self.level_set = ls

        nc = self.ncells
        ci, cj, ck = np.meshgrid(np.arange(nc[0]), np.arange(nc[1]), np.arange(nc[2]),
                                 indexing="ij")
        ci, cj, ck = ci.ravel(), cj.ravel(), ck.ravel()
        parity = self.cell_parity(ci, cj, ck)
        # corner node ids per cell: (ncell, 8)
        corner_ids = np.empty((ci.size, 8), dtype=np.int64)
        for c in range(8):
            dx, dy, dz = CUBE_CORNERS[c]
            corner_ids[:, c] = self.node_id(ci + dx, cj + dy, ck + dz)
        elem_nodes = np.empty((ci.size, 5, 4), dtype=np.int64)
        for par, table in ((0, TETS_EVEN), (1, TETS_ODD)):
            m = parity == par
            elem_nodes[m] = corner_ids[m][:, table]
        self.elem_nodes = elem_nodes.reshape(-1, 4)

        vals = ls[self.elem_nodes]  # (nelem, 4)
        neg = np.all(vals < 0, axis=1)
        pos_ = np.all(vals > 0, axis=1)
        tags = np.zeros(vals.shape[0], dtype=np.int8)
        tags[neg] = TAG_INTERIOR
        tags[pos_] = TAG_EXTERIOR
        self.tags = tags
        self.interface_ids = np.nonzero(tags == TAG_INTERFACE)[0].astype(np.int64)

        all_pos = self.node_positions()
        self.cuts = []
        for eid in self.interface_ids:
            nodes = self.elem_nodes[eid]
            verts = all_pos[nodes]
            s = ls[nodes]
            _, cut_edges = classify_element(s)
            pts = np.array([verts[int(a)] + t * (verts[int(b)] - verts[int(a)])
                            for a, b, t in cut_edges])
            plus_ref = verts[s > 0].mean(axis=0)
            n, d = fit_cut_plane(pts, plus_ref)
            area, centroid = cut_polygon_geometry(pts, n)
            self.cuts.append(InterfaceCut(points=pts, normal=n, offset=d,
                                          area=area, centroid=centroid))
        return self

    # ---- queries -------------------------------------------------------
    def element_vertices(self, eid: int) -> np.ndarray:
        nid = self.elem_nodes[eid]
        i, j, k = self.node_ijk(nid)
        return self.global_node_position(i + self.glo[0], j + self.glo[1],
                                         k + self.glo[2])

    def owned_slices_nodes(self) -> tuple[slice, slice, slice]:
        """Local node-index slices covering this rank's owned node block
        (owned cells' nodes; the high plane included only at the global
        boundary or when this rank owns the last cells on the axis)."""
        sl = []
        for ax in range(3):
            lo = self.own_lo[ax] - self.glo[ax]
            hi = self.own_hi[ax] - self.glo[ax]
            ncg = self.spec.ncells[ax]
            hi_nodes = hi + 1 if self.own_hi[ax] == ncg else hi
            sl.append(slice(lo, hi_nodes))
        return tuple(sl)

    def locate(self, position) -> ParticleLocation:
        """Locate one point: containing cell, tetrahedron (lowest index
        among containers), and its barycentric coordinates. Cell indices
        are local to the guarded extent."""
        p = np.asarray(position, dtype=float)
        h = self.spec.h
        nc = self.ncells
        fg = (p - np.asarray(self.spec.lo)) / h  # global fractional cell coords
        f = fg - np.asarray(self.glo)
        eps = 1e-12
        if np.any(f < -eps) or np.any(f > np.asarray(nc) + eps):
            raise OutOfDomainError(f"position {p} outside guarded extent")
        cell = np.clip(np.floor(f).astype(int), 0, np.asarray(nc) - 1)
        tet = _tet_of_fraction(f - cell, int(self.cell_parity(*cell)))
        table = TETS_EVEN if self.cell_parity(*cell) == 0 else TETS_ODD
        gcell = cell + np.asarray(self.glo)
        corners = gcell + CUBE_CORNERS[table[tet]]
        verts = self.global_node_position(corners[:, 0], corners[:, 1], corners[:, 2])
        lam = barycentric(verts, p)
        lam = np.clip(lam, 0.0, None)
        lam = lam / lam.sum()
        return ParticleLocation(cell=tuple(int(c) for c in cell), tet=tet, bary=lam)


def _tet_of_fraction(frac, parity: int) -> int:
    """Tet index (0..4) for fractional cell coordinates; ties go to the
    lowest-index containing tetrahedron."""
    fx, fy, fz = float(frac[0]), float(frac[1]), float(frac[2])
    if parity == 1:
        fx = 1.0 - fx
    # corner tets at local corners 0,3,5,6 (x already mirrored for odd)
    if fx + fy + fz <= 1.0:
        return 0
    if (1 - fx) + (1 - fy) + fz <= 1.0:
        return 1
    if (1 - fx) + fy + (1 - fz) <= 1.0:
        return 2
    if fx + (1 - fy) + (1 - fz) <= 1.0:
        return 3
    return CENTRAL_TET


def tet_of_fractions(frac: np.ndarray, parity: np.ndarray) -> np.ndarray:
    """Vectorized tet classification for (n,3) fractional coordinates."""
    fx = np.where(parity == 1, 1.0 - frac[:, 0], frac[:, 0])
    fy, fz = frac[:, 1], frac[:, 2]
    out = np.full(fx.shape, CENTRAL_TET, dtype=np.int8)
    c3 = fx + (1 - fy) + (1 - fz) <= 1.0
    out[c3] = 3
    c2 = (1 - fx) + fy + (1 - fz) <= 1.0
    out[c2] = 2
    c1 = (1 - fx) + (1 - fy) + fz <= 1.0
    out[c1] = 1
    c0 = fx + fy + fz <= 1.0
    out[c0] = 0
    return out
