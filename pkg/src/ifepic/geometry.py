"""Implicit (level-set) material geometry and sunlight-index evaluation.

Sign convention: negative inside the material region, positive in the
plasma region, zero on the interface. All lengths are in Debye lengths of
the reference species.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class SphereSpec:
    center: tuple[float, float, float]
    radius: float


@dataclass(frozen=True)
class CraterSpec:
    """Radial crater profile parameters, all in normalized length units.

    The terrain is the single-valued height field
        z(x, y) = base_height + profile(r),  r = hypot(x - cx, y - cy)
    with a flat floor at -floor_depth for r <= rim_inner, a cosine-smoothed
    wall rising to +top_height at r = rim_top, and a cosine flank decaying
    back to the base level at r = rim_outer.
    """
    center: tuple[float, float]
    rim_inner: float
    rim_top: float
    rim_outer: float
    top_height: float
    floor_depth: float
    base_height: float = 0.0

    def height(self, x, y):
        r = np.hypot(np.asarray(x, dtype=float) - self.center[0],
                     np.asarray(y, dtype=float) - self.center[1])
        z = np.zeros_like(r)
        d, ht = self.floor_depth, self.top_height
        inner = r <= self.rim_inner
        wall = (r > self.rim_inner) & (r <= self.rim_top)
        flank = (r > self.rim_top) & (r <= self.rim_outer)
        z[inner] = -d
        t = (r[wall] - self.rim_inner) / (self.rim_top - self.rim_inner)
        z[wall] = -d + (ht + d) * 0.5 * (1.0 - np.cos(np.pi * t))
        t = (r[flank] - self.rim_top) / (self.rim_outer - self.rim_top)
        z[flank] = ht * 0.5 * (1.0 + np.cos(np.pi * t))
        return z + self.base_height


@dataclass(frozen=True)
class PlaneSpec:
    """Half-space below `offset` along `axis` is material."""
    axis: int
    offset: float


@dataclass(frozen=True)
class LevelSetGeometry:
    kind: str  # sphere | crater-terrain | plane | composite
    sphere: SphereSpec | None = None
    crater: CraterSpec | None = None
    plane: PlaneSpec | None = None
    parts: tuple["LevelSetGeometry", ...] = ()

    def __post_init__(self):
        valid = {"sphere", "crater-terrain", "plane", "composite", "none"}
        if self.kind not in valid:
            raise GeometryError(f"unknown geometry kind {self.kind!r}")


def sphere_geometry(center, radius) -> LevelSetGeometry:
    if radius <= 0:
        raise GeometryError("sphere radius must be positive")
    return LevelSetGeometry(kind="sphere", sphere=SphereSpec(tuple(center), float(radius)))


def crater_geometry(crater: CraterSpec) -> LevelSetGeometry:
    if not (0 < crater.rim_inner < crater.rim_top < crater.rim_outer):
        raise GeometryError("crater radii must satisfy 0 < inner < top < outer")
    return LevelSetGeometry(kind="crater-terrain", crater=crater)


def plane_geometry(axis: int, offset: float) -> LevelSetGeometry:
    return LevelSetGeometry(kind="plane", plane=PlaneSpec(int(axis), float(offset)))


def empty_geometry() -> LevelSetGeometry:
    """All-plasma domain (level set identically positive)."""
    return LevelSetGeometry(kind="none")


def eval_level_set(geom: LevelSetGeometry, points) -> np.ndarray | float:
    """Signed value: <0 in material, >0 in plasma, 0 on the interface.

    For spheres this is the exact signed distance; for terrain/plane kinds
    it is the signed height above the surface.
    """
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if not np.all(np.isfinite(p)):
        raise GeometryError("level-set evaluation at non-finite point")
    if geom.kind == "sphere":
        c = np.asarray(geom.sphere.center)
        v = np.linalg.norm(p - c, axis=1) - geom.sphere.radius
    elif geom.kind == "crater-terrain":
        v = p[:, 2] - geom.crater.height(p[:, 0], p[:, 1])
    elif geom.kind == "plane":
        v = p[:, geom.plane.axis] - geom.plane.offset
    elif geom.kind == "composite":
        v = np.min([eval_level_set(g, p) for g in geom.parts], axis=0)
    else:  # none
        v = np.full(p.shape[0], np.inf)
    return float(v[0]) if single else v


def surface_normal(geom: LevelSetGeometry, point, delta: float = 1e-6) -> np.ndarray:
    """Outward (material -> plasma) unit normal, by central differences."""
    p = np.asarray(point, dtype=float)
    g = np.empty(3)
    for ax in range(3):
        e = np.zeros(3)
        e[ax] = delta
        g[ax] = (eval_level_set(geom, p + e) - eval_level_set(geom, p - e)) / (2 * delta)
    n = np.linalg.norm(g)
    if n == 0:
        raise GeometryError("degenerate surface normal")
    return g / n


@dataclass(frozen=True)
class SunModel:
    """Sun direction (pointing from the surface toward the Sun) and the
    reference photoelectron emission flux at normal incidence, in
    normalized units (particles per unit area per unit time)."""
    direction: tuple[float, float, float]
    reference_flux: float = 0.0

    def __post_init__(self):
        n = float(np.linalg.norm(self.direction))
        if abs(n - 1.0) > 1e-12:
            raise GeometryError("sun direction must be a unit vector (|1 - ||s||| <= 1e-12)")


def sun_from_elevation(elevation_deg: float, azimuth_axis: int = 0,
                       reference_flux: float = 0.0) -> SunModel:
    """Sun in the azimuth_axis-Z plane at the given elevation above horizon."""
    el = np.deg2rad(elevation_deg)
    d = np.zeros(3)
    d[azimuth_axis] = -np.cos(el)
    d[2] = np.sin(el)
    return SunModel(direction=tuple(d), reference_flux=reference_flux)


def sunlight_index(geom: LevelSetGeometry, surface_point, sun: SunModel,
                   tol: float = 1e-6, shadow_step: float | None = None,
                   shadow_range: float | None = None) -> float:
    """max(0, n̂·ŝ) at a surface point, 0 where terrain occludes the sun.

    The occlusion test is a discrete ray march toward the sun (terrain
    kinds only); `shadow_step` defaults to half the march range / 400.
    """
    p = np.asarray(surface_point, dtype=float)
    if abs(eval_level_set(geom, p)) > tol:
        raise GeometryError("sunlight index requested off the surface")
    s = np.asarray(sun.direction)
    n = surface_normal(geom, p)
    idx = max(0.0, float(np.dot(n, s)))
    if idx == 0.0:
        return 0.0
    crater = _terrain_of(geom)
    if crater is not None and s[2] < 1.0:
        if shadow_range is not None:
            rng = shadow_range
        else:
            rng = np.hypot(p[0] - crater.center[0], p[1] - crater.center[1]) + crater.rim_outer
        if s[2] > 0:
            # the ray cannot be occluded once above the terrain's crest
            z_max = crater.base_height + crater.top_height
            rng = min(rng, max(0.0, (z_max - p[2]) / s[2]) + 1e-9)
        step = shadow_step if shadow_step is not None else max(rng / 400.0, 1e-6)
        ts = np.arange(step, rng, step)
        if ts.size:
            ray = p[None, :] + ts[:, None] * s[None, :]
            terrain_z = crater.height(ray[:, 0], ray[:, 1])
            if np.any(ray[:, 2] < terrain_z - 1e-12):
                return 0.0
    return idx


def _terrain_of(geom: LevelSetGeometry) -> CraterSpec | None:
    if geom.kind == "crater-terrain":
        return geom.crater
    if geom.kind == "composite":
        for g in geom.parts:
            c = _terrain_of(g)
            if c is not None:
                return c
    return None
