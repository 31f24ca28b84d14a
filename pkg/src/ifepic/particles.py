"""PIC particle operations for one subdomain worker.

Normalization: lengths in reference Debye lengths, velocities in the
reference-species electron thermal speed sqrt(T_ref/m_e), time in inverse
electron plasma frequencies, potential in T_ref/e. A species' thermal
speed is sqrt(T/m) in these units, so the leapfrog kick is
v += (charge_sign / mass_ratio) * E * dt.

All random draws come from counter-based streams keyed by global
structure (cell slab, face cell, facet element), never by rank, so
particle loading and injection are identical under any decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import rng as rngmod
from .ddm import DecompTopology
from .geometry import LevelSetGeometry, SunModel, eval_level_set, sunlight_index
from .mesh import SubdomainMesh, tet_of_fractions

_SQRT2PI = np.sqrt(2.0 * np.pi)


class ParticleError(RuntimeError):
    pass


class MigrationError(ParticleError):
    pass


class GatherMaterialError(ParticleError):
    pass


@dataclass(frozen=True)
class SpeciesConfig:
    name: str
    charge_sign: int               # +1 or -1
    mass_ratio: float              # m / m_e
    temperature: float             # T / T_ref
    density: float                 # n / n_ref at the source
    ppc: int                       # loading target, particles per cell
    drift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    weight: float | None = None    # macro-particle weight; derived if None

    def __post_init__(self):
        if self.mass_ratio <= 0 or self.temperature <= 0:
            raise ValueError("mass ratio and temperature must be positive")
        if self.ppc < 1:
            raise ValueError("particles-per-cell must be >= 1")
        if self.charge_sign not in (-1, 1):
            raise ValueError("charge sign must be +1 or -1")

    @property
    def thermal_speed(self) -> float:
        return float(np.sqrt(self.temperature / self.mass_ratio))

    def macro_weight(self, h: float) -> float:
        if self.weight is not None:
            return float(self.weight)
        return self.density * h ** 3 / self.ppc


class ParticleBuffer:
    """Positions/velocities of one species on one rank."""

    def __init__(self, weight: float):
        self.pos = np.empty((0, 3))
        self.vel = np.empty((0, 3))
        self.weight = float(weight)

    @property
    def n(self) -> int:
        return self.pos.shape[0]

    def add(self, pos: np.ndarray, vel: np.ndarray) -> None:
        if len(pos) == 0:
            return
        self.pos = np.concatenate([self.pos, pos]) if self.n else np.array(pos)
        self.vel = np.concatenate([self.vel, vel]) if len(self.vel) else np.array(vel)

    def keep(self, mask: np.ndarray) -> None:
        self.pos = self.pos[mask]
        self.vel = self.vel[mask]


# ---------------------------------------------------------------------------
# drifting-Maxwellian flux machinery
# ---------------------------------------------------------------------------

def one_sided_flux(density: float, u_n: float, a: float) -> float:
    """Particle flux through a plane for a drifting Maxwellian
    (inward-normal drift u_n, thermal speed a = sqrt(T/m))."""
    from scipy.special import erf
    return density * (a / _SQRT2PI * np.exp(-u_n ** 2 / (2 * a ** 2))
                      + 0.5 * u_n * (1.0 + erf(u_n / (np.sqrt(2) * a))))


class FluxNormalSampler:
    """Samples the inward-normal speed from the flux-weighted one-sided
    Maxwellian p(v) ∝ v·exp(−(v−u)²/2a²), v > 0."""

    def __init__(self, u_n: float, a: float, table_size: int = 4096):
        self.u = float(u_n)
        self.a = float(a)
        if abs(self.u) < 1e-14:
            self.grid = None
        else:
            v = np.linspace(0.0, max(self.u, 0.0) + 8.0 * self.a, table_size)
            pdf = v * np.exp(-((v - self.u) ** 2) / (2 * self.a ** 2))
            cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(v))])
            cdf /= cdf[-1]
            # strictly increasing for interpolation
            keep = np.concatenate([[True], np.diff(cdf) > 0])
            self.grid = (cdf[keep], v[keep])

    def sample(self, uniforms: np.ndarray) -> np.ndarray:
        if self.grid is None:
            return self.a * np.sqrt(-2.0 * np.log1p(-uniforms))
        cdf, v = self.grid
        return np.interp(uniforms, cdf, v)

    def mean_speed(self) -> float:
        """Analytic first moment of the flux-weighted distribution
        (√(π/2)·a for zero drift)."""
        if self.grid is None:
            return self.a * np.sqrt(np.pi / 2.0)
        cdf, v = self.grid
        return float(np.trapezoid(v, cdf))


def deterministic_counts(rate: float, step: int, phase: np.ndarray) -> np.ndarray:
    """Exact fractional-count carryover without state: the number injected
    at `step` is floor((step+1)·rate + phase) − floor(step·rate + phase)."""
    lam = rate
    return (np.floor((step + 1) * lam + phase) - np.floor(step * lam + phase)).astype(np.int64)


# ---------------------------------------------------------------------------
# surface-charge ledger
# ---------------------------------------------------------------------------

class SurfaceChargeLedger:
    """Accumulated charge per local interface facet.

    `charge` holds the authoritative global totals (owner facets) plus
    mirrored totals on guard copies; `delta` collects this step's local
    deposits until the owner reduction. Facets below the area floor remap
    their deposits to the nearest sizable facet.
    """

    AREA_FLOOR_FACTOR = 1e-12

    def __init__(self, mesh: SubdomainMesh, owner_ranks: np.ndarray):
        self.areas = np.array([c.area for c in mesh.cuts])
        self.centroids = (np.array([c.centroid for c in mesh.cuts])
                          if len(mesh.cuts) else np.empty((0, 3)))
        self.normals = (np.array([c.normal for c in mesh.cuts])
                        if len(mesh.cuts) else np.empty((0, 3)))
        self.owner_ranks = owner_ranks
        n = len(self.areas)
        self.charge = np.zeros(n)
        self.delta = np.zeros(n)
        floor = self.AREA_FLOOR_FACTOR * mesh.spec.h ** 2
        self.active = self.areas > floor
        self.remap = np.arange(n)
        if n and not np.all(self.active):
            if not np.any(self.active):
                raise ParticleError("all interface facets below the area floor")
            tree = cKDTree(self.centroids[self.active])
            act_idx = np.nonzero(self.active)[0]
            for i in np.nonzero(~self.active)[0]:
                _, j = tree.query(self.centroids[i])
                self.remap[i] = act_idx[j]
        self._tree = cKDTree(self.centroids) if n else None

    def nearest_facet(self, points: np.ndarray) -> np.ndarray:
        if self._tree is None:
            raise ParticleError("no interface facets on this rank to receive charge")
        _, idx = self._tree.query(points)
        return self.remap[np.atleast_1d(idx)]

    def deposit(self, facet_ids: np.ndarray, charges: np.ndarray) -> None:
        np.add.at(self.delta, facet_ids, charges)

    def q_values(self) -> np.ndarray:
        """Jump data per facet: accumulated charge / facet area."""
        q = np.zeros_like(self.charge)
        np.divide(self.charge, self.areas, out=q, where=self.active)
        return q

    def owned_total(self, rank: int) -> float:
        if len(self.charge) == 0:
            return 0.0
        return float(self.charge[self.owner_ranks == rank].sum())


# ---------------------------------------------------------------------------
# per-face injection setup
# ---------------------------------------------------------------------------

FACE_AXES = {"x-": (0, 0), "x+": (0, 1), "y-": (1, 0), "y+": (1, 1),
             "z-": (2, 0), "z+": (2, 1)}
FACE_IDS = {name: i for i, name in enumerate(("x-", "x+", "y-", "y+", "z-", "z+"))}


@dataclass
class InjectingFace:
    name: str
    axis: int
    side: int                      # 0 = low face, 1 = high face
    cells_u: np.ndarray            # owned tangential cell indices (global)
    cells_v: np.ndarray
    rate: float                    # expected macro-particles per cell per step
    sampler: FluxNormalSampler
    drift_t: tuple[float, float]   # tangential drift (axes u, v)
    phases: np.ndarray             # per-cell deterministic phase offsets
    entities: np.ndarray           # per-cell RNG entity keys
    species: SpeciesConfig = None
    tangent_axes: tuple[int, int] = (1, 2)


class ParticleOps:
    """All per-rank particle operations of the PIC step."""

    def __init__(self, mesh: SubdomainMesh, topology: DecompTopology, rank: int,
                 geometry: LevelSetGeometry, species: list[SpeciesConfig],
                 face_particle_bc: dict[str, str], dt: float, master_seed: int,
                 sun: SunModel | None = None,
                 photo_species: str | None = None):
        self.mesh = mesh
        self.topology = topology
        self.rank = rank
        self.geometry = geometry
        self.species = species
        self.dt = float(dt)
        self.seed = int(master_seed)
        self.sun = sun
        self.face_bc = dict(face_particle_bc)
        for name, bc in self.face_bc.items():
            if bc not in ("reflect", "open", "inject"):
                raise ValueError(f"unknown particle boundary {bc!r} on face {name}")
        h = mesh.spec.h
        self.buffers = {s.name: ParticleBuffer(s.macro_weight(h)) for s in species}
        self.photo_species = photo_species
        self.has_material = geometry.kind != "none"

        owner = np.empty(len(mesh.interface_ids), dtype=np.int64)
        for w, eid in enumerate(mesh.interface_ids):
            cell_lin = int(eid) // 5
            nc = mesh.ncells
            ci = cell_lin // (nc[1] * nc[2]) + mesh.glo[0]
            cj = (cell_lin // nc[2]) % nc[1] + mesh.glo[1]
            ck = cell_lin % nc[2] + mesh.glo[2]
            owner[w] = topology.cell_owner((ci, cj, ck))
        self.ledger = SurfaceChargeLedger(mesh, owner)

        self.book_injected = 0.0   # cumulative injected charge
        self.book_exited = 0.0     # cumulative charge removed at open faces
        self.lost_nonfinite = 0

        self._faces = self._build_injecting_faces()
        self._facet_sindex = None
        self._facet_phase = None
        if self.sun is not None and len(mesh.cuts):
            self._setup_emission()

    # ---- setup ---------------------------------------------------------

    def _owned_box(self) -> tuple[np.ndarray, np.ndarray]:
        h = self.mesh.spec.h
        lo = np.asarray(self.mesh.spec.lo) + np.asarray(self.mesh.own_lo) * h
        hi = np.asarray(self.mesh.spec.lo) + np.asarray(self.mesh.own_hi) * h
        return lo, hi

    def _build_injecting_faces(self) -> list[InjectingFace]:
        faces = []
        nc = self.mesh.spec.ncells
        h = self.mesh.spec.h
        max_c = max(nc) + 1
        for name, bc in self.face_bc.items():
            if bc != "inject":
                continue
            ax, side = FACE_AXES[name]
            on_face = (self.mesh.own_lo[ax] == 0) if side == 0 else \
                (self.mesh.own_hi[ax] == nc[ax])
            if not on_face:
                continue
            tu, tv = [a for a in range(3) if a != ax]
            cu = np.arange(self.mesh.own_lo[tu], self.mesh.own_hi[tu])
            cv = np.arange(self.mesh.own_lo[tv], self.mesh.own_hi[tv])
            gu, gv = np.meshgrid(cu, cv, indexing="ij")
            gu, gv = gu.ravel(), gv.ravel()
            entities = FACE_IDS[name] * max_c * max_c + gu * max_c + gv
            for s in self.species:
                a = s.thermal_speed
                inward = 1.0 if side == 0 else -1.0
                u_n = inward * s.drift[ax]
                flux = one_sided_flux(s.density, u_n, a)
                rate = flux * h * h * self.dt / s.macro_weight(h)
                if rate <= 0:
                    continue
                phases = np.array([
                    rngmod.stream(self.seed, rngmod.CTX_INJECT,
                                  self._species_id(s.name), 0, int(e)).random()
                    for e in entities])
                faces.append(InjectingFace(
                    name=name, axis=ax, side=side, cells_u=gu, cells_v=gv,
                    rate=rate, sampler=FluxNormalSampler(u_n, a),
                    drift_t=(s.drift[tu], s.drift[tv]),
                    phases=phases, entities=entities,
                    species=s, tangent_axes=(tu, tv)))
        return faces

    def _species_id(self, name: str) -> int:
        for i, s in enumerate(self.species):
            if s.name == name:
                return i
        raise KeyError(name)

    def _setup_emission(self) -> None:
        h = self.mesh.spec.h
        n = len(self.mesh.cuts)
        sindex = np.zeros(n)
        owned = self.ledger.owner_ranks == self.rank
        for w in np.nonzero(owned)[0]:
            c = self.ledger.centroids[w]
            try:
                sindex[w] = sunlight_index(self.geometry, c, self.sun,
                                           tol=h, shadow_step=0.5 * h)
            except Exception:
                sindex[w] = 0.0
        self._facet_sindex = sindex
        sid = self._species_id(self.photo_species)
        nc = self.mesh.ncells
        self._facet_entity = np.empty(n, dtype=np.int64)
        for w, eid in enumerate(self.mesh.interface_ids):
            cell_lin = int(eid) // 5
            ci = cell_lin // (nc[1] * nc[2]) + self.mesh.glo[0]
            cj = (cell_lin // nc[2]) % nc[1] + self.mesh.glo[1]
            ck = cell_lin % nc[2] + self.mesh.glo[2]
            gnc = self.mesh.spec.ncells
            glin = (ci * gnc[1] + cj) * gnc[2] + ck
            self._facet_entity[w] = glin * 5 + (int(eid) % 5)
        self._facet_phase = np.array([
            rngmod.stream(self.seed, rngmod.CTX_EMIT, sid, 0, int(e)).random()
            for e in self._facet_entity])

    # ---- loading -------------------------------------------------------

    def preload(self) -> None:
        """Uniform loading of ppc particles per plasma cell per species,
        drawn per global k-slab so any decomposition loads identically."""
        spec = self.mesh.spec
        nc = spec.ncells
        h = spec.h
        lo = np.asarray(spec.lo)
        iu = np.arange(nc[0])
        ju = np.arange(nc[1])
        gi, gj = np.meshgrid(iu, ju, indexing="ij")
        gi, gj = gi.ravel(), gj.ravel()
        own_i = (gi >= self.mesh.own_lo[0]) & (gi < self.mesh.own_hi[0])
        own_j = (gj >= self.mesh.own_lo[1]) & (gj < self.mesh.own_hi[1])
        col_mask = own_i & own_j
        for sidx, s in enumerate(self.species):
            if s.name == self.photo_species:
                continue  # photoelectrons come only from emission
            a = s.thermal_speed
            drift = np.asarray(s.drift)
            for k in range(self.mesh.own_lo[2], self.mesh.own_hi[2]):
                r = rngmod.stream(self.seed, rngmod.CTX_PRELOAD, sidx, 0, k)
                npart = gi.size * s.ppc
                upos = r.random((npart, 3))
                vel = drift + a * r.standard_normal((npart, 3))
                cells = np.repeat(
                    np.stack([gi, gj, np.full_like(gi, k)], axis=1), s.ppc, axis=0)
                keep = np.repeat(col_mask, s.ppc)
                pos = lo + (cells[keep] + upos[keep]) * h
                vel = vel[keep]
                if self.has_material:
                    ls = eval_level_set(self.geometry, pos)
                    inside = ls > 0
                    pos, vel = pos[inside], vel[inside]
                self.buffers[s.name].add(pos, vel)

    def half_step_back(self, efield_fn) -> None:
        """Initialize the leapfrog stagger: v ← v − (q/m)E(x)·dt/2."""
        for s in self.species:
            buf = self.buffers[s.name]
            if buf.n == 0:
                continue
            E = efield_fn(buf.pos)
            buf.vel -= (s.charge_sign / s.mass_ratio) * E * (0.5 * self.dt)

    # ---- field interpolation ------------------------------------------

    def locate_elements(self, pos: np.ndarray) -> np.ndarray:
        mesh = self.mesh
        nc = np.asarray(mesh.ncells)
        fg = (pos - np.asarray(mesh.spec.lo)) / mesh.spec.h
        f = fg - np.asarray(mesh.glo)
        cell = np.clip(np.floor(f).astype(np.int64), 0, nc - 1)
        frac = f - cell
        parity = (cell.sum(axis=1) + sum(mesh.glo)) % 2
        tet = tet_of_fractions(frac, parity)
        lin = ((cell[:, 0] * nc[1]) + cell[:, 1]) * nc[2] + cell[:, 2]
        return lin * 5 + tet

    def gather(self, pos: np.ndarray, E_minus: np.ndarray, E_plus: np.ndarray,
               evaluator) -> np.ndarray:
        """Per-particle E from the element's side-resolved constant field."""
        if self.has_material:
            ls = eval_level_set(self.geometry, pos)
            if np.any(ls < 0):
                raise GatherMaterialError(
                    f"{int(np.sum(ls < 0))} particles inside the material region at gather")
        elem = self.locate_elements(pos)
        E = E_plus[elem]
        ifm = evaluator.if_map[elem]
        m = ifm >= 0
        if np.any(m):
            n = evaluator.if_normals[ifm[m]]
            d = evaluator.if_offsets[ifm[m]]
            minus = np.einsum("ij,ij->i", pos[m], n) - d < 0
            sel = np.nonzero(m)[0][minus]
            E[sel] = E_minus[elem[sel]]
        return E

    # ---- push + boundaries ---------------------------------------------

    def push(self, efield_by_species) -> dict[str, np.ndarray]:
        """Leapfrog update; returns the pre-push positions per species."""
        old = {}
        for s in self.species:
            buf = self.buffers[s.name]
            if buf.n == 0:
                old[s.name] = buf.pos.copy()
                continue
            E = efield_by_species[s.name]
            buf.vel += (s.charge_sign / s.mass_ratio) * E * self.dt
            old[s.name] = buf.pos.copy()
            buf.pos = buf.pos + buf.vel * self.dt
            bad = ~np.all(np.isfinite(buf.pos) & np.isfinite(buf.vel), axis=1)
            if np.any(bad):
                self.lost_nonfinite += int(bad.sum())
                buf.keep(~bad)
                old[s.name] = old[s.name][~bad]
        return old

    def _fold_into_domain(self, pos: np.ndarray) -> np.ndarray:
        """Mirror positions across reflecting faces into the domain box."""
        out = pos.copy()
        spec = self.mesh.spec
        for name, bc in self.face_bc.items():
            if bc != "reflect":
                continue
            ax, side = FACE_AXES[name]
            plane = spec.lo[ax] if side == 0 else spec.hi[ax]
            if side == 0:
                m = out[:, ax] < plane
            else:
                m = out[:, ax] > plane
            out[m, ax] = 2.0 * plane - out[m, ax]
        return out

    def apply_boundaries(self, old_pos: dict[str, np.ndarray]) -> None:
        """Material absorption (ledger deposit), specular reflection at
        symmetry faces, and removal at open faces."""
        spec = self.mesh.spec
        for s in self.species:
            buf = self.buffers[s.name]
            if buf.n == 0:
                continue
            pos, vel = buf.pos, buf.vel
            old = old_pos[s.name]

            if self.has_material:
                ls_new = eval_level_set(self.geometry, self._fold_into_domain(pos))
                hit = ls_new < 0
                if np.any(hit):
                    p0, p1 = old[hit], pos[hit]
                    t_lo = np.zeros(p0.shape[0])
                    t_hi = np.ones(p0.shape[0])
                    for _ in range(5):
                        t_mid = 0.5 * (t_lo + t_hi)
                        q = p0 + t_mid[:, None] * (p1 - p0)
                        ls = eval_level_set(self.geometry, self._fold_into_domain(q))
                        below = ls < 0
                        t_hi[below] = t_mid[below]
                        t_lo[~below] = t_mid[~below]
                    q = self._fold_into_domain(p0 + (0.5 * (t_lo + t_hi))[:, None] * (p1 - p0))
                    facets = self.ledger.nearest_facet(q)
                    self.ledger.deposit(facets,
                                        np.full(len(facets), s.charge_sign * buf.weight))
                    buf.keep(~hit)
                    old = old[~hit]
                    pos, vel = buf.pos, buf.vel
                    if buf.n == 0:
                        continue

            for name, bc in self.face_bc.items():
                if bc != "reflect":
                    continue
                ax, side = FACE_AXES[name]
                plane = spec.lo[ax] if side == 0 else spec.hi[ax]
                m = pos[:, ax] < plane if side == 0 else pos[:, ax] > plane
                if np.any(m):
                    pos[m, ax] = 2.0 * plane - pos[m, ax]
                    vel[m, ax] = -vel[m, ax]

            gone = np.zeros(buf.n, dtype=bool)
            for name, bc in self.face_bc.items():
                if bc == "reflect":
                    continue
                ax, side = FACE_AXES[name]
                if side == 0:
                    gone |= pos[:, ax] < spec.lo[ax]
                else:
                    gone |= pos[:, ax] >= spec.hi[ax]
            if np.any(gone):
                self.book_exited += s.charge_sign * buf.weight * int(gone.sum())
                buf.keep(~gone)

    # ---- migration ------------------------------------------------------

    def migration_payloads(self) -> dict[int, dict[str, tuple[np.ndarray, np.ndarray]]]:
        """Split off particles whose positions left the owned region and
        serialize them toward their destination ranks."""
        topo = self.topology
        spec = self.mesh.spec
        nc = np.asarray(spec.ncells)
        my = np.asarray(topo.rank_to_coords(self.rank))
        outbox: dict[int, dict[str, tuple[np.ndarray, np.ndarray]]] = {}
        for s in self.species:
            buf = self.buffers[s.name]
            if buf.n == 0:
                continue
            cells = np.clip(((buf.pos - np.asarray(spec.lo)) / spec.h).astype(np.int64),
                            0, nc - 1)
            coords = topo.owner_coords_of_cells(cells)
            moved = np.any(coords != my, axis=1)
            if not np.any(moved):
                continue
            off = coords[moved] - my
            if np.any(np.abs(off) > 1):
                raise MigrationError(
                    "particle moved beyond the neighbor shell in one step; "
                    "reduce dt so particles travel at most 2 cells per step")
            dsts = (coords[moved][:, 0] * topo.dims[1] + coords[moved][:, 1]) \
                * topo.dims[2] + coords[moved][:, 2]
            for d in np.unique(dsts):
                sel = np.nonzero(moved)[0][dsts == d]
                outbox.setdefault(int(d), {})[s.name] = (buf.pos[sel].copy(),
                                                         buf.vel[sel].copy())
            buf.keep(~moved)
        return outbox

    def receive_migrants(self, inbox: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
        for name, (pos, vel) in inbox.items():
            self.buffers[name].add(pos, vel)

    # ---- sources --------------------------------------------------------

    def inject(self, step: int) -> None:
        """Inflow-face injection with deterministic fractional carryover
        and flux-weighted wall-normal velocities."""
        spec = self.mesh.spec
        h = spec.h
        lo_box, hi_box = self._owned_box()
        eps = 1e-9 * h
        for f in self._faces:
            s = f.species
            counts = deterministic_counts(f.rate, step, f.phases)
            total = int(counts.sum())
            if total == 0:
                continue
            sid = self._species_id(s.name)
            pos_list, vel_list = [], []
            for ci in np.nonzero(counts)[0]:
                k = int(counts[ci])
                r = rngmod.stream(self.seed, rngmod.CTX_INJECT, sid, step,
                                  int(f.entities[ci]))
                uv = r.random((k, 2))
                frac_dt = r.random(k)
                un = f.sampler.sample(r.random(k))
                ut = r.standard_normal((k, 2))
                tu, tv = f.tangent_axes
                p = np.empty((k, 3))
                plane = spec.lo[f.axis] if f.side == 0 else spec.hi[f.axis]
                p[:, f.axis] = plane
                p[:, tu] = spec.lo[tu] + (f.cells_u[ci] + uv[:, 0]) * h
                p[:, tv] = spec.lo[tv] + (f.cells_v[ci] + uv[:, 1]) * h
                v = np.empty((k, 3))
                inward = 1.0 if f.side == 0 else -1.0
                v[:, f.axis] = inward * un
                v[:, tu] = f.drift_t[0] + s.thermal_speed * ut[:, 0]
                v[:, tv] = f.drift_t[1] + s.thermal_speed * ut[:, 1]
                p = p + v * (frac_dt[:, None] * self.dt)
                pos_list.append(p)
                vel_list.append(v)
            pos = np.clip(np.concatenate(pos_list), lo_box + eps, hi_box - eps)
            vel = np.concatenate(vel_list)
            if self.has_material:
                keep = eval_level_set(self.geometry, pos) > 0
                pos, vel = pos[keep], vel[keep]
            self.buffers[s.name].add(pos, vel)
            self.book_injected += s.charge_sign * self.buffers[s.name].weight * len(pos)

    def emit_photoelectrons(self, step: int) -> int:
        """Photoemission from sunlit owned facets; emitted charge is
        debited from the facet ledger (the surface becomes more positive)."""
        if self.sun is None or self._facet_sindex is None:
            return 0
        s = self.species[self._species_id(self.photo_species)]
        buf = self.buffers[s.name]
        h = self.mesh.spec.h
        a = s.thermal_speed
        rates = (self.sun.reference_flux * self._facet_sindex
                 * self.ledger.areas * self.dt / buf.weight)
        emitted = 0
        lo_box, hi_box = self._owned_box()
        eps = 1e-9 * h
        sid = self._species_id(s.name)
        owned = self.ledger.owner_ranks == self.rank
        hot = np.nonzero((rates > 0) & owned)[0]
        if not len(hot):
            return 0
        for w in hot:
            k = int(np.floor((step + 1) * rates[w] + self._facet_phase[w])
                    - np.floor(step * rates[w] + self._facet_phase[w]))
            if k == 0:
                continue
            r = rngmod.stream(self.seed, rngmod.CTX_EMIT, sid, step,
                              int(self._facet_entity[w]))
            cut = self.mesh.cuts[int(w)]
            p = _sample_on_polygon(cut.points, cut.normal, k, r)
            n = cut.normal
            t1 = _any_tangent(n)
            t2 = np.cross(n, t1)
            vn = a * np.sqrt(-2.0 * np.log1p(-r.random(k)))
            vt = a * r.standard_normal((k, 2))
            v = vn[:, None] * n + vt[:, 0][:, None] * t1 + vt[:, 1][:, None] * t2
            p = p + (1e-6 * h) * n
            p = np.clip(p, lo_box + eps, hi_box - eps)
            buf.add(p, v)
            # the surface loses one electron's charge per emitted particle
            self.ledger.delta[w] -= s.charge_sign * buf.weight * k
            emitted += k
        return emitted

    # ---- scatter ---------------------------------------------------------

    def scatter_deposit(self) -> np.ndarray:
        """Cloud-in-cell deposit of charge·weight onto the guarded nodes;
        returns raw deposited charge (convert with node control volumes
        after the guard reduction)."""
        mesh = self.mesh
        nn = mesh.nnodes
        total = np.zeros(nn[0] * nn[1] * nn[2])
        nc = np.asarray(mesh.ncells)
        for s in self.species:
            buf = self.buffers[s.name]
            if buf.n == 0:
                continue
            fg = (buf.pos - np.asarray(mesh.spec.lo)) / mesh.spec.h
            f = fg - np.asarray(mesh.glo)
            base = np.clip(np.floor(f).astype(np.int64), 0, nc - 1)
            w = f - base
            q = s.charge_sign * buf.weight
            for dx in (0, 1):
                wx = w[:, 0] if dx else 1.0 - w[:, 0]
                for dy in (0, 1):
                    wy = w[:, 1] if dy else 1.0 - w[:, 1]
                    for dz in (0, 1):
                        wz = w[:, 2] if dz else 1.0 - w[:, 2]
                        ids = ((base[:, 0] + dx) * nn[1] + base[:, 1] + dy) * nn[2] \
                            + base[:, 2] + dz
                        total += q * np.bincount(ids, weights=wx * wy * wz,
                                                 minlength=total.size)
        return total

    def node_control_volumes(self) -> np.ndarray:
        """h³ per node, halved per axis on which the node lies on the
        *global* domain boundary."""
        mesh = self.mesh
        nn = mesh.nnodes
        i, j, k = np.meshgrid(np.arange(nn[0]), np.arange(nn[1]), np.arange(nn[2]),
                              indexing="ij")
        vol = np.full(nn, mesh.spec.h ** 3)
        nc = mesh.spec.ncells
        for ax, idx in ((0, i), (1, j), (2, k)):
            g = idx + mesh.glo[ax]
            vol[(g == 0) | (g == nc[ax])] *= 0.5
        return vol.ravel()

    # ---- bookkeeping ------------------------------------------------------

    def counts(self) -> np.ndarray:
        return np.array([self.buffers[s.name].n for s in self.species], dtype=np.int64)

    def plasma_charge(self) -> float:
        return float(sum(s.charge_sign * self.buffers[s.name].weight * self.buffers[s.name].n
                         for s in self.species))


def _any_tangent(n: np.ndarray) -> np.ndarray:
    t = np.cross(n, [1.0, 0.0, 0.0])
    if np.linalg.norm(t) < 1e-8:
        t = np.cross(n, [0.0, 1.0, 0.0])
    return t / np.linalg.norm(t)


def _sample_on_polygon(points: np.ndarray, normal: np.ndarray, k: int,
                       r: np.random.Generator) -> np.ndarray:
    """Uniform samples on the (ordered) cut polygon via its triangle fan."""
    c = points.mean(axis=0)
    t1 = _any_tangent(normal)
    t2 = np.cross(normal, t1)
    ang = np.arctan2((points - c) @ t2, (points - c) @ t1)
    p = points[np.argsort(ang)]
    tris = [(p[0], p[i], p[i + 1]) for i in range(1, len(p) - 1)]
    areas = np.array([0.5 * np.linalg.norm(np.cross(b - a, cc - a)) for a, b, cc in tris])
    if areas.sum() <= 0:
        return np.tile(c, (k, 1))
    probs = areas / areas.sum()
    choice = r.choice(len(tris), size=k, p=probs)
    u = r.random((k, 2))
    flip = u.sum(axis=1) > 1.0
    u[flip] = 1.0 - u[flip]
    out = np.empty((k, 3))
    for i, (a, b, cc) in enumerate(tris):
        m = choice == i
        if np.any(m):
            out[m] = a + u[m, 0][:, None] * (b - a) + u[m, 1][:, None] * (cc - a)
    return out
