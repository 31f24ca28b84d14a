"""Simulation configuration: dataclasses, scenario builders for the two
shipped setups (floating dielectric sphere, lunar crater), and a flat
sectioned key/value config-file format with explicit units in key names.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (CraterSpec, LevelSetGeometry, SunModel, crater_geometry,
                       empty_geometry, sphere_geometry, sun_from_elevation)
from .ife import FACE_NAMES
from .mesh import GlobalMeshSpec
from .oracle import ManufacturedInterface
from .particles import SpeciesConfig
from .solver import PCGConfig

# electron thermal speed in km/s per sqrt(eV), for physical-unit configs
VTE_KMS_PER_SQRT_EV = 419.3826


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayeredEps:
    """Material permittivity by depth: regolith above the bedrock top,
    bedrock below (evaluated at element centroids)."""
    regolith: float
    bedrock: float
    bedrock_top: float

    def __call__(self, point) -> float:
        return self.bedrock if point[2] < self.bedrock_top else self.regolith


@dataclass
class SimulationConfig:
    scenario: str
    mesh: GlobalMeshSpec
    decomposition: tuple[int, int, int]
    species: list[SpeciesConfig]
    dt: float
    steps: int
    pcg: PCGConfig
    ddm_tolerance: float
    ddm_max_iterations: int
    ddm_initial_max_iterations: int
    master_seed: int
    output_dir: str
    geometry: LevelSetGeometry
    eps_plus: float
    eps_minus: object                      # scalar or LayeredEps
    field_bc: dict[str, tuple[str, float]]  # face -> (kind, value)
    particle_bc: dict[str, str]             # face -> reflect|open|inject
    sun: SunModel | None = None
    photo_species: str | None = None
    manufactured: ManufacturedInterface | None = None
    history_cadence: int = 1
    snapshot_cadence: int = 0              # 0 = final snapshot only
    profile_window: int = 0                # trailing steps averaged for the profile
    profile_r_max: float = 0.0
    write_mesh_vtk: bool = False

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not (0 < self.ddm_tolerance < 1):
            raise ConfigError("DDM tolerance must lie in (0,1)")
        if self.ddm_max_iterations < 1 or self.ddm_initial_max_iterations < 1:
            raise ConfigError("DDM iteration caps must be >= 1")
        if set(self.field_bc) != set(FACE_NAMES) or set(self.particle_bc) != set(FACE_NAMES):
            raise ConfigError("field and particle boundary maps must cover all six faces")
        names = [s.name for s in self.species]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate species names")

    @property
    def n_workers(self) -> int:
        px, py, pz = self.decomposition
        return px * py * pz

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get("IFEPIC_OUTPUT_DIR", self.output_dir))


# ---------------------------------------------------------------------------
# shipped scenarios
# ---------------------------------------------------------------------------

def oml_sphere_config(desk: bool = True, output_dir: str = "out_oml",
                      seed: int = 20260810) -> SimulationConfig:
    """Floating dielectric sphere in a stationary hydrogen plasma, 1/8
    symmetry. `desk=True` is the reduced acceptance scale (h=0.2, 27 ppc,
    2x2x2, 10k steps); `desk=False` is the full published configuration
    (h=0.1, 125 ppc, 5x5x5, 50k steps)."""
    h = 0.2 if desk else 0.1
    ppc = 27 if desk else 125
    mesh = GlobalMeshSpec(lo=(0.0, 0.0, 0.0), hi=(5.0, 5.0, 5.0), h=h)
    species = [
        SpeciesConfig(name="electrons", charge_sign=-1, mass_ratio=1.0,
                      temperature=1.0, density=1.0, ppc=ppc),
        SpeciesConfig(name="ions", charge_sign=+1, mass_ratio=1836.0,
                      temperature=1.0, density=1.0, ppc=ppc),
    ]
    return SimulationConfig(
        scenario="oml-sphere",
        mesh=mesh,
        decomposition=(2, 2, 2) if desk else (5, 5, 5),
        species=species,
        dt=0.01,
        steps=10000 if desk else 50000,
        pcg=PCGConfig(max_iterations=60, tolerance=1e-6),
        ddm_tolerance=1e-2,
        ddm_max_iterations=50,
        ddm_initial_max_iterations=150,
        master_seed=seed,
        output_dir=output_dir,
        geometry=sphere_geometry((0.0, 0.0, 0.0), 0.401),
        eps_plus=1.0,
        eps_minus=4.0,
        field_bc={"x-": ("neumann", 0.0), "y-": ("neumann", 0.0), "z-": ("neumann", 0.0),
                  "x+": ("dirichlet", 0.0), "y+": ("dirichlet", 0.0), "z+": ("dirichlet", 0.0)},
        particle_bc={"x-": "reflect", "y-": "reflect", "z-": "reflect",
                     "x+": "inject", "y+": "inject", "z+": "inject"},
        profile_window=2000,
        profile_r_max=2.5,
    )


def crater_config(desk: bool = True, output_dir: str = "out_crater",
                  seed: int = 20260811, ppc: int = 8) -> SimulationConfig:
    """Lunar crater charging under average solar wind, half-crater
    symmetry at y=0, sun 10 degrees above the horizon in the X-Z plane.

    Physical parameters (densities in cm^-3, temperatures in eV, drifts in
    km/s) are normalized by the photoelectron reference (T=2.2 eV, n=64,
    Debye length 1.38 m). `desk=True` scales the published crater shape
    onto a 50x25x25-cell domain.
    """
    t_ref_ev = 2.2
    n_ref = 64.0
    vte_ref = VTE_KMS_PER_SQRT_EV * np.sqrt(t_ref_ev)   # 622 km/s
    drift_kms = 468.0
    elevation = 10.0
    sunward = np.array([-np.cos(np.deg2rad(elevation)), 0.0, np.sin(np.deg2rad(elevation))])
    drift = tuple(-sunward * (drift_kms / vte_ref))

    scale = 0.25 if desk else 1.0
    nx, ny, nz = (50, 25, 25) if desk else (200, 100, 100)
    mesh = GlobalMeshSpec(lo=(0.0, 0.0, 0.0), hi=(float(nx), float(ny), float(nz)), h=1.0)
    bedrock_top = 4.5 * scale
    ground = 9.5 * scale
    crater = CraterSpec(center=(nx / 2.0, 0.0),
                        rim_inner=10.5 * scale, rim_top=20.2 * scale,
                        rim_outer=30.9 * scale, top_height=6.7 * scale,
                        floor_depth=6.0 * scale, base_height=ground)

    def norm_T(t_ev):
        return t_ev / t_ref_ev

    species = [
        SpeciesConfig(name="sw_electrons", charge_sign=-1, mass_ratio=1.0,
                      temperature=norm_T(12.0), density=8.7 / n_ref, ppc=ppc,
                      drift=drift),
        SpeciesConfig(name="sw_ions", charge_sign=+1, mass_ratio=1836.0,
                      temperature=norm_T(10.0), density=8.7 / n_ref, ppc=ppc,
                      drift=drift),
        SpeciesConfig(name="photoelectrons", charge_sign=-1, mass_ratio=1.0,
                      temperature=1.0, density=1.0, ppc=ppc,
                      weight=1.0 * mesh.h ** 3 / ppc),
    ]
    sun = sun_from_elevation(elevation, azimuth_axis=0,
                             reference_flux=1.0 / np.sqrt(2.0 * np.pi))
    return SimulationConfig(
        scenario="lunar-crater",
        mesh=mesh,
        decomposition=(2, 2, 2) if desk else (8, 4, 4),
        species=species,
        dt=0.05,
        steps=2000 if desk else 20000,
        pcg=PCGConfig(max_iterations=150, tolerance=1e-6),
        ddm_tolerance=1e-3,
        ddm_max_iterations=200,
        ddm_initial_max_iterations=800,
        master_seed=seed,
        output_dir=output_dir,
        geometry=crater_geometry(crater),
        eps_plus=1.0,
        eps_minus=LayeredEps(regolith=4.0, bedrock=10.0, bedrock_top=bedrock_top),
        field_bc={"x-": ("neumann", 0.0), "x+": ("neumann", 0.0),
                  "y-": ("neumann", 0.0), "y+": ("neumann", 0.0),
                  "z-": ("neumann", 0.0), "z+": ("dirichlet", 0.0)},
        particle_bc={"x-": "inject", "x+": "inject", "y-": "reflect",
                     "y+": "inject", "z-": "open", "z+": "inject"},
        sun=sun,
        photo_species="photoelectrons",
    )


def manufactured_config(n_cells: int = 16, q: float = 0.0,
                        eps_minus: float = 4.0, eps_plus: float = 1.0,
                        decomposition=(1, 1, 1), output_dir: str = "out_mms",
                        ddm_tolerance: float = 1e-6,
                        ddm_max_iterations: int = 500,
                        pcg: PCGConfig | None = None) -> SimulationConfig:
    """Field-only manufactured-solution run on the unit box with a sphere
    interface of radius 0.283 at the box center."""
    mesh = GlobalMeshSpec(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0), h=1.0 / n_cells)
    mms = ManufacturedInterface(eps_minus=eps_minus, eps_plus=eps_plus,
                                radius=0.283, center=(0.5, 0.5, 0.5), q=q)
    return SimulationConfig(
        scenario="manufactured",
        mesh=mesh,
        decomposition=tuple(decomposition),
        species=[],
        dt=1.0,
        steps=0,
        pcg=pcg or PCGConfig(max_iterations=2000, tolerance=1e-10),
        ddm_tolerance=ddm_tolerance,
        ddm_max_iterations=ddm_max_iterations,
        ddm_initial_max_iterations=ddm_max_iterations,
        master_seed=1,
        output_dir=output_dir,
        geometry=sphere_geometry(mms.center, mms.radius),
        eps_plus=eps_plus,
        eps_minus=eps_minus,
        field_bc={name: ("dirichlet", 0.0) for name in FACE_NAMES},
        particle_bc={name: "open" for name in FACE_NAMES},
        manufactured=mms,
    )


# ---------------------------------------------------------------------------
# config-file round trip
# ---------------------------------------------------------------------------

def load_config(path) -> SimulationConfig:
    """Parse the flat sectioned key/value format (see configs/)."""
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    try:
        scenario = cp["simulation"]["scenario"]
    except KeyError as e:
        raise ConfigError(f"missing [simulation] scenario: {e}") from e

    if scenario == "oml-sphere":
        base = oml_sphere_config(desk=cp["simulation"].getboolean("desk_scale", True))
    elif scenario == "lunar-crater":
        base = crater_config(desk=cp["simulation"].getboolean("desk_scale", True))
    elif scenario == "manufactured":
        base = manufactured_config()
    else:
        raise ConfigError(f"unknown scenario {scenario!r}")

    sim = cp["simulation"]
    kw = {}
    if "steps" in sim:
        kw["steps"] = sim.getint("steps")
    if "dt_wpe" in sim:
        kw["dt"] = sim.getfloat("dt_wpe")
    if "master_seed" in sim:
        kw["master_seed"] = sim.getint("master_seed")
    if "output_dir" in sim:
        kw["output_dir"] = sim["output_dir"]
    if "history_cadence" in sim:
        kw["history_cadence"] = sim.getint("history_cadence")
    if "snapshot_cadence" in sim:
        kw["snapshot_cadence"] = sim.getint("snapshot_cadence")
    if "profile_window_steps" in sim:
        kw["profile_window"] = sim.getint("profile_window_steps")
    if "write_mesh_vtk" in sim:
        kw["write_mesh_vtk"] = sim.getboolean("write_mesh_vtk")

    if "domain" in cp:
        dom = cp["domain"]
        lo = tuple(dom.getfloat(f"{ax}_min_debye", base.mesh.lo[i])
                   for i, ax in enumerate("xyz"))
        hi = tuple(dom.getfloat(f"{ax}_max_debye", base.mesh.hi[i])
                   for i, ax in enumerate("xyz"))
        h = dom.getfloat("cell_size_debye", base.mesh.h)
        kw["mesh"] = GlobalMeshSpec(lo=lo, hi=hi, h=h)

    if "decomposition" in cp:
        d = cp["decomposition"]
        kw["decomposition"] = (d.getint("px", base.decomposition[0]),
                               d.getint("py", base.decomposition[1]),
                               d.getint("pz", base.decomposition[2]))

    if "solver" in cp:
        so = cp["solver"]
        kw["pcg"] = PCGConfig(
            max_iterations=so.getint("pcg_max_iterations", base.pcg.max_iterations),
            tolerance=so.getfloat("pcg_tolerance", base.pcg.tolerance))
        kw["ddm_tolerance"] = so.getfloat("ddm_tolerance", base.ddm_tolerance)
        kw["ddm_max_iterations"] = so.getint("ddm_max_iterations", base.ddm_max_iterations)
        kw["ddm_initial_max_iterations"] = so.getint(
            "ddm_initial_max_iterations", base.ddm_initial_max_iterations)

    ppc_override = None
    if "particles" in cp and "ppc" in cp["particles"]:
        ppc_override = cp["particles"].getint("ppc")
    cfg = replace(base, **kw)
    if ppc_override is not None:
        cfg = replace(cfg, species=[replace(s, ppc=ppc_override, weight=None)
                                    if s.weight is None else replace(s, ppc=ppc_override)
                                    for s in cfg.species])
    return cfg


def write_example_configs(directory) -> list[Path]:
    """Write the shipped scenario config files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    texts = {
        "oml_sphere.cfg": _OML_PAPER_CFG,
        "oml_sphere_desk.cfg": _OML_DESK_CFG,
        "lunar_crater.cfg": _CRATER_PAPER_CFG,
        "lunar_crater_desk.cfg": _CRATER_DESK_CFG,
        "manufactured.cfg": _MMS_CFG,
    }
    out = []
    for name, text in texts.items():
        p = directory / name
        p.write_text(text)
        out.append(p)
    return out


_OML_PAPER_CFG = """\
# Floating dielectric sphere in a stationary hydrogen plasma (published scale).
# Normalized units: lengths in Debye lengths, times in 1/w_pe, potential in Te/e.
[simulation]
scenario = oml-sphere
desk_scale = false
steps = 50000
dt_wpe = 0.01
master_seed = 20260810
output_dir = out_oml_paper

[domain]
x_min_debye = 0.0
x_max_debye = 5.0
y_min_debye = 0.0
y_max_debye = 5.0
z_min_debye = 0.0
z_max_debye = 5.0
cell_size_debye = 0.1

[decomposition]
px = 5
py = 5
pz = 5

[solver]
pcg_max_iterations = 60
pcg_tolerance = 1e-6
ddm_tolerance = 1e-2
ddm_max_iterations = 50
ddm_initial_max_iterations = 150

[particles]
ppc = 125
"""

_OML_DESK_CFG = """\
# Desk-scale sphere-charging run (acceptance configuration).
[simulation]
scenario = oml-sphere
desk_scale = true
steps = 10000
dt_wpe = 0.01
master_seed = 20260810
output_dir = out_oml

[domain]
cell_size_debye = 0.2

[decomposition]
px = 2
py = 2
pz = 2

[solver]
pcg_max_iterations = 60
pcg_tolerance = 1e-6
ddm_tolerance = 1e-2
ddm_max_iterations = 50
ddm_initial_max_iterations = 150

[particles]
ppc = 27
"""

_CRATER_PAPER_CFG = """\
# Lunar crater charging under average solar wind (published scale).
# Reference normalization: photoelectrons at 90 degree sun elevation
# (T = 2.2 eV, n = 64 cm^-3, Debye length 1.38 m).
[simulation]
scenario = lunar-crater
desk_scale = false
steps = 20000
dt_wpe = 0.05
master_seed = 20260811
output_dir = out_crater_paper

[solver]
pcg_max_iterations = 150
pcg_tolerance = 1e-6
ddm_tolerance = 1e-3
ddm_max_iterations = 200
ddm_initial_max_iterations = 800
"""

_CRATER_DESK_CFG = """\
# Desk-scale crater smoke test (acceptance configuration, 50x25x25 cells).
[simulation]
scenario = lunar-crater
desk_scale = true
steps = 2000
dt_wpe = 0.05
master_seed = 20260811
output_dir = out_crater

[decomposition]
px = 2
py = 2
pz = 2

[solver]
pcg_max_iterations = 150
pcg_tolerance = 1e-6
ddm_tolerance = 1e-3
ddm_max_iterations = 200
ddm_initial_max_iterations = 800

[particles]
ppc = 8
"""

_MMS_CFG = """\
# Field-only manufactured-solution check on the unit box.
[simulation]
scenario = manufactured
steps = 0
output_dir = out_mms

[domain]
x_min_debye = 0.0
x_max_debye = 1.0
y_min_debye = 0.0
y_max_debye = 1.0
z_min_debye = 0.0
z_max_debye = 1.0
cell_size_debye = 0.0625

[decomposition]
px = 1
py = 1
pz = 1
"""
