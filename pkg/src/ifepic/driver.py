"""Simulation orchestration: output files, timer reports, the scaling
harness, and the public run entry points."""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import SimulationConfig
from .engine import EngineRun, run_parallel, run_sequential
from .vtk_io import write_structured_points, write_unstructured_tets


class DriverError(RuntimeError):
    pass


@dataclass
class TimerReport:
    """Wall-clock seconds per category; particle-push-comm nests inside
    particle-push, field-solve-phibc inside field-solve."""
    total: float
    gather: float
    particle_push: float        # includes particle_push_comm
    particle_push_comm: float
    scatter: float
    field_solve: float          # includes field_solve_phibc
    field_solve_phibc: float
    other: float

    @classmethod
    def from_raw(cls, raw: dict, total: float) -> "TimerReport":
        return cls(
            total=total,
            gather=raw["gather"],
            particle_push=raw["particle-push"] + raw["particle-push-comm"],
            particle_push_comm=raw["particle-push-comm"],
            scatter=raw["scatter"],
            field_solve=raw["field-solve"] + raw["field-solve-phibc"],
            field_solve_phibc=raw["field-solve-phibc"],
            other=raw["other"],
        )

    def top_level_sum(self) -> float:
        return (self.gather + self.particle_push + self.scatter
                + self.field_solve + self.other)

    def coverage(self) -> float:
        return self.top_level_sum() / self.total if self.total > 0 else 1.0

    def percentages(self) -> dict[str, float]:
        t = self.total if self.total > 0 else 1.0
        return {
            "total": 100.0,
            "gather": 100.0 * self.gather / t,
            "particle-push": 100.0 * self.particle_push / t,
            "particle-push-comm": 100.0 * self.particle_push_comm / t,
            "scatter": 100.0 * self.scatter / t,
            "field-solve": 100.0 * self.field_solve / t,
            "field-solve-phibc": 100.0 * self.field_solve_phibc / t,
            "other": 100.0 * self.other / t,
        }

    def rows(self):
        p = self.percentages()
        return [
            ("Total wall-clock time", self.total, p["total"], ""),
            ("Total gather time", self.gather, p["gather"], ""),
            ("Total particle-push time", self.particle_push, p["particle-push"], ""),
            ("Total particle-push-comm (boundary adjust + migration) time",
             self.particle_push_comm, p["particle-push-comm"], "*"),
            ("Total scatter time", self.scatter, p["scatter"], ""),
            ("Total field-solve time", self.field_solve, p["field-solve"], ""),
            ("Total field-solve-phibc (guard potential update) time",
             self.field_solve_phibc, p["field-solve-phibc"], "**"),
            ("Total other time", self.other, p["other"], ""),
        ]

    def to_text(self) -> str:
        lines = []
        header = f"{'Computing step':<62} {'Wall-clock time (s)':>20} {'Percent of total (%)':>22}"
        rule = "-" * len(header)
        lines.append(rule)
        lines.append(header)
        lines.append(rule)
        for name, secs, pct, mark in self.rows():
            lines.append(f"{name + mark:<62} {secs:>20.2f} {pct:>21.2f}{mark}")
        lines.append(rule)
        lines.append("*  Included in the particle-push time")
        lines.append("** Included in the field-solve time")
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["category", "seconds", "percent", "nested_in"])
            nest = {"particle-push-comm": "particle-push",
                    "field-solve-phibc": "field-solve"}
            p = self.percentages()
            vals = {"total": self.total, "gather": self.gather,
                    "particle-push": self.particle_push,
                    "particle-push-comm": self.particle_push_comm,
                    "scatter": self.scatter, "field-solve": self.field_solve,
                    "field-solve-phibc": self.field_solve_phibc,
                    "other": self.other}
            for k in ("total", "gather", "particle-push", "particle-push-comm",
                      "scatter", "field-solve", "field-solve-phibc", "other"):
                w.writerow([k, f"{vals[k]:.6f}", f"{p[k]:.4f}", nest.get(k, "")])


@dataclass
class RunResult:
    output_dir: Path
    steps: int
    wall_total: float         # full run, including setup
    loop_wall: float          # main PIC loop only
    timer: TimerReport
    summary: dict
    phi_global: np.ndarray | None = None
    rho_global: np.ndarray | None = None

    @property
    def outputs(self) -> dict[str, Path]:
        names = ["convergence.csv", "particles.csv", "ddm_iterations.csv",
                 "timers.csv", "timers.txt", "field_final.vtk", "profile.csv",
                 "summary.json"]
        return {n: self.output_dir / n for n in names
                if (self.output_dir / n).exists()}


def _prepare_outdir(config: SimulationConfig) -> Path:
    outdir = config.resolved_output_dir()
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        probe = outdir / ".write_probe"
        probe.write_text("ok")
        probe.unlink()
    except OSError as e:
        raise DriverError(f"output directory {outdir} is not writable: {e}") from e
    return outdir


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, float) or isinstance(v, np.floating):
        return f"{float(v):.10g}"
    return v


def _assemble_global(config: SimulationConfig, payloads, key) -> np.ndarray | None:
    nn = config.mesh.nnodes
    out = np.full(nn, np.nan)
    for p in payloads:
        if p[key] is None:
            return None
        (ilo, ihi), (jlo, jhi), (klo, khi) = p["bounds"]
        out[ilo:ihi, jlo:jhi, klo:khi] = p[key]
    return out


def _node_radii(config: SimulationConfig) -> np.ndarray:
    nn = config.mesh.nnodes
    i, j, k = np.meshgrid(*(np.arange(n) for n in nn), indexing="ij")
    lo = np.asarray(config.mesh.lo)
    h = config.mesh.h
    center = np.asarray(config.geometry.sphere.center)
    pos = np.stack([lo[0] + i * h, lo[1] + j * h, lo[2] + k * h], axis=-1)
    return np.linalg.norm(pos - center, axis=-1)


def radial_profile(config: SimulationConfig, phi_global: np.ndarray,
                   r_max: float | None = None):
    """Shell-averaged potential profile about the sphere center, shell
    width h/2. Returns (r_centers, phi_mean, counts)."""
    radii = _node_radii(config).ravel()
    phi = phi_global.ravel()
    h = config.mesh.h
    r_lo = config.geometry.sphere.radius
    r_hi = r_max if r_max else float(radii.max())
    edges = np.arange(r_lo, r_hi + h / 2, h / 2)
    idx = np.digitize(radii, edges) - 1
    valid = (idx >= 0) & (idx < len(edges) - 1) & np.isfinite(phi)
    counts = np.bincount(idx[valid], minlength=len(edges) - 1)
    sums = np.bincount(idx[valid], weights=phi[valid], minlength=len(edges) - 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    keep = counts > 0
    return centers[keep], sums[keep] / counts[keep], counts[keep]


def profile_rms(r_sim, phi_sim, r_oracle, phi_oracle, r_lo, r_hi) -> float:
    """RMS difference of the simulated profile against the oracle curve
    over [r_lo, r_hi] (oracle interpolated onto the simulated radii)."""
    r_sim = np.asarray(r_sim, dtype=float)
    m = (r_sim >= r_lo) & (r_sim <= r_hi)
    if not np.any(m):
        raise DriverError("profile ranges do not overlap")
    ref = np.interp(r_sim[m], r_oracle, phi_oracle)
    d = np.asarray(phi_sim)[m] - ref
    return float(np.sqrt(np.mean(d ** 2)))


def run_simulation(config: SimulationConfig, engine: str = "process") -> RunResult:
    """Full pipeline: build -> pre-load -> initial solve -> PIC loop ->
    output files. `engine` chooses the process workers or the degraded
    sequential mode (identical results)."""
    outdir = _prepare_outdir(config)
    t0 = time.perf_counter()
    if engine == "process":
        run = run_parallel(config)
    elif engine == "sequential":
        run = run_sequential(config)
    else:
        raise DriverError(f"unknown engine {engine!r}")
    wall_total = time.perf_counter() - t0
    return write_outputs(config, run, outdir, wall_total)


def write_outputs(config: SimulationConfig, run: EngineRun, outdir: Path,
                  wall_total: float) -> RunResult:
    mon = run.monitor
    _write_csv(outdir / "convergence.csv",
               ["step", "max_pcg_residual", "max_pcg_iterations",
                "ddm_iterations", "max_e_rel"],
               mon.logs.get("convergence", []))
    _write_csv(outdir / "ddm_iterations.csv",
               ["step", "ddm_iteration", "max_pcg_residual",
                "max_pcg_iterations", "max_e_rel"],
               mon.logs.get("ddm", []))
    species_names = [s.name for s in config.species]
    _write_csv(outdir / "particles.csv",
               ["step", "time"] + [f"ns{i + 1}" for i in range(len(species_names))]
               + ["ntot"],
               mon.logs.get("particles", []))

    finals = [mon.outs[("final", r)][0] for r in range(config.n_workers)
              if ("final", r) in mon.outs]
    if len(finals) != config.n_workers:
        raise DriverError("missing final payloads from some workers")
    finals.sort(key=lambda p: p["rank"])

    phi = _assemble_global(config, finals, "phi")
    rho = _assemble_global(config, finals, "rho")
    h = config.mesh.h
    if phi is not None:
        write_structured_points(outdir / "field_final.vtk", config.mesh.lo, h,
                                config.mesh.nnodes,
                                {"potential": phi, "charge_density": rho})
    if config.snapshot_cadence:
        for key in sorted((k for k in mon.outs if k[0] == "snapshot"),
                          key=lambda k: k[1]):
            payloads = mon.outs[key]
            if len(payloads) == config.n_workers:
                phi_s = _assemble_global(config, payloads, "phi")
                rho_s = _assemble_global(config, payloads, "rho")
                write_structured_points(outdir / f"field_{key[1]:06d}.vtk",
                                        config.mesh.lo, h, config.mesh.nnodes,
                                        {"potential": phi_s, "charge_density": rho_s})

    if config.write_mesh_vtk:
        for key, payloads in mon.outs.items():
            if key[0] == "mesh":
                _write_mesh_vtk(config, payloads[0],
                                outdir / f"mesh_rank{payloads[0]['rank']}.vtk")

    profile_written = False
    if (config.profile_window and config.geometry.kind == "sphere"
            and finals[0]["profile_count"]):
        mean_phi = _assemble_global(config, finals, "profile")
        if mean_phi is not None:
            r, pm, counts = radial_profile(config, mean_phi,
                                           r_max=config.profile_r_max or None)
            _write_csv(outdir / "profile.csv", ["r", "phi", "count"],
                       list(zip(r, pm, counts)))
            profile_written = True

    timer = TimerReport.from_raw(finals[0]["timers"], mon.loop_wall)
    timer.to_csv(outdir / "timers.csv")
    (outdir / "timers.txt").write_text(timer.to_text())

    summary = _summarize(config, finals, mon, wall_total)
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2, default=float))
    return RunResult(output_dir=outdir, steps=config.steps, wall_total=wall_total,
                     loop_wall=mon.loop_wall, timer=timer, summary=summary,
                     phi_global=phi, rho_global=rho)


def _write_mesh_vtk(config, payload, path) -> None:
    glo, ghi = payload["glo"], payload["ghi"]
    nn = payload["nnodes"]
    i, j, k = np.meshgrid(*(np.arange(n) for n in nn), indexing="ij")
    lo = np.asarray(config.mesh.lo)
    h = config.mesh.h
    pts = np.stack([lo[0] + (i.ravel() + glo[0]) * h,
                    lo[1] + (j.ravel() + glo[1]) * h,
                    lo[2] + (k.ravel() + glo[2]) * h], axis=1)
    write_unstructured_tets(path, pts, payload["elem_nodes"], payload["tags"])


def _summarize(config, finals, mon, wall_total) -> dict:
    counts = np.sum([p["counts"] for p in finals], axis=0)
    summary = {
        "scenario": config.scenario,
        "steps": config.steps,
        "workers": config.n_workers,
        "wall_total_s": wall_total,
        "loop_wall_s": mon.loop_wall,
        "final_counts": {s.name: int(c) for s, c in zip(config.species, counts)},
        "plasma_charge": float(sum(p["plasma_charge"] for p in finals)),
        "ledger_charge": float(sum(p["ledger_total"] for p in finals)),
        "injected_charge": float(sum(p["book_injected"] for p in finals)),
        "exited_charge": float(sum(p["book_exited"] for p in finals)),
        "n_interface_elements": int(sum(p["n_interface"] for p in finals)),
        "n_basis_fallbacks": int(sum(p["n_fallback"] for p in finals)),
        "lost_nonfinite": int(sum(p["lost_nonfinite"] for p in finals)),
    }
    if config.scenario == "lunar-crater":
        cen = np.concatenate([p["facets"]["centroid"] for p in finals])
        phi_f = np.concatenate([p["facets"]["phi"] for p in finals])
        sidx = np.concatenate([p["facets"]["sindex"] for p in finals])
        crater = config.geometry.crater
        r_xy = np.hypot(cen[:, 0] - crater.center[0], cen[:, 1] - crater.center[1])
        sunlit = sidx > 0.3
        floor_shadow = (sidx <= 0.0) & (r_xy < crater.rim_inner)
        summary["sunlit_mean_phi"] = float(phi_f[sunlit].mean()) if np.any(sunlit) else None
        summary["shadow_floor_mean_phi"] = (float(phi_f[floor_shadow].mean())
                                            if np.any(floor_shadow) else None)
        summary["n_sunlit_facets"] = int(sunlit.sum())
        summary["n_shadow_floor_facets"] = int(floor_shadow.sum())
    if config.manufactured is not None:
        phi = _assemble_global(config, finals, "phi")
        nn = config.mesh.nnodes
        i, j, k = np.meshgrid(*(np.arange(n) for n in nn), indexing="ij")
        lo = np.asarray(config.mesh.lo)
        pts = np.stack([lo[0] + i.ravel() * config.mesh.h,
                        lo[1] + j.ravel() * config.mesh.h,
                        lo[2] + k.ravel() * config.mesh.h], axis=1)
        exact = config.manufactured.phi(pts)
        err = phi.ravel() - exact
        summary["mms_l2_error"] = float(np.sqrt(np.mean(err ** 2)))
        summary["mms_max_error"] = float(np.max(np.abs(err)))
    return summary


# ---------------------------------------------------------------------------
# strong-scaling harness
# ---------------------------------------------------------------------------

@dataclass
class ScalingRow:
    workers: int
    decomposition: tuple[int, int, int]
    total_s: float
    loop_s: float
    speedup: float
    efficiency_pct: float


@dataclass
class ScalingReport:
    rows: list[ScalingRow]
    warning: str = ""

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["workers", "decomposition", "total_s", "loop_s",
                        "speedup", "efficiency_pct"])
            for r in self.rows:
                w.writerow([r.workers, "x".join(map(str, r.decomposition)),
                            f"{r.total_s:.3f}", f"{r.loop_s:.3f}",
                            f"{r.speedup:.3f}", f"{r.efficiency_pct:.2f}"])

    def to_text(self) -> str:
        lines = [f"{'workers':>8} {'decomp':>10} {'total (s)':>12} "
                 f"{'loop (s)':>12} {'speedup S':>10} {'efficiency E (%)':>17}"]
        for r in self.rows:
            lines.append(f"{r.workers:>8} {'x'.join(map(str, r.decomposition)):>10} "
                         f"{r.total_s:>12.2f} {r.loop_s:>12.2f} {r.speedup:>10.2f} "
                         f"{r.efficiency_pct:>17.2f}")
        if self.warning:
            lines.append(f"warning: {self.warning}")
        return "\n".join(lines) + "\n"


def run_scaling_suite(base_config: SimulationConfig,
                      decompositions: list[tuple[int, int, int]],
                      engine: str = "process") -> ScalingReport:
    """Strong scaling: the fixed problem is run once per decomposition;
    S = T_1/T_p, E = S/p, measured on the main-loop wall time."""
    rows = []
    warning = ""
    ncpu = os.cpu_count() or 1
    max_workers = max(d[0] * d[1] * d[2] for d in decompositions)
    if max_workers > ncpu:
        warning = (f"host has {ncpu} cores for up to {max_workers} workers; "
                   "oversubscribed timings are unreliable")
    base_out = Path(base_config.output_dir)
    t1 = None
    for d in decompositions:
        cfg = replace(base_config, decomposition=tuple(d),
                      output_dir=str(base_out / ("scale_%dx%dx%d" % tuple(d))))
        res = run_simulation(cfg, engine=engine)
        p = d[0] * d[1] * d[2]
        loop = res.loop_wall
        if t1 is None:
            t1 = loop
        s = t1 / loop if loop > 0 else float("nan")
        rows.append(ScalingRow(workers=p, decomposition=tuple(d),
                               total_s=res.wall_total, loop_s=loop,
                               speedup=s, efficiency_pct=100.0 * s / p))
    report = ScalingReport(rows=rows, warning=warning)
    base_out.mkdir(parents=True, exist_ok=True)
    report.to_csv(base_out / "scaling.csv")
    (base_out / "scaling.txt").write_text(report.to_text())
    return report
