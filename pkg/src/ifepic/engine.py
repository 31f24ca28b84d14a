"""Worker lifecycle and message passing.

Each subdomain worker is a generator that yields communication requests
and is resumed with the reply, so the exact same worker code runs under
both engines:

  * SequentialEngine: all workers in-process, stepped round-robin in
    lockstep (the debugging mode; bit-identical results).
  * ProcessEngine: one OS process per worker; the parent routes payloads
    and performs reductions.

Request protocol (tag, phase, payload):
  ("xchg", phase, {dst_rank: payload})  -> {src_rank: payload}
  ("rmax", phase, ndarray)              -> elementwise max over ranks
  ("rsum", phase, ndarray)              -> elementwise sum over ranks
  ("gat0", phase, payload)              -> list of payloads on rank 0, None elsewhere
  ("log",  kind, row)    fire-and-forget, no reply
  ("out",  key, payload) fire-and-forget, no reply

Collectives must arrive with identical phase tags on every rank; a
mismatch aborts the run (protocol error).
"""

from __future__ import annotations

import time
import traceback
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .config import SimulationConfig
from .ddm import (ProtocolError, SchwarzRank, build_charge_plan, build_halo_plan,
                  build_topology, charge_payloads, apply_charge, make_subdomain_mesh)
from .geometry import empty_geometry
from .ife import (AssembledSystem, BoundaryCondition, ElementFieldEvaluator,
                  FieldProblem, assemble, dirichlet_layout)
from .particles import ParticleOps


class EngineError(RuntimeError):
    pass


TIMER_KEYS = ("gather", "particle-push", "particle-push-comm", "scatter",
              "field-solve", "field-solve-phibc", "other")


class _Timers(dict):
    def __init__(self):
        super().__init__({k: 0.0 for k in TIMER_KEYS})

    def add(self, key, dt):
        self[key] += dt


@dataclass
class LedgerPlan:
    send_delta: dict[int, np.ndarray]
    recv_delta: dict[int, np.ndarray]
    send_total: dict[int, np.ndarray]
    recv_total: dict[int, np.ndarray]


def build_ledger_plan(topology, mesh, owner_ranks, rank) -> LedgerPlan:
    """Facet-ledger exchange lists, ordered by global facet key."""
    n = len(owner_ranks)
    nc = mesh.ncells
    gnc = mesh.spec.ncells
    keys = np.empty(n, dtype=np.int64)
    cells = np.empty((n, 3), dtype=np.int64)
    for w, eid in enumerate(mesh.interface_ids):
        cell_lin = int(eid) // 5
        ci = cell_lin // (nc[1] * nc[2]) + mesh.glo[0]
        cj = (cell_lin // nc[2]) % nc[1] + mesh.glo[1]
        ck = cell_lin % nc[2] + mesh.glo[2]
        cells[w] = (ci, cj, ck)
        keys[w] = ((ci * gnc[1] + cj) * gnc[2] + ck) * 5 + (int(eid) % 5)
    order = np.argsort(keys, kind="stable")
    send_delta, recv_delta = {}, {}
    for _, nbr in topology.neighbors(rank):
        sel = order[owner_ranks[order] == nbr]
        if len(sel):
            send_delta[nbr] = sel
        glo, ghi = topology.guarded_range(nbr)
        mine = owner_ranks[order] == rank
        inside = np.all((cells[order] >= np.array(glo)) & (cells[order] < np.array(ghi)),
                        axis=1)
        sel = order[mine & inside]
        if len(sel):
            recv_delta[nbr] = sel
    return LedgerPlan(send_delta=send_delta, recv_delta=recv_delta,
                      send_total={k: v for k, v in recv_delta.items()},
                      recv_total={k: v for k, v in send_delta.items()})


class SubdomainWorker:
    """One rank's complete simulation state; `run()` is the SPMD program."""

    def __init__(self, rank: int, config: SimulationConfig):
        self.rank = rank
        self.config = config
        px, py, pz = config.decomposition
        self.topology = build_topology(px, py, pz, config.mesh)
        self.multi = self.topology.n_ranks > 1
        self.geometry = config.geometry if config.geometry is not None else empty_geometry()
        self.mesh = make_subdomain_mesh(self.topology, rank).build(self.geometry)

        boundary = {}
        for name, (kind, value) in config.field_bc.items():
            if config.manufactured is not None and kind == "dirichlet":
                boundary[name] = BoundaryCondition(kind, config.manufactured.phi)
            else:
                boundary[name] = BoundaryCondition(kind, value)
        self.problem = FieldProblem(eps_minus=config.eps_minus,
                                    eps_plus=config.eps_plus, boundary=boundary)
        is_dir, g, self.exchange_mask = dirichlet_layout(self.mesh, self.problem)
        self.system: AssembledSystem = assemble(self.mesh, self.problem, is_dir)
        self.evaluator = ElementFieldEvaluator(self.mesh, self.system.if_bases)
        self.halo_plan = build_halo_plan(self.topology, rank)
        self.charge_plan = build_charge_plan(self.topology, rank)

        self.particles = ParticleOps(
            self.mesh, self.topology, rank, self.geometry, config.species,
            config.particle_bc, config.dt, config.master_seed,
            sun=config.sun, photo_species=config.photo_species)
        self.ledger_plan = build_ledger_plan(self.topology, self.mesh,
                                             self.particles.ledger.owner_ranks, rank)

        self._rho = np.zeros(self.mesh.n_local_nodes)
        self._q = None
        self.field = SchwarzRank(self.system, self.halo_plan, config.pcg, g,
                                 lambda gv: self.system.rhs(self._rho, self._q, gv))
        self.control_volumes = self.particles.node_control_volumes()
        self.timers = _Timers()
        self.E_minus = np.zeros((self.mesh.elem_nodes.shape[0], 3))
        self.E_plus = np.zeros_like(self.E_minus)
        self.profile_sum = None
        self.profile_count = 0
        self._e_hist: list[float] = []

    # ---- helpers --------------------------------------------------------

    def _owned_block(self, full_nodal: np.ndarray) -> np.ndarray:
        nn = self.mesh.nnodes
        sl = self.mesh.owned_slices_nodes()
        return full_nodal.reshape(nn)[sl].copy()

    def _owned_bounds(self):
        sl = self.mesh.owned_slices_nodes()
        return tuple((s.start + self.mesh.glo[a], s.stop + self.mesh.glo[a])
                     for a, s in enumerate(sl))

    def _efield_at(self, pos: np.ndarray) -> np.ndarray:
        return self.particles.gather(pos, self.E_minus, self.E_plus, self.evaluator)

    def _update_element_fields(self) -> None:
        self.E_minus, self.E_plus = self.evaluator.element_fields(self.field.phi)

    def _facet_report(self):
        """Per owned facet: sunlight index (if any), centroid, potential."""
        led = self.particles.ledger
        own = led.owner_ranks == self.rank
        idx = np.nonzero(own)[0]
        phi_f = np.empty(len(idx))
        for n_, w in enumerate(idx):
            eid = int(self.mesh.interface_ids[w])
            _, basis = self.system.if_bases[w]
            psis = basis.eval(led.centroids[w][None, :])[0]
            phi_f[n_] = float(psis @ self.field.phi[self.mesh.elem_nodes[eid]])
        sindex = (self.particles._facet_sindex[idx]
                  if self.particles._facet_sindex is not None else np.zeros(len(idx)))
        return {"centroid": led.centroids[idx], "phi": phi_f, "sindex": sindex,
                "charge": led.charge[idx], "area": led.areas[idx]}

    # ---- program ---------------------------------------------------------

    def run(self):
        cfg = self.config
        topo = self.topology

        # pre-load, initial scatter + reduction, initial field solve
        self.particles.preload()
        deposit = self.particles.scatter_deposit()
        inbox = yield ("xchg", "charge0", charge_payloads(self.charge_plan, deposit))
        apply_charge(self.charge_plan, deposit, inbox)
        self._set_sources(deposit)
        init_iters, init_vals = yield from self._ddm_loop(0, cfg.ddm_initial_max_iterations)
        self._update_element_fields()
        self.particles.half_step_back(self._efield_at)

        counts = yield ("rsum", "counts0", self.particles.counts().astype(float))
        if self.rank == 0:
            yield ("log", "convergence", (0, init_vals[1], int(init_vals[2]),
                                          init_iters, init_vals[0]))
            yield ("log", "particles", self._particle_row(0, counts))
        if cfg.write_mesh_vtk:
            yield ("out", ("mesh", self.rank), self._mesh_dump())

        window = min(cfg.profile_window, cfg.steps) if cfg.profile_window else 0
        yield ("rmax", "ready", np.zeros(1))   # loop-timer barrier

        for step in range(1, cfg.steps + 1):
            yield from self._pic_step(step)
            if window and step > cfg.steps - window:
                if self.profile_sum is None:
                    self.profile_sum = np.zeros(self.mesh.n_local_nodes)
                self.profile_sum += self.field.phi
                self.profile_count += 1
            if cfg.snapshot_cadence and step % cfg.snapshot_cadence == 0:
                yield ("out", ("snapshot", step), self._snapshot_payload())

        yield ("rmax", "loop-end", np.zeros(1))
        yield ("out", ("final", self.rank), self._final_payload())
        return {"rank": self.rank, "steps": cfg.steps}

    def _set_sources(self, deposit: np.ndarray) -> None:
        """Charge density and jump data for the next field solve; the
        manufactured scenario overrides them with its exact fields."""
        mms = self.config.manufactured
        if mms is not None:
            self._rho = np.asarray(mms.rho(self.mesh.node_positions()), dtype=float)
            self._q = (np.full(self.system.n_interface, mms.q)
                       if self.system.n_interface else None)
            return
        self._rho = deposit / self.control_volumes
        self._q = self.particles.ledger.q_values() if self.system.n_interface else None

    def _particle_row(self, step, counts):
        c = [int(v) for v in counts]
        return (step, step * self.config.dt, *c, int(sum(c)))

    def _pic_step(self, step: int):
        cfg = self.config
        pc = time.perf_counter
        t = self.timers

        t0 = pc()
        E_by_species = {}
        for s in cfg.species:
            buf = self.particles.buffers[s.name]
            E_by_species[s.name] = (self._efield_at(buf.pos) if buf.n
                                    else np.empty((0, 3)))
        t.add("gather", pc() - t0)

        t0 = pc()
        old = self.particles.push(E_by_species)
        t.add("particle-push", pc() - t0)

        t0 = pc()
        self.particles.apply_boundaries(old)
        outbox = self.particles.migration_payloads()
        t.add("particle-push-comm", pc() - t0)
        t0 = pc()
        inbox = yield ("xchg", "migrate", outbox)
        for src, groups in inbox.items():
            self.particles.receive_migrants(groups)
        t.add("particle-push-comm", pc() - t0)

        t0 = pc()
        self.particles.inject(step)
        emitted = self.particles.emit_photoelectrons(step)
        t.add("other", pc() - t0)

        t0 = pc()
        deposit = self.particles.scatter_deposit()
        t.add("scatter", pc() - t0)
        t0 = pc()
        inbox = yield ("xchg", "charge", charge_payloads(self.charge_plan, deposit))
        apply_charge(self.charge_plan, deposit, inbox)
        t.add("scatter", pc() - t0)

        if self.system.n_interface or self.multi:
            t0 = pc()
            led = self.particles.ledger
            delta_out = {nbr: led.delta[ids]
                         for nbr, ids in self.ledger_plan.send_delta.items()}
            inbox = yield ("xchg", "ledger-delta", delta_out)
            own = led.owner_ranks == self.rank
            led.charge[own] += led.delta[own]
            for src, vals in inbox.items():
                np.add.at(led.charge, self.ledger_plan.recv_delta[src], vals)
            led.delta[:] = 0.0
            total_out = {nbr: led.charge[ids]
                         for nbr, ids in self.ledger_plan.send_total.items()}
            inbox = yield ("xchg", "ledger-total", total_out)
            for src, vals in inbox.items():
                led.charge[self.ledger_plan.recv_total[src]] = vals
            t.add("other", pc() - t0)

        t0 = pc()
        self._set_sources(deposit)
        t.add("field-solve", pc() - t0)

        ddm_iters, vals = yield from self._ddm_loop(step, cfg.ddm_max_iterations)

        t0 = pc()
        self._update_element_fields()
        t.add("field-solve", pc() - t0)

        t0 = pc()
        counts = yield ("rsum", "counts", self.particles.counts().astype(float))
        if self.rank == 0 and (step % cfg.history_cadence == 0 or step == cfg.steps):
            yield ("log", "convergence", (step, vals[1], int(vals[2]), ddm_iters, vals[0]))
            yield ("log", "particles", self._particle_row(step, counts))
        t.add("other", pc() - t0)

    def _ddm_loop(self, step: int, cap: int):
        pc = time.perf_counter
        t = self.timers
        it = 0
        guard: list[float] = []
        max_resid = 0.0
        max_iters = 0.0
        while True:
            it += 1
            t0 = pc()
            rep = self.field.solve_once()
            t.add("field-solve", pc() - t0)
            t0 = pc()
            inbox = yield ("xchg", "phibc", self.field.payloads())
            self.field.apply(inbox)
            e = self.field.e_rel()[0] if self.multi else 0.0
            vals = yield ("rmax", "ddm", np.array([e, rep.residual, float(rep.iterations)]))
            t.add("field-solve-phibc", pc() - t0)
            max_resid = max(max_resid, float(vals[1]))
            max_iters = max(max_iters, float(vals[2]))
            if self.rank == 0:
                yield ("log", "ddm", (step, it, vals[1], int(vals[2]), vals[0]))
            if not self.multi:
                break
            if vals[0] <= self.config.ddm_tolerance or it >= cap:
                break
            guard.append(float(vals[0]))
            if len(guard) >= 6 and all(guard[-i] > 10.0 * guard[-i - 1]
                                       for i in range(1, 6)):
                raise EngineError(
                    f"rank {self.rank} step {step}: DDM diverging "
                    f"(e_rel={vals[0]:.3e} grew >10x over 5 iterations)")
        return it, np.array([vals[0], max_resid, max_iters])

    # ---- output payloads --------------------------------------------------

    def _snapshot_payload(self):
        return {"rank": self.rank, "bounds": self._owned_bounds(),
                "phi": self._owned_block(self.field.phi),
                "rho": self._owned_block(self._rho)}

    def _mesh_dump(self):
        return {"rank": self.rank, "glo": self.mesh.glo, "ghi": self.mesh.ghi,
                "tags": self.mesh.tags.copy(),
                "elem_nodes": self.mesh.elem_nodes.copy(),
                "nnodes": self.mesh.nnodes}

    def _final_payload(self):
        led = self.particles.ledger
        prof = None
        if self.profile_sum is not None and self.profile_count:
            prof = self._owned_block(self.profile_sum / self.profile_count)
        return {
            "rank": self.rank,
            "bounds": self._owned_bounds(),
            "phi": self._owned_block(self.field.phi),
            "rho": self._owned_block(self._rho),
            "profile": prof,
            "profile_count": self.profile_count,
            "timers": dict(self.timers),
            "counts": self.particles.counts(),
            "plasma_charge": self.particles.plasma_charge(),
            "ledger_total": led.owned_total(self.rank),
            "book_injected": self.particles.book_injected,
            "book_exited": self.particles.book_exited,
            "n_interface": self.system.n_interface,
            "n_fallback": self.system.n_fallback,
            "lost_nonfinite": self.particles.lost_nonfinite,
            "facets": self._facet_report(),
        }


# ---------------------------------------------------------------------------
# engines
# ---------------------------------------------------------------------------

def _service_collective(tag, phase, payloads, n_ranks):
    if tag == "xchg":
        replies = []
        for r in range(n_ranks):
            inbox = {src: payloads[src][r] for src in range(n_ranks)
                     if r in payloads[src]}
            replies.append(inbox)
        return replies
    if tag == "rmax":
        m = payloads[0]
        for r in range(1, n_ranks):
            m = np.maximum(m, payloads[r])
        return [m] * n_ranks
    if tag == "rsum":
        s = np.array(payloads[0], dtype=float)
        for r in range(1, n_ranks):
            s = s + payloads[r]
        return [s] * n_ranks
    if tag == "gat0":
        return [[payloads[r] for r in range(n_ranks)]] + [None] * (n_ranks - 1)
    raise ProtocolError(f"unknown collective {tag!r}")


class _RunMonitor:
    """Collects log/out messages and loop timing on the parent side."""

    def __init__(self):
        self.logs = defaultdict(list)
        self.outs = defaultdict(list)
        self.t_ready = None
        self.t_loop_end = None

    def handle_sideband(self, tag, key, payload):
        if tag == "log":
            self.logs[key].append(payload)
        else:
            self.outs[key].append(payload)

    def note_phase(self, phase):
        if phase == "ready" and self.t_ready is None:
            self.t_ready = time.perf_counter()
        if phase == "loop-end" and self.t_loop_end is None:
            self.t_loop_end = time.perf_counter()

    @property
    def loop_wall(self) -> float:
        if self.t_ready is None or self.t_loop_end is None:
            return 0.0
        return self.t_loop_end - self.t_ready


@dataclass
class EngineRun:
    returns: list
    monitor: _RunMonitor
    wall_total: float


def run_sequential(config: SimulationConfig) -> EngineRun:
    t_start = time.perf_counter()
    n = config.n_workers
    workers = [SubdomainWorker(r, config) for r in range(n)]
    gens = [w.run() for w in workers]
    monitor = _RunMonitor()
    returns: list = [None] * n

    def advance(r, send_value, first=False):
        """Step generator r to its next collective; service sidebands."""
        g = gens[r]
        try:
            op = g.send(send_value) if not first else next(g)
            while op[0] in ("log", "out"):
                monitor.handle_sideband(op[0], op[1], op[2])
                op = g.send(None)
            return op
        except StopIteration as stop:
            returns[r] = stop.value
            return None

    current = [advance(r, None, first=True) for r in range(n)]
    while any(op is not None for op in current):
        live = [r for r in range(n) if current[r] is not None]
        if len(live) != n:
            raise ProtocolError("workers finished at different phases")
        tags = {(current[r][0], current[r][1]) for r in live}
        if len(tags) != 1:
            raise ProtocolError(f"phase mismatch across ranks: {sorted(tags)}")
        tag, phase = tags.pop()
        monitor.note_phase(phase)
        payloads = {r: current[r][2] for r in live}
        replies = _service_collective(tag, phase, payloads, n)
        current = [advance(r, replies[r]) for r in range(n)]
    return EngineRun(returns=returns, monitor=monitor,
                     wall_total=time.perf_counter() - t_start)


def _worker_main(rank: int, config: SimulationConfig, conn) -> None:
    try:
        worker = SubdomainWorker(rank, config)
        gen = worker.run()
        op = next(gen)
        while True:
            conn.send(op)
            # collectives block for the reply; sidebands resume immediately
            value = None if op[0] in ("log", "out") else conn.recv()
            try:
                op = gen.send(value)
            except StopIteration as stop:
                conn.send(("fin", None, stop.value))
                break
    except Exception:
        try:
            conn.send(("err", rank, traceback.format_exc()))
        except Exception:
            pass
    finally:
        conn.close()


def run_parallel(config: SimulationConfig) -> EngineRun:
    import multiprocessing as mp

    t_start = time.perf_counter()
    n = config.n_workers
    if n == 1:
        return run_sequential(config)
    ctx = mp.get_context("fork")
    parents, procs = [], []
    for r in range(n):
        pc, cc = ctx.Pipe()
        proc = ctx.Process(target=_worker_main, args=(r, config, cc), daemon=True)
        proc.start()
        cc.close()
        parents.append(pc)
        procs.append(proc)

    monitor = _RunMonitor()
    returns: list = [None] * n
    done = [False] * n
    collect: dict = {}
    collect_key = None
    from multiprocessing.connection import wait as conn_wait

    try:
        while not all(done):
            ready = conn_wait([parents[r] for r in range(n) if not done[r]], timeout=600)
            if not ready:
                raise EngineError("workers made no progress for 600 s")
            for conn in ready:
                r = parents.index(conn)
                try:
                    msg = conn.recv()
                except EOFError:
                    raise EngineError(f"rank {r} exited unexpectedly")
                tag = msg[0]
                if tag == "err":
                    raise EngineError(f"worker rank {msg[1]} failed:\n{msg[2]}")
                if tag == "fin":
                    returns[r] = msg[2]
                    done[r] = True
                    continue
                if tag in ("log", "out"):
                    monitor.handle_sideband(tag, msg[1], msg[2])
                    continue
                key = (tag, msg[1])
                if collect_key is None:
                    collect_key = key
                elif collect_key != key:
                    raise ProtocolError(
                        f"phase mismatch: rank {r} at {key}, others at {collect_key}")
                collect[r] = msg[2]
                if len(collect) == n:
                    monitor.note_phase(msg[1])
                    replies = _service_collective(tag, msg[1], collect, n)
                    for rr in range(n):
                        parents[rr].send(replies[rr])
                    collect = {}
                    collect_key = None
        return EngineRun(returns=returns, monitor=monitor,
                         wall_total=time.perf_counter() - t_start)
    finally:
        for p in procs:
            if p.is_alive():
                p.terminate()
        for p in procs:
            p.join(timeout=10)
