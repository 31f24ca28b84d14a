"""Dirichlet-Dirichlet overlapping Schwarz layer: decomposition topology,
guard-node exchange plans across face/edge/vertex neighbors, the additive
Schwarz iteration with the relative-error stopping rule, and guard-region
charge reduction.

All plans are computed locally from the topology alone (every rank knows
every owned range), with payload entries ordered by global node id so the
send list of one rank matches the receive list of its peer exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import GlobalMeshSpec, SubdomainMesh
from .solver import PCGConfig, SolveReport, pcg_solve

GUARD_DEPTH = 2

# the 26 neighbor offsets, faces first, then edges, then vertices
NEIGHBOR_OFFSETS = sorted(
    ((dx, dy, dz)
     for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
     if (dx, dy, dz) != (0, 0, 0)),
    key=lambda o: (sum(map(abs, o)), o))


class TopologyError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


def _axis_splits(ncells: int, parts: int) -> np.ndarray:
    """Near-equal split; remainder cells go to the lower-index parts."""
    base, rem = divmod(ncells, parts)
    sizes = [base + (1 if i < rem else 0) for i in range(parts)]
    return np.concatenate([[0], np.cumsum(sizes)])


@dataclass(frozen=True)
class DecompTopology:
    dims: tuple[int, int, int]
    splits: tuple[np.ndarray, np.ndarray, np.ndarray]
    spec: GlobalMeshSpec

    @property
    def n_ranks(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def rank_to_coords(self, rank: int) -> tuple[int, int, int]:
        px, py, pz = self.dims
        return (rank // (py * pz), (rank // pz) % py, rank % pz)

    def coords_to_rank(self, i: int, j: int, k: int) -> int:
        px, py, pz = self.dims
        return (i * py + j) * pz + k

    def owned_range(self, rank: int) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
        c = self.rank_to_coords(rank)
        lo = tuple(int(self.splits[a][c[a]]) for a in range(3))
        hi = tuple(int(self.splits[a][c[a] + 1]) for a in range(3))
        return lo, hi

    def guarded_range(self, rank: int) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
        lo, hi = self.owned_range(rank)
        nc = self.spec.ncells
        glo = tuple(max(0, lo[a] - GUARD_DEPTH) if lo[a] > 0 else 0 for a in range(3))
        ghi = tuple(min(nc[a], hi[a] + GUARD_DEPTH) if hi[a] < nc[a] else nc[a]
                    for a in range(3))
        return glo, ghi

    def neighbors(self, rank: int) -> list[tuple[tuple[int, int, int], int]]:
        """(offset, rank) pairs over the up-to-26 existing neighbors."""
        c = self.rank_to_coords(rank)
        out = []
        for off in NEIGHBOR_OFFSETS:
            q = (c[0] + off[0], c[1] + off[1], c[2] + off[2])
            if all(0 <= q[a] < self.dims[a] for a in range(3)):
                out.append((off, self.coords_to_rank(*q)))
        return out

    def owner_of_cell_axis(self, axis: int, cell: int) -> int:
        s = self.splits[axis]
        return min(int(np.searchsorted(s, cell, side="right")) - 1, self.dims[axis] - 1)

    def cell_owner(self, cell_ijk) -> int:
        c = [self.owner_of_cell_axis(a, int(cell_ijk[a])) for a in range(3)]
        return self.coords_to_rank(*c)

    def node_owner(self, node_ijk) -> int:
        # node n belongs to the rank owning cell n (last plane to the last rank)
        return self.cell_owner([min(int(node_ijk[a]), self.spec.ncells[a] - 1)
                                for a in range(3)])

    def owner_coords_of_cells(self, cells: np.ndarray) -> np.ndarray:
        """Vectorized per-axis owner coordinates for (n,3) global cells."""
        out = np.empty_like(cells)
        for a in range(3):
            s = self.splits[a]
            out[:, a] = np.minimum(np.searchsorted(s, cells[:, a], side="right") - 1,
                                   self.dims[a] - 1)
        return out


def build_topology(px: int, py: int, pz: int, spec: GlobalMeshSpec) -> DecompTopology:
    if px < 1 or py < 1 or pz < 1:
        raise TopologyError("decomposition dimensions must be >= 1")
    nc = spec.ncells
    dims = (px, py, pz)
    splits = tuple(_axis_splits(nc[a], dims[a]) for a in range(3))
    for a in range(3):
        owned = np.diff(splits[a])
        if dims[a] > 1 and np.any(owned < 4):
            raise TopologyError(
                f"axis {a}: {nc[a]} cells over {dims[a]} subdomains leaves an owned "
                f"range of {owned.min()} cells; at least 4 are required for 2-cell guards")
        if np.any(owned < 1):
            raise TopologyError(f"axis {a}: more subdomains than cells")
    return DecompTopology(dims=dims, splits=splits, spec=spec)


def make_subdomain_mesh(topology: DecompTopology, rank: int) -> SubdomainMesh:
    lo, hi = topology.owned_range(rank)
    glo, ghi = topology.guarded_range(rank)
    return SubdomainMesh(spec=topology.spec, coords=topology.rank_to_coords(rank),
                         own_lo=lo, own_hi=hi, glo=glo, ghi=ghi)


# ---------------------------------------------------------------------------
# exchange plans
# ---------------------------------------------------------------------------

@dataclass
class HaloPlan:
    """Guard-potential exchange lists for one rank: local node ids to send
    to / receive from each neighbor, ordered by global node id."""
    rank: int
    send: dict[int, np.ndarray] = field(default_factory=dict)
    recv: dict[int, np.ndarray] = field(default_factory=dict)


def _boundary_nodes_global(topology: DecompTopology, rank: int) -> np.ndarray:
    """Global (i,j,k) of the rank's guarded-boundary nodes that are not on
    a global boundary plane (the exchange-Dirichlet set)."""
    glo, ghi = topology.guarded_range(rank)
    nc = topology.spec.ncells
    nodes = set()
    rng = [np.arange(glo[a], ghi[a] + 1) for a in range(3)]
    for ax in range(3):
        for side, plane in ((0, glo[ax]), (1, ghi[ax])):
            if (side == 0 and plane == 0) or (side == 1 and plane == nc[ax]):
                continue  # global boundary keeps its global condition
            grids = [rng[0], rng[1], rng[2]]
            grids[ax] = np.array([plane])
            gi, gj, gk = np.meshgrid(*grids, indexing="ij")
            for t in zip(gi.ravel(), gj.ravel(), gk.ravel()):
                nodes.add((int(t[0]), int(t[1]), int(t[2])))
    if not nodes:
        return np.empty((0, 3), dtype=np.int64)
    return np.array(sorted(nodes), dtype=np.int64)


def _global_node_lin(spec: GlobalMeshSpec, ijk: np.ndarray) -> np.ndarray:
    nn = spec.nnodes
    return (ijk[:, 0] * nn[1] + ijk[:, 1]) * nn[2] + ijk[:, 2]


def _local_node_ids(topology: DecompTopology, rank: int, ijk: np.ndarray) -> np.ndarray:
    glo, ghi = topology.guarded_range(rank)
    nn = tuple(ghi[a] - glo[a] + 1 for a in range(3))
    li = ijk[:, 0] - glo[0]
    lj = ijk[:, 1] - glo[1]
    lk = ijk[:, 2] - glo[2]
    return (li * nn[1] + lj) * nn[2] + lk


def _owners(topology: DecompTopology, ijk: np.ndarray) -> np.ndarray:
    cells = np.minimum(ijk, np.asarray(topology.spec.ncells) - 1)
    coords = topology.owner_coords_of_cells(cells)
    px, py, pz = topology.dims
    return (coords[:, 0] * py + coords[:, 1]) * pz + coords[:, 2]


def build_halo_plan(topology: DecompTopology, rank: int) -> HaloPlan:
    plan = HaloPlan(rank=rank)
    mine = _boundary_nodes_global(topology, rank)
    if len(mine):
        order = np.argsort(_global_node_lin(topology.spec, mine), kind="stable")
        mine = mine[order]
        owners = _owners(topology, mine)
        for o in np.unique(owners):
            if o == rank:
                raise TopologyError("guard-boundary node owned by its own rank")
            sel = owners == o
            plan.recv[int(o)] = _local_node_ids(topology, rank, mine[sel])
    for _, nbr in topology.neighbors(rank):
        theirs = _boundary_nodes_global(topology, nbr)
        if not len(theirs):
            continue
        order = np.argsort(_global_node_lin(topology.spec, theirs), kind="stable")
        theirs = theirs[order]
        owners = _owners(topology, theirs)
        sel = owners == rank
        if np.any(sel):
            plan.send[nbr] = _local_node_ids(topology, rank, theirs[sel])
    return plan


@dataclass
class ChargePlan:
    """Guard-charge reduction lists: deposits on my owned node block that
    fall in a neighbor's guarded range are sent and added there."""
    rank: int
    send: dict[int, np.ndarray] = field(default_factory=dict)
    recv: dict[int, np.ndarray] = field(default_factory=dict)


def _block_nodes(lo, hi) -> np.ndarray:
    gi, gj, gk = np.meshgrid(np.arange(lo[0], hi[0] + 1),
                             np.arange(lo[1], hi[1] + 1),
                             np.arange(lo[2], hi[2] + 1), indexing="ij")
    return np.stack([gi.ravel(), gj.ravel(), gk.ravel()], axis=1)


def build_charge_plan(topology: DecompTopology, rank: int) -> ChargePlan:
    plan = ChargePlan(rank=rank)
    my_lo, my_hi = topology.owned_range(rank)
    my_glo, my_ghi = topology.guarded_range(rank)
    for _, nbr in topology.neighbors(rank):
        n_lo, n_hi = topology.owned_range(nbr)
        n_glo, n_ghi = topology.guarded_range(nbr)
        # send: my deposit block [own_lo, own_hi] ∩ their guarded block
        lo = tuple(max(my_lo[a], n_glo[a]) for a in range(3))
        hi = tuple(min(my_hi[a], n_ghi[a]) for a in range(3))
        if all(lo[a] <= hi[a] for a in range(3)):
            ijk = _block_nodes(lo, hi)
            plan.send[nbr] = _local_node_ids(topology, rank, ijk)
        # recv: their deposit block ∩ my guarded block
        lo = tuple(max(n_lo[a], my_glo[a]) for a in range(3))
        hi = tuple(min(n_hi[a], my_ghi[a]) for a in range(3))
        if all(lo[a] <= hi[a] for a in range(3)):
            ijk = _block_nodes(lo, hi)
            plan.recv[nbr] = _local_node_ids(topology, rank, ijk)
    return plan


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def compute_e_rel(phi_new: np.ndarray, phi_old: np.ndarray) -> tuple[float, bool]:
    """Relative change in the discrete nodal L2 norm; absolute fallback
    (flagged True) when the previous solution is identically zero."""
    phi_new = np.asarray(phi_new, dtype=float)
    phi_old = np.asarray(phi_old, dtype=float)
    if phi_new.shape != phi_old.shape:
        raise ProtocolError("e_rel requires equal-length nodal vectors")
    denom = float(np.linalg.norm(phi_old))
    diff = float(np.linalg.norm(phi_new - phi_old))
    if denom == 0.0:
        return diff, True
    return diff / denom, False


def halo_payloads(plan: HaloPlan, solution: np.ndarray) -> dict[int, np.ndarray]:
    return {dst: solution[ids] for dst, ids in plan.send.items()}


def apply_halo(plan: HaloPlan, g_values: np.ndarray,
               inbox: dict[int, np.ndarray]) -> None:
    for src, ids in plan.recv.items():
        if src not in inbox:
            raise ProtocolError(f"missing guard payload from rank {src}")
        vals = inbox[src]
        if len(vals) != len(ids):
            raise ProtocolError(
                f"guard payload from rank {src} has {len(vals)} values, expected {len(ids)}")
        g_values[ids] = vals


def exchange_guard_potentials(topology: DecompTopology, plans: list[HaloPlan],
                              solutions: list[np.ndarray],
                              g_values: list[np.ndarray]) -> None:
    """All-ranks exchange (in place): deterministic post-all-sends then
    receive-all. Functional form used by tests and the sequential engine."""
    outboxes = [halo_payloads(plans[r], solutions[r]) for r in range(topology.n_ranks)]
    for r in range(topology.n_ranks):
        inbox = {src: outboxes[src][r] for src in plans[r].recv}
        apply_halo(plans[r], g_values[r], inbox)


def charge_payloads(plan: ChargePlan, deposit: np.ndarray) -> dict[int, np.ndarray]:
    return {dst: deposit[ids] for dst, ids in plan.send.items()}


def apply_charge(plan: ChargePlan, deposit: np.ndarray,
                 inbox: dict[int, np.ndarray]) -> None:
    for src, ids in plan.recv.items():
        if src not in inbox:
            raise ProtocolError(f"missing charge payload from rank {src}")
        vals = inbox[src]
        if len(vals) != len(ids):
            raise ProtocolError(
                f"charge payload from rank {src} has {len(vals)} values, expected {len(ids)}")
        np.add.at(deposit, ids, vals)


def reduce_guard_charge(topology: DecompTopology, plans: list[ChargePlan],
                        deposits: list[np.ndarray]) -> list[np.ndarray]:
    """Sum shared-node deposits across subdomains; after reduction each
    rank's guarded nodal field equals the serial scatter."""
    outboxes = [charge_payloads(plans[r], deposits[r]) for r in range(topology.n_ranks)]
    out = [d.copy() for d in deposits]
    for r in range(topology.n_ranks):
        inbox = {src: outboxes[src][r] for src in plans[r].recv}
        apply_charge(plans[r], out[r], inbox)
    return out


class SchwarzRank:
    """Per-rank field state stepped by the Schwarz loop.

    Owns the assembled system, current Dirichlet values, and the previous
    solution for the relative-error test; warm-starts every PCG solve from
    the previous iterate.
    """

    def __init__(self, system, plan: HaloPlan, pcg: PCGConfig,
                 g_values: np.ndarray, rhs_free_fn):
        self.system = system
        self.plan = plan
        self.pcg = pcg
        self.g = np.asarray(g_values, dtype=float)
        self.rhs_free_fn = rhs_free_fn
        self.phi = self.system.expand(np.zeros(len(self.system.free)), self.g)
        self.prev = None
        self.last_report: SolveReport | None = None

    def solve_once(self) -> SolveReport:
        self.prev = self.phi.copy()
        b = self.rhs_free_fn(self.g)
        x0 = self.phi[self.system.free]
        x, rep = pcg_solve(self.system.K_ff, b, x0, self.pcg)
        self.phi = self.system.expand(x, self.g)
        self.last_report = rep
        return rep

    def e_rel(self) -> tuple[float, bool]:
        return compute_e_rel(self.phi, self.prev)

    def payloads(self) -> dict[int, np.ndarray]:
        return halo_payloads(self.plan, self.phi)

    def apply(self, inbox: dict[int, np.ndarray]) -> None:
        apply_halo(self.plan, self.g, inbox)
        # exchanged values also overwrite the solution's Dirichlet entries
        ids = np.concatenate([v for v in self.plan.recv.values()]) \
            if self.plan.recv else np.empty(0, dtype=np.int64)
        if len(ids):
            self.phi[ids] = self.g[ids]


@dataclass
class SchwarzResult:
    converged: bool
    iterations: int
    history: list  # per iteration: (max e_rel, max abs PCG residual, max PCG iters)


def schwarz_iterate(ranks: list[SchwarzRank], tolerance: float,
                    max_iterations: int) -> SchwarzResult:
    """Additive Schwarz over in-process ranks (sequential round-robin);
    the message-passing engine runs the identical phase sequence."""
    single = len(ranks) == 1
    history = []
    guard: list[float] = []
    for it in range(1, max_iterations + 1):
        reports = [r.solve_once() for r in ranks]
        outboxes = {r.plan.rank: r.payloads() for r in ranks}
        for r in ranks:
            inbox = {src: outboxes[src][r.plan.rank] for src in r.plan.recv}
            r.apply(inbox)
        e = max((r.e_rel()[0] for r in ranks)) if not single else 0.0
        history.append((e, max(r.residual for r in reports),
                        max(r.iterations for r in reports)))
        if single or e <= tolerance:
            return SchwarzResult(True, it, history)
        guard.append(e)
        if len(guard) >= 6 and all(guard[-i] > 10.0 * guard[-i - 1] for i in range(1, 6)):
            raise DivergenceError(
                f"DDM relative error grew >10x over 5 consecutive iterations (e={e:.3e})")
    return SchwarzResult(False, max_iterations, history)
