"""Cluster decompositions: soup clusters, sign clusters, cells, level clusters."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .fields import LAMBDA, EdgeZeroMarks, FieldSample, boundary_edge_table
from .graphs import DIRICHLET, TransitionKernel


def components(n_nodes: int, eu: np.ndarray, ev: np.ndarray):
    """Connected-component labels (deterministic first-occurrence order)."""
    if len(eu) == 0:
        return int(n_nodes), np.arange(n_nodes, dtype=np.int64)
    g = sp.csr_matrix(
        (np.ones(len(eu), dtype=np.int8), (eu, ev)), shape=(n_nodes, n_nodes)
    )
    n_comp, labels = connected_components(g, directed=False)
    return int(n_comp), labels.astype(np.int64)


@dataclass
class ClusterDecomposition:
    labels: np.ndarray
    n_clusters: int
    boundary_touching: np.ndarray  # per-cluster bool

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_clusters)


def boundary_adjacent_mask(kernel: TransitionKernel) -> np.ndarray:
    """Active vertices with at least one dirichlet neighbor."""
    dom = kernel.domain
    eu, ev = dom.edges[:, 0], dom.edges[:, 1]
    mask = np.zeros(kernel.n, dtype=bool)
    for a, d in ((eu, ev), (ev, eu)):
        sel = (kernel.pos_of[a] >= 0) & (dom.tags[d] == DIRICHLET)
        mask[kernel.pos_of[a[sel]]] = True
    return mask


# ---------------------------------------------------------------- soups


def soup_clusters_batch(batch) -> np.ndarray:
    """(m, n) labels of vertex-sharing loop clusters; unvisited = singleton."""
    k = batch.kernel
    su, sv = batch.step_edges()
    rep = batch.step_soup()
    _, labels = components(batch.m * k.n, rep * k.n + su, rep * k.n + sv)
    return labels.reshape(batch.m, k.n)


def soup_clusters(soup) -> ClusterDecomposition:
    k = soup.kernel
    eu, ev = [], []
    for lp in soup.loops:
        vs = np.asarray(lp.vertices, dtype=np.int64)
        eu.append(vs)
        ev.append(np.roll(vs, -1))
    eu = np.concatenate(eu) if eu else np.zeros(0, dtype=np.int64)
    ev = np.concatenate(ev) if ev else np.zeros(0, dtype=np.int64)
    n_comp, labels = components(k.n, eu, ev)
    bd = boundary_adjacent_mask(k)
    touch = np.zeros(n_comp, dtype=bool)
    touch[labels[bd]] = True
    return ClusterDecomposition(labels, n_comp, touch)


def cable_clusters_batch(batch, occ: np.ndarray, rng: np.random.Generator):
    """Metric-graph cluster completion of a soup batch.

    An edge crossed by any loop glues its endpoints; an uncrossed edge (x,y)
    glues with probability 1 - exp(-2 C sqrt(lx ly)) given the occupation.
    (Exponent derived from the two-vertex solvable case: P(no crossing | l)
    = 1/cosh(2C sqrt(lx ly)) while the sign-law gluing marginal is
    tanh(2C sqrt(lx ly)).)  Returns (labels (m,n), glued (m,E)).
    """
    k = batch.kernel
    su, sv = batch.step_edges()
    eid = k.edge_id_dense()[su, sv]
    rep = batch.step_soup()
    n_e = len(k.edge_u)
    crossed = np.bincount(rep * n_e + eid, minlength=batch.m * n_e) > 0
    crossed = crossed.reshape(batch.m, n_e)

    lx = occ[:, k.edge_u]
    ly = occ[:, k.edge_v]
    p = -np.expm1(-2.0 * k.edge_c[None, :] * np.sqrt(lx * ly))
    glued = crossed | (rng.random((batch.m, n_e)) < p)

    r_idx, e_idx = np.nonzero(glued)
    _, labels = components(
        batch.m * k.n,
        r_idx * k.n + k.edge_u[e_idx],
        r_idx * k.n + k.edge_v[e_idx],
    )
    return labels.reshape(batch.m, k.n), glued


def lupu_sign_fields(
    occ: np.ndarray, labels: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Signed fields sigma_cluster * sqrt(2 occupation), one sign per cluster."""
    n_comp = int(labels.max()) + 1 if labels.size else 0
    sig = rng.integers(0, 2, size=n_comp) * 2 - 1
    return sig[labels] * np.sqrt(2.0 * occ)


def lupu_sign_field(occ_values: np.ndarray, decomposition: ClusterDecomposition,
                    rng: np.random.Generator) -> np.ndarray:
    lab = decomposition.labels[None, :]
    return lupu_sign_fields(occ_values[None, :], lab, rng)[0]


# ---------------------------------------------------------------- sign clusters


def field_sign_clusters(
    kernel: TransitionKernel, values: np.ndarray, marks: EdgeZeroMarks
) -> ClusterDecomposition:
    """Components of unmarked edges; unmarked endpoints must share a sign."""
    s = np.sign(values)
    keep = ~marks.marks
    if np.any(s[kernel.edge_u[keep]] * s[kernel.edge_v[keep]] <= 0):
        raise ValueError("unmarked edge with non-matching endpoint signs")
    n_comp, labels = components(kernel.n, kernel.edge_u[keep], kernel.edge_v[keep])
    touch = np.zeros(n_comp, dtype=bool)
    contact_v = _contact_vertices(kernel, marks, None)
    touch[labels[contact_v]] = True
    return ClusterDecomposition(labels, n_comp, touch)


def _contact_vertices(kernel, marks: EdgeZeroMarks, contact_mask) -> np.ndarray:
    """Active vertices whose cable reaches the (selected) dirichlet boundary."""
    ok = ~marks.boundary_blocked
    if contact_mask is not None:
        ok &= contact_mask[marks.boundary_edges[:, 1]]
    out = np.zeros(kernel.n, dtype=bool)
    out[marks.boundary_edges[ok, 0]] = True
    return np.flatnonzero(out)


# ---------------------------------------------------------------- cells


@dataclass
class CellComplex:
    """Partition of the active vertices into boundary-anchored cells.

    cell_of   : (n,) cell index per active vertex
    eps       : (k,) label in {-1,+1} per cell
    root      : index of the cell containing the marked vertex
    parent    : (k,) BFS-tree parent (-1 at roots)
    bfs_order : (k,) traversal order, root first
    adj_pairs : (a, 2) adjacent cell pairs, adj_counts: shared-edge counts
    anchored  : (k,) bool, True when the cell grew from a contact core
    """

    cell_of: np.ndarray
    eps: np.ndarray
    root: int
    parent: np.ndarray
    bfs_order: np.ndarray
    adj_pairs: np.ndarray
    adj_counts: np.ndarray
    anchored: np.ndarray

    @property
    def n_cells(self) -> int:
        return len(self.eps)

    def cell_touches(self, kernel: TransitionKernel, vertex_mask: np.ndarray):
        """Per-cell flag: contains an active vertex adjacent to a marked full vertex."""
        dom = kernel.domain
        eu, ev = dom.edges[:, 0], dom.edges[:, 1]
        out = np.zeros(self.n_cells, dtype=bool)
        for a, d in ((eu, ev), (ev, eu)):
            sel = (kernel.pos_of[a] >= 0) & vertex_mask[d]
            out[self.cell_of[kernel.pos_of[a[sel]]]] = True
        return out


class _DSU:
    def __init__(self, n):
        self.p = list(range(n))

    def find(self, a):
        while self.p[a] != a:
            self.p[a] = self.p[self.p[a]]
            a = self.p[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.p[rb] = ra


def _band_stay_prob(a, b, c, half: float = LAMBDA) -> np.ndarray:
    """P(the cable between values a and b never leaves (-half, half)).

    Two-barrier survival of a Brownian bridge across conductance c, via the
    reflection series truncated at |k| <= 3 (terms fall off like
    exp(-2 k^2 (2 half)^2 c)).  Zero whenever an endpoint sits outside the
    open band.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    w = 2.0 * half
    u = a + half
    v = b + half
    inside = (np.abs(a) < half) & (np.abs(b) < half)
    total = np.zeros(np.broadcast(u, v, c).shape)
    for k in range(-3, 4):
        kw = k * w
        total += np.exp(-2.0 * kw * (kw + v - u) * c)
        total -= np.exp(-2.0 * (kw + u) * (kw + v) * c)
    return np.where(inside, np.clip(total, 0.0, 1.0), 0.0)


def boundary_cells(
    kernel: TransitionKernel,
    values: np.ndarray,
    marks: EdgeZeroMarks,
    rng: np.random.Generator,
    contact_mask: np.ndarray | None = None,
    region_of: np.ndarray | None = None,
    region_contact: np.ndarray | None = None,
    core_min: int | None = None,
) -> CellComplex:
    """Boundary-touching sign clusters grown into a full cell partition.

    Cores are sign clusters whose cable reaches the dirichlet boundary
    (optionally restricted by contact_mask over full vertices) and that span
    at least core_min vertices; the default cutoff n/64 keeps only clusters
    covering a fixed fraction of the domain, so the lattice-scale flecks
    pinned along the boundary (O(1) vertices, ever more numerous as the grid
    refines) join the residual pool instead of seeding cells of their own.  Everything else attaches iteratively to the
    neighboring cell with the largest shared interface (ties to the lowest
    cell index), so fleck vertices inherit the height of the surrounding
    cell instead of drawing coins of their own.  Adjacent cells with equal
    labels are then merged, which makes label alternation across every
    remaining adjacency exact.  If nothing qualifies the whole region
    becomes a single cell with a fair-coin label.

    region_of (optional) restricts connectivity to edges inside equal values
    of the array without changing the contact rule, so nested cells anchor
    on the same boundary selection as their parents (used by the nested
    recursion); the size cutoff is skipped there (sub-cells shrink with
    depth, and a coarse nested partition would stall the recursion), and
    regions left without an anchored core collapse to one coin-labelled
    cell each.  region_contact (optional) adds explicit contact vertices.
    """
    s = np.sign(values)
    s = np.where(s == 0, 1.0, s)

    eu, ev, ec = kernel.edge_u, kernel.edge_v, kernel.edge_c
    live = ~marks.marks
    if region_of is not None:
        inside = region_of[eu] == region_of[ev]
        live = live & inside
        edge_live_domain = inside
        size_floor = 1
    else:
        edge_live_domain = np.ones(len(eu), dtype=bool)
        size_floor = (core_min if core_min is not None
                      else max(2, int(round(kernel.n / 64.0))))

    n_comp, labels = components(kernel.n, eu[live], ev[live])

    contact = np.zeros(kernel.n, dtype=bool)
    contact[_contact_vertices(kernel, marks, contact_mask)] = True
    if region_contact is not None:
        contact |= region_contact

    # cluster sign from its lowest-index vertex
    first_vertex = np.full(n_comp, kernel.n, dtype=np.int64)
    np.minimum.at(first_vertex, labels, np.arange(kernel.n))
    cl_sign = s[first_vertex].astype(np.int64)

    comp_size = np.bincount(labels, minlength=n_comp)
    core_mask = np.zeros(n_comp, dtype=bool)
    core_mask[labels[contact]] = True
    core_mask &= comp_size >= size_floor
    core_ids = np.flatnonzero(core_mask)

    cell_of = -np.ones(kernel.n, dtype=np.int64)
    cluster_cell = -np.ones(n_comp, dtype=np.int64)
    if len(core_ids):
        cluster_cell[core_ids] = np.arange(len(core_ids))
        cell_of = cluster_cell[labels]
    n_cells = len(core_ids)

    eps = list(cl_sign[core_ids])

    du, dv = eu[edge_live_domain], ev[edge_live_domain]
    while True:
        cu, cv = cell_of[du], cell_of[dv]
        lu, lv = labels[du], labels[dv]
        grow_u = (cu < 0) & (cv >= 0)
        grow_v = (cv < 0) & (cu >= 0)
        if not (np.any(grow_u) or np.any(grow_v)):
            break
        cl = np.concatenate([lu[grow_u], lv[grow_v]])
        tgt = np.concatenate([cv[grow_u], cu[grow_v]])
        key = cl * (n_cells + 1) + tgt
        uk, cnt = np.unique(key, return_counts=True)
        kcl, ktgt = uk // (n_cells + 1), uk % (n_cells + 1)
        order = np.lexsort((ktgt, -cnt, kcl))
        kcl, ktgt = kcl[order], ktgt[order]
        first = np.unique(kcl, return_index=True)[1]
        chosen_cl, chosen_cell = kcl[first], ktgt[first]
        cluster_cell[chosen_cl] = chosen_cell
        cell_of = cluster_cell[labels]

    leftover = np.flatnonzero(cluster_cell < 0)
    if len(leftover):
        if n_cells == 0 and region_of is None:
            # nothing anchors: the whole domain is one cell with a coin label
            cluster_cell[:] = 0
            eps = [1 if rng.random() < 0.5 else -1]
            n_cells = 1
        elif region_of is not None:
            # regions without an anchored core (or with pockets cut off from
            # one) collapse to a single coin-labelled cell per region
            gid = region_of[first_vertex[leftover]]
            uniq = np.unique(gid)
            lookup = {g: n_cells + i for i, g in enumerate(uniq)}
            cluster_cell[leftover] = [lookup[g] for g in gid]
            for _ in uniq:
                eps.append(1 if rng.random() < 0.5 else -1)
            n_cells += len(uniq)
        else:
            # disconnected pockets: one coin-labelled cell per leftover
            # cluster, in cluster order
            for cl in leftover:
                cluster_cell[cl] = n_cells
                eps.append(1 if rng.random() < 0.5 else -1)
                n_cells += 1
        cell_of = cluster_cell[labels]

    anchored = np.zeros(n_cells, dtype=bool)
    remap_core = cluster_cell[core_ids] if len(core_ids) else []
    anchored[list(remap_core)] = True
    eps = np.asarray(eps, dtype=np.int64)

    # merge equal-label adjacent cells (lattice artifact suppression)
    cu, cv = cell_of[du], cell_of[dv]
    diff = cu != cv
    pu, pv = cu[diff], cv[diff]
    dsu = _DSU(n_cells)
    same = eps[pu] == eps[pv]
    for a, b in zip(pu[same], pv[same]):
        dsu.union(int(a), int(b))
    groups = np.array([dsu.find(i) for i in range(n_cells)], dtype=np.int64)
    uniq, new_of_old = np.unique(groups, return_inverse=True)
    new_eps = eps[uniq]
    new_anchored = np.zeros(len(uniq), dtype=bool)
    np.logical_or.at(new_anchored, new_of_old, anchored)
    cell_of = new_of_old[cell_of]
    eps = new_eps
    anchored = new_anchored
    n_cells = len(uniq)

    # adjacency with interface sizes
    cu, cv = cell_of[du], cell_of[dv]
    diff = cu != cv
    lo = np.minimum(cu[diff], cv[diff])
    hi = np.maximum(cu[diff], cv[diff])
    key = lo * n_cells + hi
    uk, cnt = np.unique(key, return_counts=True)
    adj_pairs = np.stack([uk // n_cells, uk % n_cells], axis=1)
    adj_counts = cnt

    root = int(cell_of[kernel.pos_of[kernel.domain.marked]]) if region_of is None else 0
    parent, order = _bfs_forest(n_cells, adj_pairs, root)
    return CellComplex(cell_of, eps, root, parent, order, adj_pairs, adj_counts,
                       anchored)


def _bfs_forest(n_cells, pairs, root):
    nbrs = [[] for _ in range(n_cells)]
    for a, b in pairs:
        nbrs[a].append(int(b))
        nbrs[b].append(int(a))
    for lst in nbrs:
        lst.sort()
    parent = -np.ones(n_cells, dtype=np.int64)
    seen = np.zeros(n_cells, dtype=bool)
    order = []
    queue = []
    if n_cells:
        queue.append(root)
        seen[root] = True
    while True:
        head = 0
        while head < len(queue):
            c = queue[head]
            head += 1
            order.append(c)
            for nb in nbrs[c]:
                if not seen[nb]:
                    seen[nb] = True
                    parent[nb] = c
                    queue.append(nb)
        rest = np.flatnonzero(~seen)
        if len(rest) == 0:
            break
        queue = [int(rest[0])]
        seen[rest[0]] = True
    return parent, np.asarray(order, dtype=np.int64)


# ---------------------------------------------------------------- level clusters


def lattice_level_clusters(
    kernel: TransitionKernel,
    values: np.ndarray,
    offset: float,
    rng: np.random.Generator,
    spacing: float = 2.0 * LAMBDA,
) -> ClusterDecomposition:
    """Clusters avoiding the height lattice offset + spacing*Z.

    Edges whose endpoints land in different bands are cut outright; same-band
    edges are cut with the nearest-level bridge probability
    exp(-2 d(u) d(v) C).  Everything is computed from r = values - offset so
    a joint shift of field and offset replays identically.
    """
    labels = level_cluster_labels_block(
        kernel, values[None, :], offset, rng, spacing
    )[0]
    n_comp = int(labels.max()) + 1
    bd = boundary_adjacent_mask(kernel)
    touch = np.zeros(n_comp, dtype=bool)
    touch[labels[bd]] = True
    return ClusterDecomposition(labels, n_comp, touch)


def level_cluster_labels_block(kernel, values_mat, offset, rng, spacing=2.0 * LAMBDA):
    """(m, n) level-cluster labels for a block of fields (labels global)."""
    m, n = values_mat.shape
    r = values_mat - offset
    band = np.floor(r / spacing)
    frac = r - band * spacing
    d = np.minimum(frac, spacing - frac)
    eu, ev = kernel.edge_u, kernel.edge_v
    cut = band[:, eu] != band[:, ev]
    p_cut = np.exp(-2.0 * d[:, eu] * d[:, ev] * kernel.edge_c[None, :])
    cut |= rng.random((m, len(eu))) < p_cut
    ri, ei = np.nonzero(~cut)
    _, labels = components(m * n, ri * n + eu[ei], ri * n + ev[ei])
    return labels.reshape(m, n)


def boundary_level_stats_block(kernel, values_mat, offset, rng, spacing=2.0 * LAMBDA):
    """Per-replica (count, total size) of boundary-touching level clusters."""
    m, n = values_mat.shape
    labels = level_cluster_labels_block(kernel, values_mat, offset, rng, spacing)
    ncomp = int(labels.max()) + 1
    bd = boundary_adjacent_mask(kernel)
    touch = np.zeros(ncomp, dtype=bool)
    touch[labels[:, bd].ravel()] = True
    comp_rep = np.zeros(ncomp, dtype=np.int64)
    comp_rep[labels.ravel()] = np.repeat(np.arange(m), n)
    sizes = np.bincount(labels.ravel(), minlength=ncomp)
    counts = np.bincount(comp_rep[touch], minlength=m)
    totals = np.bincount(comp_rep, weights=sizes * touch, minlength=m)
    return counts, totals.astype(np.int64)


def separating_count(layer_data, x: int, y: int) -> int:
    """Layers in which x and y share a cell that avoids the far boundary.

    layer_data: sequence of (cell_of, cell_avoids_far) pairs per layer.
    Vertices off the active set (index < 0, i.e. on the far boundary
    itself) never count.
    """
    if x < 0 or y < 0:
        return 0
    total = 0
    for cell_of, avoids in layer_data:
        cx, cy = cell_of[x], cell_of[y]
        if cx == cy and avoids[cx]:
            total += 1
    return total
