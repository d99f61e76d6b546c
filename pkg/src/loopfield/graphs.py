"""Lattice domains, random-walk kernels, Green matrices and reflection folding.

Vertices are integer lattice points tagged interior / dirichlet / neumann.
Dirichlet vertices absorb (they carry boundary values but no field degrees of
freedom); neumann vertices are ordinary degree-reduced vertices on the
reflecting part of the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

INTERIOR = 0
DIRICHLET = 1
NEUMANN = 2

_DENSE_GREEN_LIMIT = 20_000


@dataclass
class DomainGraph:
    """Finite conductance network with boundary tags.

    positions : (n, 2) integer lattice coordinates
    edges     : (m, 2) vertex index pairs with u < v, lexicographically sorted
    conductance : (m,) positive edge conductances
    tags      : (n,) int8, one of INTERIOR / DIRICHLET / NEUMANN
    marked    : index of a distinguished non-dirichlet vertex
    reflect   : involution permutation of vertices when the domain is
                mirror-symmetric (used by fold), else None
    """

    positions: np.ndarray
    edges: np.ndarray
    conductance: np.ndarray
    tags: np.ndarray
    marked: int
    kind: str = "custom"
    reflect: np.ndarray | None = None
    _index: dict = field(default=None, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return len(self.tags)

    @property
    def active(self) -> np.ndarray:
        """Indices of non-dirichlet vertices, in vertex order."""
        return np.flatnonzero(self.tags != DIRICHLET)

    def index_of(self, xy) -> int:
        if self._index is None:
            object.__setattr__(
                self, "_index",
                {(int(x), int(y)): i for i, (x, y) in enumerate(self.positions)},
            )
        return self._index[(int(xy[0]), int(xy[1]))]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_vertices)
        np.add.at(deg, self.edges[:, 0], self.conductance)
        np.add.at(deg, self.edges[:, 1], self.conductance)
        return deg


@dataclass
class FoldingMap:
    """Quotient data for a reflection fold.

    to_folded : (n_full,) folded index of every full vertex
    rep       : (n_fold,) a representative full vertex per folded vertex
    mirror    : (n_fold,) the other preimage (== rep on the axis)
    axis_mask : (n_fold,) True where the folded vertex sits on the axis
    """

    to_folded: np.ndarray
    rep: np.ndarray
    mirror: np.ndarray
    axis_mask: np.ndarray


def _finish(positions, edge_set, tags, marked, kind, reflect=None):
    positions = np.asarray(positions, dtype=np.int64)
    edges = np.array(sorted(edge_set), dtype=np.int64)
    cond = np.ones(len(edges))
    tags = np.asarray(tags, dtype=np.int8)
    return DomainGraph(positions, edges, cond, tags, int(marked), kind, reflect)


def _grid_edges(index, positions):
    edge_set = set()
    for i, (x, y) in enumerate(positions):
        for nb in ((x + 1, y), (x, y + 1)):
            j = index.get(nb)
            if j is not None:
                edge_set.add((min(i, j), max(i, j)))
    return edge_set


def build_domain(kind: str, size: int, **opts) -> DomainGraph:
    """Construct one of the standard lattice domains.

    kind 'path'      : size interior vertices in a row, dirichlet caps.
    kind 'square'    : size x size grid, outermost frame dirichlet; odd size
                       gets a reflection across the middle row.
    kind 'half-disc' : diameter=size; upper-half lattice points of the disc,
                       circular arc dirichlet, diameter row neumann by
                       default (opts diameter_boundary='dirichlet' pins it).
    kind 'mass-box'  : upper-half box of aspect 2:1, bottom edge neumann left
                       of the centre and dirichlet right of it, other walls
                       dirichlet.  size = width; opts wall_mult doubles the
                       walls away while keeping the centre geometry.
    """
    if kind == "path":
        n = size
        positions = [(i, 0) for i in range(n + 2)]
        tags = [DIRICHLET] + [INTERIOR] * n + [DIRICHLET]
        index = {p: i for i, p in enumerate(positions)}
        edges = _grid_edges(index, positions)
        return _finish(positions, edges, tags, 1 + n // 2, kind)

    if kind == "square":
        n = size
        positions = [(x, y) for y in range(n) for x in range(n)]
        index = {p: i for i, p in enumerate(positions)}
        tags = [
            DIRICHLET if x in (0, n - 1) or y in (0, n - 1) else INTERIOR
            for (x, y) in positions
        ]
        edges = _grid_edges(index, positions)
        reflect = None
        if n % 2 == 1:
            reflect = np.array(
                [index[(x, n - 1 - y)] for (x, y) in positions], dtype=np.int64
            )
        marked = index[(n // 2, n // 2)]
        return _finish(positions, edges, tags, marked, kind, reflect)

    if kind == "half-disc":
        r = size // 2
        diameter_boundary = opts.get("diameter_boundary", "neumann")
        pts = [
            (x, y)
            for y in range(0, r + 1)
            for x in range(-r, r + 1)
            if x * x + y * y <= r * r
        ]
        index = {p: i for i, p in enumerate(pts)}
        in_set = set(pts)
        tags = []
        for (x, y) in pts:
            nbrs = [(x + 1, y), (x - 1, y), (x, y + 1)] + ([(x, y - 1)] if y > 0 else [])
            if any(nb not in in_set for nb in nbrs):
                # outermost ring stands in for the circular arc; on the
                # diameter row this catches the two segment endpoints
                tags.append(DIRICHLET)
            elif y == 0:
                tags.append(DIRICHLET if diameter_boundary == "dirichlet" else NEUMANN)
            else:
                tags.append(INTERIOR)
        edges = _grid_edges(index, pts)
        marked = index[(0, 1)]
        return _finish(pts, edges, tags, marked, kind)

    if kind == "mass-box":
        width = size
        wall_mult = opts.get("wall_mult", 1)
        if width % 4:
            raise ValueError("mass-box width must be a multiple of 4")
        unit = width // 4
        w = 4 * unit * wall_mult
        h = 2 * unit * wall_mult
        split = w // 2
        positions = [(x, y) for y in range(h + 1) for x in range(w + 1)]
        index = {p: i for i, p in enumerate(positions)}
        tags = []
        for (x, y) in positions:
            if x in (0, w) or y == h:
                tags.append(DIRICHLET)
            elif y == 0:
                tags.append(NEUMANN if x < split else DIRICHLET)
            else:
                tags.append(INTERIOR)
        edges = _grid_edges(index, positions)
        marked = index[(split, 1)]
        dom = _finish(positions, edges, tags, marked, kind)
        return dom

    raise ValueError(f"unknown domain kind {kind!r}")


def induced_free_domain(domain: DomainGraph) -> DomainGraph:
    """Subgraph induced on the non-dirichlet vertices, all tags freed.

    Dirichlet vertices and their edges are removed entirely, so the random
    walk on the result has no killing (free boundary everywhere).
    """
    keep = domain.active
    remap = -np.ones(domain.n_vertices, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    eu, ev = remap[domain.edges[:, 0]], remap[domain.edges[:, 1]]
    mask = (eu >= 0) & (ev >= 0)
    edges = np.stack([eu[mask], ev[mask]], axis=1)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return DomainGraph(
        positions=domain.positions[keep],
        edges=edges[order],
        conductance=domain.conductance[mask][order],
        tags=np.zeros(len(keep), dtype=np.int8),
        marked=int(remap[domain.marked]),
        kind=domain.kind + "-free",
    )


class TransitionKernel:
    """Killed random walk on the non-dirichlet vertices of a domain.

    deg is the full conductance degree (including edges into dirichlet
    vertices, which account for the killing); neumann vertices simply have
    the smaller degree of the folded/boundary lattice.
    """

    def __init__(self, domain: DomainGraph):
        self.domain = domain
        self.active = domain.active
        n_all = domain.n_vertices
        self.pos_of = -np.ones(n_all, dtype=np.int64)
        self.pos_of[self.active] = np.arange(len(self.active))
        deg_all = domain.degrees()
        if np.any(deg_all[self.active] <= 0):
            raise ValueError("active vertex with zero degree")
        self.deg = deg_all[self.active]

        eu = self.pos_of[domain.edges[:, 0]]
        ev = self.pos_of[domain.edges[:, 1]]
        live = (eu >= 0) & (ev >= 0)
        self.edge_u = eu[live]
        self.edge_v = ev[live]
        self.edge_c = domain.conductance[live]

        n = len(self.active)
        rows = np.concatenate([self.edge_u, self.edge_v])
        cols = np.concatenate([self.edge_v, self.edge_u])
        vals = np.concatenate([self.edge_c, self.edge_c])
        self.C = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        self.P = sp.csr_matrix((vals / self.deg[rows], (rows, cols)), shape=(n, n))
        self.n = n

        # padded neighbor tables for vectorized bridge stepping
        order = np.lexsort((cols, rows))
        r_s, c_s, v_s = rows[order], cols[order], vals[order]
        counts = np.bincount(r_s, minlength=n)
        maxdeg = counts.max() if n else 0
        nbr = np.zeros((n, maxdeg), dtype=np.int64)
        nbr_p = np.zeros((n, maxdeg))
        slot = (np.arange(len(r_s)) - np.repeat(np.concatenate([[0], np.cumsum(counts)[:-1]]), counts))
        nbr[r_s, slot] = c_s
        nbr_p[r_s, slot] = v_s / self.deg[r_s]
        self.nbr = nbr
        self.nbr_p = nbr_p
        self.nbr_count = counts

        self._eig = None
        self._edge_id = None

    def edge_id_dense(self) -> np.ndarray:
        """(n, n) table mapping ordered vertex pairs to edge index (-1 if none)."""
        if self._edge_id is None:
            tab = -np.ones((self.n, self.n), dtype=np.int64)
            tab[self.edge_u, self.edge_v] = np.arange(len(self.edge_u))
            tab[self.edge_v, self.edge_u] = np.arange(len(self.edge_u))
            self._edge_id = tab
        return self._edge_id

    @property
    def laplacian(self) -> sp.csr_matrix:
        return sp.diags(self.deg) - self.C

    def symmetrized_eig(self):
        """Eigendecomposition of D^{1/2} P D^{-1/2} (dense, cached)."""
        if self._eig is None:
            if self.n > 4000:
                raise ValueError("dense eigendecomposition refused for n > 4000")
            s = np.sqrt(self.deg)
            S = (self.C.toarray() / s[:, None]) / s[None, :]
            w, U = np.linalg.eigh(S)
            self._eig = (w, U, s)
        return self._eig

    def spectral_radius(self) -> float:
        if self.n <= 4000:
            w, _, _ = self.symmetrized_eig()
            return float(np.max(np.abs(w)))
        val = spla.eigsh(self.P.astype(float), k=1, which="LM",
                         return_eigenvectors=False, tol=1e-10)
        return float(abs(val[0]))


def transition_kernel(domain: DomainGraph) -> TransitionKernel:
    return TransitionKernel(domain)


class GreenMatrix:
    """Inverse (or pseudo-inverse) of the active-vertex Laplacian."""

    def __init__(self, domain: DomainGraph, mode: str = "auto"):
        if mode == "auto":
            mode = "mixed" if np.any(domain.tags == NEUMANN) else "dirichlet"
        if mode in ("dirichlet", "mixed"):
            if not np.any(domain.tags == DIRICHLET):
                raise ValueError(f"{mode} mode needs at least one dirichlet vertex")
        elif mode == "neumann":
            if np.any(domain.tags == DIRICHLET):
                raise ValueError("neumann mode is for domains with no dirichlet part")
        else:
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.domain = domain
        self.kernel = transition_kernel(domain)
        self.n = self.kernel.n
        if self.n > _DENSE_GREEN_LIMIT:
            raise ValueError("dense Green matrix refused beyond 20000 vertices")
        self._L = self.kernel.laplacian.toarray()
        self._chol = None
        self._matrix = None
        self._eig = None

    @property
    def chol(self):
        """Lower Cholesky factor of the active Laplacian (invertible modes)."""
        if self._chol is None:
            if self.mode == "neumann":
                raise ValueError("neumann Laplacian is singular; use eig()")
            self._chol = scipy.linalg.cholesky(self._L, lower=True)
        return self._chol

    def eig(self):
        if self._eig is None:
            w, V = np.linalg.eigh(self._L)
            self._eig = (w, V)
        return self._eig

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            if self.mode == "neumann":
                w, V = self.eig()
                inv = np.where(w > 1e-9 * w[-1], 1.0 / np.maximum(w, 1e-300), 0.0)
                self._matrix = (V * inv) @ V.T
            else:
                ident = np.eye(self.n)
                y = scipy.linalg.solve_triangular(self.chol, ident, lower=True)
                self._matrix = scipy.linalg.solve_triangular(
                    self.chol.T, y, lower=False
                )
        return self._matrix

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """L^{-1} rhs (pseudo-inverse solve in neumann mode, rhs zero-sum)."""
        if self.mode == "neumann":
            w, V = self.eig()
            mask = w > 1e-9 * w[-1]
            inv = np.where(mask, 1.0 / np.where(mask, w, 1.0), 0.0)
            coef = V.T @ rhs
            coef = coef * (inv[:, None] if coef.ndim > 1 else inv)
            return V @ coef
        y = scipy.linalg.solve_triangular(self.chol, rhs, lower=True)
        return scipy.linalg.solve_triangular(self.chol.T, y, lower=False)

    def pairing(self, f: np.ndarray, g: np.ndarray) -> float:
        """<f, G g> over active vertices."""
        return float(f @ self.solve(g))

    def entry(self, i: int, j: int) -> float:
        return float(self.matrix[i, j])


def green(domain: DomainGraph, mode: str = "auto") -> GreenMatrix:
    return GreenMatrix(domain, mode)


def fold(domain: DomainGraph):
    """Quotient a mirror-symmetric domain by its reflection.

    Returns (folded_domain, FoldingMap).  Folded conductances are half the
    orbit sums: off-axis edge pairs keep their conductance, axis-incident
    pairs keep it, and axis-axis edges halve; axis vertices (reflection fixed
    points) become neumann unless they were dirichlet.  For this convention
    the folded mixed Green satisfies the exact reflection identity
    G_fold(u, v) = G_full(u, v) + G_full(u, reflect(v)).
    """
    refl = domain.reflect
    if refl is None:
        raise ValueError("domain carries no reflection")
    if not np.array_equal(refl[refl], np.arange(domain.n_vertices)):
        raise ValueError("reflection is not an involution")
    if np.any(domain.tags[refl] != domain.tags):
        raise ValueError("boundary tags are not mirror-symmetric")
    eu, ev = domain.edges[:, 0], domain.edges[:, 1]
    if np.any(refl[eu] == ev):
        raise ValueError("edge crossing the axis cannot be folded")
    # conductance symmetry: reflected edge set with matching conductances
    re_u, re_v = refl[eu], refl[ev]
    key = np.minimum(re_u, re_v) * domain.n_vertices + np.maximum(re_u, re_v)
    own = eu * domain.n_vertices + ev
    order_own = np.argsort(own)
    order_ref = np.argsort(key)
    if not np.array_equal(own[order_own], key[order_ref]) or not np.allclose(
        domain.conductance[order_own], domain.conductance[order_ref]
    ):
        raise ValueError("conductances are not mirror-symmetric")

    on_axis = refl == np.arange(domain.n_vertices)
    # keep the representative side: smaller index of (v, refl(v))
    keep_mask = np.arange(domain.n_vertices) <= refl
    keep = np.flatnonzero(keep_mask)
    fold_id = -np.ones(domain.n_vertices, dtype=np.int64)
    fold_id[keep] = np.arange(len(keep))
    to_folded = np.where(keep_mask, fold_id, fold_id[refl])

    fu, fv = to_folded[eu], to_folded[ev]
    lo, hi = np.minimum(fu, fv), np.maximum(fu, fv)
    pair_key = lo * len(keep) + hi
    uniq, inv = np.unique(pair_key, return_inverse=True)
    half = np.zeros(len(uniq))
    np.add.at(half, inv, 0.5 * domain.conductance)
    f_edges = np.stack([uniq // len(keep), uniq % len(keep)], axis=1)

    new_tags = domain.tags[keep].copy()
    axis_fold = on_axis[keep]
    new_tags[axis_fold & (new_tags == INTERIOR)] = NEUMANN

    folded = DomainGraph(
        positions=domain.positions[keep],
        edges=f_edges,
        conductance=half,
        tags=new_tags,
        marked=int(to_folded[domain.marked]),
        kind=domain.kind + "-fold",
    )
    fmap = FoldingMap(
        to_folded=to_folded,
        rep=keep,
        mirror=refl[keep],
        axis_mask=axis_fold,
    )
    return folded, fmap


def avoid_logdet(kernel: TransitionKernel, avoid) -> float:
    """Total loop-measure mass F(S) of loops staying off the vertex set S.

    F(S) = -log det(I - P restricted to the complement of S); S is given in
    active-vertex indices.  F is monotone non-increasing in S and F(all) = 0.
    """
    avoid = np.asarray(avoid, dtype=np.int64)
    keep = np.setdiff1d(np.arange(kernel.n), avoid)
    if len(keep) == 0:
        return 0.0
    L = kernel.laplacian
    Lkk = L[keep][:, keep]
    logdeg = float(np.sum(np.log(kernel.deg[keep])))
    if len(keep) <= 600:
        sign, logdet = np.linalg.slogdet(Lkk.toarray())
        if sign <= 0:
            raise ValueError("restricted Laplacian not positive definite")
        return logdeg - float(logdet)
    lu = spla.splu(Lkk.tocsc(), permc_spec="MMD_AT_PLUS_A")
    diag = lu.U.diagonal()
    if np.any(diag <= 0):
        return logdeg - float(np.sum(np.log(np.abs(diag))))
    return logdeg - float(np.sum(np.log(diag)))
