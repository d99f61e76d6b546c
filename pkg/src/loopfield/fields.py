"""Gaussian free field sampling, cable-edge zero marks, covariance estimates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .graphs import DIRICHLET, DomainGraph, GreenMatrix

#: height gap unit of the level-line construction
LAMBDA = float(np.sqrt(np.pi / 8.0))


@dataclass
class FieldSample:
    """Field values over the active (non-dirichlet) vertices of a domain."""

    domain: DomainGraph
    values: np.ndarray
    boundary: np.ndarray  # values on dirichlet vertices, full-vertex indexing
    gauge: str = "none"

    def value_at(self, xy) -> float:
        i = self.domain.index_of(xy)
        kpos = np.flatnonzero(self.domain.active == i)
        if len(kpos) == 0:
            return float(self.boundary[i])
        return float(self.values[kpos[0]])


@dataclass
class EdgeZeroMarks:
    """Per-edge indicators of a cable zero between same-field endpoints.

    marks            : bool per active-active edge (kernel edge order)
    boundary_blocked : bool per active-dirichlet edge; False means the cable
                       reaches the boundary without an interior zero
    boundary_edges   : (k, 2) array of (active_index, dirichlet_vertex)
    """

    marks: np.ndarray
    boundary_blocked: np.ndarray
    boundary_edges: np.ndarray


def _boundary_rhs(gr: GreenMatrix, boundary_values: np.ndarray) -> np.ndarray:
    dom = gr.domain
    eu, ev = dom.edges[:, 0], dom.edges[:, 1]
    rhs = np.zeros(gr.n)
    pos = gr.kernel.pos_of
    for a, d in ((eu, ev), (ev, eu)):
        sel = (pos[a] >= 0) & (dom.tags[d] == DIRICHLET)
        np.add.at(rhs, pos[a[sel]], dom.conductance[sel] * boundary_values[d[sel]])
    return rhs


def harmonic_extension(gr: GreenMatrix, boundary_values: np.ndarray) -> np.ndarray:
    """Discrete-harmonic function on active vertices matching boundary data."""
    return gr.solve(_boundary_rhs(gr, boundary_values))


def sample_gff(
    gr: GreenMatrix,
    rng: np.random.Generator,
    boundary: float | np.ndarray = 0.0,
    gauge: str = "marked",
    noise: np.ndarray | None = None,
) -> FieldSample:
    """Draw one field with covariance gr (dirichlet/mixed) or its pinv (neumann).

    boundary: scalar or per-vertex dirichlet data (ignored in neumann mode).
    gauge (neumann only): 'marked' pins the marked vertex to zero,
    'mean-zero' removes the mean.  noise injects the standard-normal vector
    (testing hook).
    """
    dom = gr.domain
    z = rng.standard_normal(gr.n) if noise is None else np.asarray(noise, float)
    if gr.mode == "neumann":
        w, V = gr.eig()
        mask = w > 1e-9 * w[-1]
        scale = np.where(mask, 1.0 / np.sqrt(np.where(mask, w, 1.0)), 0.0)
        x = V @ (scale * z)
        if gauge == "marked":
            x = x - x[gr.kernel.pos_of[dom.marked]]
        elif gauge == "mean-zero":
            x = x - x.mean()
        else:
            raise ValueError(f"unknown gauge {gauge!r}")
        return FieldSample(dom, x, np.zeros(dom.n_vertices), gauge)

    bvals = np.zeros(dom.n_vertices)
    if np.isscalar(boundary):
        bvals[dom.tags == DIRICHLET] = boundary
        has_data = boundary != 0.0
    else:
        bvals[:] = boundary
        has_data = np.any(bvals[dom.tags == DIRICHLET] != 0.0)
    x = scipy.linalg.solve_triangular(gr.chol.T, z, lower=False)
    if has_data:
        x = x + harmonic_extension(gr, bvals)
    return FieldSample(dom, x, bvals, "none")


def boundary_edge_table(domain: DomainGraph, kernel) -> np.ndarray:
    """(k, 3) rows (active_index, dirichlet_vertex, full_edge_index), cached."""
    if getattr(kernel, "_bd_table", None) is None:
        eu, ev = domain.edges[:, 0], domain.edges[:, 1]
        pos = kernel.pos_of
        parts = []
        for act, dv in ((eu, ev), (ev, eu)):
            sel = (pos[act] >= 0) & (domain.tags[dv] == DIRICHLET)
            parts.append(
                np.stack([pos[act[sel]], dv[sel], np.flatnonzero(sel)], axis=1)
            )
        bd = (np.concatenate(parts, axis=0) if parts
              else np.zeros((0, 3), dtype=np.int64))
        kernel._bd_table = bd
    return kernel._bd_table


def cable_zero_marks(
    field: FieldSample, gr: GreenMatrix, rng: np.random.Generator
) -> EdgeZeroMarks:
    """Sample the cable zeros given vertex values.

    Opposite signs (or an exact zero endpoint) force a zero; same-sign
    endpoints a, b across conductance C get a zero with probability
    exp(-2|a||b|C) — the bridge zero-hit law, validated by the subdivision
    oracle in the tests.  Boundary edges with boundary value 0 are never
    blocked: the bridge to 0 vanishes only at the endpoint, so the excursion
    component still reaches the boundary.
    """
    dom = field.domain
    ker = gr.kernel
    a = field.values[ker.edge_u]
    b = field.values[ker.edge_v]
    u = rng.random(len(a))
    same = (a * b) > 0.0
    marks = ~same | (u < np.exp(-2.0 * np.abs(a * b) * ker.edge_c))

    bd = boundary_edge_table(dom, ker)
    bvals = field.boundary[bd[:, 1]] if len(bd) else np.zeros(0)
    avals = field.values[bd[:, 0]] if len(bd) else np.zeros(0)
    cvals = dom.conductance[bd[:, 2]] if len(bd) else np.zeros(0)
    ub = rng.random(len(bd))
    zero_data = bvals == 0.0
    same_b = (avals * bvals) > 0.0
    blocked = np.where(
        zero_data,
        False,
        ~same_b | (ub < np.exp(-2.0 * np.abs(avals * bvals) * cvals)),
    )
    return EdgeZeroMarks(
        marks=np.asarray(marks, bool),
        boundary_blocked=np.asarray(blocked, bool),
        boundary_edges=bd[:, :2],
    )


def sample_gff_block(gr: GreenMatrix, rng: np.random.Generator, m: int) -> np.ndarray:
    """(m, n) zero-boundary fields drawn with one triangular solve."""
    if gr.mode == "neumann":
        raise ValueError("block sampler covers dirichlet/mixed modes")
    z = rng.standard_normal((gr.n, m))
    return scipy.linalg.solve_triangular(gr.chol.T, z, lower=False).T


def cable_zero_marks_block(gr: GreenMatrix, values: np.ndarray,
                           rng: np.random.Generator):
    """Block variant of cable_zero_marks for zero boundary data.

    Returns (marks (m, E) bool, blocked (m, k) bool, boundary_edges (k, 2)).
    """
    ker = gr.kernel
    a = values[:, ker.edge_u]
    b = values[:, ker.edge_v]
    u = rng.random(a.shape)
    same = (a * b) > 0.0
    marks = ~same | (u < np.exp(-2.0 * np.abs(a * b) * ker.edge_c[None, :]))
    bd = boundary_edge_table(gr.domain, ker)
    blocked = np.zeros((values.shape[0], len(bd)), dtype=bool)
    return np.asarray(marks, bool), blocked, bd[:, :2]


@dataclass
class TestFunction:
    """A vector over active vertices used for covariance pairings."""

    weights: np.ndarray
    label: str = ""

    @property
    def zero_sum(self) -> bool:
        return abs(float(np.sum(self.weights))) < 1e-9

    def apply(self, values: np.ndarray) -> np.ndarray:
        return values @ self.weights


def bump_difference(
    domain: DomainGraph, center_a, center_b, radius: float, label: str = ""
) -> TestFunction:
    """Unit-mass indicator bump at center_a minus one at center_b (zero-sum)."""
    act = domain.active
    pos = domain.positions[act].astype(float)
    w = np.zeros(len(act))
    for center, sgn in ((center_a, 1.0), (center_b, -1.0)):
        c = np.asarray(center, float)
        inside = np.sum((pos - c) ** 2, axis=1) <= radius * radius
        if not np.any(inside):
            raise ValueError(f"empty bump at {center}")
        w[inside] += sgn / np.count_nonzero(inside)
    return TestFunction(w, label)


def empirical_covariance(
    u: np.ndarray, v: np.ndarray, n_batches: int = 100
) -> tuple[float, float]:
    """Covariance of two per-replica scalar sequences with batch-mean stderr."""
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError("need two equal-length 1-d sample vectors")
    n = len(u)
    if n < 2 * n_batches:
        n_batches = max(2, n // 2)
    est = float(np.mean(u * v) - np.mean(u) * np.mean(v))
    cut = (n // n_batches) * n_batches
    ub = u[:cut].reshape(n_batches, -1)
    vb = v[:cut].reshape(n_batches, -1)
    # batch estimates around the global means so the batch spread reflects
    # the estimator noise rather than within-batch mean shifts
    cb = np.mean((ub - u.mean()) * (vb - v.mean()), axis=1)
    stderr = float(np.std(cb, ddof=1) / np.sqrt(n_batches))
    return est, stderr
