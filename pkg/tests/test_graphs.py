"""Domains, kernels, Green matrices, folding, and avoided-set loop masses."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loopfield.graphs import (
    DIRICHLET,
    INTERIOR,
    NEUMANN,
    DomainGraph,
    GreenMatrix,
    avoid_logdet,
    build_domain,
    fold,
    green,
    induced_free_domain,
    transition_kernel,
)


def _dense_green(domain):
    """Independent inverse of the active Laplacian via numpy."""
    k = transition_kernel(domain)
    return np.linalg.inv(k.laplacian.toarray())


def test_path_green_matches_hand_inverse():
    # path with 3 interior vertices: L = tridiag(-1, 2, -1), det 4
    dom = build_domain("path", 3)
    g = green(dom)
    hand = 0.25 * np.array([[3.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 3.0]])
    assert np.allclose(g.matrix, hand, atol=1e-12)
    assert abs(g.entry(0, 2) - 0.25) < 1e-12
    assert abs(g.pairing(np.array([1.0, 0, 0]), np.array([0, 0, 1.0])) - 0.25) < 1e-12


def test_square_domain_layout():
    dom = build_domain("square", 5)
    assert dom.n_vertices == 25
    assert np.count_nonzero(dom.tags == DIRICHLET) == 16
    assert len(dom.active) == 9
    assert dom.positions[dom.marked].tolist() == [2, 2]
    # edges are u < v and lexicographically sorted
    assert np.all(dom.edges[:, 0] < dom.edges[:, 1])
    order = np.lexsort((dom.edges[:, 1], dom.edges[:, 0]))
    assert np.array_equal(order, np.arange(len(dom.edges)))
    # odd squares carry the mirror across the middle row
    refl = dom.reflect
    assert refl is not None
    assert np.array_equal(refl[refl], np.arange(25))


def test_green_matches_dense_inverse_on_square():
    dom = build_domain("square", 7)
    g = green(dom)
    assert g.mode == "dirichlet"
    assert np.allclose(g.matrix, _dense_green(dom), atol=1e-10)


def test_half_disc_boundary_tags():
    dom = build_domain("half-disc", 16)
    r = 8
    y0 = dom.positions[:, 1] == 0
    ends = y0 & (np.abs(dom.positions[:, 0]) == r)
    assert np.all(dom.tags[ends] == DIRICHLET)
    assert np.all(dom.tags[y0 & ~ends] == NEUMANN)
    assert np.any(dom.tags == INTERIOR)
    assert dom.positions[dom.marked].tolist() == [0, 1]

    pinned = build_domain("half-disc", 16, diameter_boundary="dirichlet")
    assert not np.any(pinned.tags == NEUMANN)
    assert np.all(pinned.tags[pinned.positions[:, 1] == 0] == DIRICHLET)


def test_mass_box_tags_and_split():
    dom = build_domain("mass-box", 8)
    w, h, split = 8, 4, 4
    x, y = dom.positions[:, 0], dom.positions[:, 1]
    assert x.max() == w and y.max() == h
    bottom = y == 0
    assert np.all(dom.tags[bottom & (x > 0) & (x < split)] == NEUMANN)
    assert np.all(dom.tags[bottom & (x >= split)] == DIRICHLET)
    assert np.all(dom.tags[(x == 0) | (x == w) | (y == h)] == DIRICHLET)
    assert dom.positions[dom.marked].tolist() == [split, 1]
    with pytest.raises(ValueError):
        build_domain("mass-box", 10)


def test_unknown_domain_kind_raises():
    with pytest.raises(ValueError):
        build_domain("triangle", 8)


def test_induced_free_domain_drops_killing():
    dom = build_domain("square", 5)
    free = induced_free_domain(dom)
    assert free.n_vertices == 9
    assert np.all(free.tags == INTERIOR)
    assert np.array_equal(free.positions[free.marked], dom.positions[dom.marked])
    # corner interior vertices lose their two dirichlet edges
    deg = free.degrees()
    assert deg.min() == 2.0 and deg.max() == 4.0
    assert np.all(free.edges[:, 0] < free.edges[:, 1])


def test_kernel_degree_includes_killing_edges():
    dom = build_domain("path", 3)
    k = transition_kernel(dom)
    assert np.array_equal(k.deg, [2.0, 2.0, 2.0])
    rows = np.asarray(k.P.sum(axis=1)).ravel()
    assert np.allclose(rows, [0.5, 1.0, 0.5])
    assert len(k.edge_u) == 2  # active-active edges only


def test_kernel_neighbor_tables_match_sparse():
    dom = build_domain("square", 6)
    k = transition_kernel(dom)
    dense = k.P.toarray()
    rebuilt = np.zeros_like(dense)
    for x in range(k.n):
        for slot in range(k.nbr_count[x]):
            rebuilt[x, k.nbr[x, slot]] += k.nbr_p[x, slot]
    assert np.allclose(rebuilt, dense, atol=1e-15)


def test_edge_id_dense_roundtrip():
    dom = build_domain("square", 5)
    k = transition_kernel(dom)
    tab = k.edge_id_dense()
    for e, (u, v) in enumerate(zip(k.edge_u, k.edge_v)):
        assert tab[u, v] == e and tab[v, u] == e
    assert tab[0, 0] == -1
    assert np.count_nonzero(tab >= 0) == 2 * len(k.edge_u)


def test_symmetrized_eig_refuses_large_problems():
    dom = build_domain("square", 66)  # 64*64 = 4096 active
    k = transition_kernel(dom)
    with pytest.raises(ValueError):
        k.symmetrized_eig()


def test_kernel_rejects_isolated_active_vertex():
    dom = DomainGraph(
        positions=np.array([[0, 0], [1, 0]]),
        edges=np.zeros((0, 2), dtype=np.int64),
        conductance=np.zeros(0),
        tags=np.array([DIRICHLET, INTERIOR], dtype=np.int8),
        marked=1,
    )
    with pytest.raises(ValueError):
        transition_kernel(dom)


def test_green_mode_validation():
    square = build_domain("square", 5)
    free = induced_free_domain(square)
    with pytest.raises(ValueError):
        green(free)  # auto resolves to dirichlet, which needs killing
    with pytest.raises(ValueError):
        green(square, mode="neumann")
    with pytest.raises(ValueError):
        green(square, mode="bogus")
    g = green(free, mode="neumann")
    with pytest.raises(ValueError):
        g.chol


def test_neumann_pseudo_inverse_identities():
    free = induced_free_domain(build_domain("square", 5))
    g = green(free, mode="neumann")
    L = transition_kernel(free).laplacian.toarray()
    assert np.allclose(L @ g.matrix @ L, L, atol=1e-9)
    rhs = np.zeros(g.n)
    rhs[0], rhs[-1] = 1.0, -1.0
    x = g.solve(rhs)
    assert np.allclose(L @ x, rhs, atol=1e-10)
    assert abs(x.sum()) < 1e-9  # minimum-norm solution is mean-free


def _folded_square(n):
    dom = build_domain("square", n)
    folded, fmap = fold(dom)
    return dom, folded, fmap


def test_fold_conventions_on_odd_square():
    dom, folded, fmap = _folded_square(5)
    assert np.all(folded.positions[:, 1] <= 2)
    axis = folded.positions[:, 1] == 2
    assert np.array_equal(fmap.axis_mask, axis)
    # interior axis vertices become reflecting; the frame stays absorbing
    inside = axis & (folded.positions[:, 0] > 0) & (folded.positions[:, 0] < 4)
    assert np.all(folded.tags[inside] == NEUMANN)
    assert np.all(folded.tags[axis & ~inside] == DIRICHLET)
    fu, fv = folded.edges[:, 0], folded.edges[:, 1]
    both_axis = axis[fu] & axis[fv]
    assert np.all(folded.conductance[both_axis] == 0.5)
    assert np.all(folded.conductance[~both_axis] == 1.0)
    assert folded.positions[folded.marked].tolist() == [2, 2]


def test_fold_reflection_green_identity():
    dom, folded, fmap = _folded_square(7)
    g_full = green(dom)
    g_fold = green(folded)
    assert g_fold.mode == "mixed"
    kf = g_fold.kernel
    ku = g_full.kernel
    rep = ku.pos_of[fmap.rep[kf.active]]
    mir = ku.pos_of[fmap.mirror[kf.active]]
    target = g_full.matrix[np.ix_(rep, rep)] + g_full.matrix[np.ix_(rep, mir)]
    assert np.max(np.abs(g_fold.matrix - target)) < 1e-10


def test_fold_requires_reflection_data():
    dom = build_domain("square", 6)
    assert dom.reflect is None
    with pytest.raises(ValueError):
        fold(dom)


def _replace(dom, **kw):
    fields = dict(
        positions=dom.positions, edges=dom.edges, conductance=dom.conductance,
        tags=dom.tags, marked=dom.marked, kind=dom.kind, reflect=dom.reflect,
    )
    fields.update(kw)
    return DomainGraph(**fields)


def test_fold_rejects_broken_symmetry():
    dom = build_domain("square", 5)

    bad_refl = dom.reflect.copy()
    bad_refl[0] = 3
    with pytest.raises(ValueError, match="involution"):
        fold(_replace(dom, reflect=bad_refl))

    bad_tags = dom.tags.copy()
    low = np.flatnonzero((dom.positions[:, 1] == 1) & (bad_tags == INTERIOR))
    bad_tags[low[0]] = NEUMANN
    with pytest.raises(ValueError, match="tags"):
        fold(_replace(dom, tags=bad_tags))

    bad_cond = dom.conductance.copy()
    off_axis = np.flatnonzero(
        (dom.positions[dom.edges[:, 0], 1] < 2)
        & (dom.positions[dom.edges[:, 1], 1] < 2)
    )
    bad_cond[off_axis[0]] = 2.0
    with pytest.raises(ValueError, match="conductances"):
        fold(_replace(dom, conductance=bad_cond))


def test_fold_rejects_axis_crossing_edge():
    dom = DomainGraph(
        positions=np.array([[0, 0], [0, 1]]),
        edges=np.array([[0, 1]]),
        conductance=np.ones(1),
        tags=np.zeros(2, dtype=np.int8),
        marked=0,
        reflect=np.array([1, 0]),
    )
    with pytest.raises(ValueError, match="crossing"):
        fold(dom)


def test_avoid_logdet_empty_set_is_total_mass():
    dom = build_domain("square", 7)
    k = transition_kernel(dom)
    sign, logdet = np.linalg.slogdet(np.eye(k.n) - k.P.toarray())
    assert sign > 0
    assert abs(avoid_logdet(k, []) - (-logdet)) < 1e-9
    assert avoid_logdet(k, np.arange(k.n)) == 0.0


_MONO_KERNEL = transition_kernel(build_domain("square", 6))


@settings(max_examples=30, deadline=None)
@given(st.data())
def test_avoid_logdet_monotone_nonincreasing(data):
    n = _MONO_KERNEL.n
    small = data.draw(st.sets(st.integers(0, n - 1), max_size=n))
    extra = data.draw(st.sets(st.integers(0, n - 1), max_size=n))
    s = sorted(small)
    t = sorted(small | extra)
    f_s = avoid_logdet(_MONO_KERNEL, s)
    f_t = avoid_logdet(_MONO_KERNEL, t)
    assert f_t <= f_s + 1e-10
    assert f_t >= -1e-12


def test_avoid_logdet_sparse_path_matches_dense():
    dom = build_domain("square", 30)  # 784 active: exercises the splu branch
    k = transition_kernel(dom)
    avoid = np.array([0, 5, 400])
    got = avoid_logdet(k, avoid)
    keep = np.setdiff1d(np.arange(k.n), avoid)
    L = k.laplacian.toarray()[np.ix_(keep, keep)]
    _, logdet = np.linalg.slogdet(L)
    expect = float(np.sum(np.log(k.deg[keep]))) - logdet
    assert abs(got - expect) < 1e-8
