"""Field samplers, harmonic extension, cable zeros, covariance estimators."""
import math

import numpy as np
import pytest
from scipy.integrate import quad

from loopfield.fields import (
    LAMBDA,
    FieldSample,
    boundary_edge_table,
    bump_difference,
    cable_zero_marks,
    cable_zero_marks_block,
    empirical_covariance,
    harmonic_extension,
    sample_gff,
    sample_gff_block,
)
from loopfield.graphs import build_domain, green, induced_free_domain
from loopfield.harness import rng_stream


def test_height_gap_constant():
    assert LAMBDA == math.sqrt(math.pi / 8.0)


def test_harmonic_extension_is_linear_on_path():
    n = 9
    dom = build_domain("path", n)
    g = green(dom)
    bvals = np.zeros(dom.n_vertices)
    bvals[0], bvals[n + 1] = 2.0, 5.0
    ext = harmonic_extension(g, bvals)
    expect = 2.0 + 3.0 * np.arange(1, n + 1) / (n + 1)
    assert np.allclose(ext, expect, atol=1e-10)


def test_sampler_noise_hook_recovers_boundary_data():
    dom = build_domain("path", 5)
    g = green(dom)
    quiet = sample_gff(g, rng_stream(0, 0), boundary=1.0, noise=np.zeros(g.n))
    assert np.allclose(quiet.values, 1.0, atol=1e-12)
    flat = sample_gff(g, rng_stream(0, 0), boundary=0.0, noise=np.zeros(g.n))
    assert np.allclose(flat.values, 0.0)
    # the noise hook makes draws reproducible independently of the generator
    z = rng_stream(3, 1).standard_normal(g.n)
    a = sample_gff(g, rng_stream(99, 0), noise=z)
    b = sample_gff(g, rng_stream(7, 5), noise=z)
    assert np.array_equal(a.values, b.values)


def test_sampler_covariance_matches_green():
    dom = build_domain("square", 7)
    g = green(dom)
    x = sample_gff_block(g, rng_stream(12, 0), 20000)
    emp = x.T @ x / len(x)
    assert np.max(np.abs(emp - g.matrix)) < 0.08


def _no_zero_prob(a, b, c):
    return 1.0 - math.exp(-2.0 * a * b * c) if a > 0 and b > 0 else 0.0


def _midpoint_consistency(a, b, c):
    """Split one cable edge into two of double conductance and integrate."""
    mean = 0.5 * (a + b)
    sd = math.sqrt(1.0 / (4.0 * c))

    def integrand(m):
        dens = math.exp(-0.5 * ((m - mean) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
        return dens * _no_zero_prob(a, m, 2 * c) * _no_zero_prob(m, b, 2 * c)

    val, err = quad(integrand, 0.0, mean + 12 * sd, limit=200)
    assert err < 1e-10
    return val


@pytest.mark.parametrize("a,b,c", [(0.7, 1.1, 1.3), (0.5, 0.5, 0.7),
                                   (2.0, 0.3, 0.25)])
def test_cable_zero_law_subdivision_consistency(a, b, c):
    # the survival law must be consistent under edge subdivision: crossing
    # neither half-edge (conditioned on the midpoint) equals crossing neither
    # on the whole edge.  This pins the exponent constant against the
    # Gaussian midpoint variance 1/(4c).
    assert abs(_midpoint_consistency(a, b, c) - _no_zero_prob(a, b, c)) < 1e-9


def test_opposite_sign_edges_always_marked():
    dom = build_domain("path", 6)
    g = green(dom)
    vals = np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])
    field = FieldSample(dom, vals, np.zeros(dom.n_vertices))
    for stream in range(5):
        marks = cable_zero_marks(field, g, rng_stream(1, stream))
        assert np.all(marks.marks)


def test_same_sign_mark_frequency():
    dom = build_domain("path", 500)
    g = green(dom)
    v = 0.8
    x = np.full((200, g.n), v)
    marks, blocked, bd = cable_zero_marks_block(g, x, rng_stream(5, 0))
    p = math.exp(-2.0 * v * v)
    freq = marks.mean()
    se = math.sqrt(p * (1 - p) / marks.size)
    assert abs(freq - p) < 4 * se
    assert not blocked.any()
    assert bd.shape == (2, 2)


def test_zero_boundary_data_never_blocks():
    dom = build_domain("path", 4)
    g = green(dom)
    vals = np.array([5.0, -3.0, 2.0, 0.5])
    field = FieldSample(dom, vals, np.zeros(dom.n_vertices))
    for stream in range(5):
        marks = cable_zero_marks(field, g, rng_stream(2, stream))
        assert not marks.boundary_blocked.any()


def test_boundary_blocking_with_data():
    dom = build_domain("path", 4)
    g = green(dom)
    bvals = np.zeros(dom.n_vertices)
    bvals[0], bvals[-1] = -1.0, 1.0
    vals = np.array([1.0, 1.0, 1.0, 1.0])
    field = FieldSample(dom, vals, bvals)
    bd = boundary_edge_table(dom, g.kernel)
    left = bd[:, 1] == 0
    hits = 0.0
    n_draws = 400
    for stream in range(n_draws):
        marks = cable_zero_marks(field, g, rng_stream(3, stream))
        # opposite-sign boundary data always blocks
        assert marks.boundary_blocked[left].all()
        hits += float(np.sum(marks.boundary_blocked[~left]))
    p = math.exp(-2.0)  # same-sign block probability at |a||b|C = 1
    se = math.sqrt(p * (1 - p) / n_draws)
    assert abs(hits / n_draws - p) < 5 * se


def test_boundary_edge_table_contents_and_cache():
    dom = build_domain("path", 3)
    g = green(dom)
    bd = boundary_edge_table(dom, g.kernel)
    rows = {tuple(r) for r in bd.tolist()}
    assert rows == {(2, 4, 3), (0, 0, 0)}
    assert boundary_edge_table(dom, g.kernel) is bd


def test_bump_difference_zero_sum():
    dom = build_domain("square", 9)
    f = bump_difference(dom, (2.0, 4.0), (6.0, 4.0), 1.5, label="probe")
    assert f.zero_sum
    assert abs(f.apply(np.ones(len(dom.active)))) < 1e-12
    assert f.apply(np.zeros(len(dom.active))) == 0.0
    with pytest.raises(ValueError):
        bump_difference(dom, (100.0, 100.0), (2.0, 2.0), 0.5)


def test_empirical_covariance_matches_definition():
    rng = rng_stream(8, 0)
    u = rng.standard_normal(1000)
    v = 0.5 * u + rng.standard_normal(1000)
    est, se = empirical_covariance(u, v)
    assert abs(est - (np.mean(u * v) - u.mean() * v.mean())) < 1e-14
    assert se > 0
    with pytest.raises(ValueError):
        empirical_covariance(u, v[:-1])
    with pytest.raises(ValueError):
        empirical_covariance(u.reshape(2, -1), v.reshape(2, -1))


def test_free_field_gauges():
    free = induced_free_domain(build_domain("square", 5))
    g = green(free, mode="neumann")
    pinned = sample_gff(g, rng_stream(4, 0), gauge="marked")
    mpos = g.kernel.pos_of[free.marked]
    assert pinned.values[mpos] == 0.0
    centered = sample_gff(g, rng_stream(4, 1), gauge="mean-zero")
    assert abs(centered.values.mean()) < 1e-12
    with pytest.raises(ValueError):
        sample_gff(g, rng_stream(4, 2), gauge="median")


def test_block_sampler_refuses_free_boundary():
    free = induced_free_domain(build_domain("square", 5))
    g = green(free, mode="neumann")
    with pytest.raises(ValueError):
        sample_gff_block(g, rng_stream(0, 0), 4)


def test_value_at_reads_interior_and_boundary():
    dom = build_domain("path", 3)
    g = green(dom)
    bvals = np.zeros(dom.n_vertices)
    bvals[0] = 7.0
    field = FieldSample(dom, np.array([1.0, 2.0, 3.0]), bvals)
    assert field.value_at((0, 0)) == 7.0
    assert field.value_at((2, 0)) == 2.0
