"""Exponent algebra, height resampling, pairing targets, pipeline smoke runs."""
import json
import math
import os

import numpy as np
import pytest

from loopfield import harness
from loopfield.clusters import CellComplex
from loopfield.experiments import (
    HeightLabels,
    _eff,
    _free_pairing,
    _mass_point,
    _t1_ctx,
    assemble_neumann,
    assemble_values,
    exponents,
    oblique_exponent,
    resample_heights,
    run_experiment,
)
from loopfield.fields import FieldSample
from loopfield.graphs import GreenMatrix, induced_free_domain
from loopfield.harness import rng_stream


def test_exponent_table_exact_values():
    t = exponents(1.0)
    assert abs(t.kappa - 4.0) < 1e-12
    assert abs(t.rho - (-1.0)) < 1e-12
    assert abs(t.beta - 1.0 / 16.0) < 1e-12
    assert abs(t.reflected_exponent - 1.0 / 16.0) < 1e-12
    h = exponents(0.5)
    assert abs(h.kappa - 3.0) < 1e-12
    assert abs(h.rho - (math.sqrt(5.0 / 8.0) - 2.5)) < 1e-12


def test_exponent_identities_hold_over_random_intensities():
    rng = rng_stream(61, 0)
    cs = rng.random(10000) * 0.999999 + 1e-6
    worst_q = worst_c = 0.0
    for c in cs:
        t = exponents(float(c))
        assert 8.0 / 3.0 < t.kappa <= 4.0
        worst_q = max(worst_q, abs(3 * t.kappa**2 - (26 - 2 * c) * t.kappa + 48))
        worst_c = max(worst_c, abs(c - (6 - t.kappa) * (3 * t.kappa - 8)
                                   / (2 * t.kappa)))
    assert worst_q < 1e-10
    assert worst_c < 1e-12


def test_exponent_domain_errors():
    for bad in (0.0, -0.5, 1.2):
        with pytest.raises(ValueError):
            exponents(bad)


def test_oblique_exponent_half_is_reflected_exponent():
    for c in (0.25, 0.5, 1.0, 2.0):
        assert abs(oblique_exponent(c, 0.5) - c / 16.0) < 1e-15
    assert abs(oblique_exponent(1.0, 0.25) - 3.0 / 64.0) < 1e-15
    with pytest.raises(ValueError):
        oblique_exponent(-1.0, 0.5)
    with pytest.raises(ValueError):
        oblique_exponent(1.0, 1.0)


def _chain_cells():
    return CellComplex(
        cell_of=np.array([0, 1, 2]),
        eps=np.array([1, -1, 1]),
        root=0,
        parent=np.array([-1, 0, 1]),
        bfs_order=np.array([0, 1, 2]),
        adj_pairs=np.array([[0, 1], [1, 2]]),
        adj_counts=np.array([2, 2]),
        anchored=np.array([True, True, True]),
    )


def test_resample_heights_walks_the_tree():
    cells = _chain_cells()
    for stream in range(8):
        eta = resample_heights(cells, rng_stream(62, stream)).eta
        assert eta[0] == cells.eps[0]
        assert abs(eta[1] - eta[0]) == 2
        assert abs(eta[2] - eta[1]) == 2
        assert np.all((eta - cells.eps) % 4 == 0)


def test_assemble_values_identity_when_heights_match_labels():
    cells = _chain_cells()
    vals = np.array([0.3, -1.2, 0.8])
    out = assemble_values(vals, cells, cells.eps.copy())
    assert np.array_equal(out, vals)
    ctx = _t1_ctx(16)
    dom = ctx["domain"]
    gamma = FieldSample(dom, np.zeros(ctx["kernel"].n),
                        np.zeros(dom.n_vertices))
    with pytest.raises(ValueError, match="mismatch"):
        assemble_neumann(gamma, cells, HeightLabels(cells.eps))


def test_free_pairing_matches_neumann_pseudo_inverse():
    ctx = _t1_ctx(16)
    w = ctx["W"]
    free = induced_free_domain(ctx["domain"])
    g = GreenMatrix(free, mode="neumann")
    for i, j in ((0, 0), (0, 1), (2, 4)):
        direct = g.pairing(w[:, i], w[:, j])
        pinned = _free_pairing(ctx, w[:, i], w[:, j])
        assert abs(direct - pinned) < 1e-8
    with pytest.raises(ValueError, match="zero-sum"):
        _free_pairing(ctx, np.ones(w.shape[0]), w[:, 0])


def test_mass_point_geometry():
    m, eps_eff, h, nv = _mass_point(200, 1, 0.05)
    assert (h, eps_eff) == (1, 0.05)
    assert m > 0 and nv > 0
    m2, eps_eff2, h2, _ = _mass_point(400, 1, 0.05)
    assert (h2, eps_eff2) == (2, 0.05)
    for box in (200, 400):
        for eps in (0.05, 0.10):
            assert _eff(box, eps) == _mass_point(box, 1, eps)[1]
    with pytest.raises(ValueError, match="rounds to zero"):
        _mass_point(200, 1, 0.001)


def test_run_experiment_rejects_unknown_pipeline():
    with pytest.raises(ValueError, match="unknown experiment"):
        run_experiment("percolation")
    with pytest.raises(harness.ConfigError):
        run_experiment("mass_scaling", {"box_sizes": [100, 300]})


def _render_blob(report, outdir):
    blobs = {}
    for p in harness.render_report(report, str(outdir)):
        with open(p, "rb") as fh:
            blobs[os.path.basename(p)] = fh.read()
    return blobs


def test_run_experiment_deterministic_across_reruns_and_workers(tmp_path):
    cfg = {"grid": 5, "n_replicas": 2000, "block": 500, "seed": 11}
    runs = [
        run_experiment("lejan", cfg),
        run_experiment("lejan", cfg),
        run_experiment("lejan", {**cfg, "workers": 2}),
    ]
    blobs = [_render_blob(r, tmp_path / str(i)) for i, r in enumerate(runs)]
    ref = blobs[0]
    assert "report.json" in ref
    for other in blobs[1:]:
        assert other.keys() == ref.keys()
        for name in ref:
            if name == "report.json":
                a = json.loads(ref[name])
                b = json.loads(other[name])
                a["config"].pop("workers")
                b["config"].pop("workers")
                assert a == b
            else:
                assert other[name] == ref[name], name


def test_theorem1_pipeline_invariants_at_small_size():
    report = run_experiment("theorem1", {
        "sizes": [12], "n_replicas": 200, "block": 100, "seed": 17})
    names = {v.name: v for v in report.verdicts}
    assert names["lattice_shift_integer_12"].passed
    assert names["root_cell_identity_12"].passed
    assert "covariance" in report.tables and len(report.tables["covariance"]) == 5
    assert "field_sample" in report.figures


def test_shift_pipeline_smoke():
    report = run_experiment("shift", {
        "sizes": [12], "n_replicas": 200, "block": 100, "seed": 18,
        "offsets": [0.0, 0.5]})
    assert len(report.verdicts) == 2  # count + size comparisons for one pair
    assert all(v.kind == "KS" for v in report.verdicts)
    assert len(report.tables["level_stats"]) == 2


def test_arcs_pipeline_smoke():
    report = run_experiment("arcs_count", {
        "size": 16, "n_replicas": 40, "block": 20, "depth": 3, "seed": 19})
    assert len(report.verdicts) == 3
    per_layer = report.tables["per_layer"]
    assert [row["layer"] for row in per_layer] == [0, 1, 2]
    assert all(row[f"pair_{p}"] >= 0 for row in per_layer for p in range(3))
    pairs = report.tables["pairs"]
    assert all(row["tail_bound"] >= 0.0 for row in pairs)
    again = run_experiment("arcs_count", {
        "size": 16, "n_replicas": 40, "block": 20, "depth": 3, "seed": 19})
    assert [v.estimate for v in again.verdicts] == [v.estimate
                                                    for v in report.verdicts]


def test_folding_pipeline_smoke():
    report = run_experiment("folding", {
        "grid": 7, "n_replicas": 300, "block": 100, "seed": 20})
    names = [v.name for v in report.verdicts]
    assert names[0] == "loop_count_ks"
    assert "occupation_ks_all_vertices" in names
    assert "occupation_gap" in report.figures
