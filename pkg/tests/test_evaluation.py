import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from atlasreg.evaluation import (
    NORMAL_APPROX_TOL, CaseMetrics, aggregate, box_stats, closest_point_on_triangle, dice,
    dice_atlas, msd, p2p_error, read_case_csv, relative_improvement, sample_surface,
    surface_distances, triangle_samples, wilcoxon_signed_rank, write_case_csv,
    write_summary_json,
)
from atlasreg.phantom import icosphere
from atlasreg.volcore import DimensionError, SurfaceMesh


def sphere(radius=3.0, center=(0.0, 0.0, 0.0), subdivisions=2):
    v, t = icosphere(subdivisions)
    return SurfaceMesh(v * radius + np.asarray(center), t)


def plate(z, n=4, size=4.0):
    """Flat square of side ``size`` at height ``z``, split into ``2 n^2`` triangles."""
    g = np.linspace(0, size, n + 1)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    verts = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)], axis=1)
    tris = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            tris += [[a, a + n + 1, a + 1], [a + 1, a + n + 1, a + n + 2]]
    return SurfaceMesh(verts, np.array(tris))


# ---------------------------------------------------------------------------
# dice


def test_dice_toy():
    a = np.zeros((4, 1, 1), bool)
    b = np.zeros((4, 1, 1), bool)
    a[:2] = True
    b[1:3] = True
    assert dice(a, b) == 0.5
    b[0] = True
    assert dice(a, b) == 0.8
    c = np.zeros((2, 2, 2), bool)
    c[0] = True
    d = c.copy()
    d[1, 0, 0] = True
    assert dice(c, d) == 8 / 9
    e = np.zeros((2, 2, 2), bool)
    e[0, :, 0] = True
    e[1, 0, 0] = True
    assert dice(c, e) == 2 * 2 / (4 + 3)


def test_dice_edge_cases():
    z = np.zeros((3, 3, 3), bool)
    assert math.isnan(dice(z, z))
    o = np.ones((3, 3, 3), bool)
    assert dice(o, z) == 0.0
    with pytest.raises(DimensionError):
        dice(z, np.zeros((3, 3, 2), bool))


masks = hnp.arrays(bool, (4, 4, 4))


@settings(max_examples=60, deadline=None)
@given(a=masks, b=masks)
def test_dice_identity_symmetry_range(a, b):
    if a.any():
        assert dice(a, a) == 1.0
    if a.any() or b.any():
        d = dice(a, b)
        assert d == dice(b, a)
        assert 0.0 <= d <= 1.0


def test_dice_atlas_identity():
    m = np.random.default_rng(0).random((5, 5, 5)) > 0.5
    assert dice_atlas(m, np.zeros((5, 5, 5, 3)), m) == 1.0


# ---------------------------------------------------------------------------
# point-to-point


def test_p2p_values():
    m1 = SurfaceMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]))
    moved = m1.vertices + np.array([[1.0, 0, 0], [0, 0, 0], [0, 2.0, 0]])
    m2 = SurfaceMesh(moved, m1.triangles)
    r = p2p_error(m1, m2, spacing=(0.1, 0.1, 0.1))
    assert r.mean == pytest.approx(0.1, abs=1e-15)
    assert r.max == pytest.approx(0.2, abs=1e-15)
    assert np.allclose(r.per_vertex, [0.1, 0.0, 0.2], atol=1e-15)


def test_p2p_anisotropic_spacing():
    m1 = sphere()
    m2 = SurfaceMesh(m1.vertices + [0.0, 0.0, 1.0], m1.triangles)
    r = p2p_error(m1, m2, spacing=(0.2, 0.2, 0.3))
    assert r.mean == pytest.approx(0.3, abs=1e-15) and r.max == pytest.approx(0.3, abs=1e-15)


def test_p2p_identity_symmetry_translation():
    rng = np.random.default_rng(1)
    m1 = sphere()
    m2 = SurfaceMesh(m1.vertices + rng.normal(0, 0.3, m1.vertices.shape), m1.triangles)
    assert p2p_error(m1, m1).mean == 0.0
    assert p2p_error(m1, m2).mean == p2p_error(m2, m1).mean
    shift = np.array([2.0, -1.0, 0.5])
    t1 = SurfaceMesh(m1.vertices + shift, m1.triangles)
    t2 = SurfaceMesh(m2.vertices + shift, m2.triangles)
    assert p2p_error(t1, t2).mean == pytest.approx(p2p_error(m1, m2).mean, abs=1e-12)


def test_p2p_rejects_mismatch():
    with pytest.raises(ValueError):
        p2p_error(sphere(subdivisions=1), sphere(subdivisions=2))


# ---------------------------------------------------------------------------
# surface distance


def test_closest_point_regions():
    a, b, c = np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    pts = np.array([[0.2, 0.2, 1.0],    # face
                    [-1.0, -1.0, 0.0],  # vertex a
                    [2.0, -0.5, 0.0],   # vertex b
                    [0.5, -1.0, 0.0],   # edge ab
                    [1.0, 1.0, 0.0]])   # edge bc
    expect = np.array([[0.2, 0.2, 0], [0, 0, 0], [1, 0, 0], [0.5, 0, 0], [0.5, 0.5, 0]])
    got = closest_point_on_triangle(pts, a, b, c)
    assert np.allclose(got, expect, atol=1e-15)


def test_closest_point_against_dense_sampling():
    rng = np.random.default_rng(2)
    tri = rng.standard_normal((3, 3))
    pts = rng.standard_normal((30, 3)) * 2
    uv = rng.random((200_000, 2))
    flip = uv.sum(axis=1) > 1
    uv[flip] = 1 - uv[flip]
    dense = tri[0] + uv[:, :1] * (tri[1] - tri[0]) + uv[:, 1:] * (tri[2] - tri[0])
    exact = np.linalg.norm(pts - closest_point_on_triangle(pts, *tri), axis=1)
    for p, d in zip(pts, exact):
        brute = np.min(np.linalg.norm(dense - p, axis=1))
        assert d <= brute + 1e-12
        assert brute - d < 2e-2


def test_triangle_samples_inside():
    s = triangle_samples(64)
    assert s.shape == (64, 2)
    assert np.all(s >= 0) and np.all(s.sum(axis=1) <= 1 + 1e-12)


def test_sample_surface_area_weights():
    m = plate(0.0)
    pts, w = sample_surface(m.vertices, m.triangles, 8)
    assert np.isclose(w.sum(), 16.0)
    assert np.all(pts[:, 2] == 0.0)


def test_surface_distances_match_brute_force():
    rng = np.random.default_rng(3)
    m = sphere(subdivisions=1)
    pts = rng.normal(0, 4, (100, 3))
    fast = surface_distances(pts, m.vertices, m.triangles)
    tri = m.vertices[m.triangles]
    brute = np.array([np.min(np.linalg.norm(
        p - closest_point_on_triangle(np.repeat(p[None], len(tri), 0), tri[:, 0], tri[:, 1],
                                      tri[:, 2]), axis=1)) for p in pts])
    assert np.max(np.abs(fast - brute)) < 1e-12


def test_msd_identical_is_zero():
    m = sphere()
    assert msd(m, m) < 1e-12


def test_msd_parallel_plates():
    d = msd(plate(0.0), plate(0.7), spacing=(0.2, 0.2, 0.2))
    assert d == pytest.approx(0.14, rel=0.02)


def test_msd_symmetric():
    a = sphere(3.0)
    b = sphere(3.5, (0.4, -0.2, 0.1), subdivisions=1)
    assert msd(a, b) == msd(b, a)


def test_msd_concentric_spheres_and_convergence():
    a, b = sphere(3.0, subdivisions=3), sphere(3.5, subdivisions=3)
    d16 = msd(a, b, samples_per_triangle=16)
    d32 = msd(a, b, samples_per_triangle=32)
    assert abs(d16 - d32) / d32 < 0.01
    # polygonal spheres sit slightly inside the true radius
    assert d16 == pytest.approx(0.5, rel=0.05)


def test_msd_translation_invariant():
    a, b = sphere(3.0), sphere(3.2, (0.3, 0.0, 0.0))
    shift = np.array([5.0, -2.0, 1.0])
    ta = SurfaceMesh(a.vertices + shift, a.triangles)
    tb = SurfaceMesh(b.vertices + shift, b.triangles)
    assert msd(ta, tb) == pytest.approx(msd(a, b), abs=1e-12)


# ---------------------------------------------------------------------------
# Wilcoxon


def test_wilcoxon_all_positive_five():
    r = wilcoxon_signed_rank([1, 2, 3, 4, 5])
    assert r.statistic == 0.0 and r.pvalue == 0.0625 and r.method == "exact"
    assert r.w_plus == 15.0 and r.w_minus == 0.0


def test_wilcoxon_antisymmetric():
    d = np.array([0.3, -1.2, 0.8, 2.0, -0.1, 0.7, 1.1])
    a, b = wilcoxon_signed_rank(d), wilcoxon_signed_rank(-d)
    assert a.statistic == b.statistic and a.pvalue == b.pvalue
    assert a.w_plus == b.w_minus


def test_wilcoxon_ties_and_zeros():
    r = wilcoxon_signed_rank([0, 0, 1, 1, -2, 3, 3, 3])
    assert r.n == 6
    # ranks of |d|: 1.5, 1.5, 3, 5, 5, 5
    assert r.w_minus == 3.0 and r.w_plus == 18.0


def test_wilcoxon_degenerate_and_small():
    r = wilcoxon_signed_rank([0.0] * 7)
    assert r.degenerate and r.pvalue == 1.0
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2, 3, 4])
    with pytest.raises(ValueError):
        wilcoxon_signed_rank(np.arange(1, 30), method="exact")


@pytest.mark.parametrize("n", [10, 11, 12])
def test_wilcoxon_normal_close_to_exact(n):
    rng = np.random.default_rng(n)
    for _ in range(50):
        d = rng.normal(0.3, 1.0, n)
        e = wilcoxon_signed_rank(d, "exact").pvalue
        a = wilcoxon_signed_rank(d, "normal").pvalue
        assert abs(e - a) < NORMAL_APPROX_TOL


def test_wilcoxon_large_n_matches_permutation():
    rng = np.random.default_rng(4)
    d = rng.normal(0.2, 1.0, 64)
    r = wilcoxon_signed_rank(d)
    assert r.method == "normal"
    ranks = np.argsort(np.argsort(np.abs(d))) + 1.0
    signs = rng.integers(0, 2, (200_000, 64))
    wp = signs @ ranks
    t_null = np.minimum(wp, ranks.sum() - wp)
    p_mc = np.mean(t_null <= r.statistic)
    assert 0.01 < p_mc < 0.5
    assert abs(r.pvalue - p_mc) / p_mc < 0.10


# ---------------------------------------------------------------------------
# summaries


def test_box_stats_outlier():
    s = box_stats([1, 2, 3, 4, 100])
    assert s["median"] == 3.0 and s["q1"] == 2.0 and s["q3"] == 4.0
    assert s["outliers"] == [100.0]
    assert s["whisker_low"] == 1.0 and s["whisker_high"] == 4.0
    assert s["mean"] == 22.0


def test_relative_vs_absolute_gain():
    # a Dice rise from 0.7814 to 0.8665 is 8.51 points absolute, 10.9% relative
    assert 0.8665 - 0.7814 == pytest.approx(0.0851, abs=1e-12)
    assert relative_improvement(0.8665, 0.7814) == pytest.approx(0.1089, abs=5e-5)


def _rows():
    rng = np.random.default_rng(5)
    rows = []
    for i in range(8):
        base = rng.uniform(0.6, 0.8)
        rows.append(CaseMetrics(f"c{i}", "a", base + 0.1, base + 0.1, 0.2, 0.4, 0.1))
        rows.append(CaseMetrics(f"c{i}", "b", base, base, 0.3 + 0.01 * i, 0.5, 0.2))
    return rows


def test_aggregate_and_io(tmp_path):
    rows = _rows()
    summary = aggregate(rows)
    assert set(summary["methods"]) == {"a", "b"}
    comp = summary["comparisons"][0]
    assert comp["method_a"] == "a" and comp["n_cases"] == 8
    dm = comp["metrics"]["dice_patient"]
    assert dm["mean_difference"] == pytest.approx(0.1)
    assert dm["wilcoxon"]["pvalue"] == pytest.approx(2 / 256)
    write_case_csv(rows, tmp_path / "cases.csv")
    back = read_case_csv(tmp_path / "cases.csv")
    assert sorted((r.method, r.case_id) for r in back) == sorted((r.method, r.case_id)
                                                                 for r in rows)
    assert {(r.method, r.case_id): r for r in back} == {(r.method, r.case_id): r for r in rows}
    write_summary_json(summary, tmp_path / "s.json")
    assert json.loads((tmp_path / "s.json").read_text())["methods"]["a"]["n_cases"] == 8
