import json

import numpy as np
import pytest

from fracgas.mesh import (FractureSpec, MeshError, build_coarse_cover,
                          build_structured_mesh, embed_fractures, export_vtk,
                          local_dof_set, partition_of_unity,
                          single_domain_cover)


def mesh_edge_set(mesh):
    edges = set()
    for a, b, c in mesh.triangles:
        for u, v in ((a, b), (b, c), (c, a)):
            edges.add((min(u, v), max(u, v)))
    return edges


def chebyshev_to_segment(p, seg):
    x0, y0, x1, y1 = seg
    # sample the segment densely; Chebyshev distance from p to nearest sample
    t = np.linspace(0.0, 1.0, 2001)
    qx, qy = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
    return np.min(np.maximum(np.abs(qx - p[0]), np.abs(qy - p[1])))


# ---------------------------------------------------------------------------
# structured mesh


@pytest.mark.parametrize("n,nv,nt", [(2, 9, 8), (4, 25, 32), (7, 64, 98)])
def test_structured_mesh_counts(n, nv, nt):
    mesh = build_structured_mesh(n)
    assert len(mesh.vertices) == nv
    assert len(mesh.triangles) == nt


@pytest.mark.parametrize("n", [2, 5, 16])
def test_triangle_areas_cover_unit_square(n):
    mesh = build_structured_mesh(n)
    areas = mesh.triangle_areas()
    assert np.all(areas > 0)
    assert abs(areas.sum() - 1.0) < 1e-14


def test_structured_mesh_requires_two_cells():
    with pytest.raises(MeshError):
        build_structured_mesh(1)


# ---------------------------------------------------------------------------
# fracture embedding


def test_diagonal_segment_snaps_to_cell_diagonals():
    mesh = embed_fractures(build_structured_mesh(4),
                           FractureSpec(segments=[(0, 0, 1, 1)]))
    assert len(mesh.fracture_edges) == 4
    assert mesh.n_fracture_dofs == 5
    d = mesh.vertices[mesh.fracture_edges[:, 1]] - mesh.vertices[mesh.fracture_edges[:, 0]]
    assert np.allclose(np.abs(d), 0.25)  # every edge is a cell diagonal


def test_horizontal_segment_snaps_to_grid_line():
    mesh = embed_fractures(build_structured_mesh(4),
                           FractureSpec(segments=[(0, 0.5, 1, 0.5)]))
    assert len(mesh.fracture_edges) == 4
    ys = mesh.vertices[mesh.frac_vertices][:, 1]
    assert np.allclose(ys, 0.5)


def test_fracture_edges_conform_to_triangulation():
    spec = FractureSpec(segments=[(0.1, 0.2, 0.9, 0.7), (0.3, 0.8, 0.8, 0.15)])
    mesh = embed_fractures(build_structured_mesh(12), spec)
    edges = mesh_edge_set(mesh)
    for a, b in mesh.fracture_edges:
        assert (a, b) in edges


def test_snapped_paths_stay_near_segments():
    rng = np.random.default_rng(1234)
    n = 50
    mesh0 = build_structured_mesh(n)
    for _ in range(25):
        seg = tuple(rng.uniform(0.05, 0.95, 4))
        if np.hypot(seg[2] - seg[0], seg[3] - seg[1]) < 0.2:
            continue
        mesh = embed_fractures(mesh0, FractureSpec(segments=[seg]))
        pts = mesh.vertices[mesh.frac_vertices]
        dev = max(chebyshev_to_segment(p, seg) for p in pts)
        assert dev <= 1.0 / n + 1e-12
        # total path length within sqrt(2) of the snapped chord
        length = mesh.fracture_lengths().sum()
        i0, j0 = round(seg[0] * n), round(seg[1] * n)
        i1, j1 = round(seg[2] * n), round(seg[3] * n)
        chord = np.hypot(i1 - i0, j1 - j0) / n
        assert length <= np.sqrt(2.0) * chord + 1e-12


def test_zero_length_segment_names_index():
    with pytest.raises(MeshError, match="segment 1"):
        embed_fractures(build_structured_mesh(4),
                        FractureSpec(segments=[(0, 0, 1, 1), (0.5, 0.5, 0.51, 0.51)]))


def test_overlapping_segments_deduplicate():
    spec = FractureSpec(segments=[(0, 0.5, 1, 0.5), (0, 0.5, 0.5, 0.5)])
    mesh = embed_fractures(build_structured_mesh(4), spec)
    assert len(mesh.fracture_edges) == 4


def test_intersecting_fractures_share_the_crossing_dof():
    spec = FractureSpec(segments=[(0, 0.5, 1, 0.5), (0.5, 0, 0.5, 1)])
    mesh = embed_fractures(build_structured_mesh(4), spec)
    assert mesh.n_fracture_dofs == 9  # 5 + 5 minus the shared crossing vertex


def test_embedding_is_deterministic():
    spec = FractureSpec(generator={"count": 12, "length_range": [0.1, 0.3],
                                   "orientations": "uniform", "seed": 99})
    m1 = embed_fractures(build_structured_mesh(20), spec)
    m2 = embed_fractures(build_structured_mesh(20), spec)
    assert m1.fracture_edges.tobytes() == m2.fracture_edges.tobytes()
    assert m1.vertices.tobytes() == m2.vertices.tobytes()


def test_generator_respects_unit_square_and_orientations():
    spec = FractureSpec(generator={"count": 40, "length_range": [0.2, 0.5],
                                   "orientations": [0.0, 90.0], "seed": 5})
    segs = spec.resolve()
    assert segs.shape == (40, 4)
    assert segs.min() >= 0.0 and segs.max() <= 1.0
    horizontal = np.isclose(segs[:, 1], segs[:, 3])
    vertical = np.isclose(segs[:, 0], segs[:, 2])
    assert np.all(horizontal | vertical)


def test_fracture_spec_json_round_trip(tmp_path):
    spec = FractureSpec(segments=[(0.1, 0.2, 0.8, 0.9)],
                        generator={"count": 3, "length_range": [0.1, 0.2], "seed": 1})
    path = tmp_path / "frac.json"
    spec.to_json(path)
    loaded = FractureSpec.from_json(path)
    assert np.allclose(loaded.resolve(), spec.resolve())


# ---------------------------------------------------------------------------
# coarse cover


def test_coarse_cover_counts_ten_by_ten():
    mesh = build_structured_mesh(20)
    cover = build_coarse_cover(mesh, 10)
    assert cover.n_nodes == 121
    assert len(cover.cell_triangles) == 100


def test_coarse_cover_counts_twenty_by_twenty():
    mesh = build_structured_mesh(40)
    cover = build_coarse_cover(mesh, 20)
    assert cover.n_nodes == 441
    assert len(cover.cell_triangles) == 400


def test_cover_requires_divisibility():
    with pytest.raises(MeshError):
        build_coarse_cover(build_structured_mesh(10), 3)


def test_patch_sizes_by_node_position():
    cover = build_coarse_cover(build_structured_mesh(8), 4)
    sizes = np.array([len(c) for c in cover.node_cells]).reshape(5, 5)
    assert sizes[0, 0] == 1 and sizes[0, 2] == 2 and sizes[2, 2] == 4


def test_partition_of_unity():
    spec = FractureSpec(segments=[(0.1, 0.3, 0.9, 0.6)])
    mesh = embed_fractures(build_structured_mesh(12), spec)
    cover = build_coarse_cover(mesh, 4)
    total = partition_of_unity(mesh, cover)
    assert np.allclose(total, 1.0, atol=1e-14)
    for vals in cover.chi:
        assert np.all(vals >= 0.0) and np.all(vals <= 1.0)


def test_hat_is_one_at_its_node():
    mesh = build_structured_mesh(8)
    cover = build_coarse_cover(mesh, 4)
    for i in range(cover.n_nodes):
        dofs, vals = cover.local_dofs[i], cover.chi[i]
        at_node = np.all(mesh.vertices[dofs] == cover.nodes[i], axis=1)
        assert np.allclose(vals[at_node], 1.0)


def test_interior_node_matrix_dof_count():
    mesh = build_structured_mesh(4)
    cover = build_coarse_cover(mesh, 2)
    interior = 1 * 3 + 1  # node (1,1) on the 3x3 coarse node grid
    assert len(cover.local_matrix_dofs[interior]) == 25


def test_local_sets_cover_all_dofs():
    spec = FractureSpec(segments=[(0.05, 0.5, 0.95, 0.5), (0.4, 0.1, 0.6, 0.9)])
    mesh = embed_fractures(build_structured_mesh(12), spec)
    cover = build_coarse_cover(mesh, 3)
    seen = np.zeros(mesh.n_dofs, dtype=bool)
    for i in range(cover.n_nodes):
        seen[local_dof_set(cover, i)] = True
    assert seen.all()


def test_nc_one_corner_node_owns_everything():
    spec = FractureSpec(segments=[(0.1, 0.5, 0.9, 0.5)])
    mesh = embed_fractures(build_structured_mesh(4), spec)
    cover = build_coarse_cover(mesh, 1)
    assert len(local_dof_set(cover, 0)) == mesh.n_dofs


def test_local_dof_set_ordering_and_bounds():
    spec = FractureSpec(segments=[(0.0, 0.5, 1.0, 0.5)])
    mesh = embed_fractures(build_structured_mesh(8), spec)
    cover = build_coarse_cover(mesh, 2)
    dofs = local_dof_set(cover, 4)
    nm = mesh.n_matrix_dofs
    matrix_part = dofs[dofs < nm]
    frac_part = dofs[dofs >= nm]
    assert np.all(np.diff(matrix_part) > 0)
    assert np.all(np.diff(frac_part) > 0)
    with pytest.raises(MeshError):
        local_dof_set(cover, cover.n_nodes)


def test_single_domain_cover_is_trivial_partition():
    spec = FractureSpec(segments=[(0.0, 0.5, 1.0, 0.5)])
    mesh = embed_fractures(build_structured_mesh(6), spec)
    cover = single_domain_cover(mesh)
    assert cover.n_nodes == 1
    assert len(cover.local_dofs[0]) == mesh.n_dofs
    assert np.allclose(partition_of_unity(mesh, cover), 1.0)


# ---------------------------------------------------------------------------
# VTK


def test_vtk_export_structure(tmp_path):
    spec = FractureSpec(segments=[(0.0, 0.5, 1.0, 0.5)])
    mesh = embed_fractures(build_structured_mesh(4), spec)
    c = np.linspace(0.0, 1.0, mesh.n_dofs)
    path = tmp_path / "out.vtk"
    export_vtk(path, mesh, {"c_m": c[:mesh.n_matrix_dofs], "c_f": c})
    text = path.read_text().splitlines()
    assert text[0].startswith("# vtk DataFile")
    assert f"POINTS {len(mesh.vertices)} double" in text
    assert f"CELL_TYPES {len(mesh.triangles) + len(mesh.fracture_edges)}" in text
    assert sum(1 for ln in text if ln.startswith("SCALARS")) == 2
