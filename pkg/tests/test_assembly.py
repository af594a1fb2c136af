import numpy as np
import pytest

from fracgas import linalg
from fracgas.assembly import (Assembler, AssemblyError, Wells, build_counts,
                              build_linear_operator, build_rhs, dump_system,
                              evaluate_operators, reset_build_counts,
                              starred_operators)
from fracgas.mesh import FineMesh, FractureSpec, build_structured_mesh, embed_fractures
from fracgas.physics import CoefficientField, PhysicalConstants

PHYS = PhysicalConstants().with_contrast(1e6)


def single_triangle_mesh():
    return FineMesh(n=2, vertices=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                    triangles=np.array([[0, 1, 2]]),
                    fracture_edges=np.zeros((0, 2), dtype=np.int64))


def single_edge_mesh():
    return FineMesh(n=2, vertices=np.array([[0.0, 0.0], [1.0, 0.0]]),
                    triangles=np.zeros((0, 3), dtype=np.int64),
                    fracture_edges=np.array([[0, 1]]))


def fractured_square(n=4, segments=((0.0, 0.5, 1.0, 0.5),)):
    return embed_fractures(build_structured_mesh(n),
                           FractureSpec(segments=list(segments)))


def problem(mesh, phys=PHYS, boxes=()):
    fields = CoefficientField.homogeneous(mesh)
    asm = Assembler(mesh)
    wells = Wells(asm, phys, list(boxes))
    return fields, asm, wells


def dense_mass_oracle(mesh, coef):
    """Independent double-loop P1 mass assembly."""
    n = mesh.n_matrix_dofs
    M = np.zeros((n, n))
    template = (np.ones((3, 3)) + np.eye(3)) / 12.0
    for t, tri in enumerate(mesh.triangles):
        p = mesh.vertices[tri]
        d1, d2 = p[1] - p[0], p[2] - p[0]
        area = 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])
        for i in range(3):
            for j in range(3):
                M[tri[i], tri[j]] += coef[t] * area * template[i, j]
    return M


def dense_stiffness_oracle(mesh, coef):
    n = mesh.n_matrix_dofs
    K = np.zeros((n, n))
    for t, tri in enumerate(mesh.triangles):
        p = mesh.vertices[tri]
        d1, d2 = p[1] - p[0], p[2] - p[0]
        area = 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])
        g = np.empty((3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            g[i] = [p[j, 1] - p[k, 1], p[k, 0] - p[j, 0]]
        g /= 2.0 * area
        K[np.ix_(tri, tri)] += coef[t] * area * (g @ g.T)
    return K


# ---------------------------------------------------------------------------
# element exactness


def test_p1_mass_unit_right_triangle():
    asm = Assembler(single_triangle_mesh())
    M = asm.matrix_mass(np.array([1.0])).toarray()
    expected = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 24.0
    assert np.allclose(M, expected, rtol=1e-13, atol=0)


def test_p1_stiffness_unit_right_triangle():
    asm = Assembler(single_triangle_mesh())
    K = asm.matrix_stiffness(np.array([1.0])).toarray()
    expected = 0.5 * np.array([[2.0, -1.0, -1.0], [-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
    assert np.allclose(K, expected, rtol=1e-13, atol=0)


def test_fracture_elements_unit_edge():
    asm = Assembler(single_edge_mesh())
    M = asm.fracture_mass(np.array([1.0])).toarray()[2:, 2:]
    K = asm.fracture_stiffness(np.array([1.0])).toarray()[2:, 2:]
    assert np.allclose(M, np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0, rtol=1e-13, atol=0)
    assert np.allclose(K, np.array([[1.0, -1.0], [-1.0, 1.0]]), rtol=1e-13, atol=0)


def test_mass_total_equals_domain_area():
    mesh = build_structured_mesh(2)
    asm = Assembler(mesh)
    M = asm.matrix_mass(np.ones(len(mesh.triangles)))
    ones = np.ones(mesh.n_dofs)
    assert abs(ones @ (M @ ones) - 1.0) < 1e-14


def test_stiffness_annihilates_constants_and_is_psd():
    mesh = build_structured_mesh(5)
    asm = Assembler(mesh)
    K = asm.matrix_stiffness(np.ones(len(mesh.triangles)))
    ones = np.ones(mesh.n_dofs)
    assert np.max(np.abs(K @ ones)) < 1e-13
    rng = np.random.default_rng(0)
    for _ in range(10):
        u = rng.standard_normal(mesh.n_dofs)
        assert u @ (K @ u) >= -1e-13


def test_fracture_chain_mass_rowsum_is_length():
    mesh = FineMesh(n=2, vertices=np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]),
                    triangles=np.zeros((0, 3), dtype=np.int64),
                    fracture_edges=np.array([[0, 1], [1, 2]]))
    asm = Assembler(mesh)
    M = asm.fracture_mass(np.ones(2))
    assert abs(M.sum() - 2.0) < 1e-14
    K = asm.fracture_stiffness(np.ones(2))
    ones = np.ones(mesh.n_dofs)
    assert np.max(np.abs(K @ ones)) < 1e-14


def test_assembly_matches_dense_oracle():
    mesh = fractured_square(4)
    asm = Assembler(mesh)
    rng = np.random.default_rng(6)
    coef = rng.uniform(0.5, 2.0, len(mesh.triangles))
    nm = mesh.n_matrix_dofs
    M = asm.matrix_mass(coef).toarray()[:nm, :nm]
    K = asm.matrix_stiffness(coef).toarray()[:nm, :nm]
    assert np.allclose(M, dense_mass_oracle(mesh, coef), rtol=1e-13, atol=1e-18)
    assert np.allclose(K, dense_stiffness_oracle(mesh, coef), rtol=1e-13, atol=1e-15)


def test_degenerate_triangle_rejected():
    mesh = FineMesh(n=2, vertices=np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]),
                    triangles=np.array([[0, 1, 2]]),
                    fracture_edges=np.zeros((0, 2), dtype=np.int64))
    with pytest.raises(AssemblyError, match="triangle"):
        Assembler(mesh)


# ---------------------------------------------------------------------------
# coupling


def test_transfer_single_edge_blocks():
    mesh = single_edge_mesh()
    asm = Assembler(mesh)
    T = asm.transfer(np.array([1.0])).toarray()
    m2 = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    assert np.allclose(T[:2, :2], m2, rtol=1e-13)       # matrix-matrix
    assert np.allclose(T[2:, 2:], m2, rtol=1e-13)       # fracture-fracture
    assert np.allclose(T[2:, :2], -m2, rtol=1e-13)      # -Q_fm
    assert np.allclose(T, T.T, atol=0)


def test_transfer_zero_coefficient_vanishes():
    mesh = fractured_square(4)
    asm = Assembler(mesh)
    T = asm.transfer(np.zeros(len(mesh.fracture_edges)))
    assert T.nnz == 0 or abs(T).max() == 0.0


def test_transfer_annihilates_matched_constants():
    mesh = fractured_square(6, [(0.0, 0.5, 1.0, 0.5), (0.25, 0.1, 0.75, 0.9)])
    asm = Assembler(mesh)
    sigma = np.random.default_rng(1).uniform(0.5, 2.0, len(mesh.fracture_edges))
    T = asm.transfer(sigma)
    assert np.max(np.abs(T @ np.ones(mesh.n_dofs))) < 1e-13


def test_transfer_total_capacity():
    mesh = fractured_square(4)
    asm = Assembler(mesh)
    sigma = np.full(len(mesh.fracture_edges), 3.0)
    T = asm.transfer(sigma)
    nm = mesh.n_matrix_dofs
    Q_mf = -T.toarray()[:nm, nm:]
    total = np.ones(nm) @ Q_mf @ np.ones(mesh.n_fracture_dofs)
    assert np.isclose(total, np.sum(sigma * asm.edge_lengths), rtol=1e-13)


def test_transfer_rejects_negative_sigma():
    asm = Assembler(single_edge_mesh())
    with pytest.raises(AssemblyError):
        asm.transfer(np.array([-1.0]))


# ---------------------------------------------------------------------------
# wells


def test_wells_require_fracture_in_box():
    mesh = fractured_square(4)  # fracture along y = 0.5 only
    fields, asm, _ = problem(mesh)
    with pytest.raises(AssemblyError, match="0.9"):
        Wells(asm, PHYS, [(0.0, 0.1, 0.85, 0.95)])


def test_well_load_is_mass_weighted():
    mesh = fractured_square(4)
    asm = Assembler(mesh)
    wells = Wells(asm, PHYS, [(0.3, 0.7, 0.4, 0.6)])
    g0, g1 = PHYS.well_source_coefficients()
    assert wells.g0 == g0 and wells.g1 == g1
    box_len = asm.edge_lengths[wells.edges].sum()
    assert np.isclose(wells.load.sum(), g0 * box_len, rtol=1e-13)
    assert np.all(wells.load[:mesh.n_matrix_dofs] == 0.0)


def test_implicit_and_explicit_well_variants_agree():
    mesh = fractured_square(4)
    asm = Assembler(mesh)
    imp = Wells(asm, PHYS, [(0.3, 0.7, 0.4, 0.6)], implicit=True)
    exp = Wells(asm, PHYS, [(0.3, 0.7, 0.4, 0.6)], implicit=False)
    c = np.random.default_rng(2).uniform(PHYS.c_min, PHYS.c_max, mesh.n_dofs)
    implicit_total = imp.load - imp.operator_term() @ c
    assert np.allclose(exp.explicit_rhs(c), implicit_total, rtol=1e-13)
    assert exp.operator_term().nnz == 0


# ---------------------------------------------------------------------------
# the fixed operator


def test_fixed_operator_symmetric_and_spd():
    mesh = fractured_square(8, [(0.0, 0.5, 1.0, 0.5), (0.25, 0.125, 0.25, 0.875)])
    fields, asm, wells = problem(mesh, boxes=[(0.3, 0.7, 0.4, 0.6)])
    sys = build_linear_operator(asm, PHYS, fields, wells, tau=8640.0)
    assert (sys.A != sys.A.T).nnz == 0
    rng = np.random.default_rng(4)
    for _ in range(100):
        x = rng.standard_normal(mesh.n_dofs)
        assert x @ (sys.A @ x) > 0.0
    # smallest Ritz estimate from CG-Lanczos stays positive
    _, rep = linalg.pcg_solve(sys.A, rng.standard_normal(mesh.n_dofs),
                              tol=1e-30, max_iter=50, track_spectrum=True)
    assert rep.ritz_min > 0.0


def test_operator_nullspace_without_wells():
    mesh = fractured_square(6)
    fields, asm, wells = problem(mesh)
    sys = build_linear_operator(asm, PHYS, fields, wells, tau=100.0)
    ones = np.ones(mesh.n_dofs)
    assert np.max(np.abs(sys.D_lin @ ones)) < 1e-10 * abs(sys.D_lin).max()
    assert np.all(sys.F == 0.0)


def test_operator_requires_positive_tau():
    mesh = fractured_square(4)
    fields, asm, wells = problem(mesh)
    with pytest.raises(AssemblyError):
        build_linear_operator(asm, PHYS, fields, wells, tau=0.0)


def test_build_counter_increments():
    mesh = fractured_square(4)
    fields, asm, wells = problem(mesh)
    reset_build_counts()
    build_linear_operator(asm, PHYS, fields, wells, tau=1.0)
    assert build_counts["linear_operator"] == 1
    starred_operators(asm, PHYS, fields, wells)
    assert build_counts["linear_operator"] == 1


def test_evaluated_operators_symmetric_and_spd_mass():
    mesh = fractured_square(6, [(0.0, 0.5, 1.0, 0.5), (0.5, 0.0, 0.5, 1.0)])
    fields, asm, wells = problem(mesh)
    rng = np.random.default_rng(10)
    c = rng.uniform(PHYS.c_min, PHYS.c_max, mesh.n_dofs)
    ev = evaluate_operators(asm, PHYS, fields, wells, c)
    for M in (ev.S, ev.D):
        assert linalg.is_symmetric(M, 1e-13)
    for _ in range(20):
        x = rng.standard_normal(mesh.n_dofs)
        assert x @ (ev.S @ x) > 0.0
        assert x @ (ev.D @ x) >= -1e-16


def test_matrix_level_dominance():
    mesh = fractured_square(4, [(0.0, 0.5, 1.0, 0.5)])
    fields, asm, wells = problem(mesh)
    S_lin, D_lin = starred_operators(asm, PHYS, fields, wells)
    rng = np.random.default_rng(12)
    for _ in range(5):
        c = rng.uniform(PHYS.c_min, PHYS.c_max, mesh.n_dofs)
        ev = evaluate_operators(asm, PHYS, fields, wells, c)
        assert np.linalg.eigvalsh((S_lin - ev.S).toarray())[0] >= -1e-12
        assert np.linalg.eigvalsh((D_lin - ev.D).toarray())[0] >= -1e-12


def test_constant_coefficient_state_matches_weighted_assembly():
    # nodal averaging of a constant state must reproduce the plain
    # coefficient-weighted matrices exactly
    mesh = fractured_square(5)
    fields, asm, wells = problem(mesh)
    c0 = np.full(mesh.n_dofs, 0.5 * (PHYS.c_min + PHYS.c_max))
    ev = evaluate_operators(asm, PHYS, fields, wells, c0)
    a = PHYS.storage_m(c0[0]) * np.ones(len(mesh.triangles))
    direct = asm.matrix_mass(a) + asm.fracture_mass(
        np.full(len(mesh.fracture_edges), PHYS.phi_f))
    assert (ev.S != direct).nnz == 0


# ---------------------------------------------------------------------------
# right-hand side


def test_rhs_steady_state_preserved():
    mesh = fractured_square(2)
    fields, asm, wells = problem(mesh)
    sys = build_linear_operator(asm, PHYS, fields, wells, tau=50.0)
    c0 = np.full(mesh.n_dofs, PHYS.c_init)
    ev = evaluate_operators(asm, PHYS, fields, wells, c0)
    b = build_rhs(sys, ev, c0, c0)
    assert np.allclose(sys.A @ c0, b, rtol=1e-12)


def test_rhs_history_term_vanishes_for_equal_states():
    mesh = fractured_square(4)
    fields, asm, wells = problem(mesh, boxes=[(0.3, 0.7, 0.4, 0.6)])
    sys = build_linear_operator(asm, PHYS, fields, wells, tau=10.0)
    rng = np.random.default_rng(3)
    c = rng.uniform(PHYS.c_min, PHYS.c_max, mesh.n_dofs)
    ev = evaluate_operators(asm, PHYS, fields, wells, c)
    b_equal = build_rhs(sys, ev, c, c)
    b_moved = build_rhs(sys, ev, c, c + 10.0)
    S_nl = ev.S - sys.S_lin
    assert np.allclose(b_moved - b_equal, S_nl @ np.full(mesh.n_dofs, 10.0), rtol=1e-12)


def test_rhs_frozen_coefficients_reduce_to_backward_euler():
    from fracgas.assembly import NonlinearEvaluation
    mesh = fractured_square(4)
    fields, asm, wells = problem(mesh, boxes=[(0.3, 0.7, 0.4, 0.6)])
    sys = build_linear_operator(asm, PHYS, fields, wells, tau=10.0)
    frozen = NonlinearEvaluation(S=sys.S_lin, D=sys.D_lin)
    rng = np.random.default_rng(8)
    c = rng.uniform(PHYS.c_min, PHYS.c_max, mesh.n_dofs)
    b = build_rhs(sys, frozen, c, rng.uniform(PHYS.c_min, PHYS.c_max, mesh.n_dofs))
    assert np.allclose(b, sys.S_lin @ c + sys.tau * sys.F, rtol=1e-13)


def test_rhs_rejects_negative_state():
    mesh = fractured_square(4)
    fields, asm, wells = problem(mesh)
    sys = build_linear_operator(asm, PHYS, fields, wells, tau=10.0)
    c = np.full(mesh.n_dofs, PHYS.c_init)
    bad = c.copy()
    bad[3] = -1.0
    ev = evaluate_operators(asm, PHYS, fields, wells, c)
    with pytest.raises(AssemblyError, match="negative"):
        build_rhs(sys, ev, bad, c)


def test_dump_system_writes_matrix_market(tmp_path):
    mesh = fractured_square(4)
    fields, asm, wells = problem(mesh)
    sys = build_linear_operator(asm, PHYS, fields, wells, tau=10.0)
    dump_system(sys, tmp_path / "mm")
    for name in ("A.mtx", "S_lin.mtx", "D_lin.mtx"):
        assert (tmp_path / "mm" / name).exists()
    A = linalg.load_matrix_market(tmp_path / "mm" / "A.mtx")
    assert abs(A - sys.A).max() <= 1e-15 * abs(sys.A).max()


def test_per_edge_fracture_permeability_feeds_assembly():
    mesh = fractured_square(4)
    ne = len(mesh.fracture_edges)
    kf_edges = np.linspace(1e-14, 5e-14, ne)
    fields = CoefficientField(mesh, np.ones(len(mesh.triangles)),
                              np.ones(len(mesh.triangles)), np.ones(ne),
                              np.ones(ne), edge_kappa_f=kf_edges)
    asm = Assembler(mesh)
    wells = Wells.none(asm, PHYS)
    c = np.full(mesh.n_dofs, PHYS.c_init)
    ev = evaluate_operators(asm, PHYS, fields, wells, c)
    direct = asm.fracture_stiffness(PHYS.mobility_f(np.full(ne, PHYS.c_init), kf_edges))
    nm = mesh.n_matrix_dofs
    got = ev.D.toarray()[nm:, nm:]
    # the fracture block is stiffness plus the transfer mass; subtract the latter
    sigma = PHYS.transfer(np.full(ne, PHYS.c_init))
    got -= asm.transfer(sigma).toarray()[nm:, nm:]
    assert np.allclose(got, direct.toarray()[nm:, nm:], rtol=1e-12)
