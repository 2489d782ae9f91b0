"""Assembly-engine checks: quadrature tables, face groups, builders."""

import numpy as np
import pytest

from dgtwophase import fespace as fe
from dgtwophase import mesh as mm
from dgtwophase._discrete import Discretization


def _adapted_mesh():
    """Two refinement rounds -> three levels with hanging faces."""
    m, _ = mm.adapt(mm.build_uniform(2, 2, mm.Rect(0.0, 0.0, 1.0, 1.0)), [0], [])
    m, _ = mm.adapt(m, [1], [])
    return m


def _jump_operator(disc, space):
    """sum over interior faces of ∮ [[u]][[v]]."""
    builder = disc.matrix_builder(space)
    nq1 = disc.weights_1d.size
    for gid, group in enumerate(disc.face_groups):
        if group.boundary:
            continue
        ones = np.ones((group.num_faces, nq1))
        builder.face_term(gid, ones, "plus", "plus")
        builder.face_term(gid, -ones, "plus", "minus")
        builder.face_term(gid, -ones, "minus", "plus")
        builder.face_term(gid, ones, "minus", "minus")
    return builder.finalize()


class TestCellTerms:
    def test_mass_matrix_total_is_domain_area(self):
        mesh = _adapted_mesh()
        space = fe.NodalSpace(2)
        disc = Discretization(mesh, 4)
        builder = disc.matrix_builder(space)
        builder.cell_term(np.ones((mesh.num_cells, disc.weights_2d.size)),
                          "v", "v")
        mass = builder.finalize()
        ones = np.ones(mass.shape[0])
        assert ones @ (mass @ ones) == pytest.approx(mesh.area, rel=1e-13)

    def test_mass_matrix_matches_dense_quadrature_on_one_cell(self):
        mesh = mm.build_uniform(1, 1, mm.Rect(0.0, 0.0, 0.5, 0.25))
        space = fe.NodalSpace(1)
        disc = Discretization(mesh, 3)
        builder = disc.matrix_builder(space)
        builder.cell_term(np.ones((1, disc.weights_2d.size)), "v", "v")
        mass = builder.finalize().to_dense()

        V = space.tabulate(disc.points_2d)
        area = 0.5 * 0.25
        expected = area * (V.T @ (disc.weights_2d[:, None] * V))
        assert np.allclose(mass, expected, atol=1e-14)

    def test_stiffness_energy_of_linear_field(self):
        # int |grad(3x + 4y)|^2 over the unit square = 25
        mesh = _adapted_mesh()
        space = fe.NodalSpace(2)
        disc = Discretization(mesh, 4)
        builder = disc.matrix_builder(space)
        ones = np.ones((mesh.num_cells, disc.weights_2d.size))
        builder.cell_term(ones, "dx", "dx")
        builder.cell_term(ones, "dy", "dy")
        stiff = builder.finalize()
        f = fe.interpolate(space, mesh, lambda x, y: 3 * x + 4 * y)
        assert f.data @ (stiff @ f.data) == pytest.approx(25.0, rel=1e-12)

    def test_component_offsets_place_vector_blocks(self):
        # same scalar mass accumulated into each diagonal component block
        mesh = mm.build_uniform(2, 1, mm.Rect(0.0, 0.0, 1.0, 1.0))
        scalar = fe.NodalSpace(1)
        vector = fe.NodalSpace(1, components=2)
        disc = Discretization(mesh, 3)
        ones = np.ones((mesh.num_cells, disc.weights_2d.size))

        sb = disc.matrix_builder(scalar)
        sb.cell_term(ones, "v", "v")
        m_scalar = sb.finalize().to_dense()

        vb = disc.matrix_builder(vector)
        vb.cell_term(ones, "v", "v", row_comp=0, col_comp=0)
        vb.cell_term(2 * ones, "v", "v", row_comp=1, col_comp=1)
        vb.cell_term(3 * ones, "v", "v", row_comp=0, col_comp=1)
        m_vector = vb.finalize().to_dense()

        nn = scalar.nodes_per_cell
        blk = vector.block
        for cell in range(mesh.num_cells):
            base = cell * blk
            sbase = cell * nn
            cell_scalar = m_scalar[sbase:sbase + nn, sbase:sbase + nn]
            got_00 = m_vector[base:base + nn, base:base + nn]
            got_11 = m_vector[base + nn:base + blk, base + nn:base + blk]
            got_01 = m_vector[base:base + nn, base + nn:base + blk]
            got_10 = m_vector[base + nn:base + blk, base:base + nn]
            assert np.allclose(got_00, cell_scalar, atol=1e-14)
            assert np.allclose(got_11, 2 * cell_scalar, atol=1e-14)
            assert np.allclose(got_01, 3 * cell_scalar, atol=1e-14)
            assert np.allclose(got_10, 0.0)


class TestFaceTerms:
    def test_continuous_field_has_zero_jump_energy(self):
        mesh = _adapted_mesh()
        space = fe.NodalSpace(2)
        disc = Discretization(mesh, 4)
        jump = _jump_operator(disc, space)
        f = fe.interpolate(space, mesh, lambda x, y: x * x + x * y + 3 * y)
        assert abs(f.data @ (jump @ f.data)) < 1e-13

    def test_jump_operator_is_symmetric_positive(self):
        mesh = _adapted_mesh()
        space = fe.NodalSpace(2)
        disc = Discretization(mesh, 4)
        jump = _jump_operator(disc, space).to_dense()
        assert np.abs(jump - jump.T).max() < 1e-14
        eigs = np.linalg.eigvalsh(jump)
        assert eigs.min() > -1e-12
        rng = np.random.default_rng(7)
        x = rng.standard_normal(jump.shape[0])
        assert x @ jump @ x > 0.1

    def test_face_measure_scales_with_length(self):
        # one conforming face of length 0.25: ∮ 1*1 over it = 0.25
        mesh = mm.build_uniform(2, 1, mm.Rect(0.0, 0.0, 1.0, 0.25))
        space = fe.NodalSpace(1)
        disc = Discretization(mesh, 2)
        interior = [gid for gid, g in enumerate(disc.face_groups)
                    if not g.boundary]
        assert len(interior) == 1
        gid = interior[0]
        builder = disc.matrix_builder(space)
        builder.face_term(gid, np.ones((1, 2)), "plus", "plus")
        total = builder.finalize()
        ones = np.ones(total.shape[0])
        assert ones @ (total @ ones) == pytest.approx(0.25, rel=1e-13)

    def test_periodic_group_joins_interior(self):
        mesh = mm.build_uniform(2, 2, mm.Rect(0.0, 0.0, 1.0, 1.0),
                                periodic_x=True)
        disc = Discretization(mesh, 2)
        kinds = {mesh.faces[i].kind
                 for g in disc.face_groups if not g.boundary
                 for i in g.face_index}
        assert kinds == {"interior", "periodic"}

    def test_wall_groups_carry_side_labels(self):
        mesh = mm.build_uniform(2, 2, mm.Rect(0.0, 0.0, 1.0, 1.0))
        disc = Discretization(mesh, 2)
        walls = {g.wall for g in disc.face_groups if g.boundary}
        assert walls == {"west", "east", "south", "north"}
        for g in disc.face_groups:
            if g.boundary:
                with pytest.raises(ValueError):
                    g.cells("minus")


class TestEvaluation:
    def test_two_sided_traces_agree_for_continuous_field(self):
        mesh = _adapted_mesh()
        space = fe.NodalSpace(2)
        disc = Discretization(mesh, 4)
        f = fe.interpolate(space, mesh, lambda x, y: x * x + x * y + 3 * y)
        for gid, group in enumerate(disc.face_groups):
            if group.boundary:
                continue
            vp = disc.face_values(f, gid, "plus")
            vm = disc.face_values(f, gid, "minus")
            assert np.abs(vp - vm).max() < 1e-12
            gp = disc.face_gradients(f, gid, "plus")
            gm = disc.face_gradients(f, gid, "minus")
            assert np.abs(gp - gm).max() < 1e-11

    def test_cell_gradients_of_polynomial(self):
        mesh = _adapted_mesh()
        space = fe.NodalSpace(2)
        disc = Discretization(mesh, 4)
        f = fe.interpolate(space, mesh, lambda x, y: x * x + x * y)
        grads = disc.cell_gradients(f)
        for e, cell in enumerate(mesh.cells):
            b = cell.bbox
            px = b.x0 + (b.x1 - b.x0) * disc.points_2d[:, 0]
            py = b.y0 + (b.y1 - b.y0) * disc.points_2d[:, 1]
            assert np.abs(grads[e, 0, :, 0] - (2 * px + py)).max() < 1e-12
            assert np.abs(grads[e, 0, :, 1] - px).max() < 1e-12

    def test_vector_field_evaluation_shapes(self):
        mesh = _adapted_mesh()
        space = fe.NodalSpace(2, components=2)
        disc = Discretization(mesh, 4)
        f = fe.interpolate(space, mesh, lambda x, y: (y, -x))
        vals = disc.cell_values(f)
        assert vals.shape == (mesh.num_cells, 2, disc.weights_2d.size)
        grads = disc.cell_gradients(f)
        assert grads.shape == (mesh.num_cells, 2, disc.weights_2d.size, 2)
        # div(y, -x) = 0, curl nonzero
        div = grads[:, 0, :, 0] + grads[:, 1, :, 1]
        assert np.abs(div).max() < 1e-12


class TestProjection:
    def test_projection_reproduces_space_members(self):
        mesh = _adapted_mesh()
        space = fe.NodalSpace(2)
        disc = Discretization(mesh, 4)
        f = fe.interpolate(space, mesh, lambda x, y: x * x + x * y + 3 * y)
        back = disc.project_to_space(space, disc.cell_values(f))
        assert np.abs(back.data - f.data).max() < 1e-13

    def test_projection_is_best_approximation(self):
        # projecting sin(pi x): residual orthogonal to the space per cell
        mesh = mm.build_uniform(2, 2, mm.Rect(0.0, 0.0, 1.0, 1.0))
        space = fe.NodalSpace(2)
        disc = Discretization(mesh, 5)
        xs = disc.points_2d[:, 0]
        values = []
        for cell in mesh.cells:
            b = cell.bbox
            px = b.x0 + (b.x1 - b.x0) * xs
            values.append(np.sin(np.pi * px))
        values = np.asarray(values)[:, None, :]
        proj = disc.project_to_space(space, values)
        resid = values - disc.cell_values(proj)
        V = disc.volume_tables(space).V
        moments = (resid[:, 0, :] * disc.weights_2d) @ V
        assert np.abs(moments).max() < 1e-14

    def test_component_mismatch_rejected(self):
        mesh = mm.build_uniform(1, 1, mm.Rect(0.0, 0.0, 1.0, 1.0))
        disc = Discretization(mesh, 3)
        with pytest.raises(ValueError):
            disc.project_to_space(fe.NodalSpace(2, components=2),
                                  np.ones((1, 1, 9)))


class TestPenalty:
    def test_penalty_ratio_uniform_interior(self):
        # faces of length 1/2 between cells of area 1/4 -> ratio 2 = 1/h
        mesh = mm.build_uniform(2, 2, mm.Rect(0.0, 0.0, 1.0, 1.0))
        disc = Discretization(mesh, 2)
        for gid, group in enumerate(disc.face_groups):
            assert disc.penalty_ratio(gid) == pytest.approx(
                np.full(group.num_faces, 2.0))

    def test_penalty_ratio_scales_like_inverse_width(self):
        coarse = mm.build_uniform(2, 2, mm.Rect(0.0, 0.0, 1.0, 1.0))
        fine = mm.build_uniform(4, 4, mm.Rect(0.0, 0.0, 1.0, 1.0))
        rc = Discretization(coarse, 2).penalty_ratio(0)[0]
        rf = Discretization(fine, 2).penalty_ratio(0)[0]
        assert rf == pytest.approx(2.0 * rc)

    def test_penalty_ratio_hanging_uses_fine_length(self):
        mesh = _adapted_mesh()
        disc = Discretization(mesh, 2)
        for gid, group in enumerate(disc.face_groups):
            if group.refined == 0:
                continue
            areas = {}
            for side, inv in (("plus", group.inv_h_plus),
                              ("minus", group.inv_h_minus)):
                areas[side] = 1.0 / (inv[:, 0] * inv[:, 1])
            expected = 0.5 * (group.length / areas["plus"]
                              + group.length / areas["minus"])
            assert disc.penalty_ratio(gid) == pytest.approx(expected)


class TestRhsBuilder:
    def test_cell_rhs_integrates_test_functions(self):
        # rows must equal int f * theta_i; summing = int f
        mesh = _adapted_mesh()
        space = fe.NodalSpace(2)
        disc = Discretization(mesh, 4)
        rb = disc.rhs_builder(space)
        rb.cell_term(np.ones((mesh.num_cells, disc.weights_2d.size)), "v")
        total = rb.vector().sum()
        assert total == pytest.approx(mesh.area, rel=1e-13)

    def test_face_rhs_accumulates_both_sides(self):
        mesh = mm.build_uniform(2, 1, mm.Rect(0.0, 0.0, 1.0, 1.0),
                                periodic_x=True)
        space = fe.NodalSpace(1)
        disc = Discretization(mesh, 2)
        rb = disc.rhs_builder(space)
        for gid, group in enumerate(disc.face_groups):
            if group.boundary:
                continue
            ones = np.ones((group.num_faces, disc.weights_1d.size))
            rb.face_term(gid, ones, "plus")
            rb.face_term(gid, ones, "minus")
        # two vertical faces (one interior, one periodic), each of length 1,
        # integrated against the unit test-sum on both sides
        assert rb.vector().sum() == pytest.approx(4.0, rel=1e-13)

    def test_against_matrix_action(self):
        # rhs with coeff = trace of a field == matrix(face term) @ field
        mesh = _adapted_mesh()
        space = fe.NodalSpace(2)
        disc = Discretization(mesh, 4)
        f = fe.interpolate(space, mesh, lambda x, y: x * y + y * y)
        builder = disc.matrix_builder(space)
        rb = disc.rhs_builder(space)
        for gid, group in enumerate(disc.face_groups):
            if group.boundary:
                continue
            ones = np.ones((group.num_faces, disc.weights_1d.size))
            builder.face_term(gid, ones, "plus", "minus")
            trace_m = disc.face_values(f, gid, "minus")[:, 0]
            rb.face_term(gid, trace_m, "plus")
        got = rb.vector()
        want = builder.finalize() @ f.data
        assert np.abs(got - want).max() < 1e-13
