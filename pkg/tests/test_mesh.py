import math

import numpy as np
import pytest

from dgtwophase import mesh as dgmesh
from dgtwophase.mesh import Rect, adapt, build_uniform, cell_diam, face_diam

UNIT = Rect(0.0, 0.0, 1.0, 1.0)


def kinds(m):
    out = {"interior": 0, "boundary": 0, "periodic": 0}
    for f in m.faces:
        out[f.kind] += 1
    return out


class TestBuildUniform:
    def test_single_cell(self):
        m = build_uniform(1, 1, UNIT)
        assert m.num_cells == 1
        assert kinds(m) == {"interior": 0, "boundary": 4, "periodic": 0}

    def test_two_by_two(self):
        m = build_uniform(2, 2, UNIT)
        assert m.num_cells == 4
        assert kinds(m) == {"interior": 4, "boundary": 8, "periodic": 0}

    def test_two_by_two_periodic_x(self):
        m = build_uniform(2, 2, UNIT, periodic_x=True)
        assert kinds(m) == {"interior": 4, "boundary": 4, "periodic": 2}
        for f in m.faces:
            if f.kind == "periodic":
                assert f.axis == 0
                assert f.coord != f.coord_minus

    def test_fully_periodic_has_no_boundary(self):
        m = build_uniform(3, 2, UNIT, periodic_x=True, periodic_y=True)
        k = kinds(m)
        assert k["boundary"] == 0
        # every cell has 4 faces, each shared by two sides
        assert k["interior"] + k["periodic"] == 2 * m.num_cells

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            build_uniform(0, 1, UNIT)
        with pytest.raises(ValueError):
            build_uniform(1, 0, UNIT)

    def test_degenerate_domain(self):
        with pytest.raises(ValueError):
            build_uniform(1, 1, Rect(0.0, 0.0, 0.0, 1.0))

    def test_single_cell_periodic_pairs_with_itself(self):
        m = build_uniform(1, 1, UNIT, periodic_x=True)
        pf = [f for f in m.faces if f.kind == "periodic"]
        assert len(pf) == 1
        assert pf[0].plus == pf[0].minus == 0

    def test_boundary_sides_labeled(self):
        m = build_uniform(2, 2, UNIT)
        sides = sorted(f.boundary_side for f in m.faces if f.kind == "boundary")
        assert sides == ["east", "east", "north", "north",
                         "south", "south", "west", "west"]


class TestDiameters:
    def test_unit_cell_diagonal(self):
        m = build_uniform(1, 1, UNIT)
        assert cell_diam(m.cells[0]) == pytest.approx(math.sqrt(2.0), abs=1e-15)

    def test_unit_cell_edge(self):
        m = build_uniform(1, 1, UNIT)
        assert all(face_diam(f) == pytest.approx(1.0) for f in m.faces)

    def test_refined_child_diagonal(self):
        m = build_uniform(1, 1, UNIT)
        m2, _ = adapt(m, [0], [])
        assert all(
            cell_diam(c) == pytest.approx(math.sqrt(2.0) / 2.0) for c in m2.cells
        )


class TestAdapt:
    def test_refine_one_of_four(self):
        m = build_uniform(2, 2, UNIT)
        m2, transfer = adapt(m, [0], [])
        assert m2.num_cells == 7
        tags = [e[0] for e in transfer.entries]
        assert tags.count("refined") == 4 and tags.count("same") == 3

    def test_empty_flags_identity(self):
        m = build_uniform(2, 2, UNIT)
        m2, transfer = adapt(m, [], [])
        assert [c.key for c in m2.cells] == [c.key for c in m.cells]
        assert all(e == ("same", i) for i, e in enumerate(transfer.entries))

    def test_second_refinement_forces_neighbors(self):
        m = build_uniform(2, 2, UNIT)
        m2, _ = adapt(m, [0], [])
        # split the corner child that touches both coarse neighbors
        inner = m2.cell_index[(1, 1, 1)]
        m3, _ = adapt(m2, [inner], [])
        # both face neighbors of the split child were forced down one level;
        # the diagonal cell only touches at a corner and keeps its level
        assert sorted({c.level for c in m3.cells}) == [0, 1, 2]
        assert m3.num_cells == 16
        assert sum(1 for c in m3.cells if c.level == 0) == 1

    def test_refine_flag_wins_over_coarsen(self):
        m = build_uniform(2, 2, UNIT)
        m2, _ = adapt(m, [0], [0])
        assert m2.num_cells == 7

    def test_coarsen_restores_parent(self):
        m = build_uniform(2, 2, UNIT)
        m2, _ = adapt(m, [0], [])
        children = [m2.cell_index[k] for k in ((1, 0, 0), (1, 1, 0), (1, 0, 1), (1, 1, 1))]
        m3, transfer = adapt(m2, [], children)
        assert sorted(c.key for c in m3.cells) == sorted(c.key for c in m.cells)
        merged = [e for e in transfer.entries if e[0] == "coarsened"]
        assert len(merged) == 1 and len(merged[0][1]) == 4

    def test_partial_sibling_group_is_kept(self):
        m = build_uniform(2, 2, UNIT)
        m2, _ = adapt(m, [0], [])
        children = [m2.cell_index[k] for k in ((1, 0, 0), (1, 1, 0))]
        m3, _ = adapt(m2, [], children)
        assert m3.num_cells == m2.num_cells

    def test_coarsening_suppressed_when_balance_would_break(self):
        m = build_uniform(1, 1, UNIT)
        m2, _ = adapt(m, [0], [])
        m3, _ = adapt(m2, [m2.cell_index[(1, 1, 1)]], [])
        # merging the remaining level-1 siblings is impossible: level-2
        # cells would then touch a level-0 cell
        coarsen = [i for i, c in enumerate(m3.cells) if c.level == 1]
        with_level2 = m3.num_cells
        m4, _ = adapt(m3, [], coarsen)
        assert m4.num_cells == with_level2

    def test_flag_out_of_range(self):
        m = build_uniform(2, 2, UNIT)
        with pytest.raises(ValueError):
            adapt(m, [17], [])

    def test_refined_transfer_quadrants_match_geometry(self):
        m = build_uniform(2, 2, Rect(0.0, 0.0, 2.0, 2.0))
        m2, transfer = adapt(m, [1], [])
        for i, entry in enumerate(transfer.entries):
            if entry[0] != "refined":
                continue
            _, old, q = entry
            parent = m.cells[old].bbox
            child = m2.cells[i].bbox
            dx = 0 if child.x0 == parent.x0 else 1
            dy = 0 if child.y0 == parent.y0 else 1
            assert q == dx + 2 * dy


class TestHangingFaces:
    def test_half_faces_between_levels(self):
        m = build_uniform(2, 2, UNIT)
        m2, _ = adapt(m, [0], [])
        hanging = [f for f in m2.faces if f.segment >= 0]
        # the refined SW cell touches two coarse neighbors, 2 half-faces each
        assert len(hanging) == 4
        for f in hanging:
            assert f.refined != 0
            assert f.diam == pytest.approx(0.25)
            assert f.segment in (0, 1)
        segs = sorted((f.axis, f.segment) for f in hanging)
        assert segs == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_quadrature_side_is_fine_side(self):
        m = build_uniform(2, 2, UNIT)
        m2, _ = adapt(m, [0], [])
        for f in m2.faces:
            if f.segment < 0:
                continue
            fine = m2.cells[f.plus if f.refined > 0 else f.minus]
            lo, hi = ((fine.bbox.y0, fine.bbox.y1) if f.axis == 0
                      else (fine.bbox.x0, fine.bbox.x1))
            assert (f.lo, f.hi) == (lo, hi)


class TestInvariants:
    def rounds(self, periodic):
        rng = np.random.default_rng(7)
        m = build_uniform(3, 2, Rect(0.0, 0.0, 1.5, 1.0),
                          periodic_x=periodic, periodic_y=periodic)
        yield m
        for _ in range(6):
            n = m.num_cells
            refine = list(rng.choice(n, size=max(1, n // 5), replace=False))
            coarsen = list(rng.choice(n, size=max(1, n // 3), replace=False))
            coarsen = [i for i in coarsen if i not in refine]
            m, _ = adapt(m, refine, coarsen)
            yield m

    @pytest.mark.parametrize("periodic", [False, True])
    def test_balance_after_any_adapt(self, periodic):
        for m in self.rounds(periodic):
            for f in m.faces:
                if f.minus >= 0:
                    assert abs(m.cells[f.plus].level - m.cells[f.minus].level) <= 1

    @pytest.mark.parametrize("periodic", [False, True])
    def test_areas_tile_domain(self, periodic):
        for m in self.rounds(periodic):
            assert m.area == pytest.approx(m.domain.area, rel=1e-12)

    @pytest.mark.parametrize("periodic", [False, True])
    def test_every_face_consistent(self, periodic):
        for m in self.rounds(periodic):
            for f in m.faces:
                assert f.hi > f.lo
                plus = m.cells[f.plus]
                b = plus.bbox
                if f.axis == 0:
                    assert f.coord == pytest.approx(b.x1 if f.sign > 0 else b.x0)
                    assert f.lo >= b.y0 - 1e-14 and f.hi <= b.y1 + 1e-14
                else:
                    assert f.coord == pytest.approx(b.y1 if f.sign > 0 else b.y0)
                    assert f.lo >= b.x0 - 1e-14 and f.hi <= b.x1 + 1e-14

    def test_interior_faces_counted_once(self):
        # each interior face: its two owner edge segments overlap exactly once
        m = build_uniform(3, 3, UNIT)
        m2, _ = adapt(m, [0, 4, 8], [])
        seen = set()
        for f in m2.faces:
            key = (f.axis, round(f.coord, 12), round(f.lo, 12), round(f.hi, 12))
            assert key not in seen
            seen.add(key)

    def test_periodic_mirror_is_involution(self):
        m = build_uniform(4, 2, UNIT, periodic_x=True, periodic_y=True)
        m2, _ = adapt(m, [0, 5], [])
        for f in m2.faces:
            if f.kind == "periodic":
                assert m2.periodic_mirror(m2.periodic_mirror(f)) == f

    def test_periodic_mirror_rejects_interior(self):
        m = build_uniform(2, 2, UNIT)
        inner = next(f for f in m.faces if f.kind == "interior")
        with pytest.raises(ValueError):
            m.periodic_mirror(inner)
