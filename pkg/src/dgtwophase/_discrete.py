"""Batched assembly engine for the discontinuous-Galerkin discretization.

Shared machinery beneath the level-set, flow, adaptation and diagnostic
modules: reference basis tables evaluated once per mesh, faces grouped by
trace layout so every group assembles with one set of tables, and builders
that turn quadrature-point coefficient arrays into block-sparse operators or
residual vectors through the accumulation kernels.

Conventions
-----------
* Cells are the reference square [0, 1]^2 scaled by the cell widths; volume
  quadrature weights sum to one, so the physical measure is ``area(K)`` and
  reference derivatives are scaled by ``1/hx`` or ``1/hy``.
* Faces carry the normal ``sign * e_axis`` pointing out of the ``plus`` cell;
  interior and periodic faces always have ``sign = +1`` with ``plus`` the
  low-coordinate owner.  Hanging pairs integrate over the fine half-edge.
* Coefficient arrays handed to the builders contain *physics only*; the
  quadrature weights, physical measures and derivative scalings are applied
  internally.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from ._kernels import rank_one_blocks, scatter_add_blocks, scatter_add_vector
from .fespace import FieldVector, NodalSpace, gauss_points
from .linalg import SparseMatrix
from .mesh import Mesh

# Accumulation buffer budget, in float64 entries (~32 MB per chunk).
_CHUNK_DOUBLES = 4_000_000

_TABLE_CODES = ("v", "dx", "dy")


@dataclass(frozen=True)
class VolumeTables:
    """Reference basis tables at the volume quadrature points."""

    V: np.ndarray  # (nq2, nn) values
    Dx: np.ndarray  # (nq2, nn) reference x-derivatives
    Dy: np.ndarray  # (nq2, nn) reference y-derivatives

    def table(self, code: str) -> np.ndarray:
        if code == "v":
            return self.V
        if code == "dx":
            return self.Dx
        if code == "dy":
            return self.Dy
        raise ValueError(f"unknown table code {code!r}")


@dataclass(frozen=True)
class TraceTables:
    """Reference basis tables at one side's face quadrature points."""

    V: np.ndarray
    Dx: np.ndarray
    Dy: np.ndarray

    def table(self, code: str) -> np.ndarray:
        if code == "v":
            return self.V
        if code == "dx":
            return self.Dx
        if code == "dy":
            return self.Dy
        raise ValueError(f"unknown table code {code!r}")


@dataclass
class FaceGroup:
    """Faces sharing one trace layout (same axis, side refinement, wall)."""

    axis: int
    sign: int
    boundary: bool
    wall: Optional[str]  # west/east/south/north for walls, else None
    refined: int  # 0 conforming, +1 plus side finer, -1 minus side finer
    segment: int  # half of the coarse edge covered: 0 low, 1 high, -1 none
    face_index: np.ndarray  # indices into mesh.faces
    plus: np.ndarray  # plus-side cell index per face
    minus: Optional[np.ndarray]  # minus-side cell index (None at walls)
    length: np.ndarray  # physical face length (fine span when hanging)
    inv_h_plus: np.ndarray  # (nf, 2) reciprocal cell widths, plus side
    inv_h_minus: Optional[np.ndarray]
    diam_plus: np.ndarray  # cell diameters for penalty scalings
    diam_minus: Optional[np.ndarray]

    @property
    def num_faces(self) -> int:
        return len(self.plus)

    def cells(self, side: str) -> np.ndarray:
        if side == "plus":
            return self.plus
        if side == "minus":
            if self.minus is None:
                raise ValueError("boundary faces have no minus side")
            return self.minus
        raise ValueError(f"unknown face side {side!r}")

    def inv_h(self, side: str) -> np.ndarray:
        if side == "plus":
            return self.inv_h_plus
        if side == "minus":
            if self.inv_h_minus is None:
                raise ValueError("boundary faces have no minus side")
            return self.inv_h_minus
        raise ValueError(f"unknown face side {side!r}")


class BlockPattern:
    """Block-sparse layout over cells with face-neighbor coupling.

    The layout is shared by every nodal space on the mesh; only the block
    size differs.  ``slot_diag[r]`` addresses the diagonal block of row
    ``r``; per face group, ``slots(gid)`` maps (test side, trial side) pairs
    to block positions.
    """

    def __init__(self, mesh: Mesh, groups: List[FaceGroup]):
        ncells = mesh.num_cells
        adjacency = [{r} for r in range(ncells)]
        for group in groups:
            if group.boundary:
                continue
            for p, m in zip(group.plus.tolist(), group.minus.tolist()):
                adjacency[p].add(m)
                adjacency[m].add(p)
        indptr = np.zeros(ncells + 1, dtype=np.int32)
        columns: List[int] = []
        slot: Dict[Tuple[int, int], int] = {}
        position = 0
        for row in range(ncells):
            for col in sorted(adjacency[row]):
                slot[(row, col)] = position
                columns.append(col)
                position += 1
            indptr[row + 1] = position
        self.num_block_rows = ncells
        self.indptr = indptr
        self.indices = np.asarray(columns, dtype=np.int32)
        self.nnzb = position
        self.slot_diag = np.fromiter(
            (slot[(r, r)] for r in range(ncells)), dtype=np.intp, count=ncells
        )
        self._group_slots: List[Dict[Tuple[str, str], np.ndarray]] = []
        for group in groups:
            if group.boundary:
                pp = self.slot_diag[group.plus]
                self._group_slots.append({("plus", "plus"): pp})
                continue
            pairs = list(zip(group.plus.tolist(), group.minus.tolist()))
            pm = np.fromiter((slot[(p, m)] for p, m in pairs), dtype=np.intp,
                             count=len(pairs))
            mp = np.fromiter((slot[(m, p)] for p, m in pairs), dtype=np.intp,
                             count=len(pairs))
            self._group_slots.append({
                ("plus", "plus"): self.slot_diag[group.plus],
                ("plus", "minus"): pm,
                ("minus", "plus"): mp,
                ("minus", "minus"): self.slot_diag[group.minus],
            })

    def slots(self, gid: int) -> Dict[Tuple[str, str], np.ndarray]:
        return self._group_slots[gid]


def _build_face_groups(mesh: Mesh) -> List[FaceGroup]:
    buckets: Dict[tuple, List[int]] = {}
    for fi, face in enumerate(mesh.faces):
        if face.kind == "boundary":
            key = ("wall", face.axis, face.sign)
        else:
            key = ("pair", face.axis, face.refined, face.segment)
        buckets.setdefault(key, []).append(fi)

    hx = np.array([c.bbox.x1 - c.bbox.x0 for c in mesh.cells])
    hy = np.array([c.bbox.y1 - c.bbox.y0 for c in mesh.cells])
    inv_h = np.column_stack([1.0 / hx, 1.0 / hy])
    diam = np.hypot(hx, hy)

    groups: List[FaceGroup] = []
    for key in sorted(buckets):
        idx = np.asarray(buckets[key], dtype=np.intp)
        faces = [mesh.faces[i] for i in idx]
        plus = np.fromiter((f.plus for f in faces), dtype=np.intp,
                           count=len(faces))
        length = np.fromiter((f.hi - f.lo for f in faces), dtype=np.float64,
                             count=len(faces))
        if key[0] == "wall":
            _, axis, sign = key
            face0 = faces[0]
            groups.append(FaceGroup(
                axis=axis, sign=sign, boundary=True,
                wall=face0.boundary_side, refined=0, segment=-1,
                face_index=idx, plus=plus, minus=None, length=length,
                inv_h_plus=inv_h[plus], inv_h_minus=None,
                diam_plus=diam[plus], diam_minus=None,
            ))
        else:
            _, axis, refined, segment = key
            minus = np.fromiter((f.minus for f in faces), dtype=np.intp,
                                count=len(faces))
            groups.append(FaceGroup(
                axis=axis, sign=1, boundary=False, wall=None,
                refined=refined, segment=segment,
                face_index=idx, plus=plus, minus=minus, length=length,
                inv_h_plus=inv_h[plus], inv_h_minus=inv_h[minus],
                diam_plus=diam[plus], diam_minus=diam[minus],
            ))
    return groups


class Discretization:
    """Per-mesh quadrature tables, face groups and assembly builders."""

    def __init__(self, mesh: Mesh, quad_points: int):
        if quad_points < 1:
            raise ValueError("quad_points must be positive")
        self.mesh = mesh
        self.quad_points = quad_points
        rule = gauss_points(quad_points)
        self.rule = rule
        self.points_1d = rule.points
        self.weights_1d = rule.weights
        pts2, w2 = rule.tensor()
        self.points_2d = pts2  # (nq2, 2), x fastest
        self.weights_2d = w2

        hx = np.array([c.bbox.x1 - c.bbox.x0 for c in mesh.cells])
        hy = np.array([c.bbox.y1 - c.bbox.y0 for c in mesh.cells])
        self.cell_hx = hx
        self.cell_hy = hy
        self.cell_area = hx * hy
        self.cell_inv_hx = 1.0 / hx
        self.cell_inv_hy = 1.0 / hy
        self.cell_diam = np.hypot(hx, hy)

        self.face_groups = _build_face_groups(mesh)
        self._volume_tables: Dict[int, VolumeTables] = {}
        self._trace_tables: Dict[Tuple[int, int, str], TraceTables] = {}
        self._pattern: Optional[BlockPattern] = None
        self._projectors: Dict[int, np.ndarray] = {}

    # ------------------------------------------------------------------
    # tables and layout
    # ------------------------------------------------------------------
    @property
    def pattern(self) -> BlockPattern:
        if self._pattern is None:
            self._pattern = BlockPattern(self.mesh, self.face_groups)
        return self._pattern

    def volume_tables(self, space: NodalSpace) -> VolumeTables:
        tables = self._volume_tables.get(space.degree)
        if tables is None:
            V = np.ascontiguousarray(space.tabulate(self.points_2d))
            G = space.tabulate_gradients(self.points_2d)
            tables = VolumeTables(
                V=V,
                Dx=np.ascontiguousarray(G[:, :, 0]),
                Dy=np.ascontiguousarray(G[:, :, 1]),
            )
            self._volume_tables[space.degree] = tables
        return tables

    def _face_reference_points(self, group: FaceGroup, side: str) -> np.ndarray:
        t = self.points_1d
        if side == "plus":
            if group.refined == -1:  # plus side is the coarse side
                t = 0.5 * (t + group.segment)
            normal_ref = 1.0 if group.sign > 0 else 0.0
        elif side == "minus":
            if group.boundary:
                raise ValueError("boundary faces have no minus side")
            if group.refined == +1:  # minus side is the coarse side
                t = 0.5 * (t + group.segment)
            normal_ref = 0.0
        else:
            raise ValueError(f"unknown face side {side!r}")
        n = np.full_like(t, normal_ref)
        if group.axis == 0:
            return np.column_stack([n, t])
        return np.column_stack([t, n])

    def trace_tables(self, gid: int, space: NodalSpace,
                     side: str) -> TraceTables:
        key = (gid, space.degree, side)
        tables = self._trace_tables.get(key)
        if tables is None:
            pts = self._face_reference_points(self.face_groups[gid], side)
            V = np.ascontiguousarray(space.tabulate(pts))
            G = space.tabulate_gradients(pts)
            tables = TraceTables(
                V=V,
                Dx=np.ascontiguousarray(G[:, :, 0]),
                Dy=np.ascontiguousarray(G[:, :, 1]),
            )
            self._trace_tables[key] = tables
        return tables

    # ------------------------------------------------------------------
    # field evaluation
    # ------------------------------------------------------------------
    def cell_values(self, field: FieldVector) -> np.ndarray:
        """Field values at the volume quadrature points: (ne, ncomp, nq2)."""
        coeffs = field.blocks()
        ne, ncomp, nn = coeffs.shape
        V = self.volume_tables(field.space).V
        flat = coeffs.reshape(ne * ncomp, nn) @ V.T
        return flat.reshape(ne, ncomp, -1)

    def cell_gradients(self, field: FieldVector) -> np.ndarray:
        """Physical gradients at volume points: (ne, ncomp, nq2, 2)."""
        coeffs = field.blocks()
        ne, ncomp, nn = coeffs.shape
        tables = self.volume_tables(field.space)
        flat = coeffs.reshape(ne * ncomp, nn)
        gx = (flat @ tables.Dx.T).reshape(ne, ncomp, -1)
        gx = gx * self.cell_inv_hx[:, None, None]
        gy = (flat @ tables.Dy.T).reshape(ne, ncomp, -1)
        gy = gy * self.cell_inv_hy[:, None, None]
        return np.stack([gx, gy], axis=-1)

    def face_values(self, field: FieldVector, gid: int,
                    side: str) -> np.ndarray:
        """Trace values at one side's face points: (nf, ncomp, nq1)."""
        group = self.face_groups[gid]
        cells = group.cells(side)
        coeffs = field.blocks()[cells]
        nf, ncomp, nn = coeffs.shape
        V = self.trace_tables(gid, field.space, side).V
        flat = coeffs.reshape(nf * ncomp, nn) @ V.T
        return flat.reshape(nf, ncomp, -1)

    def face_gradients(self, field: FieldVector, gid: int,
                       side: str) -> np.ndarray:
        """Physical trace gradients at face points: (nf, ncomp, nq1, 2)."""
        group = self.face_groups[gid]
        cells = group.cells(side)
        coeffs = field.blocks()[cells]
        nf, ncomp, nn = coeffs.shape
        tables = self.trace_tables(gid, field.space, side)
        inv_h = group.inv_h(side)
        flat = coeffs.reshape(nf * ncomp, nn)
        gx = (flat @ tables.Dx.T).reshape(nf, ncomp, -1)
        gx = gx * inv_h[:, None, 0:1]
        gy = (flat @ tables.Dy.T).reshape(nf, ncomp, -1)
        gy = gy * inv_h[:, None, 1:2]
        return np.stack([gx, gy], axis=-1)

    # ------------------------------------------------------------------
    # geometry helpers
    # ------------------------------------------------------------------
    def penalty_ratio(self, gid: int) -> np.ndarray:
        """Per-face mean of measure(face)/measure(cell) over the attached
        sides; scales like one over the cell width, as interior-penalty
        coercivity requires."""
        group = self.face_groups[gid]
        inv_p = group.inv_h_plus
        ratio = group.length * inv_p[:, 0] * inv_p[:, 1]
        if group.boundary:
            return ratio
        inv_m = group.inv_h_minus
        return 0.5 * (ratio + group.length * inv_m[:, 0] * inv_m[:, 1])

    def _geometry_factor(self, code: str, group: Optional[FaceGroup],
                         side: Optional[str]) -> Optional[np.ndarray]:
        """Physical scaling for a derivative table, or None for values."""
        if code == "v":
            return None
        axis = 0 if code == "dx" else 1
        if group is None:
            return self.cell_inv_hx if axis == 0 else self.cell_inv_hy
        return group.inv_h(side)[:, axis]

    # ------------------------------------------------------------------
    # builders
    # ------------------------------------------------------------------
    def matrix_builder(self, space: NodalSpace) -> "MatrixBuilder":
        return MatrixBuilder(self, space)

    def rhs_builder(self, space: NodalSpace) -> "RhsBuilder":
        return RhsBuilder(self, space)

    def zeros(self, space: NodalSpace) -> FieldVector:
        return FieldVector.zeros(space, self.mesh)

    # ------------------------------------------------------------------
    # local L2 projection
    # ------------------------------------------------------------------
    def l2_projector(self, space: NodalSpace) -> np.ndarray:
        """Matrix P with coeffs = (values_at_quad) @ P per cell/component.

        The physical cell measure cancels between the mass matrix and the
        right-hand side, so one reference-space projector serves every cell.
        """
        P = self._projectors.get(space.degree)
        if P is None:
            V = self.volume_tables(space).V
            WV = self.weights_2d[:, None] * V
            mass_ref = V.T @ WV
            P = np.linalg.solve(mass_ref, WV.T).T
            self._projectors[space.degree] = P
        return P

    def project_to_space(self, space: NodalSpace,
                         values: np.ndarray) -> FieldVector:
        """Cellwise L2 projection of quadrature-point values onto the space.

        ``values`` is (ne, ncomp, nq2) with ncomp matching the space.
        """
        ne, ncomp, nq2 = values.shape
        if ncomp != space.components:
            raise ValueError("component count does not match the space")
        P = self.l2_projector(space)
        field = FieldVector.zeros(space, self.mesh)
        out = values.reshape(ne * ncomp, nq2) @ P
        field.blocks()[...] = out.reshape(ne, ncomp, -1)
        return field


class MatrixBuilder:
    """Accumulates cell and face bilinear terms into block-sparse storage.

    Coefficient arrays contain physics only — quadrature weights, measures
    and derivative scalings are applied here.  Component offsets place
    scalar sub-blocks inside vector-valued blocks.
    """

    def __init__(self, disc: Discretization, space: NodalSpace):
        self.disc = disc
        self.space = space
        self.nn = space.nodes_per_cell
        pattern = disc.pattern
        self.pattern = pattern
        self.data = np.zeros((pattern.nnzb, space.block, space.block))

    def _accumulate(self, slots: np.ndarray, coeff: np.ndarray,
                    test_tab: np.ndarray, trial_tab: np.ndarray,
                    row_comp: int, col_comp: int) -> None:
        m = test_tab.shape[1]
        n = trial_tab.shape[1]
        chunk = max(1, _CHUNK_DOUBLES // (m * n))
        row_offset = row_comp * self.nn
        col_offset = col_comp * self.nn
        for start in range(0, len(slots), chunk):
            stop = start + chunk
            blocks = rank_one_blocks(coeff[start:stop], test_tab, trial_tab)
            scatter_add_blocks(self.data, slots[start:stop], blocks,
                               row_offset, col_offset)

    def cell_term(self, coeff: np.ndarray, test: str, trial: str,
                  row_comp: int = 0, col_comp: int = 0) -> None:
        """Add sum_q w_q |K| coeff[e, q] (D test)_i (D trial)_j per cell."""
        disc = self.disc
        eff = coeff * (disc.weights_2d[None, :] * disc.cell_area[:, None])
        for code in (test, trial):
            factor = disc._geometry_factor(code, None, None)
            if factor is not None:
                eff = eff * factor[:, None]
        self._accumulate(disc.pattern.slot_diag, np.ascontiguousarray(eff),
                         disc.volume_tables(self.space).table(test),
                         disc.volume_tables(self.space).table(trial),
                         row_comp, col_comp)

    def face_term(self, gid: int, coeff: np.ndarray, test_side: str,
                  trial_side: str, test: str = "v", trial: str = "v",
                  row_comp: int = 0, col_comp: int = 0) -> None:
        """Add sum_q w_q |e| coeff[f, q] (D test)_i^side (D trial)_j^side."""
        disc = self.disc
        group = disc.face_groups[gid]
        eff = coeff * (disc.weights_1d[None, :] * group.length[:, None])
        for code, side in ((test, test_side), (trial, trial_side)):
            factor = disc._geometry_factor(code, group, side)
            if factor is not None:
                eff = eff * factor[:, None]
        slots = disc.pattern.slots(gid)[(test_side, trial_side)]
        self._accumulate(slots, np.ascontiguousarray(eff),
                         disc.trace_tables(gid, self.space, test_side).table(test),
                         disc.trace_tables(gid, self.space, trial_side).table(trial),
                         row_comp, col_comp)

    def finalize(self) -> SparseMatrix:
        pattern = self.pattern
        size = pattern.num_block_rows * self.space.block
        return SparseMatrix.from_blocks(pattern.indptr, pattern.indices,
                                        self.data, (size, size))


class RhsBuilder:
    """Accumulates cell and face linear terms into a dof vector."""

    def __init__(self, disc: Discretization, space: NodalSpace):
        self.disc = disc
        self.space = space
        self.out = np.zeros((disc.mesh.num_cells, space.components,
                             space.nodes_per_cell))

    def cell_term(self, coeff: np.ndarray, test: str, comp: int = 0) -> None:
        """Add sum_q w_q |K| coeff[e, q] (D test)_i to every cell row."""
        disc = self.disc
        eff = coeff * (disc.weights_2d[None, :] * disc.cell_area[:, None])
        factor = disc._geometry_factor(test, None, None)
        if factor is not None:
            eff = eff * factor[:, None]
        self.out[:, comp, :] += eff @ disc.volume_tables(self.space).table(test)

    def face_term(self, gid: int, coeff: np.ndarray, side: str,
                  test: str = "v", comp: int = 0) -> None:
        """Add sum_q w_q |e| coeff[f, q] (D test)_i^side to the side's rows."""
        disc = self.disc
        group = disc.face_groups[gid]
        eff = coeff * (disc.weights_1d[None, :] * group.length[:, None])
        factor = disc._geometry_factor(test, group, side)
        if factor is not None:
            eff = eff * factor[:, None]
        rows = eff @ disc.trace_tables(gid, self.space, side).table(test)
        scatter_add_vector(self.out[:, comp, :], group.cells(side),
                           np.ascontiguousarray(rows))

    def vector(self) -> np.ndarray:
        return self.out.reshape(-1)
