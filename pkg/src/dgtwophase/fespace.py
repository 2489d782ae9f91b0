"""Discontinuous tensor-product nodal polynomial spaces on quadrilaterals.

Scalar and two-component spaces Q_k are spanned by Lagrange polynomials on
Gauss-Lobatto points, tensorized per direction.  Cells carry independent
coefficient blocks (no continuity), laid out component-major then node-major
with the x index fastest: local dof = c*(k+1)^2 + (i + (k+1)*j).

Cell mappings are affine (axis-aligned rectangles), so reference gradients
convert to physical ones by dividing by the cell side lengths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial import legendre as npleg

from .mesh import Face, Mesh


def gauss_lobatto_points(degree: int) -> np.ndarray:
    """Gauss-Lobatto nodes on [0,1]: endpoints plus roots of P'_degree."""
    if degree < 1:
        raise ValueError(f"degree must be at least 1, got {degree}")
    if degree == 1:
        interior = np.empty(0)
    else:
        coeffs = np.zeros(degree + 1)
        coeffs[degree] = 1.0
        interior = np.sort(npleg.legroots(npleg.legder(coeffs)))
    pts = np.concatenate([[-1.0], interior, [1.0]])
    pts = 0.5 * (pts - pts[::-1])  # enforce exact symmetry about 0
    return 0.5 * (pts + 1.0)


@dataclass(frozen=True)
class QuadratureRule:
    """1D Gauss-Legendre rule on [0,1]; tensorize for cells."""

    points: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return len(self.points)

    def tensor(self) -> Tuple[np.ndarray, np.ndarray]:
        """2D tensor rule: points (n^2, 2) with x fastest, weights (n^2,)."""
        px = np.tile(self.points, self.n)
        py = np.repeat(self.points, self.n)
        w = (self.weights[:, None] * self.weights[None, :]).ravel()
        return np.column_stack([px, py]), w


def gauss_points(q: int) -> QuadratureRule:
    """q-point Gauss-Legendre rule mapped to [0,1] (weights sum to 1)."""
    if q < 1:
        raise ValueError(f"quadrature order must be at least 1, got {q}")
    x, w = npleg.leggauss(q)
    return QuadratureRule(0.5 * (x + 1.0), 0.5 * w)


class Basis1D:
    """Lagrange nodal basis for a 1D point set, with derivative tables."""

    def __init__(self, nodes: np.ndarray):
        self.nodes = np.asarray(nodes, dtype=float)
        self._polys = []
        self._derivs = []
        for i, xi in enumerate(self.nodes):
            p = Polynomial.fromroots(np.delete(self.nodes, i))
            p = p / p(xi)
            self._polys.append(p)
            self._derivs.append(p.deriv())

    @property
    def n(self) -> int:
        return len(self.nodes)

    def values(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.stack([p(x) for p in self._polys], axis=1)

    def derivatives(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.stack([p(x) for p in self._derivs], axis=1)


class NodalSpace:
    """Q_degree nodal space with 1 or 2 components."""

    def __init__(self, degree: int, components: int = 1):
        if degree < 1:
            raise ValueError(f"degree must be at least 1, got {degree}")
        if components not in (1, 2):
            raise ValueError(f"components must be 1 or 2, got {components}")
        self.degree = degree
        self.components = components
        self.nodes_1d = gauss_lobatto_points(degree)
        self.basis_1d = Basis1D(self.nodes_1d)
        self.n1d = degree + 1
        self.nodes_per_cell = self.n1d * self.n1d
        self.block = self.nodes_per_cell * components

    @property
    def nodes_2d(self) -> np.ndarray:
        """Reference node coordinates, (nodes_per_cell, 2), x index fastest."""
        g = self.nodes_1d
        return np.column_stack([np.tile(g, self.n1d), np.repeat(g, self.n1d)])

    def tabulate(self, points: np.ndarray) -> np.ndarray:
        """Scalar basis values at reference points: (npts, nodes_per_cell)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        vx = self.basis_1d.values(pts[:, 0])
        vy = self.basis_1d.values(pts[:, 1])
        return (vy[:, :, None] * vx[:, None, :]).reshape(len(pts), -1)

    def tabulate_gradients(self, points: np.ndarray) -> np.ndarray:
        """Reference gradients at reference points: (npts, nodes_per_cell, 2)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        vx = self.basis_1d.values(pts[:, 0])
        vy = self.basis_1d.values(pts[:, 1])
        dx = self.basis_1d.derivatives(pts[:, 0])
        dy = self.basis_1d.derivatives(pts[:, 1])
        gx = (vy[:, :, None] * dx[:, None, :]).reshape(len(pts), -1)
        gy = (dy[:, :, None] * vx[:, None, :]).reshape(len(pts), -1)
        return np.stack([gx, gy], axis=2)


@dataclass(frozen=True)
class DofLayout:
    """Contiguous per-cell coefficient blocks of uniform size."""

    block: int
    num_cells: int

    @property
    def total(self) -> int:
        return self.block * self.num_cells

    def offset(self, cell_index: int) -> int:
        return cell_index * self.block

    def cell_slice(self, cell_index: int) -> slice:
        return slice(cell_index * self.block, (cell_index + 1) * self.block)


@dataclass
class FieldVector:
    """Coefficients of one discontinuous field over a mesh."""

    space: NodalSpace
    mesh: Mesh
    layout: DofLayout
    data: np.ndarray

    @classmethod
    def zeros(cls, space: NodalSpace, mesh: Mesh) -> "FieldVector":
        layout = DofLayout(space.block, mesh.num_cells)
        return cls(space, mesh, layout, np.zeros(layout.total))

    def copy(self) -> "FieldVector":
        return FieldVector(self.space, self.mesh, self.layout, self.data.copy())

    def cell_block(self, cell_index: int) -> np.ndarray:
        """View of one cell's coefficients, (components, nodes_per_cell)."""
        return self.data[self.layout.cell_slice(cell_index)].reshape(
            self.space.components, self.space.nodes_per_cell
        )

    def blocks(self) -> np.ndarray:
        """View of all coefficients, (num_cells, components, nodes_per_cell)."""
        return self.data.reshape(
            self.layout.num_cells, self.space.components, self.space.nodes_per_cell
        )


def eval_basis(space: NodalSpace, index: int, point) -> Tuple[float, np.ndarray]:
    """Value and reference gradient of one local basis function.

    For two-component spaces the index selects (component, node) but the
    returned scalar factor is component-independent.
    """
    if not (0 <= index < space.block):
        raise ValueError(f"basis index {index} outside 0..{space.block - 1}")
    node = index % space.nodes_per_cell
    pt = np.asarray(point, dtype=float).reshape(1, 2)
    value = float(space.tabulate(pt)[0, node])
    grad = space.tabulate_gradients(pt)[0, node].copy()
    return value, grad


def _sample(f: Callable, x: np.ndarray, y: np.ndarray, components: int) -> np.ndarray:
    """Evaluate a user function at point arrays, (components, npts)."""
    try:
        v = f(x, y)
        if components == 1:
            return np.broadcast_to(np.asarray(v, dtype=float), x.shape).reshape(1, -1)
        fx, fy = v
        return np.stack(
            [
                np.broadcast_to(np.asarray(fx, dtype=float), x.shape),
                np.broadcast_to(np.asarray(fy, dtype=float), x.shape),
            ]
        )
    except (TypeError, ValueError):
        out = np.empty((components, x.size))
        for a in range(x.size):
            va = f(float(x[a]), float(y[a]))
            out[:, a] = va if components > 1 else (va,)
        return out


def interpolate(space: NodalSpace, mesh: Mesh, f: Callable) -> FieldVector:
    """Nodal interpolant: coefficient j equals f at the image of node j."""
    layout = DofLayout(space.block, mesh.num_cells)
    data = np.empty(layout.total)
    ref = space.nodes_2d
    for i, cell in enumerate(mesh.cells):
        b = cell.bbox
        x = b.x0 + ref[:, 0] * (b.x1 - b.x0)
        y = b.y0 + ref[:, 1] * (b.y1 - b.y0)
        data[layout.cell_slice(i)] = _sample(f, x, y, space.components).ravel()
    if not np.isfinite(data).all():
        raise ValueError("interpolated function produced non-finite values")
    return FieldVector(space, mesh, layout, data)


def evaluate_in_cell(
    field: FieldVector,
    cell_index: int,
    ref_points: np.ndarray,
    gradients: bool = False,
):
    """Field values (npts, components) and optionally physical gradients
    (npts, components, 2) at reference points of one cell."""
    space = field.space
    pts = np.atleast_2d(np.asarray(ref_points, dtype=float))
    tab = space.tabulate(pts)
    coeffs = field.cell_block(cell_index)
    values = tab @ coeffs.T
    if not gradients:
        return values
    gtab = space.tabulate_gradients(pts)
    hx, hy = field.mesh.cells[cell_index].sides
    grads = np.einsum("pnd,cn->pcd", gtab, coeffs)
    grads[:, :, 0] /= hx
    grads[:, :, 1] /= hy
    return values, grads


def integrate_cell(
    field_or_integrand,
    cell_index: int = 0,
    rule: Optional[QuadratureRule] = None,
    mesh: Optional[Mesh] = None,
    component: int = 0,
) -> float:
    """Quadrature integral over one physical cell.

    Accepts a FieldVector (integrates the given component) or a callable
    f(x, y); callables require the mesh argument.
    """
    if isinstance(field_or_integrand, FieldVector):
        field = field_or_integrand
        mesh = field.mesh
        if rule is None:
            rule = gauss_points(field.space.degree + 2)
    else:
        if mesh is None:
            raise ValueError("integrating a bare function requires a mesh")
        if rule is None:
            raise ValueError("integrating a bare function requires a rule")
        field = None
    cell = mesh.cells[cell_index]
    pts, w = rule.tensor()
    if field is not None:
        vals = evaluate_in_cell(field, cell_index, pts)[:, component]
    else:
        b = cell.bbox
        x = b.x0 + pts[:, 0] * (b.x1 - b.x0)
        y = b.y0 + pts[:, 1] * (b.y1 - b.y0)
        vals = np.broadcast_to(
            np.asarray(field_or_integrand(x, y), dtype=float), x.shape
        )
    return float(np.dot(w, vals) * cell.bbox.area)


def face_reference_points(
    mesh: Mesh, face: Face, rule: QuadratureRule, side: str
) -> Tuple[int, np.ndarray]:
    """Cell index and reference coordinates of face quadrature points.

    Quadrature always spans the face itself (the fine side of a hanging
    pair); on the coarse side the points land in a half-edge sub-interval.
    """
    t = face.lo + rule.points * (face.hi - face.lo)
    if side == "plus":
        icell = face.plus
        edge_hi = face.sign > 0  # boundary faces with sign -1 sit on the low edge
    elif side == "minus":
        if face.minus < 0:
            raise ValueError("boundary faces have no minus side")
        icell = face.minus
        edge_hi = False
    else:
        raise ValueError(f"side must be 'plus' or 'minus', got {side!r}")
    cell = mesh.cells[icell]
    b = cell.bbox
    if face.axis == 0:
        tan_lo, tan_w = b.y0, b.y1 - b.y0
    else:
        tan_lo, tan_w = b.x0, b.x1 - b.x0
    ref_t = (t - tan_lo) / tan_w
    ref_n = np.full_like(ref_t, 1.0 if edge_hi else 0.0)
    if face.axis == 0:
        return icell, np.column_stack([ref_n, ref_t])
    return icell, np.column_stack([ref_t, ref_n])


def evaluate_on_face(
    field: FieldVector, face: Face, rule: QuadratureRule, side: str = "plus"
):
    """Trace values (nq, components) and physical gradients (nq, components, 2)
    of a field on one side of a face."""
    icell, ref = face_reference_points(field.mesh, face, rule, side)
    return evaluate_in_cell(field, icell, ref, gradients=True)
