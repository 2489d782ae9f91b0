"""Benchmark observables measured on solver states.

All quantities are quadrature evaluations of regularized integrals of the
interface field: the bubble phase is where the indicator vanishes, so its
area is the integral of (1 - phi), and interface length is approximated by
the total variation integral of |grad phi| (which carries an O(eps) bias
from the profile thickness; no iso-contour is ever extracted). Quotients
with a vanishing denominator raise DegenerateObservableError instead of
returning non-finite numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ._discrete import Discretization
from .errors import DegenerateObservableError
from .fespace import FieldVector
from .levelset import LevelSetField

__all__ = [
    "ObservableRecord",
    "ObservableSeries",
    "bubble_area",
    "center_of_mass",
    "rise_velocity",
    "circularity",
    "area_variation",
    "velocity_norms",
    "max_speed",
    "courant",
]

#: Slack on the isoperimetric cap chi <= 1 admitted for regularized profiles.
CIRCULARITY_TOLERANCE = 5e-2


# ---------------------------------------------------------------------------
# series container


@dataclass(frozen=True)
class ObservableRecord:
    """One time-stamped row of benchmark observables."""

    t: float
    x_c: float
    y_c: float
    u_c: float
    v_c: float
    chi: float
    area: float
    area_rel_var: float
    u_max: float
    courant_u: float
    courant_acoustic: float

    FIELDS = ("t", "x_c", "y_c", "u_c", "v_c", "chi", "area",
              "area_rel_var", "u_max", "courant_u", "courant_acoustic")

    def astuple(self) -> Tuple[float, ...]:
        return tuple(getattr(self, name) for name in self.FIELDS)


class ObservableSeries:
    """Append-only record list with strictly increasing time stamps."""

    def __init__(self) -> None:
        self.records: List[ObservableRecord] = []

    def append(self, record: ObservableRecord) -> None:
        if self.records and record.t <= self.records[-1].t:
            raise ValueError(
                f"time stamps must increase: {record.t} after "
                f"{self.records[-1].t}")
        if not (0.0 < record.chi <= 1.0 + CIRCULARITY_TOLERANCE):
            raise ValueError(f"circularity {record.chi} out of (0, 1.05]")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def column(self, name: str) -> List[float]:
        return [getattr(r, name) for r in self.records]


# ---------------------------------------------------------------------------
# quadrature helpers


def _discretization(field: FieldVector,
                    disc: Optional[Discretization]) -> Discretization:
    if disc is not None:
        return disc
    return Discretization(field.mesh, field.space.degree + 2)


def _cell_quad_coords(disc: Discretization) -> Tuple[np.ndarray, np.ndarray]:
    """Physical quadrature coordinates, (ne, nq2) per axis."""
    cells = disc.mesh.cells
    x0 = np.array([c.bbox.x0 for c in cells])
    y0 = np.array([c.bbox.y0 for c in cells])
    wx = np.array([c.bbox.x1 - c.bbox.x0 for c in cells])
    wy = np.array([c.bbox.y1 - c.bbox.y0 for c in cells])
    px, py = disc.points_2d[:, 0], disc.points_2d[:, 1]
    return (x0[:, None] + wx[:, None] * px[None, :],
            y0[:, None] + wy[:, None] * py[None, :])


def _integrate(disc: Discretization, values: np.ndarray) -> float:
    """Sum of cell integrals of quadrature-point samples (ne, nq2)."""
    per_cell = values @ disc.weights_2d
    return float(per_cell @ disc.cell_area)


def _bubble_fraction(phi: LevelSetField,
                     disc: Discretization) -> np.ndarray:
    return 1.0 - disc.cell_values(phi.field)[:, 0, :]


# ---------------------------------------------------------------------------
# interface observables


def bubble_area(phi: LevelSetField,
                disc: Optional[Discretization] = None) -> float:
    """Area of the bubble phase, the integral of (1 - phi)."""
    disc = _discretization(phi.field, disc)
    return _integrate(disc, _bubble_fraction(phi, disc))


def center_of_mass(phi: LevelSetField,
                   disc: Optional[Discretization] = None
                   ) -> Tuple[float, float]:
    """Bubble centroid: integral of x (1 - phi) over integral of (1 - phi)."""
    disc = _discretization(phi.field, disc)
    frac = _bubble_fraction(phi, disc)
    area = _integrate(disc, frac)
    if area <= 0.0:
        raise DegenerateObservableError(
            f"bubble area {area:.3e} is not positive")
    x, y = _cell_quad_coords(disc)
    return (_integrate(disc, x * frac) / area,
            _integrate(disc, y * frac) / area)


def rise_velocity(phi: LevelSetField, u: FieldVector,
                  disc: Optional[Discretization] = None
                  ) -> Tuple[float, float]:
    """Bubble-averaged velocity: integral of u (1 - phi) over the area."""
    disc = _discretization(phi.field, disc)
    frac = _bubble_fraction(phi, disc)
    area = _integrate(disc, frac)
    if area <= 0.0:
        raise DegenerateObservableError(
            f"bubble area {area:.3e} is not positive")
    vals = disc.cell_values(u)
    return (_integrate(disc, vals[:, 0, :] * frac) / area,
            _integrate(disc, vals[:, 1, :] * frac) / area)


def circularity(phi: LevelSetField,
                disc: Optional[Discretization] = None) -> float:
    """Perimeter-normalized shape factor 2 sqrt(pi area) / perimeter.

    Equals 1 for a circle; the perimeter proxy is the integral of
    |grad phi|, so values carry the O(eps) regularization bias.
    """
    disc = _discretization(phi.field, disc)
    area = bubble_area(phi, disc)
    grad = disc.cell_gradients(phi.field)[:, 0]
    perimeter = _integrate(disc, np.hypot(grad[..., 0], grad[..., 1]))
    if perimeter <= 0.0:
        raise DegenerateObservableError(
            f"interface perimeter {perimeter:.3e} is not positive")
    return 2.0 * math.sqrt(math.pi * max(area, 0.0)) / perimeter


def area_variation(areas) -> float:
    """Largest relative deviation of the bubble area from its initial value."""
    if isinstance(areas, ObservableSeries):
        values = areas.column("area")
    else:
        values = [float(a) for a in areas]
    if not values:
        raise ValueError("area series is empty")
    a0 = values[0]
    if a0 <= 0.0:
        raise DegenerateObservableError(
            f"initial area {a0:.3e} is not positive")
    return max(abs(a - a0) / a0 for a in values)


# ---------------------------------------------------------------------------
# velocity observables


def velocity_norms(u: FieldVector,
                   disc: Optional[Discretization] = None
                   ) -> Tuple[float, float, float]:
    """(H1, L2, Linf) norms of a vector field.

    L2 and the H1 seminorm come from quadrature; the max norm samples the
    Euclidean magnitude at both quadrature and nodal points.
    """
    disc = _discretization(u, disc)
    vals = disc.cell_values(u)              # (ne, ncomp, nq2)
    grads = disc.cell_gradients(u)          # (ne, ncomp, nq2, 2)
    sq = (vals ** 2).sum(axis=1)
    l2sq = _integrate(disc, sq)
    h1sq = l2sq + _integrate(disc, (grads ** 2).sum(axis=(1, 3)))
    ncomp = u.space.components
    nodal = u.data.reshape(u.mesh.num_cells, ncomp, -1)
    linf = max(np.sqrt(sq.max(initial=0.0)),
               np.sqrt((nodal ** 2).sum(axis=1).max(initial=0.0)))
    return math.sqrt(h1sq), math.sqrt(l2sq), float(linf)


def max_speed(u: FieldVector) -> float:
    """Largest nodal velocity magnitude."""
    ncomp = u.space.components
    nodal = u.data.reshape(u.mesh.num_cells, ncomp, -1)
    if nodal.size == 0:
        return 0.0
    return float(np.sqrt((nodal ** 2).sum(axis=1).max()))


def courant(k: int, dt: float, h: float, speed: float,
            mach: float) -> Tuple[float, float]:
    """Advective and acoustic Courant numbers (k dt U / h, (k/M)(dt/h))."""
    if h <= 0.0:
        raise ValueError("cell size must be positive")
    if mach <= 0.0:
        raise ValueError("Mach number must be positive")
    return k * dt * speed / h, (k / mach) * (dt / h)
