"""Quadtree-forest quadrilateral meshes.

A mesh is a forest of quadtrees rooted on an ``nx × ny`` grid of axis-aligned
rectangles.  Leaves are the live cells; refinement splits a cell into four
congruent quadrants and a 2:1 level balance is enforced across faces
(including periodic ones).  Faces are enumerated exactly once each, hanging
faces are represented as the two fine half-faces, and periodic directions
pair opposite boundary locations into single interior-like faces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Set, Tuple

Key = Tuple[int, int, int]  # (level, column, row) within the forest


def _sort_key(key: Key) -> Tuple[int, int, int]:
    level, ix, iy = key
    return (level, iy, ix)


def _child_keys(key: Key) -> Tuple[Key, Key, Key, Key]:
    level, ix, iy = key
    return tuple(
        (level + 1, 2 * ix + dx, 2 * iy + dy) for dy in (0, 1) for dx in (0, 1)
    )


def _parent_key(key: Key) -> Optional[Key]:
    level, ix, iy = key
    if level == 0:
        return None
    return (level - 1, ix >> 1, iy >> 1)


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle (x0, y0) – (x1, y1)."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def widths(self) -> Tuple[float, float]:
        return (self.x1 - self.x0, self.y1 - self.y0)

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def diam(self) -> float:
        return math.hypot(self.x1 - self.x0, self.y1 - self.y0)


@dataclass(frozen=True)
class Cell:
    """A live quadtree leaf: integer position plus physical bounding box."""

    level: int
    ix: int
    iy: int
    bbox: Rect

    @property
    def key(self) -> Key:
        return (self.level, self.ix, self.iy)

    @property
    def diam(self) -> float:
        return self.bbox.diam

    @property
    def sides(self) -> Tuple[float, float]:
        return self.bbox.widths

    @property
    def parent_key(self) -> Optional[Key]:
        return _parent_key(self.key)

    @property
    def child_keys(self) -> Tuple[Key, Key, Key, Key]:
        return _child_keys(self.key)

    @property
    def quadrant(self) -> int:
        """Position within the parent: dx + 2*dy, row-major from south-west."""
        return (self.ix & 1) + 2 * (self.iy & 1)


@dataclass(frozen=True)
class Face:
    """One mesh face.

    ``axis`` is the normal direction (0 → x, 1 → y) and the normal is
    ``sign * e_axis`` pointing out of the ``plus`` cell; interior and periodic
    faces always have ``sign = +1`` with ``plus`` the low-coordinate owner.
    Hanging coarse/fine pairs are stored as the two fine half-faces, each
    carrying which half of the coarse edge it covers (``segment``); quadrature
    spans the fine side.
    """

    axis: int
    kind: str  # "interior" | "boundary" | "periodic"
    sign: int
    plus: int
    minus: int  # -1 for boundary faces
    lo: float  # tangential physical span
    hi: float
    coord: float  # normal-axis coordinate at the plus cell's edge
    coord_minus: float  # same at the minus cell's edge (differs when periodic)
    refined: int  # 0 conforming, +1 plus side finer, -1 minus side finer
    segment: int  # half of the coarse edge covered: 0 low, 1 high, -1 conforming

    @property
    def diam(self) -> float:
        return self.hi - self.lo

    @property
    def normal(self) -> Tuple[float, float]:
        return (float(self.sign), 0.0) if self.axis == 0 else (0.0, float(self.sign))

    @property
    def boundary_side(self) -> Optional[str]:
        """Wall label for boundary faces: west/east/south/north."""
        if self.kind != "boundary":
            return None
        if self.axis == 0:
            return "east" if self.sign > 0 else "west"
        return "north" if self.sign > 0 else "south"


class Mesh:
    """Immutable collection of live cells and their faces."""

    def __init__(
        self,
        domain: Rect,
        nx: int,
        ny: int,
        periodic_x: bool,
        periodic_y: bool,
        leaf_keys: Sequence[Key],
    ):
        self.domain = domain
        self.nx = nx
        self.ny = ny
        self.periodic_x = periodic_x
        self.periodic_y = periodic_y
        keys = sorted(leaf_keys, key=_sort_key)
        self.cells: List[Cell] = [self._make_cell(k) for k in keys]
        self.cell_index: Dict[Key, int] = {c.key: i for i, c in enumerate(self.cells)}
        self.faces: List[Face] = self._build_faces()

    # -- geometry -----------------------------------------------------------

    def _make_cell(self, key: Key) -> Cell:
        level, ix, iy = key
        wx = (self.domain.x1 - self.domain.x0) / (self.nx << level)
        wy = (self.domain.y1 - self.domain.y0) / (self.ny << level)
        x0 = self.domain.x0 + ix * wx
        y0 = self.domain.y0 + iy * wy
        return Cell(level, ix, iy, Rect(x0, y0, x0 + wx, y0 + wy))

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    @property
    def area(self) -> float:
        return sum(c.bbox.area for c in self.cells)

    @property
    def min_diam(self) -> float:
        return min(c.diam for c in self.cells)

    @property
    def min_side(self) -> float:
        return min(min(c.sides) for c in self.cells)

    @property
    def max_level(self) -> int:
        return max(c.level for c in self.cells)

    def periodic(self, axis: int) -> bool:
        return self.periodic_x if axis == 0 else self.periodic_y

    def level_width(self, axis: int, level: int) -> int:
        return (self.nx if axis == 0 else self.ny) << level

    # -- face enumeration ----------------------------------------------------

    def _leaf_towards(self, key: Key, axis: int, step: int) -> Tuple[str, Optional[Key]]:
        """Locate the leaf across one side of ``key`` at the same or coarser level.

        Returns ("boundary", None) outside a non-periodic wall, ("leaf", k) when
        a leaf at level ≤ key level covers the adjacent region, or
        ("finer", None) when that region is subdivided more finely.
        """
        level, ix, iy = key
        pos = [ix, iy]
        pos[axis] += step
        width = self.level_width(axis, level)
        if pos[axis] < 0 or pos[axis] >= width:
            if not self.periodic(axis):
                return ("boundary", None)
            pos[axis] %= width
        cand: Optional[Key] = (level, pos[0], pos[1])
        leaf_set = self.cell_index
        while cand is not None:
            if cand in leaf_set:
                return ("leaf", cand)
            cand = _parent_key(cand)
        return ("finer", None)

    def _build_faces(self) -> List[Face]:
        faces: List[Face] = []
        for cell in self.cells:
            level, ix, iy = cell.key
            b = cell.bbox
            # low-side domain walls are owned by the touching cell
            if ix == 0 and not self.periodic_x:
                faces.append(
                    Face(0, "boundary", -1, self.cell_index[cell.key], -1,
                         b.y0, b.y1, b.x0, b.x0, 0, -1)
                )
            if iy == 0 and not self.periodic_y:
                faces.append(
                    Face(1, "boundary", -1, self.cell_index[cell.key], -1,
                         b.x0, b.x1, b.y0, b.y0, 0, -1)
                )
            faces.extend(self._scan_high_side(cell, axis=0))
            faces.extend(self._scan_high_side(cell, axis=1))
        return faces

    def _scan_high_side(self, cell: Cell, axis: int) -> List[Face]:
        """Faces on the +axis side of ``cell`` (each face found exactly once)."""
        level, ix, iy = cell.key
        b = cell.bbox
        me = self.cell_index[cell.key]
        span = (b.y0, b.y1) if axis == 0 else (b.x0, b.x1)
        coord = b.x1 if axis == 0 else b.y1
        pos = [ix, iy]
        width = self.level_width(axis, level)
        wrapped = pos[axis] + 1 == width
        if wrapped and not self.periodic(axis):
            return [Face(axis, "boundary", 1, me, -1, span[0], span[1],
                         coord, coord, 0, -1)]
        pos[axis] = (pos[axis] + 1) % width
        kind = "periodic" if wrapped else "interior"
        target: Key = (level, pos[0], pos[1])
        tangent = 1 - axis
        if target in self.cell_index:
            other = self.cells[self.cell_index[target]]
            cm = (other.bbox.x0 if axis == 0 else other.bbox.y0)
            return [Face(axis, kind, 1, me, self.cell_index[target],
                         span[0], span[1], coord, cm, 0, -1)]
        parent = _parent_key(target)
        if parent is not None and parent in self.cell_index:
            other = self.cells[self.cell_index[parent]]
            cm = (other.bbox.x0 if axis == 0 else other.bbox.y0)
            segment = (iy if axis == 0 else ix) & 1
            return [Face(axis, kind, 1, me, self.cell_index[parent],
                         span[0], span[1], coord, cm, 1, segment)]
        # the high side is one level finer: two half-faces, spans from the fine side
        out: List[Face] = []
        tl, tx, ty = level + 1, 2 * pos[0], 2 * pos[1]
        for half in (0, 1):
            cpos = [tx, ty]
            cpos[tangent] += half
            ck: Key = (tl, cpos[0], cpos[1])
            if ck not in self.cell_index:
                raise RuntimeError("mesh violates 2:1 balance across a face")
            other = self.cells[self.cell_index[ck]]
            ob = other.bbox
            ospan = (ob.y0, ob.y1) if axis == 0 else (ob.x0, ob.x1)
            cm = ob.x0 if axis == 0 else ob.y0
            out.append(Face(axis, kind, 1, me, self.cell_index[ck],
                            ospan[0], ospan[1], coord, cm, -1, half))
        return out

    # -- periodic pairing ----------------------------------------------------

    def periodic_mirror(self, face: Face) -> Face:
        """The same periodic identification described from the other side.

        Swaps the two owners and the two edge coordinates; applying the mirror
        twice returns the original face record (pairing is an involution).
        """
        if face.kind != "periodic":
            raise ValueError("periodic_mirror is defined for periodic faces only")
        return replace(
            face,
            plus=face.minus,
            minus=face.plus,
            coord=face.coord_minus,
            coord_minus=face.coord,
            refined=-face.refined,
        )


def cell_diam(cell: Cell) -> float:
    """Euclidean diagonal of the cell bounding box."""
    return cell.diam


def face_diam(face: Face) -> float:
    """Physical length of the face (the fine side of a hanging pair)."""
    return face.diam


def build_uniform(
    nx: int,
    ny: int,
    domain: Rect,
    periodic_x: bool = False,
    periodic_y: bool = False,
) -> Mesh:
    """Uniform level-0 forest of ``nx × ny`` cells over ``domain``."""
    if nx < 1 or ny < 1:
        raise ValueError(f"cell counts must be positive, got {nx} x {ny}")
    if not (domain.x1 > domain.x0 and domain.y1 > domain.y0):
        raise ValueError("domain must have positive side lengths")
    keys = [(0, ix, iy) for iy in range(ny) for ix in range(nx)]
    return Mesh(domain, nx, ny, periodic_x, periodic_y, keys)


@dataclass(frozen=True)
class MeshTransfer:
    """Cell-by-cell provenance of a new mesh relative to the one it came from.

    ``entries[i]`` describes new cell ``i``:
      ("same", old_index)                  unchanged cell
      ("refined", old_index, quadrant)     new cell is one quadrant of an old cell
      ("coarsened", (i0, i1, i2, i3))      new cell merges four old cells,
                                           listed in quadrant order
    """

    entries: Tuple[tuple, ...]


def adapt(
    mesh: Mesh,
    refine_flags: Sequence[int],
    coarsen_flags: Sequence[int],
) -> Tuple[Mesh, MeshTransfer]:
    """Split/merge flagged cells, then restore 2:1 balance (refinement wins).

    Coarsening requires all four siblings flagged and is suppressed wherever
    the merged cell would break balance.  Returns the new mesh and the
    provenance map used to transfer fields.
    """
    ncells = mesh.num_cells
    for idx in list(refine_flags) + list(coarsen_flags):
        if not (0 <= idx < ncells):
            raise ValueError(f"flag references cell {idx} outside 0..{ncells - 1}")
    refine: Set[Key] = {mesh.cells[i].key for i in refine_flags}
    coarsen: Set[Key] = {mesh.cells[i].key for i in coarsen_flags} - refine

    leaves: Set[Key] = set(mesh.cell_index)
    origin: Dict[Key, tuple] = {
        key: ("same", idx) for key, idx in mesh.cell_index.items()
    }

    def split(key: Key) -> None:
        prov = origin.pop(key)
        if prov[0] != "same":
            raise RuntimeError("a cell created by this adaptation required splitting")
        leaves.remove(key)
        for q, ck in enumerate(_child_keys(key)):
            leaves.add(ck)
            origin[ck] = ("refined", prov[1], q)

    for key in sorted(refine, key=_sort_key):
        if key in leaves:
            split(key)

    # balance ripple: a leaf two or more levels coarser than a face neighbor splits
    probe = Mesh.__new__(Mesh)
    probe.nx, probe.ny = mesh.nx, mesh.ny
    probe.periodic_x, probe.periodic_y = mesh.periodic_x, mesh.periodic_y
    while True:
        probe.cell_index = dict.fromkeys(leaves)
        too_coarse: Set[Key] = set()
        for key in leaves:
            for axis in (0, 1):
                for step in (-1, 1):
                    status, nb = probe._leaf_towards(key, axis, step)
                    if status == "leaf" and key[0] - nb[0] >= 2:
                        too_coarse.add(nb)
        if not too_coarse:
            break
        for key in sorted(too_coarse, key=_sort_key):
            if key in leaves:
                split(key)

    # coarsening: full sibling groups only, suppressed if balance would break
    groups: Dict[Key, Set[Key]] = {}
    for key in coarsen:
        if key in leaves and origin[key][0] == "same":
            parent = _parent_key(key)
            if parent is not None:
                groups.setdefault(parent, set()).add(key)
    probe.cell_index = dict.fromkeys(leaves)
    for parent in sorted(groups, key=_sort_key):
        children = _child_keys(parent)
        if groups[parent] != set(children):
            continue
        # the merged cell may not sit next to anything finer than its children
        safe = True
        for ck in children:
            level, ix, iy = ck
            for axis in (0, 1):
                step = 1 if ((ix if axis == 0 else iy) & 1) else -1
                status, _ = probe._leaf_towards(ck, axis, step)
                if status == "finer":
                    safe = False
        if not safe:
            continue
        old = tuple(origin.pop(ck)[1] for ck in children)
        for ck in children:
            leaves.remove(ck)
        leaves.add(parent)
        origin[parent] = ("coarsened", old)
        probe.cell_index = dict.fromkeys(leaves)

    new_mesh = Mesh(
        mesh.domain, mesh.nx, mesh.ny, mesh.periodic_x, mesh.periodic_y, leaves
    )
    entries = tuple(origin[c.key] for c in new_mesh.cells)
    return new_mesh, MeshTransfer(entries)
