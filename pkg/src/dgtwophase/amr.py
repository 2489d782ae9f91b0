"""Interface-driven mesh adaptation: indicator, flagging, field transfer.

The refinement indicator is the largest interface-gradient magnitude over
each cell's nodal points; cells crossing the interface band score near
1/(4 eps) while cells away from it score near zero, so fixed thresholds
track the interface. Transfers across an adaptation are polynomial
embedding on refinement (exact) and cellwise L2 projection on coarsening
(the unique projection; restriction of an embedding is the identity).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import mesh as msh
from .errors import ConfigError
from .fespace import FieldVector, NodalSpace, gauss_points
from .levelset import LevelSetField
from .navierstokes import FlowState

__all__ = [
    "AmrPolicy",
    "indicator",
    "flag_cells",
    "transfer_field",
    "adapt_state",
]


@dataclass(frozen=True)
class AmrPolicy:
    """Thresholds and cadence of the adaptation loop."""

    refine_threshold: float = 10.0
    coarsen_threshold: float = 5.0
    max_extra_levels: int = 2
    adapt_interval: int = 5

    def __post_init__(self):
        if not self.coarsen_threshold < self.refine_threshold:
            raise ConfigError(
                "coarsen threshold must lie below the refine threshold")
        if self.max_extra_levels < 0:
            raise ConfigError("max_extra_levels must be non-negative")
        if self.adapt_interval < 1:
            raise ConfigError("adapt_interval must be at least 1")


# ---------------------------------------------------------------------------
# indicator and flagging


def indicator(phi: LevelSetField) -> np.ndarray:
    """Per-cell max of |grad phi| over the field's nodal points."""
    field = phi.field
    space, mesh = field.space, field.mesh
    grads = space.tabulate_gradients(space.nodes_2d)   # (n2d, n2d, 2)
    blocks = field.blocks()[:, 0, :]                   # (ne, n2d)
    gx = blocks @ grads[:, :, 0].T
    gy = blocks @ grads[:, :, 1].T
    widths = np.array([c.bbox.widths for c in mesh.cells])
    gx = gx / widths[:, 0:1]
    gy = gy / widths[:, 1:2]
    return np.hypot(gx, gy).max(axis=1)


def flag_cells(eta: Sequence[float], mesh: msh.Mesh,
               policy: AmrPolicy) -> Tuple[List[int], List[int]]:
    """Indices to refine (capped at max_extra_levels) and to coarsen."""
    refine: List[int] = []
    coarsen: List[int] = []
    for i, cell in enumerate(mesh.cells):
        if eta[i] > policy.refine_threshold:
            if cell.level < policy.max_extra_levels:
                refine.append(i)
        elif eta[i] < policy.coarsen_threshold and cell.level > 0:
            coarsen.append(i)
    return refine, coarsen


# ---------------------------------------------------------------------------
# transfer operators


_OPERATOR_CACHE: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}


def _operators(degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """(embed, restrict), each (4, n, n): child-from-parent evaluation
    matrices and their L2-adjoint restrictions, quadrant order x-fastest."""
    cached = _OPERATOR_CACHE.get(degree)
    if cached is not None:
        return cached
    space = NodalSpace(degree)
    nodes = space.nodes_2d
    rule = gauss_points(degree + 1)
    pts, w2 = rule.tensor()
    vals = space.tabulate(pts)
    mass = vals.T @ (w2[:, None] * vals)
    inv_mass = np.linalg.inv(mass)
    embed = np.empty((4, space.nodes_per_cell, space.nodes_per_cell))
    restrict = np.empty_like(embed)
    for q in range(4):
        shift = np.array([q & 1, q >> 1], dtype=float)
        embed[q] = space.tabulate(0.5 * (nodes + shift))
        restrict[q] = 0.25 * inv_mass @ embed[q].T @ mass
    _OPERATOR_CACHE[degree] = (embed, restrict)
    return embed, restrict


def transfer_field(field: FieldVector, new_mesh: msh.Mesh,
                   transfer: msh.MeshTransfer) -> FieldVector:
    """Carry a field onto an adapted mesh along the cell provenance map."""
    embed, restrict = _operators(field.space.degree)
    out = FieldVector.zeros(field.space, new_mesh)
    old_blocks = field.blocks()
    new_blocks = out.blocks()
    same_new: List[int] = []
    same_old: List[int] = []
    refined: List[List[Tuple[int, int]]] = [[] for _ in range(4)]
    coarsened: List[Tuple[int, tuple]] = []
    for i, entry in enumerate(transfer.entries):
        if entry[0] == "same":
            same_new.append(i)
            same_old.append(entry[1])
        elif entry[0] == "refined":
            refined[entry[2]].append((i, entry[1]))
        else:
            coarsened.append((i, entry[1]))
    if same_new:
        new_blocks[same_new] = old_blocks[same_old]
    for q in range(4):
        if refined[q]:
            new_idx, old_idx = map(list, zip(*refined[q]))
            new_blocks[new_idx] = old_blocks[old_idx] @ embed[q].T
    if coarsened:
        new_idx = [i for i, _ in coarsened]
        parts = np.zeros((len(coarsened),) + old_blocks.shape[1:])
        for q in range(4):
            old_idx = [quads[q] for _, quads in coarsened]
            parts += old_blocks[old_idx] @ restrict[q].T
        new_blocks[new_idx] = parts
    return out


def adapt_state(state: FlowState, policy: AmrPolicy) -> FlowState:
    """Adapt the mesh under the interface indicator and carry all fields.

    Returns the input state unchanged when nothing is flagged (or when the
    flags produce the identical mesh after balancing and sibling rules).
    """
    mesh = state.u.mesh
    eta = indicator(state.phi)
    refine, coarsen = flag_cells(eta, mesh, policy)
    if not refine and not coarsen:
        return state
    new_mesh, transfer = msh.adapt(mesh, refine, coarsen)
    if all(e[0] == "same" for e in transfer.entries) \
            and new_mesh.num_cells == mesh.num_cells:
        return state
    phi = transfer_field(state.phi.field, new_mesh, transfer)
    return FlowState(
        u=transfer_field(state.u, new_mesh, transfer),
        p=transfer_field(state.p, new_mesh, transfer),
        phi=LevelSetField(phi),
        t=state.t,
        u_prev=transfer_field(state.u_prev, new_mesh, transfer),
    )
