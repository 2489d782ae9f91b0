"""Two-stage projection stepping for incompressible two-phase flow.

The time integrator advances velocity, pressure, and the interface field with
a trapezoidal-rule / BDF2 pair.  Each stage solves, in order: an implicit
interface-advection system, the interface sharpening procedure, a linearized
momentum predictor (upwind advection, interior-penalty diffusion, explicit
pressure/gravity/surface-tension forcing), and a pressure-increment Helmholtz
system derived from the artificial-compressibility constraint, followed by a
cellwise projection update of the velocity.

All boundary conditions are imposed weakly through exterior trace values
(mirror construction for Dirichlet data, reflected gradients for Neumann
data); periodic directions are handled by the mesh itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import levelset as interface
from . import linalg
from ._discrete import Discretization
from .errors import ConfigError, ConvergenceError
from .fespace import FieldVector, NodalSpace, interpolate
from .levelset import InterfaceParams, LevelSetField, MixtureLaw
from .mesh import Mesh

__all__ = [
    "StageCoeffs",
    "stage_coefficients",
    "PhysicalNumbers",
    "BCSide",
    "BoundaryConditions",
    "FlowState",
    "extrapolate_stage1",
    "extrapolate_stage2",
    "lambda_upwind",
    "sip_penalty",
    "harmonic_face_average",
    "TwoPhaseStepper",
]

_SIDES = ("west", "east", "south", "north")
_VELOCITY_KINDS = ("no-slip", "free", "periodic")
_PRESSURE_KINDS = ("neumann", "fixed", "periodic")


# ---------------------------------------------------------------------------
# stage coefficients and extrapolations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageCoeffs:
    """Weights of the two-stage scheme (trapezoidal step to t+gamma*dt, then
    a BDF2-like step to t+dt)."""

    gamma: float
    a31: float
    a32: float
    a33: float


def stage_coefficients() -> StageCoeffs:
    """Closed-form stage weights; the L-stable choice gamma = 2 - sqrt(2)."""
    gamma = 2.0 - math.sqrt(2.0)
    a33 = 1.0 / (2.0 - gamma)
    a31 = (1.0 - gamma) / (2.0 * (2.0 - gamma))
    return StageCoeffs(gamma=gamma, a31=a31, a32=a31, a33=a33)


def _check_same_layout(a: FieldVector, b: FieldVector) -> None:
    if a.space.degree != b.space.degree or a.data.shape != b.data.shape:
        raise ValueError("velocity fields live on different layouts")


def extrapolate_stage1(u_n: FieldVector, u_prev: FieldVector) -> FieldVector:
    """Velocity at the stage-1 midpoint from the two previous time levels.

    Weights (1 + c, -c) with c = gamma/(2(1-gamma)) = sqrt(2)/2; they sum to
    one, so constants are preserved.  At startup the caller passes
    u_prev = u_0, which degrades the extrapolation to first order only for
    that single step.
    """
    _check_same_layout(u_n, u_prev)
    gamma = stage_coefficients().gamma
    c = gamma / (2.0 * (1.0 - gamma))
    out = u_n.copy()
    out.data[:] = (1.0 + c) * u_n.data - c * u_prev.data
    return out


def extrapolate_stage2(u_stage1: FieldVector, u_n: FieldVector,
                       mode: str = "consistent") -> FieldVector:
    """Velocity at the stage-2 midpoint.

    ``consistent`` uses the linear extrapolation weights (3/2, -1/2), which
    sum to one.  ``paper`` applies the printed weights (1 + (1+gamma)/gamma,
    -(1-gamma)/gamma), which sum to three and therefore scale a constant
    field by three; they are kept available for reproduction attempts only.
    """
    _check_same_layout(u_stage1, u_n)
    if mode == "consistent":
        w1, w2 = 1.5, 0.5
    elif mode == "paper":
        gamma = stage_coefficients().gamma
        w1 = 1.0 + (1.0 + gamma) / gamma
        w2 = (1.0 - gamma) / gamma
    else:
        raise ValueError(f"unknown stage-2 extrapolation mode {mode!r}")
    out = u_stage1.copy()
    out.data[:] = w1 * u_stage1.data - w2 * u_n.data
    return out


def lambda_upwind(un_plus, un_minus=None):
    """Upwind stabilization speed: the larger magnitude of the normal traces.

    For a boundary face only one trace exists and its magnitude is returned.
    Accepts scalars or arrays.
    """
    if un_minus is None:
        return np.abs(un_plus)
    return np.maximum(np.abs(un_plus), np.abs(un_minus))


def sip_penalty(space_kind: str, face_diam: float,
                owner_diams: Sequence[float], velocity_degree: int = 2,
                levelset_degree: int = 2) -> float:
    """Interior-penalty constant for one face.

    Per owner cell K the factor is sigma = d^2 * diam(face)/diam(K), where
    d = k+1 for the velocity space, d = k for the pressure space (k being
    the velocity degree), and d = r+1 for the interface space.  Interior
    faces average the two owner values; boundary faces use the single one.
    """
    if space_kind == "velocity":
        deg = (velocity_degree + 1) ** 2
    elif space_kind == "pressure":
        deg = velocity_degree ** 2
    elif space_kind == "levelset":
        deg = (levelset_degree + 1) ** 2
    else:
        raise ValueError(f"unknown space kind {space_kind!r}")
    sigmas = [deg * face_diam / d for d in owner_diams]
    if not sigmas:
        raise ValueError("a face needs at least one owner cell")
    return sum(sigmas) / len(sigmas)


def harmonic_face_average(a_plus, a_minus=None):
    """Harmonic mean of two positive face traces (single-sided on walls)."""
    a_plus = np.asarray(a_plus, dtype=float)
    if np.any(a_plus <= 0.0):
        raise ValueError("harmonic average requires positive values")
    if a_minus is None:
        return a_plus
    a_minus = np.asarray(a_minus, dtype=float)
    if np.any(a_minus <= 0.0):
        raise ValueError("harmonic average requires positive values")
    return 2.0 / (1.0 / a_plus + 1.0 / a_minus)


# ---------------------------------------------------------------------------
# physical numbers and boundary conditions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhysicalNumbers:
    """Nondimensional groups of the flow: Reynolds, Froude, Weber, Mach.

    ``weber=inf`` disables surface tension; gravity acts only when the flag
    is set, in which case the Froude number must be finite and positive.
    """

    reynolds: float
    mach: float
    froude: float = math.inf
    weber: float = math.inf
    gravity: bool = False

    def __post_init__(self):
        if not self.reynolds > 0.0:
            raise ConfigError("Reynolds number must be positive")
        if not self.mach > 0.0:
            raise ConfigError("Mach number must be positive")
        if not self.weber > 0.0:
            raise ConfigError("Weber number must be positive (inf allowed)")
        if self.gravity and not (0.0 < self.froude < math.inf):
            raise ConfigError("gravity requires a finite positive Froude "
                              "number")

    @property
    def has_tension(self) -> bool:
        return math.isfinite(self.weber)


@dataclass(frozen=True)
class BCSide:
    """Condition on one boundary side of the box."""

    velocity: str = "no-slip"
    pressure: str = "neumann"
    pressure_value: float = 0.0

    def __post_init__(self):
        if self.velocity not in _VELOCITY_KINDS:
            raise ConfigError(f"unknown velocity condition {self.velocity!r}")
        if self.pressure not in _PRESSURE_KINDS:
            raise ConfigError(f"unknown pressure condition {self.pressure!r}")
        if (self.velocity == "periodic") != (self.pressure == "periodic"):
            raise ConfigError("periodic sides must be periodic for every "
                              "field")


_PERIODIC_SIDE = BCSide(velocity="periodic", pressure="periodic")


@dataclass(frozen=True)
class BoundaryConditions:
    """Per-side conditions; sides paired periodically must both say so."""

    west: BCSide = BCSide()
    east: BCSide = BCSide()
    south: BCSide = BCSide()
    north: BCSide = BCSide()

    @classmethod
    def closed_box(cls) -> "BoundaryConditions":
        return cls()

    @classmethod
    def channel_x(cls, north: BCSide | None = None,
                  south: BCSide | None = None) -> "BoundaryConditions":
        """Periodic in x with walls on top and bottom."""
        return cls(west=_PERIODIC_SIDE, east=_PERIODIC_SIDE,
                   south=south or BCSide(), north=north or BCSide())

    def side(self, name: str) -> BCSide:
        return getattr(self, name)

    def validate(self, mesh: Mesh) -> None:
        for axis, names in ((0, ("west", "east")), (1, ("south", "north"))):
            flags = [self.side(n).velocity == "periodic" for n in names]
            if mesh.periodic(axis):
                if not all(flags):
                    raise ConfigError(f"mesh is periodic along axis {axis} "
                                      "but the sides are not declared "
                                      "periodic")
            elif any(flags):
                raise ConfigError(f"sides {names} declared periodic but the "
                                  "mesh is not")

    @property
    def has_fixed_pressure(self) -> bool:
        return any(self.side(n).pressure == "fixed" for n in _SIDES)


@dataclass(frozen=True)
class FlowState:
    """Solution snapshot: velocity, pressure, interface field, and the
    previous-step velocity used by the stage-1 extrapolation."""

    u: FieldVector
    p: FieldVector
    phi: LevelSetField
    t: float
    u_prev: FieldVector


# ---------------------------------------------------------------------------
# the stepper
# ---------------------------------------------------------------------------


def _max_speed(u: FieldVector) -> float:
    blocks = u.blocks()
    return float(np.sqrt(blocks[:, 0, :] ** 2 + blocks[:, 1, :] ** 2).max())


_DERIV = ("dx", "dy")


class TwoPhaseStepper:
    """Owns the discretization and advances flow states by one time step."""

    def __init__(
        self,
        mesh: Mesh,
        numbers: PhysicalNumbers,
        interface_params: InterfaceParams,
        law: MixtureLaw,
        bcs: BoundaryConditions,
        dt: float,
        *,
        velocity_degree: int = 2,
        levelset_degree: int = 2,
        stage2_extrapolation: str = "consistent",
        solver_config: linalg.SolverConfig | None = None,
        pressure_preconditioner: str = "jacobi",
    ):
        if dt <= 0.0:
            raise ConfigError("time step must be positive")
        if velocity_degree < 2:
            raise ConfigError("velocity degree must be at least 2")
        if levelset_degree < 2:
            raise ConfigError("interface degree must be at least 2")
        if stage2_extrapolation not in ("consistent", "paper"):
            raise ConfigError("stage2_extrapolation must be 'consistent' or "
                              "'paper'")
        if pressure_preconditioner not in ("jacobi", "amg"):
            raise ConfigError("pressure_preconditioner must be 'jacobi' or "
                              "'amg'")
        bcs.validate(mesh)
        self.mesh = mesh
        self.numbers = numbers
        self.interface_params = interface_params
        self.law = law
        self.bcs = bcs
        self.dt = dt
        self.stage2_extrapolation = stage2_extrapolation
        self.coeffs = stage_coefficients()
        self.velocity_space = NodalSpace(velocity_degree, components=2)
        self.pressure_space = NodalSpace(velocity_degree - 1)
        self.levelset_space = NodalSpace(levelset_degree)
        self.disc = Discretization(
            mesh, max(velocity_degree, levelset_degree) + 2)
        self.solver_config = solver_config or linalg.TIME_STEPPING
        self.pressure_preconditioner = pressure_preconditioner
        # penalty degree factors
        self._pen_u = (velocity_degree + 1) ** 2
        self._pen_p = velocity_degree ** 2
        # face-group bookkeeping
        self._interior: List[int] = []
        self._walls: List[Tuple[int, BCSide]] = []
        for gid, group in enumerate(self.disc.face_groups):
            if group.boundary:
                self._walls.append((gid, bcs.side(group.wall)))
            else:
                self._interior.append(gid)
        self._pressure_mass = self._assemble_pressure_mass()
        ones = np.ones(self._pressure_mass.shape[0])
        self._pressure_mass_ones = self._pressure_mass @ ones
        # previous pressure increments, warm starts for the stage solves
        self._dp_start: Dict[int, np.ndarray] = {}

    # -- setup ------------------------------------------------------------

    def _assemble_pressure_mass(self) -> linalg.SparseMatrix:
        builder = self.disc.matrix_builder(self.pressure_space)
        builder.cell_term(
            np.ones((self.mesh.num_cells, self.disc.weights_2d.size)),
            "v", "v")
        return builder.finalize()

    def initial_state(
        self,
        phi: LevelSetField,
        velocity: Optional[Callable] = None,
        pressure: Optional[Callable] = None,
    ) -> FlowState:
        """State at t = 0; the extrapolation history starts at u_0."""
        if velocity is None:
            u0 = FieldVector.zeros(self.velocity_space, self.mesh)
        else:
            u0 = interpolate(self.velocity_space, self.mesh, velocity)
        if pressure is None:
            p0 = FieldVector.zeros(self.pressure_space, self.mesh)
        else:
            p0 = interpolate(self.pressure_space, self.mesh, pressure)
        return FlowState(u=u0, p=p0, phi=phi, t=0.0, u_prev=u0.copy())

    # -- small helpers ------------------------------------------------------

    def _tau(self, stage: int) -> float:
        if stage == 1:
            return self.coeffs.gamma * self.dt
        if stage == 2:
            return (1.0 - self.coeffs.gamma) * self.dt
        raise ValueError("stage must be 1 or 2")

    def _implicit_weight(self, stage: int) -> float:
        return 0.5 if stage == 1 else self.coeffs.a33

    def _rho(self, phi_values: np.ndarray) -> np.ndarray:
        return interface.mixture_density(phi_values, self.law)

    def _mu(self, phi_values: np.ndarray) -> np.ndarray:
        return interface.mixture_viscosity(phi_values, self.law)

    def _phi_faces(self, phi: LevelSetField, gid: int,
                   side: str) -> np.ndarray:
        return self.disc.face_values(phi.field, gid, side)[:, 0, :]

    def _u_faces(self, u: FieldVector, gid: int, side: str) -> np.ndarray:
        return self.disc.face_values(u, gid, side)

    def _penalty(self, gid: int, factor: int) -> np.ndarray:
        return factor * self.disc.penalty_ratio(gid)

    # -- interface advection ------------------------------------------------

    def _levelset_matrix(self, u_adv: FieldVector, tau: float,
                         weight: float):
        """(1/tau) M + weight * A(u_adv) on the interface space.

        A is the double-integration-by-parts advection operator with centered
        face terms and an upwind jump penalty; boundary faces carry no terms
        (walls are impermeable and the interface satisfies a homogeneous
        Neumann condition there).
        """
        disc = self.disc
        builder = disc.matrix_builder(self.levelset_space)
        nq2 = disc.weights_2d.size
        ones = np.ones((self.mesh.num_cells, nq2))
        builder.cell_term(ones / tau, "v", "v")
        u_vol = disc.cell_values(u_adv)
        for a in (0, 1):
            builder.cell_term(weight * u_vol[:, a, :], "v", _DERIV[a])
        for gid in self._interior:
            group = disc.face_groups[gid]
            axis = group.axis
            up = self._u_faces(u_adv, gid, "plus")[:, axis, :]
            um = self._u_faces(u_adv, gid, "minus")[:, axis, :]
            ubar = 0.5 * (up + um)
            lam = lambda_upwind(up, um)
            traces = {"plus": (up, 1.0), "minus": (um, -1.0)}
            for s_name, (_, s_sign) in traces.items():
                for t_name, (u_t, t_sign) in traces.items():
                    coeff = weight * 0.5 * s_sign * u_t
                    coeff = coeff + weight * 0.5 * lam * s_sign * t_sign
                    builder.face_term(gid, coeff, s_name, t_name)
            # -{{u}}.[[psi_j psi_i]] couples equal sides only
            builder.face_term(gid, -weight * ubar, "plus", "plus")
            builder.face_term(gid, weight * ubar, "minus", "minus")
        return builder.finalize()

    def _levelset_history(self, rhs, weight: float, u_h: FieldVector,
                          phi_h: LevelSetField) -> None:
        """Explicit advection residual -weight * A(u_h) phi_h."""
        disc = self.disc
        u_vol = disc.cell_values(u_h)
        g_vol = disc.cell_gradients(phi_h.field)[:, 0]
        advect = u_vol[:, 0, :] * g_vol[:, :, 0] + u_vol[:, 1, :] * g_vol[:, :, 1]
        rhs.cell_term(-weight * advect, "v")
        for gid in self._interior:
            group = disc.face_groups[gid]
            axis = group.axis
            up = self._u_faces(u_h, gid, "plus")[:, axis, :]
            um = self._u_faces(u_h, gid, "minus")[:, axis, :]
            pp = self._phi_faces(phi_h, gid, "plus")
            pm = self._phi_faces(phi_h, gid, "minus")
            ubar = 0.5 * (up + um)
            lam = lambda_upwind(up, um)
            central = 0.5 * (up * pp + um * pm)
            jump = pp - pm
            for s_name, s_sign, phi_s in (("plus", 1.0, pp),
                                          ("minus", -1.0, pm)):
                coeff = -weight * s_sign * (
                    central - ubar * phi_s + 0.5 * lam * jump)
                rhs.face_term(gid, coeff, s_name)

    def assemble_levelset_stage(
        self,
        state: FlowState,
        stage: int,
        u_extrapolated: FieldVector,
        phi_old: Optional[LevelSetField] = None,
    ):
        """Implicit interface-advection system for one stage.

        Stage 1: ``state`` is the step-start state; the single history term
        is phi^n advected by the same extrapolated velocity.  Stage 2:
        ``state`` is the stage-1 result (whose ``u_prev`` is the step-start
        velocity) and ``phi_old`` must supply the step-start interface field.
        """
        disc = self.disc
        tau = self._tau(stage)
        weight = self._implicit_weight(stage)
        matrix = self._levelset_matrix(u_extrapolated, tau, weight)
        rhs = disc.rhs_builder(self.levelset_space)
        if stage == 1:
            base = state.phi
            histories = [(0.5, u_extrapolated, state.phi)]
        else:
            if phi_old is None:
                raise ValueError("stage 2 requires the step-start interface "
                                 "field")
            base = state.phi
            histories = [
                (self.coeffs.a32, state.u, state.phi),
                (self.coeffs.a31, state.u_prev, phi_old),
            ]
        rhs.cell_term(disc.cell_values(base.field)[:, 0, :] / tau, "v")
        for w_h, u_h, phi_h in histories:
            self._levelset_history(rhs, w_h, u_h, phi_h)
        return matrix, rhs.vector()

    # -- momentum predictor ---------------------------------------------

    def _tension_tensor(self, grad: np.ndarray) -> np.ndarray:
        """(I - n n^T) |grad phi| from raw gradients, shape (..., 2, 2)."""
        mag = np.hypot(grad[..., 0], grad[..., 1])
        normals = interface.normals_from_gradients(grad)
        out = np.empty(grad.shape[:-1] + (2, 2))
        out[..., 0, 0] = mag * (1.0 - normals[..., 0] * normals[..., 0])
        out[..., 0, 1] = -mag * normals[..., 0] * normals[..., 1]
        out[..., 1, 0] = out[..., 0, 1]
        out[..., 1, 1] = mag * (1.0 - normals[..., 1] * normals[..., 1])
        return out

    def _momentum_matrix(self, u_adv: FieldVector, phi_new: LevelSetField,
                         tau: float, weight: float):
        """rho M/tau + weight*(upwind advection) + (weight/Re)*(SIP diffusion).

        The advecting velocity is the extrapolated stage midpoint; density
        and viscosity are evaluated from the new interface field.  No-slip
        walls use mirrored exterior values (u^- = -u^+, equal gradients),
        which yields full-weight consistency, doubled adjoint and penalty
        terms; 'free' walls carry only the single-sided advective flux.
        """
        disc = self.disc
        nu = 1.0 / self.numbers.reynolds
        builder = disc.matrix_builder(self.velocity_space)

        phi_vol = disc.cell_values(phi_new.field)[:, 0, :]
        rho_vol = self._rho(phi_vol)
        mu_vol = self._mu(phi_vol)
        u_vol = disc.cell_values(u_adv)

        for d in (0, 1):
            builder.cell_term(rho_vol / tau, "v", "v", d, d)
            for a in (0, 1):
                # -rho (u_adv . grad theta_i) theta_j
                builder.cell_term(-weight * rho_vol * u_vol[:, a, :],
                                  _DERIV[a], "v", d, d)
                # mu grad theta_j . grad theta_i on the diagonal blocks
                builder.cell_term(weight * nu * mu_vol,
                                  _DERIV[a], _DERIV[a], d, d)
            for c in (0, 1):
                # mu d_d theta_j d_c theta_i cross-coupling
                builder.cell_term(weight * nu * mu_vol,
                                  _DERIV[c], _DERIV[d], d, c)

        for gid in self._interior:
            self._momentum_matrix_interior(builder, gid, u_adv, phi_new,
                                           weight, nu)
        for gid, side in self._walls:
            self._momentum_matrix_wall(builder, gid, side, u_adv, phi_new,
                                       weight, nu)
        return builder.finalize()

    def _momentum_matrix_interior(self, builder, gid: int,
                                  u_adv: FieldVector,
                                  phi_new: LevelSetField,
                                  weight: float, nu: float) -> None:
        disc = self.disc
        group = disc.face_groups[gid]
        axis = group.axis
        up = self._u_faces(u_adv, gid, "plus")[:, axis, :]
        um = self._u_faces(u_adv, gid, "minus")[:, axis, :]
        lam = lambda_upwind(up, um)
        php = np.clip(self._phi_faces(phi_new, gid, "plus"), 0.0, 1.0)
        phm = np.clip(self._phi_faces(phi_new, gid, "minus"), 0.0, 1.0)
        rho = {"plus": self._rho(php), "minus": self._rho(phm)}
        mu = {"plus": self._mu(php), "minus": self._mu(phm)}
        mu_h = harmonic_face_average(mu["plus"], mu["minus"])
        pen = self._penalty(gid, self._pen_u)[:, None] * mu_h
        u_n = {"plus": up, "minus": um}
        sides = (("plus", 1.0), ("minus", -1.0))
        for s_name, s_sign in sides:
            for t_name, t_sign in sides:
                adv = weight * 0.5 * s_sign * rho[t_name] * (
                    u_n[t_name] + lam * t_sign)
                visc_pen = weight * nu * s_sign * t_sign * pen
                for d in (0, 1):
                    builder.face_term(gid, adv + visc_pen, s_name, t_name,
                                      "v", "v", d, d)
                # viscous consistency: -1/2 s mu^t [d_dc dn theta_j + n_c d_d]
                cons = -weight * nu * 0.5 * s_sign * mu[t_name]
                for d in (0, 1):
                    builder.face_term(gid, cons, s_name, t_name,
                                      "v", _DERIV[axis], d, d)
                    builder.face_term(gid, cons, s_name, t_name,
                                      "v", _DERIV[d], d, axis)
                # viscous adjoint: -1/2 t mu^s [d_dc dn theta_i + n_d d_c]
                adj = -weight * nu * 0.5 * t_sign * mu[s_name]
                for d in (0, 1):
                    builder.face_term(gid, adj, s_name, t_name,
                                      _DERIV[axis], "v", d, d)
                    builder.face_term(gid, adj, s_name, t_name,
                                      _DERIV[d], "v", axis, d)

    def _momentum_matrix_wall(self, builder, gid: int, side: BCSide,
                              u_adv: FieldVector, phi_new: LevelSetField,
                              weight: float, nu: float) -> None:
        disc = self.disc
        group = disc.face_groups[gid]
        axis, sign = group.axis, group.sign
        u_n = sign * self._u_faces(u_adv, gid, "plus")[:, axis, :]
        lam = lambda_upwind(u_n)
        phi_w = np.clip(self._phi_faces(phi_new, gid, "plus"), 0.0, 1.0)
        rho_w = self._rho(phi_w)
        mu_w = self._mu(phi_w)
        # advective flux; the mirror doubles the upwind part on no-slip walls
        lam_factor = 1.0 if side.velocity == "no-slip" else 0.5
        adv = weight * rho_w * (u_n + lam_factor * lam)
        for d in (0, 1):
            builder.face_term(gid, adv, "plus", "plus", "v", "v", d, d)
        if side.velocity != "no-slip":
            return
        # mirrored-gradient diffusion: consistency x1, adjoint and penalty x2
        pen = 2.0 * self._penalty(gid, self._pen_u)[:, None] * mu_w
        cons = -weight * nu * mu_w
        adj = -2.0 * weight * nu * mu_w
        for d in (0, 1):
            builder.face_term(gid, weight * nu * pen, "plus", "plus",
                              "v", "v", d, d)
            builder.face_term(gid, cons * sign, "plus", "plus",
                              "v", _DERIV[axis], d, d)
            builder.face_term(gid, cons * sign, "plus", "plus",
                              "v", _DERIV[d], d, axis)
            builder.face_term(gid, adj * sign, "plus", "plus",
                              _DERIV[axis], "v", d, d)
            builder.face_term(gid, adj * sign, "plus", "plus",
                              _DERIV[d], "v", axis, d)

    def _advective_history(self, rhs, weight: float, u_h: FieldVector,
                           phi_h: LevelSetField, u_adv: FieldVector) -> None:
        """-weight * div(rho_h u_h (x) u_adv) tested against v, upwinded."""
        disc = self.disc
        rho_vol = self._rho(disc.cell_values(phi_h.field)[:, 0, :])
        uh_vol = disc.cell_values(u_h)
        ua_vol = disc.cell_values(u_adv)
        for d in (0, 1):
            for a in (0, 1):
                rhs.cell_term(weight * rho_vol * uh_vol[:, d, :]
                              * ua_vol[:, a, :], _DERIV[a], d)
        for gid in self._interior:
            group = disc.face_groups[gid]
            axis = group.axis
            uap = self._u_faces(u_adv, gid, "plus")[:, axis, :]
            uam = self._u_faces(u_adv, gid, "minus")[:, axis, :]
            lam = lambda_upwind(uap, uam)
            uhp = self._u_faces(u_h, gid, "plus")
            uhm = self._u_faces(u_h, gid, "minus")
            rp = self._rho(np.clip(self._phi_faces(phi_h, gid, "plus"),
                                   0.0, 1.0))
            rm = self._rho(np.clip(self._phi_faces(phi_h, gid, "minus"),
                                   0.0, 1.0))
            for d in (0, 1):
                central = 0.5 * (rp * uhp[:, d, :] * uap
                                 + rm * uhm[:, d, :] * uam)
                jump = 0.5 * lam * (rp * uhp[:, d, :] - rm * uhm[:, d, :])
                for s_name, s_sign in (("plus", 1.0), ("minus", -1.0)):
                    rhs.face_term(gid, -weight * s_sign * (central + jump),
                                  s_name, "v", d)
        for gid, side in self._walls:
            group = disc.face_groups[gid]
            axis, sign = group.axis, group.sign
            u_n = sign * self._u_faces(u_adv, gid, "plus")[:, axis, :]
            lam = lambda_upwind(u_n)
            lam_factor = 1.0 if side.velocity == "no-slip" else 0.5
            uhp = self._u_faces(u_h, gid, "plus")
            rho_w = self._rho(np.clip(self._phi_faces(phi_h, gid, "plus"),
                                      0.0, 1.0))
            coeff = -weight * rho_w * (u_n + lam_factor * lam)
            for d in (0, 1):
                rhs.face_term(gid, coeff * uhp[:, d, :], "plus", "v", d)

    def _viscous_history(self, rhs, weight: float, u_h: FieldVector,
                         phi_h: LevelSetField) -> None:
        """-(weight) [ (2 mu D(u_h), grad v) - <{{2 mu D(u_h)}}, <<v>>> ].

        Only the consistency face term appears for history fields; walls with
        no-slip data keep the mirrored (single-trace, full-weight) flux and
        'free' walls drop the viscous flux entirely.
        """
        disc = self.disc
        mu_vol = self._mu(disc.cell_values(phi_h.field)[:, 0, :])
        grad = disc.cell_gradients(u_h)
        for d in (0, 1):
            for b in (0, 1):
                strain = grad[:, d, :, b] + grad[:, b, :, d]
                rhs.cell_term(-weight * mu_vol * strain, _DERIV[b], d)
        for gid in self._interior:
            group = disc.face_groups[gid]
            axis = group.axis
            tr = {}
            for side in ("plus", "minus"):
                g = disc.face_gradients(u_h, gid, side)
                mu_f = self._mu(np.clip(self._phi_faces(phi_h, gid, side),
                                        0.0, 1.0))
                # [2 D(u) n]_d = dn u_d + d_d u_axis  (n = +e_axis)
                tr[side] = [mu_f * (g[:, d, :, axis] + g[:, axis, :, d])
                            for d in (0, 1)]
            for d in (0, 1):
                central = 0.5 * (tr["plus"][d] + tr["minus"][d])
                for s_name, s_sign in (("plus", 1.0), ("minus", -1.0)):
                    rhs.face_term(gid, weight * s_sign * central, s_name,
                                  "v", d)
        for gid, side in self._walls:
            if side.velocity != "no-slip":
                continue
            group = disc.face_groups[gid]
            axis, sign = group.axis, group.sign
            g = disc.face_gradients(u_h, gid, "plus")
            mu_f = self._mu(np.clip(self._phi_faces(phi_h, gid, "plus"),
                                    0.0, 1.0))
            for d in (0, 1):
                flux = mu_f * sign * (g[:, d, :, axis] + g[:, axis, :, d])
                rhs.face_term(gid, weight * flux, "plus", "v", d)

    def _pressure_force(self, rhs, p: FieldVector) -> None:
        """(p, div v) - <{{p}}, [[v]]> with mirrored wall traces."""
        disc = self.disc
        p_vol = disc.cell_values(p)[:, 0, :]
        for d in (0, 1):
            rhs.cell_term(p_vol, _DERIV[d], d)
        for gid in self._interior:
            axis = disc.face_groups[gid].axis
            pavg = 0.5 * (self.disc.face_values(p, gid, "plus")[:, 0, :]
                          + self.disc.face_values(p, gid, "minus")[:, 0, :])
            rhs.face_term(gid, -pavg, "plus", "v", axis)
            rhs.face_term(gid, pavg, "minus", "v", axis)
        for gid, side in self._walls:
            group = disc.face_groups[gid]
            axis, sign = group.axis, group.sign
            if side.velocity == "free":
                continue
            if side.pressure == "fixed":
                trace = np.full((group.num_faces, disc.weights_1d.size),
                                side.pressure_value)
            else:
                trace = disc.face_values(p, gid, "plus")[:, 0, :]
            rhs.face_term(gid, -sign * trace, "plus", "v", axis)

    def _tension_force(self, rhs, weight: float,
                       phi_h: LevelSetField) -> None:
        """Laplace-Beltrami surface-tension residual of one interface field.

        -(w/We) (T, grad v) + (w/We) <{{T}}, <<v>>>, T = (I - n n^T)|grad phi|
        with a centered face flux; walls are single-sided.
        """
        disc = self.disc
        w = weight / self.numbers.weber
        T_vol = self._tension_tensor(disc.cell_gradients(phi_h.field)[:, 0])
        for d in (0, 1):
            for b in (0, 1):
                rhs.cell_term(-w * T_vol[:, :, d, b], _DERIV[b], d)
        for gid in self._interior:
            axis = disc.face_groups[gid].axis
            tp = self._tension_tensor(
                disc.face_gradients(phi_h.field, gid, "plus")[:, 0])
            tm = self._tension_tensor(
                disc.face_gradients(phi_h.field, gid, "minus")[:, 0])
            for d in (0, 1):
                central = 0.5 * (tp[:, :, d, axis] + tm[:, :, d, axis])
                rhs.face_term(gid, w * central, "plus", "v", d)
                rhs.face_term(gid, -w * central, "minus", "v", d)
        for gid, side in self._walls:
            if side.velocity == "free":
                continue
            group = disc.face_groups[gid]
            axis, sign = group.axis, group.sign
            tw = self._tension_tensor(
                disc.face_gradients(phi_h.field, gid, "plus")[:, 0])
            for d in (0, 1):
                rhs.face_term(gid, w * sign * tw[:, :, d, axis], "plus",
                              "v", d)

    def _gravity_force(self, rhs, rho_weighted: np.ndarray) -> None:
        rhs.cell_term(-rho_weighted, "v", 1)

    def assemble_momentum_predictor(
        self,
        state: FlowState,
        stage: int,
        u_extrapolated: FieldVector,
        phi_new: LevelSetField,
        phi_mid: Optional[LevelSetField] = None,
        phi_old: Optional[LevelSetField] = None,
    ):
        """Predictor system for one stage.

        Stage 1: ``state`` holds u^n, p^n, and phi^n (``phi_old`` defaults to
        ``state.phi``).  Stage 2: ``state`` is the stage-1 result (u, p, phi
        at the intermediate level, ``u_prev`` = step-start velocity) and
        ``phi_old`` must be the step-start interface field; ``phi_mid``
        defaults to ``state.phi``.
        """
        disc = self.disc
        tau = self._tau(stage)
        weight = self._implicit_weight(stage)
        c = self.coeffs
        matrix = self._momentum_matrix(u_extrapolated, phi_new, tau, weight)
        rhs = disc.rhs_builder(self.velocity_space)

        if stage == 1:
            phi_old = phi_old or state.phi
            rho_old = self._rho(disc.cell_values(phi_old.field)[:, 0, :])
            u_old_vol = disc.cell_values(state.u)
            for d in (0, 1):
                rhs.cell_term(rho_old * u_old_vol[:, d, :] / tau, "v", d)
            self._advective_history(rhs, 0.5, state.u, phi_old,
                                    u_extrapolated)
            self._viscous_history(rhs, 0.5 / self.numbers.reynolds,
                                  state.u, phi_old)
            self._pressure_force(rhs, state.p)
            if self.numbers.gravity:
                rho_new = self._rho(disc.cell_values(phi_new.field)[:, 0, :])
                gw = 0.5 / self.numbers.froude ** 2
                self._gravity_force(rhs, gw * (rho_new + rho_old))
            if self.numbers.has_tension:
                self._tension_force(rhs, 0.5, phi_new)
                self._tension_force(rhs, 0.5, phi_old)
        else:
            if phi_old is None:
                raise ValueError("stage 2 requires the step-start interface "
                                 "field")
            phi_mid = phi_mid or state.phi
            rho_mid = self._rho(disc.cell_values(phi_mid.field)[:, 0, :])
            u_mid_vol = disc.cell_values(state.u)
            for d in (0, 1):
                rhs.cell_term(rho_mid * u_mid_vol[:, d, :] / tau, "v", d)
            self._advective_history(rhs, c.a32, state.u, phi_mid, state.u)
            self._advective_history(rhs, c.a31, state.u_prev, phi_old,
                                    state.u_prev)
            self._viscous_history(rhs, c.a32 / self.numbers.reynolds,
                                  state.u, phi_mid)
            self._viscous_history(rhs, c.a31 / self.numbers.reynolds,
                                  state.u_prev, phi_old)
            self._pressure_force(rhs, state.p)
            if self.numbers.gravity:
                rho_new = self._rho(disc.cell_values(phi_new.field)[:, 0, :])
                rho_old = self._rho(disc.cell_values(phi_old.field)[:, 0, :])
                gw = 1.0 / self.numbers.froude ** 2
                self._gravity_force(
                    rhs, gw * (c.a33 * rho_new + c.a32 * rho_mid
                               + c.a31 * rho_old))
            if self.numbers.has_tension:
                self._tension_force(rhs, c.a33, phi_new)
                self._tension_force(rhs, c.a32, phi_mid)
                self._tension_force(rhs, c.a31, phi_old)
        return matrix, rhs.vector()

    # -- pressure increment ----------------------------------------------

    def assemble_pressure_helmholtz(
        self,
        state: FlowState,
        stage: int,
        u_predictor: FieldVector,
        phi_new: LevelSetField,
    ):
        """Symmetric positive definite system for the pressure increment.

        (M^2/tau^2) (dp, q) + (grad dp / rho, grad q) with interior-penalty
        coupling; homogeneous-Neumann walls contribute nothing, fixed-value
        walls impose a zero increment through one-sided penalty terms.  The
        right-hand side is the weak divergence of the predictor velocity
        scaled by 1/tau.
        """
        disc = self.disc
        tau = self._tau(stage)
        msq = self.numbers.mach ** 2
        builder = disc.matrix_builder(self.pressure_space)
        nq2 = disc.weights_2d.size
        phi_vol = disc.cell_values(phi_new.field)[:, 0, :]
        rho_vol = self._rho(phi_vol)
        builder.cell_term(np.full((self.mesh.num_cells, nq2), msq / tau ** 2),
                          "v", "v")
        for a in (0, 1):
            builder.cell_term(1.0 / rho_vol, _DERIV[a], _DERIV[a])
        for gid in self._interior:
            group = disc.face_groups[gid]
            axis = group.axis
            rho = {
                side: self._rho(np.clip(self._phi_faces(phi_new, gid, side),
                                        0.0, 1.0))
                for side in ("plus", "minus")
            }
            inv_h = 2.0 / (rho["plus"] + rho["minus"])
            pen = self._penalty(gid, self._pen_p)[:, None] * inv_h
            sides = (("plus", 1.0), ("minus", -1.0))
            for s_name, s_sign in sides:
                for t_name, t_sign in sides:
                    builder.face_term(gid, -0.5 * s_sign / rho[t_name],
                                      s_name, t_name, "v", _DERIV[axis])
                    builder.face_term(gid, -0.5 * t_sign / rho[s_name],
                                      s_name, t_name, _DERIV[axis], "v")
                    builder.face_term(gid, pen * s_sign * t_sign,
                                      s_name, t_name)
        for gid, side in self._walls:
            if side.pressure != "fixed":
                continue
            group = disc.face_groups[gid]
            axis, sign = group.axis, group.sign
            rho_w = self._rho(np.clip(self._phi_faces(phi_new, gid, "plus"),
                                      0.0, 1.0))
            pen = self._penalty(gid, self._pen_p)[:, None] / rho_w
            builder.face_term(gid, -sign / rho_w, "plus", "plus",
                              "v", _DERIV[axis])
            builder.face_term(gid, -sign / rho_w, "plus", "plus",
                              _DERIV[axis], "v")
            builder.face_term(gid, pen, "plus", "plus")
        matrix = builder.finalize()

        rhs = disc.rhs_builder(self.pressure_space)
        u_vol = disc.cell_values(u_predictor)
        for a in (0, 1):
            rhs.cell_term(u_vol[:, a, :] / tau, _DERIV[a])
        for gid in self._interior:
            axis = disc.face_groups[gid].axis
            un_avg = 0.5 * (self._u_faces(u_predictor, gid, "plus")[:, axis, :]
                            + self._u_faces(u_predictor, gid,
                                            "minus")[:, axis, :])
            rhs.face_term(gid, -un_avg / tau, "plus")
            rhs.face_term(gid, un_avg / tau, "minus")
        for gid, side in self._walls:
            if side.velocity != "free":
                continue  # no-slip mirror zeroes the boundary average
            group = disc.face_groups[gid]
            axis, sign = group.axis, group.sign
            u_n = sign * self._u_faces(u_predictor, gid, "plus")[:, axis, :]
            rhs.face_term(gid, -u_n / tau, "plus")
        return matrix, rhs.vector()

    # -- stage orchestration ------------------------------------------------

    def _solve(self, label: str, matrix, rhs, *, spd: bool = False,
               x0=None, preconditioner=None) -> np.ndarray:
        try:
            if spd:
                return linalg.solve_spd(matrix, rhs, self.solver_config,
                                        preconditioner=preconditioner, x0=x0)
            return linalg.solve_general(matrix, rhs, self.solver_config,
                                        preconditioner=preconditioner, x0=x0)
        except ConvergenceError as exc:
            raise ConvergenceError(
                f"{label}: {exc}", residual=exc.residual,
                iterations=exc.iterations) from exc

    def _subtract_mean(self, p: FieldVector) -> None:
        if self.bcs.has_fixed_pressure:
            return
        mean = (self._pressure_mass_ones @ p.data) / self.mesh.area
        p.data -= mean

    def _correct_velocity(self, u_star_data: np.ndarray, dp: FieldVector,
                          phi_new: LevelSetField, tau: float) -> FieldVector:
        disc = self.disc
        rho_vol = self._rho(disc.cell_values(phi_new.field)[:, 0, :])
        grad_dp = disc.cell_gradients(dp)[:, 0]
        correction = np.stack(
            [tau * grad_dp[:, :, 0] / rho_vol, tau * grad_dp[:, :, 1] / rho_vol],
            axis=1)
        delta = disc.project_to_space(self.velocity_space, correction)
        out = FieldVector.zeros(self.velocity_space, self.mesh)
        out.data[:] = u_star_data - delta.data
        return out

    def _stage(self, state: FlowState, stage: int, u_ext: FieldVector,
               phi_old: Optional[LevelSetField]) -> FlowState:
        """One projection stage; ``state`` carries the stage-start fields."""
        tau = self._tau(stage)
        name = f"stage {stage}"

        matrix, rhs = self.assemble_levelset_stage(state, stage, u_ext,
                                                   phi_old)
        phi_data = self._solve(f"{name} interface advection", matrix, rhs,
                               x0=state.phi.data.copy(),
                               preconditioner=linalg.jacobi(matrix))
        field = FieldVector(self.levelset_space, self.mesh,
                            state.phi.field.layout, phi_data)
        phi_new = LevelSetField(field)
        del matrix

        phi_new = interface.reinitialize(
            phi_new, self.interface_params, _max_speed(state.u),
            disc=self.disc, solver_config=self.solver_config)

        matrix, rhs = self.assemble_momentum_predictor(
            state, stage, u_ext, phi_new,
            phi_mid=None if stage == 1 else state.phi, phi_old=phi_old)
        u_star = self._solve(f"{name} momentum predictor", matrix, rhs,
                             x0=u_ext.data.copy(),
                             preconditioner=linalg.jacobi(matrix))
        del matrix

        matrix, rhs = self.assemble_pressure_helmholtz(state, stage,
                                                       _as_velocity(self, u_star),
                                                       phi_new)
        if self.pressure_preconditioner == "amg":
            precond = linalg.amg(matrix)
        else:
            precond = linalg.jacobi(matrix)
        dp0 = self._dp_start.get(stage)
        dp_data = self._solve(f"{name} pressure increment", matrix, rhs,
                              spd=True, preconditioner=precond,
                              x0=None if dp0 is None else dp0.copy())
        self._dp_start[stage] = dp_data
        del matrix
        dp = FieldVector(self.pressure_space, self.mesh, state.p.layout,
                         dp_data)

        u_new = self._correct_velocity(u_star, dp, phi_new, tau)
        p_new = state.p.copy()
        p_new.data += dp.data
        self._subtract_mean(p_new)
        return FlowState(u=u_new, p=p_new, phi=phi_new, t=state.t + tau,
                         u_prev=state.u_prev)

    def advance(self, state: FlowState) -> FlowState:
        """One full time step: two projection stages plus history update."""
        u_ext1 = extrapolate_stage1(state.u, state.u_prev)
        mid = self._stage(
            replace(state, u_prev=state.u), 1, u_ext1, phi_old=None)

        u_ext2 = extrapolate_stage2(mid.u, state.u,
                                    self.stage2_extrapolation)
        new = self._stage(mid, 2, u_ext2, phi_old=state.phi)
        return replace(new, t=state.t + self.dt, u_prev=state.u)


def _as_velocity(stepper: TwoPhaseStepper, data: np.ndarray) -> FieldVector:
    out = FieldVector.zeros(stepper.velocity_space, stepper.mesh)
    out.data[:] = data
    return out
