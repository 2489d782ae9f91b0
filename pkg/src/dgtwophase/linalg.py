"""Row-compressed sparse matrices and preconditioned Krylov solvers.

Storage is delegated to SciPy's CSR/BSR containers (both row-compressed:
row offsets, column indices, values).  The symmetric-positive-definite
solver is a hand-rolled preconditioned conjugate gradient with negative-
curvature detection; the nonsymmetric path wraps SciPy's restarted GMRES.
Both verify the true residual before returning and never return silently
above tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, MatrixPropertyError


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and iteration limits for the Krylov solvers.

    Convergence means ||b - Ax|| <= max(rtol * ||b||, atol).
    """

    rtol: float = 1e-10
    atol: float = 1e-14
    max_iter: int = 2000
    restart: int = 50

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("solver tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.restart < 1:
            raise ValueError("restart length must be at least 1")


#: Looser tolerance used inside the time loop (per-stage linear systems).
TIME_STEPPING = SolverConfig(rtol=1e-8)


class SparseMatrix:
    """Immutable row-compressed matrix (scalar CSR or block BSR)."""

    def __init__(self, mat):
        if not sp.issparse(mat):
            raise TypeError("SparseMatrix wraps a scipy sparse matrix")
        if mat.format not in ("csr", "bsr"):
            mat = mat.tocsr()
        mat.sort_indices()
        self.mat = mat

    # -- constructors ---------------------------------------------------

    @classmethod
    def from_dense(cls, a) -> "SparseMatrix":
        return cls(sp.csr_matrix(np.atleast_2d(np.asarray(a, dtype=float))))

    @classmethod
    def from_csr(cls, indptr, indices, values, shape) -> "SparseMatrix":
        return cls(sp.csr_matrix((values, indices, indptr), shape=shape))

    @classmethod
    def from_blocks(cls, indptr, indices, blocks, shape) -> "SparseMatrix":
        """Block-compressed storage: blocks is (nnzb, br, bc)."""
        return cls(sp.bsr_matrix((blocks, indices, indptr), shape=shape))

    # -- structure --------------------------------------------------------

    @property
    def shape(self):
        return self.mat.shape

    @property
    def indptr(self):
        return self.mat.indptr

    @property
    def indices(self):
        return self.mat.indices

    @property
    def values(self):
        return self.mat.data

    @property
    def nnz(self):
        return self.mat.nnz

    def diagonal(self) -> np.ndarray:
        return self.mat.diagonal()

    def to_dense(self) -> np.ndarray:
        return self.mat.toarray()

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix(self.mat.T.tocsr())

    # -- algebra ----------------------------------------------------------

    def __matmul__(self, x):
        return self.mat @ x

    def __add__(self, other: "SparseMatrix") -> "SparseMatrix":
        return SparseMatrix(self.mat + other.mat)

    def __mul__(self, scalar: float) -> "SparseMatrix":
        return SparseMatrix(self.mat * float(scalar))

    __rmul__ = __mul__


def spmv(a: SparseMatrix, x) -> np.ndarray:
    """Matrix-vector product y = Ax."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != a.shape[1]:
        raise ValueError(f"dimension mismatch: matrix {a.shape}, vector {x.shape}")
    return a.mat @ x


class DiagonalPreconditioner:
    """Componentwise multiplication by the inverse diagonal."""

    def __init__(self, diag: np.ndarray):
        diag = np.asarray(diag, dtype=float)
        if np.any(diag == 0.0):
            raise MatrixPropertyError("matrix has zero diagonal entries")
        self.inverse_diagonal = 1.0 / diag

    def apply(self, r: np.ndarray) -> np.ndarray:
        return self.inverse_diagonal * r

    __call__ = apply


def jacobi(a: SparseMatrix) -> DiagonalPreconditioner:
    """Diagonal (Jacobi) preconditioner of a matrix."""
    return DiagonalPreconditioner(a.diagonal())


class BlockDiagonalPreconditioner:
    """Multiplication by the inverse of the block diagonal.

    Much stronger than the scalar diagonal for cell-blocked operators, where
    the diagonal block carries the whole intra-cell coupling.
    """

    def __init__(self, inverse_blocks: np.ndarray):
        self.inverse_blocks = inverse_blocks  # (nblocks, b, b)

    def apply(self, r: np.ndarray) -> np.ndarray:
        nb, bs, _ = self.inverse_blocks.shape
        out = self.inverse_blocks @ r.reshape(nb, bs, 1)
        return out.reshape(-1)

    __call__ = apply


def block_jacobi(a: SparseMatrix) -> BlockDiagonalPreconditioner:
    """Block-diagonal preconditioner from a block-sparse matrix.

    Factorizes the diagonal blocks of a BSR-stored matrix; raises
    MatrixPropertyError when a diagonal block is singular (or missing) and
    ValueError when the storage carries no block structure to exploit.
    """
    mat = a.mat
    if not sp.issparse(mat) or mat.format != "bsr":
        raise ValueError("block preconditioning requires block-sparse storage")
    bs = mat.blocksize[0]
    nb = mat.shape[0] // bs
    indptr, indices, data = mat.indptr, mat.indices, mat.data
    diag = np.zeros((nb, bs, bs))
    for row in range(nb):
        lo, hi = indptr[row], indptr[row + 1]
        hit = np.nonzero(indices[lo:hi] == row)[0]
        if hit.size == 0:
            raise MatrixPropertyError("matrix has an empty diagonal block")
        diag[row] = data[lo + hit[0]]
    try:
        inverse = np.linalg.inv(diag)
    except np.linalg.LinAlgError as exc:
        raise MatrixPropertyError("matrix has a singular diagonal block") from exc
    return BlockDiagonalPreconditioner(inverse)


class AMGPreconditioner:
    """One multigrid V-cycle as a preconditioner application.

    Diagonal preconditioning of an elliptic operator needs O(1/h) conjugate
    gradient iterations and stops converging on fine meshes; a
    smoothed-aggregation V-cycle keeps the iteration count mesh-independent.
    """

    def __init__(self, operator):
        self._matvec = operator.matvec

    def apply(self, r: np.ndarray) -> np.ndarray:
        return self._matvec(r)

    __call__ = apply


def amg(a: SparseMatrix) -> AMGPreconditioner:
    """Smoothed-aggregation algebraic multigrid preconditioner.

    Builds the grid hierarchy once per matrix; each application runs a
    single V-cycle. Intended for the pressure operator on large meshes.
    """
    import pyamg

    hierarchy = pyamg.smoothed_aggregation_solver(a.mat.tocsr(), max_coarse=200)
    return AMGPreconditioner(hierarchy.aspreconditioner(cycle="V"))


def _check_system(a: SparseMatrix, b: np.ndarray) -> None:
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"system matrix must be square, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"dimension mismatch: matrix {a.shape}, rhs {b.shape}")


def solve_spd(
    a: SparseMatrix,
    b,
    config: SolverConfig | None = None,
    preconditioner=None,
    x0=None,
) -> np.ndarray:
    """Preconditioned conjugate gradients for symmetric positive definite A.

    Raises MatrixPropertyError on detected negative curvature and
    ConvergenceError when the iteration budget runs out; the returned
    solution always satisfies the true-residual tolerance.
    """
    cfg = config or SolverConfig()
    b = np.asarray(b, dtype=float)
    _check_system(a, b)
    tol = max(cfg.rtol * np.linalg.norm(b), cfg.atol)
    apply_m = preconditioner.apply if preconditioner is not None else lambda r: r

    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.array(x0, dtype=float)
        r = b - a @ x
    iters = 0
    while True:
        res = np.linalg.norm(r)
        if res <= tol:
            # the recurrence residual can drift; accept only the true one
            r = b - a @ x
            res = np.linalg.norm(r)
            if res <= tol:
                return x
        if iters >= cfg.max_iter:
            raise ConvergenceError(
                f"conjugate gradients stalled at residual {res:.3e} "
                f"(target {tol:.3e}) after {iters} iterations",
                residual=res,
                iterations=iters,
            )
        z = apply_m(r)
        rz = float(r @ z)
        if rz <= 0.0:
            raise MatrixPropertyError(
                "preconditioned residual product is not positive; "
                "system or preconditioner is not positive definite"
            )
        p = z.copy()
        while iters < cfg.max_iter:
            ap = a @ p
            pap = float(p @ ap)
            if pap <= 0.0:
                raise MatrixPropertyError(
                    f"negative curvature direction (p.Ap = {pap:.3e}); "
                    "matrix is not positive definite"
                )
            alpha = rz / pap
            x += alpha * p
            r -= alpha * ap
            iters += 1
            if np.linalg.norm(r) <= tol:
                break
            z = apply_m(r)
            rz_next = float(r @ z)
            if rz_next <= 0.0:
                break
            p = z + (rz_next / rz) * p
            rz = rz_next


def solve_general(
    a: SparseMatrix,
    b,
    config: SolverConfig | None = None,
    preconditioner=None,
    x0=None,
) -> np.ndarray:
    """Restarted GMRES for nonsingular, possibly nonsymmetric A."""
    cfg = config or SolverConfig()
    b = np.asarray(b, dtype=float)
    _check_system(a, b)
    norm_b = np.linalg.norm(b)
    tol = max(cfg.rtol * norm_b, cfg.atol)
    if norm_b == 0.0 and x0 is None:
        return np.zeros_like(b)
    m = None
    if preconditioner is not None:
        m = spla.LinearOperator(a.shape, matvec=preconditioner.apply)
    cycles = max(1, math.ceil(cfg.max_iter / cfg.restart))
    x = x0
    last_res = np.inf
    for _ in range(3):  # re-enter if the preconditioned criterion was optimistic
        x, _info = spla.gmres(
            a.mat,
            b,
            x0=x,
            rtol=cfg.rtol,
            atol=cfg.atol,
            restart=cfg.restart,
            maxiter=cycles,
            M=m,
        )
        res = np.linalg.norm(b - a @ x)
        if res <= tol:
            return x
        if res >= 0.9 * last_res:
            break
        last_res = res
    # Stalled.  Left preconditioning distorts the minimized norm and can
    # plateau on systems a plain iteration handles, and a short restart can
    # stagnate outright — escalate through both before giving up.  The long
    # restart is capped so its workspace stays modest on large systems.
    n = b.shape[0]
    rescue_restart = min(n, max(4 * cfg.restart,
                                int(1.6e8 // max(n, 1))))
    attempts = []
    if m is not None:
        attempts.append((cfg.restart, None))
    if rescue_restart > cfg.restart:
        attempts.append((rescue_restart, None))
    for restart, precond in attempts:
        x, _info = spla.gmres(
            a.mat,
            b,
            x0=x,
            rtol=cfg.rtol,
            atol=cfg.atol,
            restart=restart,
            maxiter=max(1, math.ceil(cfg.max_iter / restart)),
            M=precond,
        )
        res = np.linalg.norm(b - a @ x)
        if res <= tol:
            return x
    raise ConvergenceError(
        f"restarted minimal-residual solver stalled at residual {res:.3e} "
        f"(target {tol:.3e})",
        residual=res,
    )
