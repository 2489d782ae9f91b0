# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled assembly kernels.

Mirrors the pure-NumPy fallback module exactly; selected at import when the
extension is importable.  All routines accumulate duplicate destinations.
"""

import numpy as np

BACKEND = "cython"


def scatter_add_blocks(double[:, :, ::1] data, slots, double[:, :, ::1] blocks,
                       int row_offset=0, int col_offset=0):
    """Accumulate dense blocks into block-sparse storage.

    data : (nnzb, br, bc), modified in place.
    slots : (n,) integer block indices into ``data``; duplicates accumulate.
    blocks : (n, m, k) contributions placed at (row_offset, col_offset)
        inside each destination block.
    """
    cdef Py_ssize_t[::1] idx = np.ascontiguousarray(slots, dtype=np.intp)
    cdef Py_ssize_t n = blocks.shape[0]
    cdef Py_ssize_t m = blocks.shape[1]
    cdef Py_ssize_t k = blocks.shape[2]
    cdef Py_ssize_t nnzb = data.shape[0]
    cdef Py_ssize_t e, i, j, s
    if idx.shape[0] != n:
        raise ValueError("slots and blocks disagree on the number of entries")
    if row_offset < 0 or col_offset < 0 or \
            row_offset + m > data.shape[1] or col_offset + k > data.shape[2]:
        raise ValueError("block contribution does not fit at the given offset")
    for e in range(n):
        s = idx[e]
        if s < 0 or s >= nnzb:
            raise IndexError("block slot out of range")
        for i in range(m):
            for j in range(k):
                data[s, row_offset + i, col_offset + j] += blocks[e, i, j]


def scatter_add_vector(out, dofs, values):
    """Accumulate ``values`` rows into ``out`` at row indices ``dofs``.

    ``out`` is (ndof,) or (ndof, k) — possibly a strided view; ``values``
    matches with a leading ``len(dofs)`` axis.  Duplicates accumulate.
    """
    if out.ndim == 1:
        _scatter_vector_1d(out, np.ascontiguousarray(dofs, dtype=np.intp),
                           np.ascontiguousarray(values, dtype=np.float64))
    elif out.ndim == 2:
        _scatter_vector_2d(out, np.ascontiguousarray(dofs, dtype=np.intp),
                           np.ascontiguousarray(values, dtype=np.float64))
    else:
        raise ValueError("out must be one- or two-dimensional")


def _scatter_vector_1d(double[:] out, Py_ssize_t[::1] dofs,
                       double[::1] values):
    cdef Py_ssize_t n = dofs.shape[0]
    cdef Py_ssize_t ndof = out.shape[0]
    cdef Py_ssize_t e, d
    if values.shape[0] != n:
        raise ValueError("dofs and values disagree on the number of entries")
    for e in range(n):
        d = dofs[e]
        if d < 0 or d >= ndof:
            raise IndexError("dof index out of range")
        out[d] += values[e]


def _scatter_vector_2d(double[:, :] out, Py_ssize_t[::1] dofs,
                       double[:, ::1] values):
    cdef Py_ssize_t n = dofs.shape[0]
    cdef Py_ssize_t ndof = out.shape[0]
    cdef Py_ssize_t k = out.shape[1]
    cdef Py_ssize_t e, d, j
    if values.shape[0] != n or values.shape[1] != k:
        raise ValueError("dofs and values disagree with the output shape")
    for e in range(n):
        d = dofs[e]
        if d < 0 or d >= ndof:
            raise IndexError("dof index out of range")
        for j in range(k):
            out[d, j] += values[e, j]


def rank_one_blocks(double[:, ::1] coeff, double[:, ::1] test_vals,
                    double[:, ::1] trial_vals, out=None):
    """Per-entity stiffness contributions from quadrature tables.

    out[e] = sum_q coeff[e, q] * outer(test_vals[q], trial_vals[q])

    coeff : (ne, nq), test_vals : (nq, m), trial_vals : (nq, n) -> (ne, m, n).
    """
    cdef Py_ssize_t ne = coeff.shape[0]
    cdef Py_ssize_t nq = coeff.shape[1]
    cdef Py_ssize_t m = test_vals.shape[0 + 1]
    cdef Py_ssize_t n = trial_vals.shape[1]
    if test_vals.shape[0] != nq or trial_vals.shape[0] != nq:
        raise ValueError("quadrature tables disagree with the coefficients")
    if out is None:
        out = np.zeros((ne, m, n), dtype=np.float64)
    cdef double[:, :, ::1] res = out
    if res.shape[0] != ne or res.shape[1] != m or res.shape[2] != n:
        raise ValueError("output array has the wrong shape")
    cdef Py_ssize_t e, q, i, j
    cdef double c, ti
    for e in range(ne):
        for q in range(nq):
            c = coeff[e, q]
            if c == 0.0:
                continue
            for i in range(m):
                ti = c * test_vals[q, i]
                if ti == 0.0:
                    continue
                for j in range(n):
                    res[e, i, j] += ti * trial_vals[q, j]
    return out
