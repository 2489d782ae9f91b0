"""Pure-NumPy implementations of the hot assembly kernels.

These mirror the compiled extension exactly and are selected at import time
when the extension is unavailable.  Every routine here must accumulate
duplicate destinations (the same block slot may appear several times in one
call), so only unbuffered accumulation primitives are used.
"""

import numpy as np

BACKEND = "numpy"


def scatter_add_blocks(data, slots, blocks, row_offset=0, col_offset=0):
    """Accumulate dense blocks into block-sparse storage.

    Parameters
    ----------
    data : (nnzb, br, bc) float64 array, modified in place.
    slots : (n,) integer array of destination block indices into ``data``.
    blocks : (n, m, k) float64 array of contributions with m <= br, k <= bc.
    row_offset, col_offset : placement of each (m, k) contribution inside its
        (br, bc) destination block — used for component sub-blocks of
        vector-valued spaces.

    Repeated slot values accumulate; a buffered gather/assign would drop
    them, so this must stay an unbuffered add.
    """
    m, k = blocks.shape[1], blocks.shape[2]
    target = data[:, row_offset:row_offset + m, col_offset:col_offset + k]
    np.add.at(target, slots, blocks)


def scatter_add_vector(out, dofs, values):
    """Accumulate ``values`` rows into ``out`` at row indices ``dofs``.

    ``out`` is (ndof,) or (ndof, k); ``values`` matches with a leading
    ``len(dofs)`` axis.  Duplicate indices accumulate.
    """
    np.add.at(out, dofs, values)


def rank_one_blocks(coeff, test_vals, trial_vals, out=None):
    """Per-entity stiffness contributions from quadrature tables.

    Computes ``out[e] = sum_q coeff[e, q] * outer(test_vals[q], trial_vals[q])``
    for every entity ``e`` via a single matrix product.

    coeff : (ne, nq), test_vals : (nq, m), trial_vals : (nq, n) -> (ne, m, n).
    """
    nq, m = test_vals.shape
    n = trial_vals.shape[1]
    pairs = (test_vals[:, :, None] * trial_vals[:, None, :]).reshape(nq, m * n)
    flat = coeff @ pairs
    if out is None:
        return flat.reshape(-1, m, n)
    out += flat.reshape(-1, m, n)
    return out
