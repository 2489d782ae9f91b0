"""Hot assembly kernels with a compiled core and a NumPy fallback.

The compiled extension (``_core``) is built from Cython at install time; if
it is missing (source checkout without a compiler, unsupported platform) the
pure-NumPy twin is substituted.  Both expose the same callables and are
interchangeable; ``BACKEND`` reports which one is active and
``available_backends()`` lists all importable ones so the benchmark can pit
them against each other.
"""

from . import _fallback

try:  # pragma: no cover - exercised only when the extension is built
    from . import _core as _impl

    BACKEND = _impl.BACKEND
except ImportError:  # pragma: no cover
    _impl = _fallback
    BACKEND = _fallback.BACKEND

scatter_add_blocks = _impl.scatter_add_blocks
scatter_add_vector = _impl.scatter_add_vector
rank_one_blocks = _impl.rank_one_blocks


def available_backends():
    """Names of importable kernel backends, compiled one first."""
    names = []
    if _impl is not _fallback:
        names.append(BACKEND)
    names.append(_fallback.BACKEND)
    return names


def get_backend(name):
    """Return the kernel module for ``name`` (as listed by available_backends)."""
    if name == _fallback.BACKEND:
        return _fallback
    if _impl is not _fallback and name == _impl.BACKEND:
        return _impl
    raise KeyError(f"unknown kernel backend {name!r}")
