"""Discontinuous-Galerkin solver for incompressible two-phase flows.

Artificial-compressibility formulation with a conservative level set,
two-stage TR-BDF2 projection stepping, interior-penalty DG discretization
on adaptively refined quadtree meshes, and a benchmark harness.
"""

import importlib

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    ConvergenceError,
    DegenerateObservableError,
    MatrixPropertyError,
)

_SUBMODULES = (
    "amr",
    "bench_cli",
    "diagnostics",
    "fespace",
    "levelset",
    "linalg",
    "mesh",
    "navierstokes",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
