"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``CMFDSIM_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py as fallback

try:
    from . import _kernels as compiled
except ImportError:  # extension not built
    compiled = None

if compiled is not None and not os.environ.get("CMFDSIM_PURE_PYTHON"):
    active = compiled
else:
    active = fallback

BACKEND = active.BACKEND
tql_eigenvalues = active.tql_eigenvalues
meta_epochs = active.meta_epochs


def backends():
    """All importable backends, compiled first."""
    return [b for b in (compiled, fallback) if b is not None]
