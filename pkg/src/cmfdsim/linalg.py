"""Dense symmetric eigenvalues: Householder reduction, then tridiagonal QL."""
import numpy as np

from . import kernels
from .errors import ParameterError


def tridiagonalize(a):
    """Reduce a symmetric matrix to tridiagonal form by Householder reflections.

    Returns ``(diag, offdiag)``; the spectrum is preserved exactly up to
    rounding since every reflection is orthogonal.
    """
    a = np.array(a, dtype=float, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ParameterError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    for k in range(n - 2):
        x = a[k + 1:, k]
        sigma = np.linalg.norm(x)
        if sigma == 0.0:
            continue
        alpha = -sigma if x[0] >= 0 else sigma
        v = x.copy()
        v[0] -= alpha
        v /= np.linalg.norm(v)
        sub = a[k + 1:, k + 1:]
        p = sub @ v
        kv = float(v @ p)
        # H A H with H = I - 2 v v^T, applied to the trailing block
        sub -= 2.0 * np.outer(v, p) + 2.0 * np.outer(p, v) - 4.0 * kv * np.outer(v, v)
        a[k + 1:, k] = 0.0
        a[k, k + 1:] = 0.0
        a[k + 1, k] = a[k, k + 1] = alpha
    return np.diag(a).copy(), np.diag(a, 1).copy()


def symmetric_eigenvalues(a):
    """Ascending eigenvalues of a real symmetric matrix."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ParameterError(f"expected a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(a).max(initial=0.0))):
        raise ParameterError("matrix is not symmetric")
    if a.shape[0] == 0:
        return np.zeros(0)
    diag, off = tridiagonalize(0.5 * (a + a.T))
    return kernels.tql_eigenvalues(diag, off)
