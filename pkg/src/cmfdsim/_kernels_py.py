"""Pure numpy counterparts of the compiled kernels in ``_kernels.pyx``.

Same signatures and the same in-place contract. Results agree with the
compiled versions to rounding (summation order differs), not bit for bit.
``num_threads`` is accepted and ignored: the work here is vectorized over
devices, so there is nothing to split.
"""
import math

import numpy as np

BACKEND = "python"

KL_FLOOR = 1e-12


def tql_eigenvalues(diag, offdiag, max_iter=64):
    """Eigenvalues of a symmetric tridiagonal matrix, ascending (implicit QL)."""
    d = [float(v) for v in diag]
    n = len(d)
    if n == 0:
        return np.zeros(0)
    off = [float(v) for v in offdiag]
    if len(off) != n - 1:
        raise ValueError("offdiag must have length len(diag) - 1")
    e = off + [0.0]
    eps = np.finfo(float).eps
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= eps * dd:
                    break
                m += 1
            if m == l:
                break
            if it == max_iter:
                raise ArithmeticError("tridiagonal QL did not converge")
            it += 1
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            i = m - 1
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                i -= 1
            if r == 0.0 and i >= l:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return np.sort(np.asarray(d), kind="stable")


def meta_epochs(f, target, nu, w_global, w_local, nbr_ptr, nbr_idx, eps, etas,
                kl, dist_out, loss_out, grad_sup, num_threads=1):
    """Run ``len(etas)`` synchronous epochs in place; see the compiled twin."""
    n = f.shape[0]
    deg = np.diff(nbr_ptr).astype(float)
    adj = np.zeros((n, n))
    for i in range(n):
        adj[i, nbr_idx[nbr_ptr[i]:nbr_ptr[i + 1]]] = 1.0
    safe_deg = np.where(deg > 0, deg, 1.0)[:, None, None]
    scale = (eps * deg)[:, None, None]
    nu3 = nu[:, :, None]
    clamps = 0
    for t in range(len(etas)):
        mean = f.mean(axis=0)
        dist_out[t] = math.sqrt(np.sum(w_global * np.sum((f - mean) ** 2, axis=(0, 2))) / n)
        if kl:
            loss_out[t] = float(np.sum(w_global * np.sum(mean * np.log(mean / target), axis=1)))
            d = np.log(f / target) + 1.0
        else:
            loss_out[t] = float(np.sum(w_global * np.sum((mean - target) ** 2, axis=1)))
            d = 2.0 * (f - target)
        norms = np.sqrt(np.sum(w_local * np.sum(d * d, axis=2), axis=1))
        np.maximum(grad_sup, norms, out=grad_sup)
        g = f - etas[t] * d * nu3
        avg = np.tensordot(adj, g, axes=1) / safe_deg
        f[...] = np.where(deg[:, None, None] > 0, g - scale * (g - avg), g)
        if kl:
            low = f < KL_FLOOR
            clamps += int(np.count_nonzero(low))
            f[low] = KL_FLOOR
            f /= f.sum(axis=2, keepdims=True)
        if not np.all(np.isfinite(f)):
            return t + 1, clamps, t
    return len(etas), clamps, -1
