# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.

Every function here has a line-for-line counterpart in ``_kernels_py`` with
the same signature; ``cmfdsim.kernels`` picks one at import time.
"""
import numpy as np

from cython.parallel cimport prange
from libc.float cimport DBL_EPSILON
from libc.math cimport copysign, fabs, hypot, isfinite, log, sqrt

BACKEND = "compiled"

cdef double KL_FLOOR = 1e-12


def tql_eigenvalues(diag, offdiag, int max_iter=64):
    """Eigenvalues of a symmetric tridiagonal matrix, ascending.

    Implicit QL with Wilkinson-style shifts. ``offdiag[i]`` couples rows
    ``i`` and ``i + 1``.
    """
    cdef double[::1] d = np.array(diag, dtype=np.float64, copy=True)
    cdef Py_ssize_t n = d.shape[0]
    cdef double[::1] e = np.zeros(n, dtype=np.float64)
    cdef Py_ssize_t i, l, m
    cdef int it
    cdef double dd, g, r, s, c, p, f, b
    if n == 0:
        return np.zeros(0)
    off = np.asarray(offdiag, dtype=np.float64)
    if off.shape[0] != n - 1:
        raise ValueError("offdiag must have length len(diag) - 1")
    for i in range(n - 1):
        e[i] = off[i]
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = fabs(d[m]) + fabs(d[m + 1])
                if fabs(e[m]) <= DBL_EPSILON * dd:
                    break
                m += 1
            if m == l:
                break
            if it == max_iter:
                raise ArithmeticError("tridiagonal QL did not converge")
            it += 1
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + copysign(r, g))
            s = 1.0
            c = 1.0
            p = 0.0
            i = m - 1
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = hypot(f, g)
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


cdef void _local_device(double[:, :, ::1] f, double[:, :, ::1] g,
                        const double[:, ::1] target, const double[:, ::1] nu,
                        const double[:, ::1] w_local, Py_ssize_t i, double eta,
                        int kl, double[::1] grad_sq) noexcept nogil:
    cdef Py_ssize_t s, k
    cdef Py_ssize_t S = f.shape[1]
    cdef Py_ssize_t M = f.shape[2]
    cdef double d, acc = 0.0, row
    for s in range(S):
        row = 0.0
        for k in range(M):
            if kl:
                d = log(f[i, s, k] / target[s, k]) + 1.0
            else:
                d = 2.0 * (f[i, s, k] - target[s, k])
            row = row + d * d
            g[i, s, k] = f[i, s, k] - eta * d * nu[i, s]
        acc = acc + w_local[i, s] * row
    grad_sq[i] = acc


cdef void _consensus_device(double[:, :, ::1] f, double[:, :, ::1] g,
                            const long[::1] nbr_ptr, const long[::1] nbr_idx,
                            Py_ssize_t i, double eps) noexcept nogil:
    cdef Py_ssize_t s, k, q
    cdef Py_ssize_t S = f.shape[1]
    cdef Py_ssize_t M = f.shape[2]
    cdef long lo = nbr_ptr[i]
    cdef long hi = nbr_ptr[i + 1]
    cdef double deg = <double>(hi - lo)
    cdef double acc
    for s in range(S):
        for k in range(M):
            acc = 0.0
            for q in range(lo, hi):
                acc = acc + g[nbr_idx[q], s, k]
            if hi > lo:
                f[i, s, k] = g[i, s, k] - eps * deg * (g[i, s, k] - acc / deg)
            else:
                f[i, s, k] = g[i, s, k]


cdef void _project_device(double[:, :, ::1] f, Py_ssize_t i,
                          long[::1] clamps, int[::1] bad) noexcept nogil:
    cdef Py_ssize_t s, k
    cdef Py_ssize_t S = f.shape[1]
    cdef Py_ssize_t M = f.shape[2]
    cdef double tot
    for s in range(S):
        tot = 0.0
        for k in range(M):
            if f[i, s, k] < KL_FLOOR:
                f[i, s, k] = KL_FLOOR
                clamps[i] += 1
            tot = tot + f[i, s, k]
        for k in range(M):
            f[i, s, k] = f[i, s, k] / tot


cdef void _check_device(double[:, :, ::1] f, Py_ssize_t i, int[::1] bad) noexcept nogil:
    cdef Py_ssize_t s, k
    for s in range(f.shape[1]):
        for k in range(f.shape[2]):
            if not isfinite(f[i, s, k]):
                bad[i] = 1
                return


def meta_epochs(double[:, :, ::1] f, const double[:, ::1] target,
                const double[:, ::1] nu, const double[::1] w_global,
                const double[:, ::1] w_local, const long[::1] nbr_ptr,
                const long[::1] nbr_idx, double eps, const double[::1] etas,
                int kl, double[::1] dist_out, double[::1] loss_out,
                double[::1] grad_sup, int num_threads=1):
    """Run ``len(etas)`` synchronous epochs of the function-space loop in place.

    Epoch ``t`` records the disagreement and the global loss of the mean
    of ``f`` *before* its update into ``dist_out[t]`` and ``loss_out[t]``,
    then overwrites ``f`` with the post-consensus state. ``grad_sup`` keeps
    the running maximum of each device's local subgradient norm.

    Returns ``(recorded, clamp_count, failed_epoch)``: the number of filled
    trace slots, how often the KL positivity floor fired, and the 0-based
    epoch whose update produced a non-finite value (-1 if none).
    """
    cdef Py_ssize_t n = f.shape[0]
    cdef Py_ssize_t S = f.shape[1]
    cdef Py_ssize_t M = f.shape[2]
    cdef Py_ssize_t T = etas.shape[0]
    cdef Py_ssize_t t, i, s, k
    cdef double[:, :, ::1] g = np.empty((n, S, M))
    cdef double[:, ::1] mean = np.empty((S, M))
    cdef double[::1] grad_sq = np.zeros(n)
    cdef long[::1] clamps = np.zeros(n, dtype=np.int_)
    cdef int[::1] bad = np.zeros(n, dtype=np.intc)
    cdef double acc, row, diff, eta, inv_n = 1.0 / n
    cdef int nt = num_threads if num_threads > 0 else 1
    cdef Py_ssize_t failed = -1

    with nogil:
        for t in range(T):
            for s in range(S):
                for k in range(M):
                    acc = 0.0
                    for i in range(n):
                        acc = acc + f[i, s, k]
                    mean[s, k] = acc * inv_n
            acc = 0.0
            for i in range(n):
                for s in range(S):
                    row = 0.0
                    for k in range(M):
                        diff = f[i, s, k] - mean[s, k]
                        row = row + diff * diff
                    acc = acc + w_global[s] * row
            dist_out[t] = sqrt(acc * inv_n)
            acc = 0.0
            for s in range(S):
                row = 0.0
                for k in range(M):
                    if kl:
                        row = row + mean[s, k] * log(mean[s, k] / target[s, k])
                    else:
                        diff = mean[s, k] - target[s, k]
                        row = row + diff * diff
                acc = acc + w_global[s] * row
            loss_out[t] = acc

            eta = etas[t]
            for i in prange(n, num_threads=nt, schedule="static"):
                _local_device(f, g, target, nu, w_local, i, eta, kl, grad_sq)
            for i in range(n):
                if sqrt(grad_sq[i]) > grad_sup[i]:
                    grad_sup[i] = sqrt(grad_sq[i])
            for i in prange(n, num_threads=nt, schedule="static"):
                _consensus_device(f, g, nbr_ptr, nbr_idx, i, eps)
                if kl:
                    _project_device(f, i, clamps, bad)
                _check_device(f, i, bad)
            for i in range(n):
                if bad[i]:
                    failed = t
            if failed >= 0:
                break
    done = T if failed < 0 else failed + 1
    return done, int(np.sum(clamps)), failed
