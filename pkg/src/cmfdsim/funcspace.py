"""L2(mu) on a finite grid and the federated-function algebra.

A prediction function restricted to the grid is an ``(S, M)`` array whose
row ``s`` is ``f(x_s)``; a federated function is an ``(n, S, M)`` array
holding one such grid per device. Measures are atomic, so every integral
is a weighted sum and every identity can be checked to rounding.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, ParameterError


@dataclass(frozen=True)
class SampleGrid:
    """Ordered grid points ``x_s`` in R^N plus the output width M."""

    points: np.ndarray
    dim_out: int = 1

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ParameterError("grid needs at least one point")
        if self.dim_out < 1:
            raise ParameterError("dim_out must be >= 1")
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim_in(self) -> int:
        return self.points.shape[1]

    def zeros(self, n: int | None = None) -> np.ndarray:
        shape = (self.size, self.dim_out) if n is None else (n, self.size, self.dim_out)
        return np.zeros(shape)


@dataclass(frozen=True)
class MeasureSet:
    """Global weights ``mu`` and per-device weights ``mu_i`` on one grid."""

    global_weights: np.ndarray
    local_weights: np.ndarray
    nu: np.ndarray = field(init=False, repr=False)
    s_sup: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.global_weights, dtype=float)
        wl = np.asarray(self.local_weights, dtype=float)
        if w.ndim != 1 or wl.ndim != 2 or wl.shape[1] != w.shape[0]:
            raise ParameterError("need global weights (S,) and local weights (n, S)")
        for name, vec in [("global", w)] + [(f"device {i}", r) for i, r in enumerate(wl)]:
            if np.any(vec < 0) or abs(vec.sum() - 1.0) > 1e-12:
                raise DomainError(f"{name} weights must be nonnegative and sum to 1")
        if np.any((wl > 0) & (w == 0)):
            raise DomainError("a local measure charges a point the global measure does not")
        nu = np.divide(wl, w, out=np.zeros_like(wl), where=w > 0)
        object.__setattr__(self, "global_weights", w)
        object.__setattr__(self, "local_weights", wl)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "s_sup", nu.max(axis=1))

    @classmethod
    def from_locals(cls, local_weights) -> "MeasureSet":
        """Global measure as the plain average of the device measures."""
        wl = np.asarray(local_weights, dtype=float)
        return cls(wl.mean(axis=0), wl)

    @property
    def n(self) -> int:
        return self.local_weights.shape[0]

    @property
    def size(self) -> int:
        return self.global_weights.shape[0]


def uniform_measures(n: int, size: int) -> MeasureSet:
    """IID case: every device sees the global measure, so ``nu == 1``."""
    return MeasureSet.from_locals(np.full((n, size), 1.0 / size))


def two_block_measures(n: int, size: int, high: float = 0.8) -> MeasureSet:
    """Non-IID split of the grid into two halves.

    The first ``n // 2`` devices put mass ``high`` on the first half of the
    grid and ``1 - high`` on the second; the rest do the opposite. Mass is
    uniform within a half.
    """
    if size < 2 or not 0.0 <= high <= 1.0:
        raise ParameterError("need size >= 2 and 0 <= high <= 1")
    half = size // 2
    wl = np.empty((n, size))
    for i in range(n):
        p = high if i < n // 2 else 1.0 - high
        wl[i, :half] = p / half
        wl[i, half:] = (1.0 - p) / (size - half)
    return MeasureSet.from_locals(wl)


def _check_pair(f, g):
    if f.shape != g.shape:
        raise ParameterError(f"shape mismatch {f.shape} vs {g.shape}")


def inner(f, g, weights) -> float:
    """``sum_s w_s <f(x_s), g(x_s)>``."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    w = np.asarray(weights, dtype=float)
    _check_pair(f, g)
    if f.shape[0] != w.shape[0]:
        raise ParameterError("weights do not match the grid")
    return float(np.sum(w * np.sum(f * g, axis=1)))


def norm(f, weights) -> float:
    return float(np.sqrt(max(inner(f, f, weights), 0.0)))


def fed_inner(a, b, weights) -> float:
    """Sum over devices of the per-part inner products under the global measure."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 3:
        raise ParameterError("federated functions are (n, S, M) arrays")
    _check_pair(a, b)
    w = np.asarray(weights, dtype=float)
    return float(np.sum(np.sum(a * b, axis=2) @ w))


def fed_norm(a, weights) -> float:
    return float(np.sqrt(max(fed_inner(a, a, weights), 0.0)))


def matrix_apply(A, a) -> np.ndarray:
    """Part ``i`` of the result is ``sum_j A[i, j] * a[j]``."""
    A = np.asarray(A, dtype=float)
    a = np.asarray(a, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or a.ndim != 3 or A.shape[1] != a.shape[0]:
        raise ParameterError(f"cannot apply matrix {A.shape} to federated function {a.shape}")
    return np.tensordot(A, a, axes=1)


def mean_fed(a) -> np.ndarray:
    """Every part replaced by the device average."""
    a = np.asarray(a, dtype=float)
    return np.broadcast_to(a.mean(axis=0), a.shape).copy()


def rms_distance(a, weights) -> float:
    """Root-mean-square distance of the parts from their mean."""
    a = np.asarray(a, dtype=float)
    return fed_norm(a - mean_fed(a), weights) / np.sqrt(a.shape[0])


def induced_norm(A) -> float:
    """Spectral norm of a real matrix (largest singular value)."""
    return float(np.linalg.norm(np.asarray(A, dtype=float), 2))


def norm_witness(A, grid_size: int, dim_out: int) -> np.ndarray:
    """Federated function on which ``A`` attains its induced norm.

    Part ``i`` is the constant ``v_i`` in every output coordinate, where
    ``v`` is the top right singular vector of ``A``.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ParameterError("A must be square")
    _, _, vt = np.linalg.svd(A)
    v = vt[0]
    return np.broadcast_to(v[:, None, None], (A.shape[0], grid_size, dim_out)).copy()


def write_function_csv(path, grid: SampleGrid, values: np.ndarray) -> None:
    """Snapshot of one grid function: columns ``x_0..x_{N-1}, y_0..y_{M-1}``."""
    values = np.asarray(values, dtype=float).reshape(grid.size, -1)
    header = [f"x_{k}" for k in range(grid.dim_in)] + [f"y_{k}" for k in range(values.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, y in zip(grid.points, values):
            w.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in y])


def read_function_csv(path) -> tuple[SampleGrid, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    n_in = sum(1 for h in header if h.startswith("x_"))
    values = body[:, n_in:]
    return SampleGrid(body[:, :n_in], values.shape[1]), values


def as_federated(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Stack per-device grids, checking they share one shape."""
    shapes = {np.shape(p) for p in parts}
    if len(shapes) != 1:
        raise ParameterError(f"parts disagree in shape: {sorted(shapes)}")
    return np.stack([np.asarray(p, dtype=float) for p in parts])
