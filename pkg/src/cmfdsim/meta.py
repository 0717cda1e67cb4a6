"""Consensus subgradient descent directly on grid functions, plus its bounds.

One epoch, for every device ``i`` and then for every device again::

    g_i <- f_i - eta_t * d_i * nu_i                      (local step)
    f_i <- g_i - eps * n_i * (g_i - mean_{j in N(i)} g_j)  (consensus)

where ``d_i`` is the pointwise derivative of the local loss and ``nu_i``
the density of the device measure against the global one. ``run_meta``
records the disagreement ``D_t`` and the loss of the mean function, and
evaluates the distance envelope ``gamma_t`` and the best-loss envelope
next to them.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import DomainError, NumericError, ParameterError
from .funcspace import MeasureSet, fed_norm, matrix_apply, norm
from .graph import Topology, laplacian, spectral_summary

KL_FLOOR = 1e-12
LIPSCHITZ_HEADROOM = 1.1


@dataclass(frozen=True)
class LossFunctional:
    """Pointwise-integrated loss against a fixed target grid.

    ``kind`` is ``"mse"`` (``|y - y*|^2``) or ``"kl"``
    (``sum_m y_m log(y_m / y*_m)``, prediction first).
    """

    kind: str
    target: np.ndarray

    def __post_init__(self):
        if self.kind not in ("mse", "kl"):
            raise ParameterError(f"unknown loss kind {self.kind!r}")
        target = np.asarray(self.target, dtype=float)
        if target.ndim != 2:
            raise ParameterError("target must be an (S, M) grid")
        if self.kind == "kl":
            _require_simplex(target, "target")
        object.__setattr__(self, "target", target)

    def pointwise(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if self.kind == "mse":
            return np.sum((f - self.target) ** 2, axis=-1)
        _require_positive(f)
        return np.sum(f * np.log(f / self.target), axis=-1)

    def value(self, f, weights) -> float:
        return float(np.sum(np.asarray(weights) * self.pointwise(f)))


def _require_positive(f):
    if np.any(f <= 0):
        raise DomainError("KL loss needs strictly positive predictions")


def _require_simplex(f, what):
    _require_positive(f)
    if np.any(np.abs(f.sum(axis=-1) - 1.0) > 1e-9):
        raise DomainError(f"KL {what} rows must sum to 1")


def frechet_subgradient(f, loss: LossFunctional, local_weights=None) -> np.ndarray:
    """Subgradient of the local loss as a grid function.

    The loss integrates a pointwise cost, so under the local inner product
    the representer is the pointwise derivative in the prediction; the
    local measure only affects which points carry weight, not the values.
    """
    f = np.asarray(f, dtype=float)
    if f.shape != loss.target.shape:
        raise ParameterError(f"function shape {f.shape} does not match target {loss.target.shape}")
    if loss.kind == "mse":
        return 2.0 * (f - loss.target)
    _require_positive(f)
    return np.log(f / loss.target) + 1.0


def project_positive(f) -> tuple[np.ndarray, int]:
    """Clamp below at 1e-12, renormalize rows; returns ``(f, clamp_count)``."""
    f = np.array(f, dtype=float, copy=True)
    low = f < KL_FLOOR
    f[low] = KL_FLOOR
    f /= f.sum(axis=-1, keepdims=True)
    return f, int(np.count_nonzero(low))


def local_step(f, d, nu, eta: float) -> np.ndarray:
    """``g(x_s) = f(x_s) - eta * d(x_s) * nu(x_s)``."""
    f = np.asarray(f, dtype=float)
    d = np.asarray(d, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if f.shape != d.shape or nu.shape != f.shape[:1]:
        raise ParameterError("f, d and nu must live on the same grid")
    return f - eta * d * nu[:, None]


def consensus_matrix(t: Topology, eps: float) -> np.ndarray:
    return np.eye(t.n) - eps * laplacian(t)


def check_sharing_rate(t: Topology, eps: float) -> bool:
    """True when ``0 < eps <= 1/(2 max degree)``; warns otherwise."""
    if eps <= 0:
        raise ParameterError("sharing rate must be positive")
    ok = eps <= (1.0 / (2 * t.max_degree) if t.max_degree else math.inf) * (1 + 1e-12)
    if not ok:
        warnings.warn(
            f"sharing rate {eps} exceeds 1/(2*max degree) = {1 / (2 * t.max_degree)}; "
            "convergence envelopes do not apply",
            stacklevel=3,
        )
    return ok


def consensus_step(g, t: Topology, eps: float, form: str = "neighbor") -> np.ndarray:
    """Pull every part toward its neighbors' average.

    ``form="neighbor"`` evaluates the per-device update literally;
    ``form="matrix"`` applies ``I - eps L`` to the federated function.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim != 3 or g.shape[0] != t.n:
        raise ParameterError(f"expected {t.n} parts, got shape {g.shape}")
    check_sharing_rate(t, eps)
    if form == "matrix":
        return matrix_apply(consensus_matrix(t, eps), g)
    if form != "neighbor":
        raise ParameterError(f"unknown consensus form {form!r}")
    out = g.copy()
    for i, nbrs in enumerate(t.neighbors):
        if nbrs:
            ni = len(nbrs)
            avg = sum(g[j] for j in sorted(nbrs)) / ni
            out[i] = g[i] - eps * ni * (g[i] - avg)
    return out


def step_sizes(kind: str, base: float, epochs: int) -> np.ndarray:
    """``eta_1..eta_epochs`` for a ``constant``, ``inv_t`` or ``inv_sqrt_t`` schedule."""
    if base <= 0:
        raise ParameterError("learning rate must be positive")
    t = np.arange(1, epochs + 1, dtype=float)
    if kind == "constant":
        return np.full(epochs, float(base))
    if kind == "inv_t":
        return base / t
    if kind == "inv_sqrt_t":
        return base / np.sqrt(t)
    raise ParameterError(f"unknown schedule {kind!r}")


# -- envelopes ----------------------------------------------------------------


def gamma(t: int, f1_norm: float, n: int, kappa2: float, lm: float, etas) -> float:
    """Distance envelope at epoch ``t`` (1-based), evaluated term by term."""
    if not 0.0 <= kappa2 < 1.0:
        raise ParameterError("kappa2 must lie in [0, 1)")
    etas = np.asarray(etas, dtype=float)
    tau = np.arange(1, t)
    tail = float(np.sum(etas[tau - 1] * kappa2 ** (t - tau))) if t > 1 else 0.0
    return f1_norm / math.sqrt(n) * kappa2 ** (t - 1) + lm * tail


def gamma_series(f1_norm: float, n: int, kappa2: float, lm: float, etas) -> np.ndarray:
    """``gamma_1..gamma_T`` by the recursion ``G_{t+1} = kappa2 (G_t + eta_t)``."""
    etas = np.asarray(etas, dtype=float)
    out = np.empty(len(etas))
    acc = 0.0
    lead = f1_norm / math.sqrt(n)
    for t in range(len(etas)):
        out[t] = lead * kappa2 ** t + lm * acc
        acc = kappa2 * (acc + etas[t])
    return out


def gamma_constant_bound(t: int, f1_norm: float, n: int, kappa2: float, lm: float, eta1: float) -> float:
    """Geometric-sum upper bound on ``gamma_t`` for non-increasing steps."""
    return (f1_norm / math.sqrt(n) * kappa2 ** (t - 1)
            + lm * eta1 * kappa2 * (1 - kappa2 ** (t - 1)) / (1 - kappa2))


def distance_limit(eta1: float, lm: float, eps: float, lambda2: float) -> float:
    """Limit of the distance envelope: ``eta1 (1 - eps l2) Lm / (eps l2)``."""
    return eta1 * (1 - eps * lambda2) * lm / (eps * lambda2)


def best_loss_rhs(t: int, c1: float, c2: float, lm: float, kappa2: float,
                 f1_norm: float, n: int, etas) -> float:
    """Envelope on the best-so-far optimality gap after ``t >= 2`` epochs."""
    if t < 2:
        raise ParameterError("the best-loss envelope starts at t = 2")
    if not kappa2 < 1:
        raise ParameterError("kappa2 must be < 1")
    etas = np.asarray(etas, dtype=float)
    e2t = etas[1:t]
    sq_1_tm1 = float(np.sum(etas[:t - 1] ** 2))
    num = (c1 + lm * float(np.sum(e2t ** 2))
           + c2 * (1 - kappa2 ** (t - 1)) * (etas[0] * f1_norm + math.sqrt(n) * lm * sq_1_tm1))
    return num / (2.0 * float(np.sum(e2t)))


def best_loss_series(c1, c2, lm, kappa2, f1_norm, n, etas) -> np.ndarray:
    """Envelope for ``t = 1..T``; entry 0 is NaN (undefined at t = 1)."""
    etas = np.asarray(etas, dtype=float)
    T = len(etas)
    out = np.full(T, np.nan)
    if T < 2:
        return out
    t = np.arange(2, T + 1)
    s1 = np.cumsum(etas[1:])                   # sum eta_2..eta_t
    s2 = np.cumsum(etas[1:] ** 2)              # sum eta_2^2..eta_t^2
    s3 = np.cumsum(etas[:-1] ** 2)             # sum eta_1^2..eta_{t-1}^2
    num = c1 + lm * s2 + c2 * (1 - kappa2 ** (t - 1)) * (etas[0] * f1_norm + math.sqrt(n) * lm * s3)
    out[1:] = num / (2.0 * s1)
    return out


def best_loss_limit(eta: float, lm: float, n: int, eps: float, lambda2: float) -> float:
    """Constant-step limit of the best-loss envelope."""
    return eta * lm / 2 * (1 + 4 * math.sqrt(n) * lm * (1 - eps * lambda2) / (eps * lambda2))


@dataclass(frozen=True)
class BoundReport:
    c1: float
    c2: float
    lm: float
    kappa2: float
    limit_distance: float
    limit_best: Optional[float]

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def bound_constants(lm: float, kappa2: float, eps: float, lambda2: float, n: int,
                    eta1: float, c1: float = math.nan, constant_eta: bool = True) -> BoundReport:
    return BoundReport(
        c1=c1,
        c2=4 * lm * kappa2 / (1 - kappa2),
        lm=lm,
        kappa2=kappa2,
        limit_distance=distance_limit(eta1, lm, eps, lambda2),
        limit_best=best_loss_limit(eta1, lm, n, eps, lambda2) if constant_eta else None,
    )


# -- runner -------------------------------------------------------------------


@dataclass
class MetaTrace:
    """Per-epoch record of a run; index ``t - 1`` describes ``f_t``."""

    distance: np.ndarray
    loss_mean: np.ndarray
    loss_best: np.ndarray
    gamma: np.ndarray
    thm2_rhs: np.ndarray
    final: np.ndarray
    etas: np.ndarray
    lipschitz: np.ndarray
    lm: float
    f1_norm: float
    report: Optional[BoundReport]
    eps_valid: bool
    clamp_count: int
    backend: str

    @property
    def epochs(self) -> int:
        return len(self.distance)

    @property
    def gap(self) -> np.ndarray:
        """Best-so-far optimality gap (the optimum loss is zero for both kinds)."""
        return self.loss_best

    def distance_violations(self, slack: float = 1e-9) -> int:
        return int(np.count_nonzero(self.distance > self.gamma + slack))

    def best_violations(self, slack: float = 1e-9) -> int:
        return int(np.count_nonzero(self.loss_best[1:] > self.thm2_rhs[1:] + slack))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "D_t", "gamma_t", "loss_mean", "loss_best", "thm2_rhs"])
            for t in range(self.epochs):
                w.writerow([t + 1] + [_fmt(v) for v in (self.distance[t], self.gamma[t],
                                                         self.loss_mean[t], self.loss_best[t],
                                                         self.thm2_rhs[t])])


def _fmt(v) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def run_meta(topology: Topology, measures: MeasureSet, loss: LossFunctional, f_init,
             etas, eps: float, *, threads: int = 1, backend=None) -> MetaTrace:
    """Run ``len(etas)`` epochs from ``f_init`` (an ``(n, S, M)`` array).

    The run is one pass through the compiled (or fallback) kernel; it keeps
    the largest local subgradient norm of every device, and the envelopes
    are then evaluated in a second pass with ``L_i`` set to that supremum
    plus 10 % headroom.
    """
    backend = backend or kernels.active
    f = np.array(f_init, dtype=float, copy=True, order="C")
    n = topology.n
    if f.ndim != 3 or f.shape[0] != n or f.shape[1:] != loss.target.shape:
        raise ParameterError(f"initial federated function has shape {f.shape}, "
                             f"expected ({n}, {loss.target.shape[0]}, {loss.target.shape[1]})")
    if measures.n != n or measures.size != f.shape[1]:
        raise ParameterError("measure set does not match devices or grid")
    if loss.kind == "kl":
        for part in f:
            _require_simplex(part, "initial function")
    etas = np.ascontiguousarray(etas, dtype=float)
    T = len(etas)
    if T < 1:
        raise ParameterError("need at least one epoch")
    spec = spectral_summary(topology)
    eps_ok = check_sharing_rate(topology, eps)

    f1_norm = fed_norm(f, measures.global_weights)
    dist = np.zeros(T)
    loss_mean = np.zeros(T)
    grad_sup = np.zeros(n)
    ptr, idx = topology.csr()
    args = (np.ascontiguousarray(loss.target), np.ascontiguousarray(measures.nu),
            np.ascontiguousarray(measures.global_weights),
            np.ascontiguousarray(measures.local_weights), ptr, idx, float(eps))
    kl = int(loss.kind == "kl")
    # first epoch alone so the mean after it (needed for C1) can be read off
    rec, clamps, failed = backend.meta_epochs(f, *args, etas[:1], kl, dist[:1], loss_mean[:1],
                                              grad_sup, threads)
    mean2 = f.mean(axis=0)
    if failed < 0 and T > 1:
        rec2, clamps2, failed2 = backend.meta_epochs(f, *args, etas[1:], kl, dist[1:], loss_mean[1:],
                                                     grad_sup, threads)
        clamps += clamps2
        failed = failed2 + 1 if failed2 >= 0 else -1
    if failed >= 0:
        raise NumericError(f"non-finite iterate produced in epoch {failed + 1}", epoch=failed + 1)

    lipschitz = LIPSCHITZ_HEADROOM * grad_sup
    lm = float(np.max(np.sqrt(measures.s_sup) * lipschitz))
    loss_best = np.minimum.accumulate(loss_mean)
    if eps_ok:
        kappa2 = spec.kappa2(eps)
        c1 = norm(mean2 - loss.target, measures.global_weights) ** 2
        constant = bool(np.all(etas == etas[0]))
        report = bound_constants(lm, kappa2, eps, spec.lambda2, n, float(etas[0]), c1, constant)
        gam = gamma_series(f1_norm, n, kappa2, lm, etas)
        rhs = best_loss_series(c1, report.c2, lm, kappa2, f1_norm, n, etas)
    else:
        report = None
        gam = np.full(T, np.nan)
        rhs = np.full(T, np.nan)
    return MetaTrace(dist, loss_mean, loss_best, gam, rhs, f, etas, lipschitz, lm, f1_norm,
                     report, eps_ok, clamps, backend.BACKEND)
