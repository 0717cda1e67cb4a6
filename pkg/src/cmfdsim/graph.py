"""Multi-hop network topologies and the Laplacian quantities the bounds use."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, ParameterError
from .linalg import symmetric_eigenvalues


@dataclass(frozen=True)
class Topology:
    """Undirected simple graph on nodes ``0..n-1``."""

    n: int
    neighbors: tuple[frozenset[int], ...]

    def __post_init__(self):
        if len(self.neighbors) != self.n:
            raise ParameterError("need one neighbor set per node")
        for i, nbrs in enumerate(self.neighbors):
            if i in nbrs:
                raise ParameterError(f"self-loop at node {i}")
            for j in nbrs:
                if not 0 <= j < self.n:
                    raise ParameterError(f"node {i} lists unknown neighbor {j}")
                if i not in self.neighbors[j]:
                    raise ParameterError(f"edge {i}-{j} is not symmetric")

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Sequence[int]]) -> "Topology":
        nbrs: list[set[int]] = [set() for _ in range(n)]
        for i, j in edges:
            i, j = int(i), int(j)
            if i == j:
                raise ParameterError(f"self-loop at node {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ParameterError(f"edge ({i}, {j}) outside 0..{n - 1}")
            nbrs[i].add(j)
            nbrs[j].add(i)
        return cls(n, tuple(frozenset(s) for s in nbrs))

    @property
    def degree(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.neighbors)

    @property
    def max_degree(self) -> int:
        return max(self.degree, default=0)

    @property
    def average_degree(self) -> float:
        return sum(self.degree) / self.n if self.n else 0.0

    def edges(self) -> list[tuple[int, int]]:
        """Canonical edge list: ``i < j``, sorted lexicographically."""
        return sorted((i, j) for i, s in enumerate(self.neighbors) for j in s if i < j)

    def is_connected(self) -> bool:
        if self.n == 0:
            return False
        seen = {0}
        stack = [0]
        while stack:
            for j in self.neighbors[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == self.n

    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        """Neighbor lists as ``(indptr, indices)`` with sorted indices."""
        ptr = np.zeros(self.n + 1, dtype=np.int_)
        idx = []
        for i, s in enumerate(self.neighbors):
            idx.extend(sorted(s))
            ptr[i + 1] = len(idx)
        return ptr, np.asarray(idx, dtype=np.int_)

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "edges": [list(e) for e in self.edges()]})

    @classmethod
    def from_json(cls, text: str) -> "Topology":
        obj = json.loads(text)
        return cls.from_edges(int(obj["n"]), obj["edges"])


@dataclass(frozen=True)
class SpectralSummary:
    """Laplacian spectrum of a connected graph."""

    eigenvalues: tuple[float, ...]
    max_degree: int

    @property
    def n(self) -> int:
        return len(self.eigenvalues)

    @property
    def lambda2(self) -> float:
        return self.eigenvalues[1]

    @property
    def eps_max(self) -> float:
        """Largest sharing rate the convergence theory admits, 1/(2 max degree)."""
        return 1.0 / (2 * self.max_degree)

    def kappa2(self, eps: float) -> float:
        return 1.0 - eps * self.lambda2

    def eps_valid(self, eps: float) -> bool:
        return 0.0 < eps <= self.eps_max * (1.0 + 1e-12)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "eigenvalues": list(self.eigenvalues),
            "lambda2": self.lambda2,
            "max_degree": self.max_degree,
            "eps_max": self.eps_max,
        }


def ring_lattice(n: int, k: int) -> Topology:
    """Ring where node ``i`` links to ``i +- 1, ..., i +- k`` (mod n)."""
    if n < 3 or not 1 <= k < n / 2:
        raise ParameterError(f"ring lattice needs n >= 3 and 1 <= k < n/2, got n={n}, k={k}")
    edges = [(i, (i + o) % n) for i in range(n) for o in range(1, k + 1)]
    return Topology.from_edges(n, edges)


def complete_graph(n: int) -> Topology:
    if n < 1:
        raise ParameterError("complete graph needs n >= 1")
    return Topology.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def barabasi_albert(n: int, m: int, seed=None) -> Topology:
    """Preferential-attachment graph with ``m * (n - m)`` edges.

    Starts from a star on nodes ``0..m`` (centre 0). Each later node
    draws ``m`` distinct targets with probability proportional to degree;
    repeated draws are rejected and redrawn.
    """
    if not 1 <= m < n:
        raise ParameterError(f"Barabasi-Albert needs 1 <= m < n, got n={n}, m={m}")
    rng = np.random.default_rng(seed)
    edges = [(0, j) for j in range(1, m + 1)]
    # one entry per edge endpoint: uniform draws here are degree-weighted
    repeated = [0] * m + list(range(1, m + 1))
    for source in range(m + 1, n):
        targets: list[int] = []
        chosen: set[int] = set()
        while len(targets) < m:
            x = repeated[int(rng.integers(len(repeated)))]
            if x not in chosen:
                chosen.add(x)
                targets.append(x)
        edges.extend((source, x) for x in targets)
        repeated.extend(targets)
        repeated.extend([source] * m)
    return Topology.from_edges(n, edges)


@dataclass(frozen=True)
class TopologySpec:
    """Recipe for a topology; ``kind`` is ``ring``, ``ba`` or ``complete``."""

    kind: str
    n: int
    k: int = 1
    m: int = 1
    seed: int = 0

    def build(self, seed=None) -> Topology:
        if self.kind == "ring":
            return ring_lattice(self.n, self.k)
        if self.kind == "ba":
            return barabasi_albert(self.n, self.m, self.seed if seed is None else seed)
        if self.kind == "complete":
            return complete_graph(self.n)
        raise ParameterError(f"unknown topology kind {self.kind!r}")


# Names used for the evaluated networks; BA2 has average degree 4.2, i.e. m=3.
PRESETS = {
    "R1": TopologySpec("ring", 10, k=1),
    "R2": TopologySpec("ring", 10, k=2),
    "R3": TopologySpec("ring", 10, k=3),
    "BA1": TopologySpec("ba", 10, m=1),
    "BA2": TopologySpec("ba", 10, m=3),
}


def laplacian(t: Topology) -> np.ndarray:
    """Graph Laplacian ``diag(degree) - adjacency`` as float64.

    Built in integer arithmetic, so every row sums to exactly zero.
    """
    lap = np.zeros((t.n, t.n), dtype=np.int64)
    for i, s in enumerate(t.neighbors):
        lap[i, i] = len(s)
        for j in s:
            lap[i, j] = -1
    return lap.astype(float)


def spectral_summary(t: Topology) -> SpectralSummary:
    if not t.is_connected():
        raise DomainError("graph is disconnected; algebraic connectivity would be 0")
    eig = symmetric_eigenvalues(laplacian(t))
    return SpectralSummary(tuple(float(v) for v in eig), t.max_degree)


def qt_norm(t: Topology, eps: float, step: int) -> float:
    """Induced 2-norm of ``(I - eps L)^step - (1/n) 1 1^T``.

    The matrix is symmetric with eigenvalues ``0`` and ``(1 - eps*lambda_i)^step``
    for ``i >= 2``, so its norm is the largest of those in magnitude.
    """
    if step < 0:
        raise ParameterError("step must be >= 0")
    summary = spectral_summary(t)
    if not summary.eps_valid(eps):
        raise ParameterError(f"sharing rate {eps} outside (0, {summary.eps_max}]")
    kappas = 1.0 - eps * np.asarray(summary.eigenvalues[1:])
    if kappas.size == 0:
        return 0.0
    return float(np.max(np.abs(kappas) ** step))


def dynamic_sequence(spec: TopologySpec, epochs: int, seed: int) -> list[Topology]:
    """One independently generated graph per epoch, reproducible per (seed, epoch)."""
    if spec.kind != "ba":
        raise ParameterError("dynamic topologies are generated with the BA model")
    return [dynamic_topology(spec, seed, e) for e in range(epochs)]


def dynamic_topology(spec: TopologySpec, seed: int, epoch: int) -> Topology:
    return spec.build(seed=np.random.SeedSequence([int(seed), int(epoch)]))


def mean_lambda2(spec: TopologySpec, count: int = 100, seed: int = 0) -> float:
    """Average algebraic connectivity of ``count`` generated graphs."""
    return float(np.mean([spectral_summary(g).lambda2 for g in dynamic_sequence(spec, count, seed)]))
