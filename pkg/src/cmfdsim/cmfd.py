"""Consensus-based distillation (CMFD), the parameter-averaging baseline, and
the two-device toy model.

Both federated loops are synchronous. Phase 1 runs local SGD on every
device; after a barrier, phase 2 aggregates. CMFD devices exchange only
float32 output vectors on the public set. Baseline devices exchange
parameters. Every random draw comes from a generator keyed on
``(seed, device, epoch, phase)``, so the worker-thread count cannot change
a single bit of the result.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .data import LabeledDataset, PublicSet
from .errors import ConfigurationError, NumericError, ParameterError, ProtocolError
from .graph import Topology
from .nn import MlpModel

WIRE_DTYPE = np.dtype("<f4")
WIRE_BYTES = WIRE_DTYPE.itemsize

_PHASE_LOCAL = 0
_PHASE_DISTILL = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


@dataclass
class DeviceState:
    """What one device owns: its model, its data, and the last outputs it sent."""

    model: MlpModel
    local_data: LabeledDataset
    shared_outputs: Optional[np.ndarray] = None
    neighbor_outputs: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.local_data) == 0:
            raise ConfigurationError("a device needs local data")
        if self.local_data.dim != self.model.dim_in:
            raise ConfigurationError(
                f"data width {self.local_data.dim} != model input {self.model.dim_in}")


def device_rng(seed: int, device: int, epoch: int, phase: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(device), int(epoch), int(phase)])


def _minibatches(count: int, batch_size: int, rng: np.random.Generator):
    if batch_size < 1:
        raise ParameterError("batch size must be >= 1")
    order = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def local_sgd_epoch(d: DeviceState, eta: float, batch_size: int, rng: np.random.Generator) -> DeviceState:
    """One shuffled pass of minibatch SGD on the summed cross-entropy."""
    data = d.local_data
    for idx in _minibatches(len(data), batch_size, rng):
        _, grads = d.model.backward(data.inputs[idx], data.labels[idx], "ce")
        d.model.sgd_step(grads, eta)
    return d


def compute_shared_outputs(d: DeviceState, public: PublicSet) -> np.ndarray:
    """Head outputs on the public set, rounded to the 4-byte wire format."""
    out = d.model.forward(public.inputs).astype(WIRE_DTYPE)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite shared outputs")
    d.shared_outputs = out
    return out


def aggregate_targets(neighbor_outputs: Mapping[int, np.ndarray], neighbors: Sequence[int]) -> np.ndarray:
    """Mean of the neighbors' outputs. The device's own output is not included."""
    order = sorted(int(j) for j in neighbors)
    if not order:
        raise ParameterError("aggregation needs at least one neighbor")
    missing = [j for j in order if j not in neighbor_outputs]
    if missing:
        raise ProtocolError(f"no output report from device {missing[0]}")
    total = np.zeros(np.shape(neighbor_outputs[order[0]]), dtype=float)
    for j in order:
        total += np.asarray(neighbor_outputs[j], dtype=float)
    return total / len(order)


def distillation_loss(model: MlpModel, public, targets) -> float:
    """``sum_x |f(x) - target(x)|^2`` over the public set."""
    x = public.inputs if isinstance(public, PublicSet) else np.asarray(public, dtype=float)
    diff = model.forward(x) - np.asarray(targets, dtype=float)
    return float(np.sum(diff * diff))


def distillation_step(d: DeviceState, eps: float, n_i: int, targets, public: PublicSet,
                      batch_size: int, rng: np.random.Generator) -> DeviceState:
    """One epoch of minibatch descent on the distillation loss, step ``eps * n_i``."""
    if eps <= 0:
        raise ParameterError("sharing rate must be positive")
    targets = np.asarray(targets, dtype=float)
    if targets.shape != (len(public), d.model.dim_out):
        raise ParameterError(f"targets shape {targets.shape} does not cover the public set")
    lr = eps * n_i
    for idx in _minibatches(len(public), batch_size, rng):
        _, grads = d.model.backward(public.inputs[idx], targets[idx], "mse")
        d.model.sgd_step(grads, lr)
    return d


# -- traffic ------------------------------------------------------------------


def cmfd_link_bytes(public_size: int, dim_out: int) -> int:
    """Bytes one device sends over one link per epoch under CMFD."""
    return public_size * dim_out * WIRE_BYTES


def param_avg_link_bytes(n_params: int) -> int:
    return n_params * WIRE_BYTES


def epoch_bytes(topology: Topology, per_link: Sequence[int]) -> int:
    """Total bytes in one epoch: each device sends its payload on each of its links."""
    return sum(per_link[i] * len(topology.neighbors[i]) for i in range(topology.n))


# -- audit digests ------------------------------------------------------------


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def outputs_digest(outputs: np.ndarray) -> str:
    return f"{fnv1a64(np.ascontiguousarray(outputs, dtype=WIRE_DTYPE).tobytes()):016x}"


def broadcast_record(epoch: int, device: int, outputs: np.ndarray) -> str:
    return json.dumps({"epoch": epoch, "device": device, "outputs_digest": outputs_digest(outputs)})


# -- federated loops ----------------------------------------------------------


@dataclass
class EpochResult:
    """State after an epoch. Epoch 0 describes the initial models."""

    epoch: int
    models: list
    distill_loss: Optional[np.ndarray]
    bytes: int
    topology: Topology
    digests: Optional[list] = None


TopologySource = Callable[[int], Topology]


def _topology_source(topology) -> TopologySource:
    if isinstance(topology, Topology):
        return lambda epoch: topology
    return topology


class _Pool:
    """Maps a function over devices, serially or on a thread pool.

    Results come back in device order, and each device's work depends only on
    its own state and its own generator.
    """

    def __init__(self, threads: int):
        if threads < 1:
            raise ParameterError("threads must be >= 1")
        self._executor = ThreadPoolExecutor(threads) if threads > 1 else None

    def map(self, fn, items):
        if self._executor is None:
            return [fn(x) for x in items]
        return list(self._executor.map(fn, items))

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()


def _check_finite(model: MlpModel, epoch: int, device: int):
    if not all(np.all(np.isfinite(w)) and np.all(np.isfinite(b)) for w, b in zip(model.weights, model.biases)):
        raise NumericError(f"device {device} diverged", epoch=epoch)


def run_cmfd(devices: Sequence[DeviceState], public: PublicSet, topology, epochs: int,
             eta: float, eps: float, *, batch_size: int = 10, distill_batch_size: int = 10,
             seed: int = 0, threads: int = 1, audit: bool = False) -> Iterator[EpochResult]:
    """CMFD epochs. Yields one result per epoch, starting with epoch 0.

    Architectures may differ between devices. They only need to agree on
    input and output widths.
    """
    widths = {(d.model.dim_in, d.model.dim_out) for d in devices}
    if len(widths) != 1:
        raise ConfigurationError("devices disagree on input or output width")
    source = _topology_source(topology)
    per_link = [cmfd_link_bytes(len(public), d.model.dim_out) for d in devices]
    pool = _Pool(threads)
    n = len(devices)
    try:
        yield EpochResult(0, [d.model for d in devices], None, 0, source(0))
        for epoch in range(1, epochs + 1):
            topo = source(epoch)
            if topo.n != n:
                raise ConfigurationError(f"topology has {topo.n} nodes for {n} devices")

            def phase1(i):
                d = devices[i]
                local_sgd_epoch(d, eta, batch_size, device_rng(seed, i, epoch, _PHASE_LOCAL))
                _check_finite(d.model, epoch, i)
                return compute_shared_outputs(d, public)

            outputs = pool.map(phase1, range(n))
            # barrier: every device now sees immutable snapshots of its neighbors' outputs
            for i, d in enumerate(devices):
                d.neighbor_outputs = {j: outputs[j] for j in topo.neighbors[i]}

            def phase2(i):
                d = devices[i]
                nbrs = topo.neighbors[i]
                if not nbrs:
                    return 0.0
                targets = aggregate_targets(d.neighbor_outputs, nbrs)
                loss = distillation_loss(d.model, public, targets)
                distillation_step(d, eps, len(nbrs), targets, public, distill_batch_size,
                                  device_rng(seed, i, epoch, _PHASE_DISTILL))
                _check_finite(d.model, epoch, i)
                return loss

            losses = np.asarray(pool.map(phase2, range(n)))
            digests = [outputs_digest(o) for o in outputs] if audit else None
            yield EpochResult(epoch, [d.model for d in devices], losses,
                              epoch_bytes(topo, per_link), topo, digests)
    finally:
        pool.close()


def run_param_avg(devices: Sequence[DeviceState], topology, epochs: int, eta: float, eps: float,
                  *, batch_size: int = 10, seed: int = 0, threads: int = 1) -> Iterator[EpochResult]:
    """Baseline: local SGD, then ``w_i <- w_i - eps * sum_j (w_i - w_j)`` over neighbors."""
    archs = {(tuple(d.model.layer_sizes), d.model.head) for d in devices}
    if len(archs) != 1:
        raise ConfigurationError("parameter averaging needs one shared architecture on every device")
    source = _topology_source(topology)
    per_link = [param_avg_link_bytes(d.model.n_params) for d in devices]
    pool = _Pool(threads)
    n = len(devices)
    try:
        yield EpochResult(0, [d.model for d in devices], None, 0, source(0))
        for epoch in range(1, epochs + 1):
            topo = source(epoch)
            if topo.n != n:
                raise ConfigurationError(f"topology has {topo.n} nodes for {n} devices")

            def phase1(i):
                d = devices[i]
                local_sgd_epoch(d, eta, batch_size, device_rng(seed, i, epoch, _PHASE_LOCAL))
                _check_finite(d.model, epoch, i)
                return d.model.get_flat()

            flats = pool.map(phase1, range(n))
            for i, d in enumerate(devices):
                nbrs = sorted(topo.neighbors[i])
                if nbrs:
                    pull = np.zeros_like(flats[i])
                    for j in nbrs:
                        pull += flats[i] - flats[j]
                    d.model.set_flat(flats[i] - eps * pull)
            for i, d in enumerate(devices):
                _check_finite(d.model, epoch, i)
            yield EpochResult(epoch, [d.model for d in devices], None,
                              epoch_bytes(topo, per_link), topo)
    finally:
        pool.close()


# -- toy model ----------------------------------------------------------------


@dataclass
class ToyState:
    """Two devices, each predicting ``f_i(x) = w_a^i w_b^i x``."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(2, 2)
        if not np.all(np.isfinite(w)):
            raise ParameterError("toy weights must be finite")
        self.weights = w

    @property
    def products(self) -> np.ndarray:
        return self.weights[:, 0] * self.weights[:, 1]


TOY_PUBLIC = (-1.0, 1.0)


def toy_distill_direction(s: ToyState, i: int) -> np.ndarray:
    """Descent direction of device ``i``'s distillation loss, up to a positive factor."""
    j = 1 - i
    p = s.products
    wa, wb = s.weights[i]
    return -(p[i] - p[j]) * np.array([wb, wa])


def _toy_grad(w, target_product, xs):
    # d/dw sum_x (w_a w_b x - c x)^2
    scale = 2.0 * float(np.sum(np.square(xs)))
    return scale * (w[0] * w[1] - target_product) * np.array([w[1], w[0]])


def toy_step(s: ToyState, scheme: str, eta: float = 0.05, eps: float = 0.05,
             public: Sequence[float] = TOY_PUBLIC) -> ToyState:
    """Local step toward ``f*(x) = x``, then one aggregation step."""
    xs = np.asarray(public, dtype=float)
    w = s.weights
    local = np.stack([w[i] - eta * _toy_grad(w[i], 1.0, xs) for i in range(2)])
    if scheme == "distill":
        p = local[:, 0] * local[:, 1]
        new = np.stack([local[i] - eps * _toy_grad(local[i], p[1 - i], xs) for i in range(2)])
    elif scheme == "param_avg":
        new = np.stack([local[i] - eps * (local[i] - local[1 - i]) for i in range(2)])
    else:
        raise ParameterError(f"unknown toy scheme {scheme!r}")
    return ToyState(new)


def run_toy(scheme: str, init, steps: int, eta: float = 0.05, eps: float = 0.05) -> np.ndarray:
    """Trajectory of shape ``(steps + 1, 2, 2)``; row 0 is the initialization."""
    s = ToyState(init)
    traj = [s.weights.copy()]
    for _ in range(steps):
        s = toy_step(s, scheme, eta, eps)
        traj.append(s.weights.copy())
    return np.asarray(traj)
