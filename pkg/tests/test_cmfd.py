import json

import numpy as np
import pytest

from cmfdsim.cmfd import (DeviceState, ToyState, aggregate_targets, broadcast_record, cmfd_link_bytes,
                          compute_shared_outputs, device_rng, distillation_loss, distillation_step,
                          epoch_bytes, fnv1a64, local_sgd_epoch, outputs_digest, param_avg_link_bytes,
                          run_cmfd, run_param_avg, run_toy, toy_distill_direction, toy_step)
from cmfdsim.data import LabeledDataset, PublicSet, make_public, partition_ring, synth_blobs
from cmfdsim.errors import ConfigurationError, ParameterError, ProtocolError
from cmfdsim.graph import PRESETS, Topology, TopologySpec, dynamic_topology, ring_lattice
from cmfdsim.nn import MlpModel
from oracles import reference


@pytest.fixture(scope="module")
def blobs():
    ds = synth_blobs(10, 60, 0.15, seed=0)
    parts = partition_ring(ds, 10, per_device=40, seed=1)
    return ds, parts, make_public(ds, 50, seed=2)


def make_devices(parts, hidden=(8,), seeds=None):
    return [DeviceState(MlpModel([2, *hidden, 10], seed=100 + i if seeds is None else seeds), p)
            for i, p in enumerate(parts)]


def test_device_state_validation(blobs):
    _, parts, _ = blobs
    with pytest.raises(ConfigurationError):
        DeviceState(MlpModel([3, 10], seed=0), parts[0])


def test_zero_rate_leaves_model_unchanged(blobs):
    _, parts, _ = blobs
    d = make_devices(parts[:1])[0]
    before = d.model.get_flat()
    local_sgd_epoch(d, 0.0, 7, np.random.default_rng(0))
    np.testing.assert_array_equal(d.model.get_flat(), before)


def test_local_epoch_replays_as_sgd_steps(blobs):
    _, parts, _ = blobs
    d = make_devices(parts[:1])[0]
    ref = d.model.copy()
    local_sgd_epoch(d, 0.01, 7, np.random.default_rng(42))
    order = np.random.default_rng(42).permutation(len(parts[0]))
    for start in range(0, len(order), 7):
        idx = order[start:start + 7]
        _, g = ref.backward(parts[0].inputs[idx], parts[0].labels[idx], "ce")
        ref.sgd_step(g, 0.01)
    np.testing.assert_array_equal(d.model.get_flat(), ref.get_flat())


def test_shared_outputs_are_float32(blobs):
    _, parts, pub = blobs
    d = make_devices(parts[:1])[0]
    out = compute_shared_outputs(d, pub)
    assert out.dtype == np.float32 and out.shape == (50, 10)
    assert d.shared_outputs is out


def test_aggregate_one_neighbor_and_cancellation():
    y = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(aggregate_targets({2: y}, [2]), y)
    np.testing.assert_array_equal(aggregate_targets({1: y, 2: -y}, [1, 2]), np.zeros_like(y))


def test_aggregate_mean_oracle_and_self_exclusion():
    rng = np.random.default_rng(1)
    outs = {j: rng.standard_normal((5, 2)) for j in range(4)}
    got = aggregate_targets(outs, [1, 2, 3])
    np.testing.assert_allclose(got, (outs[1] + outs[2] + outs[3]) / 3, atol=1e-12)


def test_aggregate_missing_neighbor_named():
    with pytest.raises(ProtocolError, match="device 7"):
        aggregate_targets({1: np.zeros(2)}, [1, 7])
    with pytest.raises(ParameterError):
        aggregate_targets({}, [])


def test_distillation_loss_cases(blobs):
    _, _, pub = blobs
    m = MlpModel([2, 8, 10], seed=0)
    out = m.forward(pub.inputs)
    assert distillation_loss(m, pub, out) == 0.0
    targets = np.random.default_rng(0).random(out.shape)
    assert distillation_loss(m, pub, targets) == pytest.approx(
        reference.naive_distillation_loss(out, targets), abs=1e-12)
    lin = MlpModel([1, 1], head="identity", seed=0).set_flat([2.0, 0.0])
    assert distillation_loss(lin, np.array([[1.5]]), [[1.0]]) == pytest.approx(4.0)


def test_distillation_step_matched_targets_is_noop(blobs):
    _, parts, pub = blobs
    d = make_devices(parts[:1])[0]
    targets = d.model.forward(pub.inputs)
    before = d.model.get_flat()
    distillation_step(d, 0.1, 2, targets, pub, 10, np.random.default_rng(0))
    np.testing.assert_allclose(d.model.get_flat(), before, atol=1e-15)


def test_distillation_step_linear_closed_form():
    data = LabeledDataset(np.array([[0.0]]), np.array([0]), 1)
    d = DeviceState(MlpModel([1, 1], head="identity", seed=0).set_flat([0.5, 0.0]), data)
    x, target, eps, n_i = 2.0, 3.0, 0.01, 3
    distillation_step(d, eps, n_i, [[target]], PublicSet([[x]]), 1, np.random.default_rng(0))
    gap = 0.5 * x - target
    np.testing.assert_allclose(d.model.get_flat(), [0.5 - eps * n_i * 2 * gap * x, -eps * n_i * 2 * gap])


def test_distillation_step_descends(blobs):
    _, parts, pub = blobs
    d = make_devices(parts[:1])[0]
    targets = np.random.default_rng(3).dirichlet(np.ones(10), len(pub))
    before = distillation_loss(d.model, pub, targets)
    distillation_step(d, 1e-3, 2, targets, pub, 10, np.random.default_rng(0))
    assert distillation_loss(d.model, pub, targets) < before


def test_distillation_step_validation(blobs):
    _, parts, pub = blobs
    d = make_devices(parts[:1])[0]
    with pytest.raises(ParameterError):
        distillation_step(d, 0.0, 1, np.zeros((50, 10)), pub, 10, np.random.default_rng(0))
    with pytest.raises(ParameterError):
        distillation_step(d, 0.1, 1, np.zeros((49, 10)), pub, 10, np.random.default_rng(0))


def test_traffic_counts():
    assert cmfd_link_bytes(1000, 10) == 40_000
    assert param_avg_link_bytes(1234) == 4936
    ring = ring_lattice(10, 1)
    assert epoch_bytes(ring, [100] * 10) == 100 * 20


def test_fnv_against_reference_and_known_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    data = np.random.default_rng(0).bytes(257)
    assert fnv1a64(data) == reference.fnv1a64(data)


def test_broadcast_record_format():
    rec = json.loads(broadcast_record(3, 1, np.zeros((2, 2), dtype=np.float32)))
    assert rec == {"epoch": 3, "device": 1, "outputs_digest": outputs_digest(np.zeros((2, 2)))}
    assert len(rec["outputs_digest"]) == 16


def test_single_device_reduces_to_plain_sgd(blobs):
    _, parts, pub = blobs
    solo = Topology.from_edges(1, [])
    a = list(run_cmfd(make_devices(parts[:1], seeds=5), pub, solo, 3, 0.01, 0.1, seed=9))
    b = list(run_param_avg(make_devices(parts[:1], seeds=5), solo, 3, 0.01, 0.1, seed=9))
    np.testing.assert_array_equal(a[-1].models[0].get_flat(), b[-1].models[0].get_flat())


def test_identical_devices_have_nothing_to_distill(blobs):
    _, parts, pub = blobs
    devices = make_devices([parts[0]] * 4, seeds=3)
    # full-batch local step, so per-device shuffles cannot break the symmetry
    stream = run_cmfd(devices, pub, ring_lattice(4, 1), 1, 0.01, 0.1, batch_size=len(parts[0]))
    *_, last = stream
    # float32 rounding of the shared outputs is the only gap left
    assert np.all(last.distill_loss < 1e-10)
    outs = {i: d.shared_outputs for i, d in enumerate(devices)}
    np.testing.assert_allclose(aggregate_targets(outs, [1, 3]), outs[0], atol=1e-7)


def test_run_cmfd_stream_shape(blobs):
    _, parts, pub = blobs
    res = list(run_cmfd(make_devices(parts), pub, PRESETS["R1"].build(), 2, 0.01, 0.01, audit=True))
    assert [r.epoch for r in res] == [0, 1, 2]
    assert res[0].distill_loss is None and res[0].bytes == 0
    assert res[1].bytes == 20 * cmfd_link_bytes(50, 10)
    assert len(res[2].digests) == 10


def test_heterogeneous_models(blobs):
    _, parts, pub = blobs
    devices = [DeviceState(MlpModel([2, 16 if i < 5 else 4, 10], seed=i), p) for i, p in enumerate(parts)]
    res = list(run_cmfd(devices, pub, PRESETS["R3"].build(), 2, 0.01, 0.01))
    assert np.all(np.isfinite(res[-1].distill_loss))
    with pytest.raises(ConfigurationError):
        list(run_param_avg(devices, PRESETS["R3"].build(), 1, 0.01, 0.1))


def test_width_mismatch_rejected(blobs):
    _, parts, pub = blobs
    devices = make_devices(parts[:2])
    devices[1] = DeviceState(MlpModel([2, 8, 5], seed=0),
                             LabeledDataset(parts[1].inputs, parts[1].labels % 5, 5))
    with pytest.raises(ConfigurationError):
        list(run_cmfd(devices, pub, Topology.from_edges(2, [(0, 1)]), 1, 0.01, 0.01))


def test_param_avg_consensus_by_hand(blobs):
    _, parts, _ = blobs
    topo = Topology.from_edges(2, [(0, 1)])
    devices = make_devices(parts[:2], seeds=1)
    copies = [d.model.copy() for d in devices]
    *_, last = run_param_avg(devices, topo, 1, 0.01, 0.2, batch_size=10, seed=4)
    for i, m in enumerate(copies):
        d = DeviceState(m, parts[i])
        local_sgd_epoch(d, 0.01, 10, device_rng(4, i, 1, 0))
    w0, w1 = copies[0].get_flat(), copies[1].get_flat()
    np.testing.assert_allclose(last.models[0].get_flat(), w0 - 0.2 * (w0 - w1), atol=1e-15)


@pytest.mark.parametrize("runner", ["cmfd", "param_avg"])
def test_thread_count_does_not_change_results(blobs, runner):
    _, parts, pub = blobs
    spec = TopologySpec("ba", 10, m=2)
    topo = lambda e: dynamic_topology(spec, 5, e)  # noqa: E731

    def final(threads):
        devices = make_devices(parts, seeds=7 if runner == "param_avg" else None)
        if runner == "cmfd":
            stream = run_cmfd(devices, pub, topo, 3, 0.01, 0.01, threads=threads)
        else:
            stream = run_param_avg(devices, topo, 3, 0.01, 0.1, threads=threads)
        return np.concatenate([m.get_flat() for m in list(stream)[-1].models])

    np.testing.assert_array_equal(final(1), final(4))


def test_toy_direction_examples():
    s = ToyState([0.5, 0.5, -2.0, -1.0])
    np.testing.assert_allclose(toy_distill_direction(s, 0), 1.75 * np.array([0.5, 0.5]))
    assert np.all(toy_distill_direction(ToyState([1.0, 2.0, -2.0, -1.0]), 0) == 0)
    # parameter averaging pulls device 0 toward device 1 = out of the first quadrant
    pull = -(s.weights[0] - s.weights[1])
    assert np.all(pull < 0)


def test_toy_runs():
    dist = run_toy("distill", [0.5, 0.5, -2.0, -1.0], 400)
    prods = dist[-1, :, 0] * dist[-1, :, 1]
    assert np.all(np.abs(prods - 1) < 1e-3)
    assert np.all(dist[-1, 1] < 0)  # device 1 stays in its own optimal region
    avg = run_toy("param_avg", [0.5, 0.5, -2.0, -1.0], 1)
    assert avg[1, 0, 0] * avg[1, 0, 1] < 0.25
    with pytest.raises(ParameterError):
        toy_step(ToyState([0, 0, 0, 0]), "gossip")
    with pytest.raises(ParameterError):
        ToyState([np.nan, 0, 0, 0])
