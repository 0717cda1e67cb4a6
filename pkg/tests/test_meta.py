import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmfdsim import kernels
from cmfdsim.errors import DomainError, NumericError, ParameterError
from cmfdsim.funcspace import inner, two_block_measures, uniform_measures
from cmfdsim.graph import complete_graph, ring_lattice, spectral_summary
from cmfdsim.meta import (LossFunctional, bound_constants, check_sharing_rate, consensus_matrix,
                          consensus_step, distance_limit, frechet_subgradient, gamma,
                          gamma_constant_bound, gamma_series, local_step, project_positive, run_meta,
                          step_sizes, best_loss_limit, best_loss_rhs, best_loss_series)


def sine_instance(n=10, S=16, high=0.8):
    x = (np.arange(S) + 0.5) / S
    target = np.sin(2 * np.pi * x)[:, None]
    return two_block_measures(n, S, high), LossFunctional("mse", target)


def test_loss_values():
    target = np.array([[1.0], [2.0]])
    loss = LossFunctional("mse", target)
    assert loss.value(np.array([[0.0], [0.0]]), np.array([0.5, 0.5])) == pytest.approx(2.5)
    kl = LossFunctional("kl", np.array([[0.5, 0.5]]))
    assert kl.value(np.array([[0.5, 0.5]]), np.array([1.0])) == pytest.approx(0.0)
    assert kl.value(np.array([[0.9, 0.1]]), np.array([1.0])) == pytest.approx(
        0.9 * math.log(1.8) + 0.1 * math.log(0.2))


def test_loss_validation():
    with pytest.raises(ParameterError):
        LossFunctional("hinge", np.zeros((2, 1)))
    with pytest.raises(DomainError):
        LossFunctional("kl", np.array([[0.7, 0.7]]))
    with pytest.raises(DomainError):
        LossFunctional("kl", np.array([[0.5, 0.5]])).pointwise(np.array([[0.0, 1.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["mse", "kl"]))
def test_subgradient_inequality(seed, kind):
    rng = np.random.default_rng(seed)
    S, M = 6, 3
    w = rng.dirichlet(np.ones(S))
    if kind == "mse":
        target, f, h = rng.standard_normal((3, S, M))
    else:
        target, f, h = (rng.dirichlet(np.ones(M), S) for _ in range(3))
    loss = LossFunctional(kind, target)
    d = frechet_subgradient(f, loss)
    # KL is convex on the positive orthant, so the bound holds with the full gradient
    assert inner(d, h - f, w) <= loss.value(h, w) - loss.value(f, w) + 1e-12


def test_subgradient_shape_check():
    loss = LossFunctional("mse", np.zeros((3, 1)))
    with pytest.raises(ParameterError):
        frechet_subgradient(np.zeros((2, 1)), loss)


def test_project_positive():
    f, count = project_positive(np.array([[-0.5, 1.0], [0.3, 0.7]]))
    assert count == 1
    np.testing.assert_allclose(f.sum(axis=1), [1.0, 1.0])
    assert f.min() > 0


def test_local_step_by_hand():
    f = np.array([[1.0], [2.0]])
    d = np.array([[4.0], [-2.0]])
    out = local_step(f, d, np.array([0.5, 2.0]), 0.25)
    np.testing.assert_allclose(out, [[0.5], [3.0]])
    with pytest.raises(ParameterError):
        local_step(f, d, np.array([1.0]), 0.1)


def test_consensus_forms_agree_and_keep_the_mean(rng):
    t = ring_lattice(8, 2)
    g = rng.standard_normal((8, 5, 2))
    a = consensus_step(g, t, 0.1)
    b = consensus_step(g, t, 0.1, form="matrix")
    np.testing.assert_allclose(a, b, atol=1e-14)
    np.testing.assert_allclose(a.mean(axis=0), g.mean(axis=0), atol=1e-14)


def test_consensus_on_complete_graph_at_one_over_n_is_exact_average(rng):
    g = rng.standard_normal((5, 3, 1))
    with pytest.warns(UserWarning):
        out = consensus_step(g, complete_graph(5), 1 / 5, form="matrix")
    np.testing.assert_allclose(out, np.broadcast_to(g.mean(axis=0), g.shape), atol=1e-14)


def test_sharing_rate_warning():
    t = ring_lattice(10, 1)
    assert check_sharing_rate(t, 0.25)
    with pytest.warns(UserWarning):
        assert not check_sharing_rate(t, 0.3)
    with pytest.raises(ParameterError):
        check_sharing_rate(t, 0.0)


def test_consensus_matrix_rows_sum_to_one():
    P = consensus_matrix(ring_lattice(6, 2), 0.1)
    np.testing.assert_allclose(P.sum(axis=1), np.ones(6), atol=1e-15)


def test_step_sizes():
    np.testing.assert_allclose(step_sizes("inv_t", 0.1, 4), [0.1, 0.05, 0.1 / 3, 0.025])
    np.testing.assert_allclose(step_sizes("inv_sqrt_t", 1.0, 4), 1 / np.sqrt([1, 2, 3, 4]))
    assert np.all(step_sizes("constant", 0.2, 3) == 0.2)
    with pytest.raises(ParameterError):
        step_sizes("cosine", 0.1, 3)
    with pytest.raises(ParameterError):
        step_sizes("constant", 0.0, 3)


def test_gamma_recursion_matches_sum():
    etas = 0.1 / np.arange(1, 51)
    series = gamma_series(2.0, 10, 0.9, 1.5, etas)
    for t in (1, 2, 7, 50):
        assert series[t - 1] == pytest.approx(gamma(t, 2.0, 10, 0.9, 1.5, etas), rel=1e-12)
    assert series[0] == pytest.approx(2.0 / math.sqrt(10))


def test_gamma_geometric_bound_dominates():
    etas = 0.1 / np.arange(1, 201)
    series = gamma_series(1.0, 10, 0.8, 2.0, etas)
    for t in range(1, 201, 13):
        assert series[t - 1] <= gamma_constant_bound(t, 1.0, 10, 0.8, 2.0, 0.1) + 1e-15


def test_constant_step_gamma_tends_to_limit():
    # kappa2 = 1 - eps * lambda2, so the geometric bound tends to distance_limit
    s = spectral_summary(ring_lattice(10, 1))
    eps = s.eps_max
    k2 = s.kappa2(eps)
    series = gamma_series(1.0, 10, k2, 1.3, np.full(3000, 0.02))
    assert series[-1] == pytest.approx(distance_limit(0.02, 1.3, eps, s.lambda2), rel=1e-10)


def test_best_loss_rhs_matches_series():
    etas = 0.1 / np.arange(1, 101)
    ser = best_loss_series(0.3, 5.0, 1.2, 0.9, 0.7, 10, etas)
    assert math.isnan(ser[0])
    for t in (2, 3, 50, 100):
        assert ser[t - 1] == pytest.approx(best_loss_rhs(t, 0.3, 5.0, 1.2, 0.9, 0.7, 10, etas), rel=1e-12)
    with pytest.raises(ParameterError):
        best_loss_rhs(1, 0.3, 5.0, 1.2, 0.9, 0.7, 10, etas)


def test_best_loss_limit_example():
    # recomputed from the closed form: 0.005 * (1 + 4 sqrt(10) * 0.962 / 0.038)
    assert best_loss_limit(0.01, 1.0, 10, 0.1, 0.38) == pytest.approx(1.6061, abs=5e-4)


def test_constant_step_rhs_tends_to_limit():
    s = spectral_summary(ring_lattice(10, 2))
    eps = s.eps_max
    k2 = s.kappa2(eps)
    lm, eta = 1.0, 0.01
    c2 = 4 * lm * k2 / (1 - k2)
    rhs = best_loss_rhs(2_000_000, 0.5, c2, lm, k2, 1.0, 10, np.full(2_000_000, eta))
    assert rhs == pytest.approx(best_loss_limit(eta, lm, 10, eps, s.lambda2), rel=1e-3)


def test_bound_constants():
    r = bound_constants(2.0, 0.5, 0.25, 2.0, 10, 0.1, c1=0.4)
    assert r.c2 == pytest.approx(8.0)
    assert r.limit_distance == pytest.approx(0.1 * 0.5 * 2.0 / 0.5)
    assert bound_constants(2.0, 0.5, 0.25, 2.0, 10, 0.1, constant_eta=False).limit_best is None
    assert set(r.to_dict()) == {"c1", "c2", "lm", "kappa2", "limit_distance", "limit_best"}


@pytest.mark.parametrize("k", [1, 3])
def test_run_meta_respects_envelopes(k, backend):
    measures, loss = sine_instance()
    topo = ring_lattice(10, k)
    eps = spectral_summary(topo).eps_max
    trace = run_meta(topo, measures, loss, np.zeros((10, 16, 1)), 0.1 / np.arange(1, 301), eps,
                     backend=backend)
    assert trace.backend == backend.BACKEND
    assert trace.distance_violations() == 0
    assert trace.best_violations() == 0
    assert np.all(np.diff(trace.loss_best) <= 0)
    assert trace.lm == pytest.approx(np.max(np.sqrt(measures.s_sup) * trace.lipschitz))


def test_run_meta_first_distance_is_initial_spread():
    measures, loss = sine_instance(n=4)
    f0 = np.zeros((4, 16, 1))
    f0[0] += 1.0
    trace = run_meta(ring_lattice(4, 1), measures, loss, f0, [0.01, 0.01], 0.25)
    w = measures.global_weights
    mean = f0.mean(axis=0)
    expect = math.sqrt(sum(inner(p - mean, p - mean, w) for p in f0) / 4)
    assert trace.distance[0] == pytest.approx(expect, rel=1e-12)


def test_run_meta_iid_keeps_devices_identical():
    S = 8
    target = np.linspace(-1, 1, S)[:, None]
    trace = run_meta(ring_lattice(6, 1), uniform_measures(6, S), LossFunctional("mse", target),
                     np.zeros((6, S, 1)), np.full(50, 0.05), 0.25)
    assert np.max(trace.distance) < 1e-15
    # identical devices follow f <- f - 2 eta (f - f*)
    expect = target * (1 - (1 - 0.1) ** 50)
    np.testing.assert_allclose(trace.final[0], expect, atol=1e-12)


def test_run_meta_kl_stays_on_simplex():
    S = 8
    x = (np.arange(S) + 0.5) / S
    p = 0.5 + 0.4 * np.sin(2 * np.pi * x)
    target = np.column_stack([p, 1 - p])
    trace = run_meta(ring_lattice(10, 1), two_block_measures(10, S), LossFunctional("kl", target),
                     np.full((10, S, 2), 0.5), 0.1 / np.arange(1, 201), 0.25)
    np.testing.assert_allclose(trace.final.sum(axis=2), 1.0, atol=1e-12)
    assert trace.final.min() > 0
    assert trace.distance_violations() == 0


def test_run_meta_divergence_reports_epoch():
    measures, loss = sine_instance(n=4)
    with pytest.raises(NumericError) as err:
        run_meta(ring_lattice(4, 1), measures, loss, np.zeros((4, 16, 1)), np.full(4000, 5.0), 0.25)
    assert err.value.epoch is not None and err.value.epoch > 1


def test_run_meta_large_eps_has_no_envelope():
    measures, loss = sine_instance(n=4)
    with pytest.warns(UserWarning):
        trace = run_meta(ring_lattice(4, 1), measures, loss, np.zeros((4, 16, 1)), [0.1] * 5, 0.4)
    assert not trace.eps_valid and trace.report is None
    assert np.all(np.isnan(trace.gamma))


def test_run_meta_shape_checks():
    measures, loss = sine_instance(n=4)
    with pytest.raises(ParameterError):
        run_meta(ring_lattice(4, 1), measures, loss, np.zeros((3, 16, 1)), [0.1], 0.25)
    with pytest.raises(ParameterError):
        run_meta(ring_lattice(5, 1), measures, loss, np.zeros((5, 16, 1)), [0.1], 0.25)


def test_trace_csv(tmp_path):
    measures, loss = sine_instance(n=4)
    trace = run_meta(ring_lattice(4, 1), measures, loss, np.zeros((4, 16, 1)), 0.1 / np.arange(1, 6), 0.25)
    trace.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,D_t,gamma_t,loss_mean,loss_best,thm2_rhs"
    assert len(lines) == 6
    assert lines[1].endswith(",")  # no best-loss envelope at t = 1
