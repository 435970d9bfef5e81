"""Tests for analysis module."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import replace

import numpy as np
import pytest

from trust_consensus.analysis import (
    BOUND_COLUMNS,
    BoundParams,
    DeviationMetrics,
    aggregate_deviation,
    anchoring_product,
    bound_report,
    deviation_metrics,
    dilog_exponent,
    ell1,
    ell2,
    ell2_exact,
    ell_profile,
    empirical_recovery_time,
    recovery_time_proxy,
    replay_trace,
    resolved_recovery_times,
    s_of_gamma,
    u_leg,
    u_mal,
    u_total,
    xi,
)
from trust_consensus.errors import DomainError, NumericalError
from trust_consensus.protocol import LambdaSchedule, RunTrace, run_protocol
from trust_consensus.topology import NetworkTopology, generate_rgg
from trust_consensus.trust import TrustModel

# ─── helpers ─────────────────────────────────────────────────────────────────

GAMMA_GRID = np.geomspace(0.05, 5.0, 60)


def _s_series(c: float, gamma: float) -> float:
    x = c * math.exp(-gamma)
    k = np.arange(1, 20_000, dtype=float)
    return -float(np.sum(x**k / (k * (k + 1)))) / gamma


def _xi_series(c: float, gamma: float, e_m: float, terms: int = 100_000) -> float:
    k = np.arange(terms + 1, dtype=float)
    lam_k = c * np.exp(-gamma * k)
    lam_next = c * np.exp(-gamma * (k + 1))
    return float(np.sum((1 - lam_next) * (1 - lam_k) * np.exp(-2 * (k + 1) * e_m**2)))


def _params(**overrides) -> BoundParams:
    base = BoundParams(
        c=0.9,
        gamma=0.05,
        d_max=8,
        e_legit=0.2,
        e_malicious=-0.2,
        legit_count=50,
        malicious_count=10,
        v_min=0.01,
        tf_samples=(0,),
    )
    return replace(base, **overrides)


def _path3() -> NetworkTopology:
    return NetworkTopology.from_edges(3, 3, [(0, 1), (1, 2)])


def _sign_changes(values: np.ndarray) -> int:
    signs = np.sign(np.diff(values))
    signs = signs[signs != 0]
    return int(np.count_nonzero(signs[1:] != signs[:-1]))


@pytest.fixture(scope="module")
def rgg7() -> NetworkTopology:
    return generate_rgg(60, 0.2, 7, malicious_count=10)


# ─── anchoring exponent ──────────────────────────────────────────────────────


def test_s_of_gamma_reference_value():
    assert s_of_gamma(0.9, 1.0) == pytest.approx(-0.18766, abs=1e-4)
    assert ell2(0.9, 1.0) == pytest.approx(0.17110, abs=1e-4)


@pytest.mark.parametrize("c,gamma", list(itertools.product([0.1, 0.3, 0.5, 0.7, 0.9], [0.01, 0.1, 0.5, 1.0, 5.0])))
def test_s_of_gamma_matches_partial_sums(c, gamma):
    assert s_of_gamma(c, gamma) == pytest.approx(_s_series(c, gamma), abs=1e-10)


def test_s_of_gamma_small_argument_branch():
    # c·e^{-γ} below the series cutoff
    assert s_of_gamma(0.01, 5.0) == pytest.approx(_s_series(0.01, 5.0), rel=1e-12)
    assert s_of_gamma(0.9, 50.0) < 0


def test_s_of_gamma_limits():
    assert -1e-20 < s_of_gamma(0.9, 50.0) < 0
    assert 0 < math.exp(s_of_gamma(0.9, 0.5)) < 1


def test_dilog_chain():
    for c, gamma in itertools.product([0.2, 0.5, 0.9], [0.01, 0.1, 1.0, 3.0]):
        product = anchoring_product(c, gamma, start=1)
        assert product <= math.exp(dilog_exponent(c, gamma)) * (1 + 1e-12)
        assert dilog_exponent(c, gamma) <= s_of_gamma(c, gamma)


def test_anchoring_product_underflow_and_start():
    assert anchoring_product(0.9, 1e-4) == 0.0
    assert anchoring_product(0.5, 2.0) == pytest.approx((1 - 0.5) * anchoring_product(0.5, 2.0, start=1))


# ─── ℓ₁ / ℓ₂ ─────────────────────────────────────────────────────────────────


def test_ell2_decreases_in_gamma():
    values = np.array([ell2(0.9, g) for g in GAMMA_GRID])
    assert np.all(np.diff(values) < 0)
    assert ell2(0.9, 1e-6) == pytest.approx(1.0)
    assert ell2(0.9, 50.0) < 1e-20


def test_ell1_increases_in_gamma_for_early_recovery():
    values = np.array([ell1(0.9, g, 0, 5) for g in GAMMA_GRID])
    assert np.all(np.diff(values) > 0)
    assert ell1(0.9, 1e-6, 0, 5) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("tf", [0, 1])
def test_ell1_large_gamma_limit_early_recovery(tf):
    assert ell1(0.9, 50.0, tf, 5) == pytest.approx(0.9, abs=1e-12)


def test_ell1_large_gamma_limit_late_recovery():
    assert ell1(0.9, 50.0, 3, 5) == pytest.approx(0.9 / 36, rel=1e-9)


def test_ell1_matches_factorwise_evaluation():
    c, gamma, tf, d = 0.9, 0.5, 3, 5
    decay = (1 - c * math.exp(-gamma * tf)) ** (1 / (1 - math.exp(-gamma)))
    geometric = sum(math.exp(-gamma * k) for k in range(tf - 1))
    bracket = c * math.exp(-gamma * (tf - 1)) + c * ((1 - c * math.exp(-gamma)) / (d + 1)) ** (tf - 1) * geometric
    assert ell1(c, gamma, tf, d) == pytest.approx(decay * bracket, rel=1e-12)


def test_ell1_never_exceeds_exact_anchoring_for_early_recovery():
    for tf, g in itertools.product([0, 1], GAMMA_GRID):
        assert ell1(0.9, g, tf, 5) <= ell2_exact(0.9, g) + 1e-15


def test_exact_anchoring_limits_scale_with_v_min():
    v_min = 0.013
    assert v_min * ell2_exact(0.9, 1e-3) == pytest.approx(v_min)
    assert v_min * ell2_exact(0.9, 50.0) == pytest.approx(0.9 * v_min, rel=1e-12)


def test_ell1_rejects_negative_recovery_time():
    with pytest.raises(DomainError):
        ell1(0.9, 0.1, -1, 5)


# ─── ξ ───────────────────────────────────────────────────────────────────────


def test_xi_without_anchoring_is_geometric():
    assert xi(0.0, 0.3, -0.2) == pytest.approx(12.0067, abs=1e-4)
    assert xi(0.0, 0.3, -0.2) == pytest.approx(1 / math.expm1(0.08), rel=1e-14)


def test_xi_matches_series_on_grid():
    grid = itertools.product(
        [0.1, 0.3, 0.5, 0.7, 0.9],
        [0.005, 0.02, 0.1, 0.5, 2.0],
        [-0.05, -0.1, -0.2, -0.3, -0.45],
    )
    for c, gamma, e_m in grid:
        assert xi(c, gamma, e_m) == pytest.approx(_xi_series(c, gamma, e_m), abs=1e-8), (c, gamma, e_m)


def test_xi_increases_with_gamma():
    for c, e_m in itertools.product([0.3, 0.9], [-0.1, -0.3]):
        values = np.array([xi(c, g, e_m) for g in GAMMA_GRID])
        assert np.all(np.diff(values) >= 0)


@pytest.mark.parametrize("args", [(0.9, 0.1, 0.0), (1.0, 0.1, -0.2), (0.9, 0.0, -0.2)])
def test_xi_rejects_bad_arguments(args):
    with pytest.raises(DomainError):
        xi(*args)


# ─── deviation bounds ────────────────────────────────────────────────────────


def test_bound_params_reports_every_problem():
    with pytest.raises(DomainError) as excinfo:
        _params(e_legit=-0.1, v_min=2.0)
    assert "E_L" in str(excinfo.value)
    assert "v_m" in str(excinfo.value)


def test_bound_params_from_topology(rgg7: NetworkTopology):
    params = BoundParams.from_topology(rgg7, TrustModel(0.7, 0.3), LambdaSchedule(0.9, 0.05), tf_samples=[3, 5])
    assert params.legit_count == 50 and params.malicious_count == 10
    assert params.e_legit == pytest.approx(0.2)
    assert 0 < params.v_min < 1 / 50
    assert params.expected_tf == 4.0


def test_expected_ell_averages_over_samples():
    params = _params(tf_samples=(2, 2, 5))
    l2 = ell2(0.9, 0.05)
    expected = (2 * min(ell1(0.9, 0.05, 2, 8), l2) + min(ell1(0.9, 0.05, 5, 8), l2)) / 3
    assert params.expected_ell() == pytest.approx(expected)


def test_u_mal_reference_value():
    params = _params(d_max=8, legit_count=50, malicious_count=10)
    assert u_mal(1.0, params) == pytest.approx(50 * 8 / 2 * xi(0.9, 0.05, -0.2))
    assert 50 * 8 / 2 * xi(0.0, 0.05, -0.2) == pytest.approx(2401.3, abs=0.1)


def test_u_mal_vanishes_without_malicious_agents():
    assert u_mal(0.1, _params(malicious_count=0)) == 0.0


def test_u_total_reduces_to_legit_bound_without_malicious_agents():
    params = _params(malicious_count=0)
    assert u_total(0.2, params) == u_leg(0.1, params)


def test_u_total_is_additive():
    params = _params(tf_samples=(4,))
    assert u_total(0.2, params) == pytest.approx(u_leg(0.1, params) + u_mal(0.1, params))


def test_bounds_scale_inversely_with_eps():
    params = _params(tf_samples=(3,))
    assert u_leg(0.2, params) == pytest.approx(u_leg(0.1, params) / 2)
    assert u_mal(0.2, params) == pytest.approx(u_mal(0.1, params) / 2)
    assert u_total(0.2, params) == pytest.approx(u_total(0.1, params) / 2)


def test_u_leg_zero_recovery_time_drops_anchoring_term():
    params = _params(tf_samples=(0,))
    assert u_leg(1.0, params) == pytest.approx(2.0 * (1 - params.v_min * params.expected_ell()))


def test_u_total_is_quasi_convex_without_malicious_agents():
    values = np.array([u_total(0.1, _params(gamma=g, malicious_count=0)) for g in GAMMA_GRID])
    assert np.isfinite(values).all() and (values > 0).all()
    assert _sign_changes(values) <= 1


def test_u_total_full_parameterization_is_finite_and_positive():
    values = [u_total(0.1, _params(gamma=g, tf_samples=(3, 7, 12))) for g in GAMMA_GRID]
    assert all(math.isfinite(v) and v > 0 for v in values)


def test_bounds_reject_non_positive_eps():
    with pytest.raises(DomainError):
        u_leg(0.0, _params())


def test_bound_report_row_and_vacuous_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="trust_consensus.analysis"):
        report = bound_report(_params(tf_samples=(2, 4)), 0.1)
    row = report.as_row()
    assert tuple(row) == BOUND_COLUMNS
    assert row["Tf"] == 3.0
    assert row["u_total"] == pytest.approx(row["u_leg"] + row["u_mal"])
    assert "vacuous" in caplog.text


# ─── ℓ profile ───────────────────────────────────────────────────────────────


def test_ell_profile_argmin_moves_left_as_recovery_slows():
    gammas = np.geomspace(1e-3, 5.0, 200)
    profile = ell_profile(0.9, 5, 0.01, range(2, 11), gammas)
    minimizers = [profile.argmin()[tf] for tf in range(2, 11)]
    assert all(np.isfinite(minimizers))
    assert all(a >= b for a, b in zip(minimizers, minimizers[1:]))
    assert 1e-3 < minimizers[0] < 5.0


def test_ell_profile_small_gamma_column_vanishes():
    profile = ell_profile(0.9, 5, 0.01, range(2, 11), [1e-3, 1.0])
    assert np.abs(profile.neg_ell[:, 0]).max() < 1e-12


def test_ell_profile_minorant_selects_ell1_only_at_small_gamma():
    profile = ell_profile(0.9, 5, 0.01, [0], [0.1, 3.0])
    assert profile.ell1_selected[0].tolist() == [True, False]


def test_ell_profile_exact_anchoring_always_selects_ell1_for_early_recovery():
    profile = ell_profile(0.9, 5, 0.01, [0, 1], GAMMA_GRID, anchoring="exact")
    assert profile.ell1_selected.all()


def test_ell_profile_exact_anchoring_selects_ell1_at_both_grid_ends_for_late_recovery():
    profile = ell_profile(0.9, 5, 0.01, range(2, 11), np.geomspace(1e-3, 5.0, 200), anchoring="exact")
    assert profile.ell1_selected[:, 0].all()
    assert profile.ell1_selected[:, -1].all()


def test_ell_profile_frame_layout():
    frame = ell_profile(0.9, 5, 0.01, [2, 3], [0.1, 0.2, 0.3]).to_frame()
    assert list(frame.columns) == ["Tf", "gamma", "neg_ell", "ell1_selected"]
    assert len(frame) == 6
    assert (frame["neg_ell"] <= 0).all()


def test_ell_profile_rejects_empty_grid():
    with pytest.raises(DomainError):
        ell_profile(0.9, 5, 0.01, [2], [])


# ─── recovery times ──────────────────────────────────────────────────────────


def test_recovery_time_proxy_orders_regimes(rgg7: NetworkTopology):
    informative = recovery_time_proxy(rgg7, TrustModel(0.7, 0.3))
    weak = recovery_time_proxy(rgg7, TrustModel(0.55, 0.45))
    assert 1.0 <= informative < weak


def test_empirical_recovery_time_perfect_trust():
    topo = _path3()
    trace = run_protocol(
        topo, TrustModel(0.7, 0.3), LambdaSchedule(0.9, 0.1), np.zeros(3), 20, 0,
        observe=lambda t: np.ones(4),
    )
    assert empirical_recovery_time(trace, topo) == 0


def test_empirical_recovery_time_scripted_flip():
    topo = NetworkTopology.from_edges(4, 3, [(0, 1), (1, 2), (2, 3)])
    edges = topo.monitored_edges()
    legit_sender = edges[:, 1] < topo.legit_count

    def observe(t: int) -> np.ndarray:
        obs = np.where(legit_sender, 1.0, 0.0)
        obs[0] = 0.25 if t == 0 else 0.5 if t < 10 else 0.75
        return obs

    trace = run_protocol(topo, TrustModel(0.7, 0.3), LambdaSchedule(0.9, 0.1), np.zeros(3), 30, 0, observe=observe)
    assert empirical_recovery_time(trace, topo) == 10


def test_empirical_recovery_time_unresolved_and_mismatch():
    trace = RunTrace(
        x_legit=np.zeros((4, 3)),
        contrib_legit=np.zeros((4, 3)),
        contrib_malicious=np.zeros((4, 3)),
        x_malicious=np.zeros((3, 0)),
        misclassified=np.array([0, 0, 1]),
        weights_nominal=np.array([True, True, False]),
        ledger_digests=["a", "b", "c"],
        x_ss=0.0,
        max_residual=0.0,
    )
    assert empirical_recovery_time(trace, _path3()) is None
    with pytest.raises(DomainError):
        empirical_recovery_time(trace, NetworkTopology.from_edges(2, 2, [(0, 1)]))


def test_resolved_recovery_times():
    assert resolved_recovery_times([3, None, 0, None, 7]) == ([3, 0, 7], 2)


# ─── deviation metrics ───────────────────────────────────────────────────────


def test_deviation_metrics_without_malicious_agents():
    topo = generate_rgg(12, 0.5, 2)
    x0 = np.random.default_rng(0).uniform(size=12)
    trace = run_protocol(topo, TrustModel(0.7, 0.3), LambdaSchedule(0.9, 0.2), x0, 100, 1)
    metrics = deviation_metrics(trace)
    assert not metrics.malicious.any()
    assert np.allclose(metrics.legit, metrics.total, atol=1e-12)
    assert np.array_equal(deviation_metrics(trace, x_ss=0.0).total, np.abs(trace.x_legit))


def test_deviation_triangle_inequality(rgg7: NetworkTopology):
    x0 = np.random.default_rng(3).uniform(size=rgg7.legit_count)
    trace = run_protocol(rgg7, TrustModel(0.55, 0.45), LambdaSchedule(0.9, 0.05), x0, 80, 5)
    metrics = deviation_metrics(trace)
    assert metrics.total.shape == (81, 50)
    assert metrics.triangle_slack() >= -1e-12


def test_aggregate_deviation():
    def metric(total: float, legit: float, mal: float) -> DeviationMetrics:
        return DeviationMetrics(
            total=np.array([[9.0, 9.0], [total, 0.0]]),
            legit=np.array([[9.0, 9.0], [legit, 0.0]]),
            malicious=np.array([[9.0, 9.0], [mal, 0.0]]),
        )

    summary = aggregate_deviation([metric(1.0, 2.0, 3.0), metric(3.0, 2.0, 5.0)])
    assert summary.runs == 2
    assert summary.mean_total == 2.0 and summary.se_total == pytest.approx(1.0)
    assert summary.mean_legit == 2.0 and summary.se_legit == 0.0
    assert summary.mean_malicious == 4.0

    single = aggregate_deviation([metric(1.0, 2.0, 3.0)])
    assert single.se_total == 0.0
    with pytest.raises(DomainError):
        aggregate_deviation([])


# ─── replay ──────────────────────────────────────────────────────────────────


def test_replay_trace_recomputes_recovery(rgg7: NetworkTopology):
    x0 = np.random.default_rng(4).uniform(size=rgg7.legit_count)
    trace = run_protocol(rgg7, TrustModel(0.7, 0.3), LambdaSchedule(0.9, 0.05), x0, 300, 2)
    report = replay_trace(trace, topo=rgg7)
    assert report.horizon == 300
    assert report.max_residual <= 1e-12
    assert report.recovery_time == trace.recovery_time
    assert report.nominal_after_recovery is (None if trace.recovery_time is None else True)
    assert report.final_max_total <= report.final_max_legit + report.final_max_malicious + 1e-12


def test_replay_trace_detects_tampering(rgg7: NetworkTopology):
    x0 = np.random.default_rng(4).uniform(size=rgg7.legit_count)
    trace = run_protocol(rgg7, TrustModel(0.7, 0.3), LambdaSchedule(0.9, 0.05), x0, 30, 2)
    trace.x_legit[5, 0] += 1e-6
    with pytest.raises(NumericalError, match="residual"):
        replay_trace(trace)


def test_replay_trace_detects_wrong_recovery_time():
    topo = _path3()
    trace = run_protocol(
        topo, TrustModel(0.7, 0.3), LambdaSchedule(0.9, 0.1), np.zeros(3), 10, 0,
        observe=lambda t: np.ones(4),
    )
    trace.recovery_time = 4
    with pytest.raises(NumericalError, match="recovery"):
        replay_trace(trace)


def _perfect_trust_trace(horizon: int = 20) -> tuple[NetworkTopology, RunTrace]:
    topo = NetworkTopology.from_edges(4, 3, [(0, 1), (1, 2), (2, 3)])
    edges = topo.monitored_edges()
    obs = np.where(edges[:, 1] < topo.legit_count, 1.0, 0.0)
    trace = run_protocol(
        topo, TrustModel(0.7, 0.3), LambdaSchedule(0.9, 0.1), np.array([0.1, 0.5, 0.9]), horizon, 0,
        observe=lambda t: obs,
    )
    return topo, trace


def test_replay_trace_checks_final_ledger_against_topology():
    topo, trace = _perfect_trust_trace()
    assert replay_trace(trace).nominal_after_recovery is None
    report = replay_trace(trace, topo=topo)
    assert report.recovery_time == 0
    assert report.nominal_after_recovery is True


def test_replay_trace_flags_final_ledger_that_trusts_a_malicious_sender():
    topo, trace = _perfect_trust_trace()
    ledger = trace.final_ledger
    beta = ledger.beta.copy()
    beta[np.flatnonzero(ledger.edges[:, 1] == 3)] = 1.0
    trace.final_ledger = replace(ledger, beta=beta)
    assert replay_trace(trace).nominal_after_recovery is None
    assert replay_trace(trace, topo=topo).nominal_after_recovery is False


def test_replay_trace_rejects_weight_status_that_contradicts_misclassification():
    _, trace = _perfect_trust_trace()
    trace.weights_nominal[:] = False
    trace.recovery_time = None
    with pytest.raises(NumericalError, match="weight status disagrees"):
        replay_trace(trace)


def test_replay_trace_takes_recovery_from_weight_status():
    _, trace = _perfect_trust_trace()
    trace.weights_nominal[:5] = False
    trace.misclassified[:5] = 2
    trace.recovery_time = 5
    assert replay_trace(trace).recovery_time == 5


def test_replay_trace_rejects_nominal_final_ledger_on_unresolved_run():
    topo, trace = _perfect_trust_trace()
    trace.weights_nominal[-1] = False
    trace.misclassified[-1] = 1
    trace.recovery_time = None
    with pytest.raises(NumericalError, match="final ledger"):
        replay_trace(trace, topo=topo)


def test_replay_trace_rejects_topology_of_another_run():
    _, trace = _perfect_trust_trace()
    with pytest.raises(DomainError):
        replay_trace(trace, topo=_path3())
