import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from alohacr.mac_analytic import (
    LinkProbs,
    approx_throughput,
    service_delay,
    stability_profile,
    total_delay,
)
from alohacr.mac_sim import (
    CLASSES,
    QueueState,
    SimConfig,
    SlotOutcome,
    cell_seed,
    classify,
    run,
    step_slot,
    sweep,
)
from alohacr.phy_link import PhyConfig, calibrate_link_probs

REF_PROBS = LinkProbs(0.998, 0.965, 0.009)
R_GRID = [1 / 2, 1 / 4, 1 / 8, 1 / 16, 1 / 32]
P_GRID = [round(0.05 * k, 2) for k in range(1, 20)]


def cfg(**kw):
    base = dict(J=4, r=1 / 16, p=0.3, probs=REF_PROBS, warmup_slots=20_000, measure_slots=50_000, seed=1)
    base.update(kw)
    return SimConfig(**base)


# ---- types


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(J=4, r=0.1, p=0.3)
    with pytest.raises(ValueError):
        cfg(mode="hybrid")
    with pytest.raises(ValueError):
        cfg(warmup_slots=0)
    with pytest.raises(ValueError):
        cfg(mode="phy", J=6)
    assert cfg(measure_slots=None).n_measure == 100_000
    assert cfg(mode="phy", measure_slots=None).n_measure == 3000


def test_outcome_consistency():
    assert classify(0, 0) == "empty" and classify(2, 1) == "pair_one" and classify(5, 0) == "collision"
    SlotOutcome((1, 3), (3,), "pair_one")
    with pytest.raises(ValueError):
        SlotOutcome((1,), (2,), "single_ok")
    with pytest.raises(ValueError):
        SlotOutcome((1, 2), (1, 2), "pair_one")


def test_queue_state_grows_and_compacts():
    s = QueueState.empty(2, capacity=4)
    s.arrivals[0, :3] = [1, 2, 3]
    s.tail[0] = 3
    s.head[0] = 2
    s.ensure_capacity(10)
    assert s.arrivals.shape[1] >= 11
    np.testing.assert_array_equal(s.timestamps(0), [3])
    np.testing.assert_array_equal(s.backlog, [1, 0])


# ---- slot mechanics


@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_step_slot_invariants(seed, r, p):
    rng = np.random.default_rng(seed)
    config = cfg(r=r, p=p)
    state = QueueState.empty(4, 8)
    for _ in range(60):
        before = state.backlog.copy()
        state, out = step_slot(state, config, rng)
        assert set(out.delivered) <= set(out.contenders) and len(out.delivered) <= 2
        assert all(before[k] + 1 >= 1 for k in out.contenders)
        for k, tot, srv in state.last_delays:
            assert tot >= srv >= 1
        for k in range(4):
            ts = state.timestamps(k)
            assert np.all(np.diff(ts) >= 0)
        assert state.n_arrivals == state.n_departures + state.backlog.sum()


def test_zero_contention_only_grows():
    stats = run(cfg(p=0.0, r=0.2))
    assert stats.throughput == 0 and stats.departures == 0
    assert stats.final_backlog == stats.arrivals > 0
    assert math.isnan(stats.mean_total_delay)


def test_single_queue_unit_service():
    for r in (0.1, 0.3, 0.6):
        stats = run(SimConfig(J=1, r=r, p=1.0, probs=LinkProbs(1.0), warmup_slots=1000, measure_slots=200_000, seed=2))
        assert stats.q_measured == pytest.approx(r, abs=3 * stats.q_se + 1e-3)
        # a packet is served in its arrival slot and never waits
        assert stats.mean_total_delay == pytest.approx(1.0)
        assert stats.throughput == pytest.approx(r, abs=0.01)


def test_saturated_histogram_matches_multinomial():
    J, p, n = 4, 0.3, 1_000_000
    stats = run(SimConfig(J=J, r=0.5, p=p, probs=REF_PROBS, warmup_slots=1000, measure_slots=n, seed=3))
    assert stats.q_measured == 1.0
    k1 = J * p * (1 - p) ** (J - 1)
    k2 = 6 * p**2 * (1 - p) ** (J - 2)
    k0 = (1 - p) ** J
    expected = {
        "empty": k0,
        "single_ok": k1 * REF_PROBS.P0,
        "single_fail": k1 * (1 - REF_PROBS.P0),
        "pair_both": k2 * REF_PROBS.P1,
        "pair_one": k2 * REF_PROBS.P2,
        "pair_none": k2 * (1 - REF_PROBS.P1 - REF_PROBS.P2),
        "collision": 1 - k0 - k1 - k2,
    }
    assert sum(stats.histogram.values()) == n
    for c in CLASSES:
        f = stats.histogram[c] / n
        se = math.sqrt(expected[c] * (1 - expected[c]) / n)
        assert f == pytest.approx(expected[c], abs=3 * se + 1e-12), c


# ---- runs


def test_run_is_reproducible():
    a, b = run(cfg()), run(cfg())
    assert a.q_measured == b.q_measured and a.mean_total_delay == b.mean_total_delay
    assert a.histogram == b.histogram
    c = run(cfg(seed=2))
    assert c.histogram != a.histogram


@pytest.mark.parametrize("r,p", [(1 / 16, 0.3), (1 / 8, 0.6), (1 / 2, 0.5), (1 / 32, 0.9)])
def test_conservation_and_delay_ordering(r, p):
    stats = run(cfg(r=r, p=p))
    assert stats.arrivals == stats.departures + stats.final_backlog
    assert 0.0 <= stats.q_measured <= 1.0
    assert stats.throughput <= 2.0
    assert stats.mean_total_delay >= stats.mean_service_delay >= 1.0
    assert np.all(stats.total_delay_per_user >= stats.service_delay_per_user)


def test_active_probability_near_analytic():
    stats = run(cfg(r=1 / 32, p=0.3, warmup_slots=100_000, measure_slots=100_000))
    prof = stability_profile(4, 1 / 32, 0.3, REF_PROBS)
    assert abs(stats.q_measured - prof.q) <= 0.02


def test_half_rate_always_saturated():
    base = cfg(r=0.5, warmup_slots=100_000, measure_slots=5000)
    for row in sweep(base, [0.5], P_GRID):
        assert row.stats.q_measured == 1.0


@pytest.mark.parametrize("r,p", [(1 / 16, 0.3), (1 / 8, 0.4), (1 / 32, 0.2)])
def test_stable_points_match_analysis(r, p):
    stats = run(cfg(r=r, p=p, warmup_slots=100_000, measure_slots=1_000_000, seed=11))
    J = 4
    assert abs(stats.q_measured - stability_profile(J, r, p, REF_PROBS).q) <= 0.02
    assert abs(stats.throughput - approx_throughput(J, r, p, REF_PROBS)) <= 0.02
    assert stats.mean_total_delay == pytest.approx(total_delay(J, r, p, REF_PROBS), rel=0.10)
    assert stats.mean_service_delay == pytest.approx(service_delay(J, r, p, REF_PROBS), rel=0.10)


def test_per_user_symmetry():
    stats = run(cfg(r=1 / 8, p=0.4, measure_slots=400_000))
    assert np.ptp(stats.throughput_per_user) < 0.01
    assert stats.throughput == pytest.approx(stats.throughput_per_user.sum())


# ---- sweeps


def test_default_sweep_shape_and_order_invariance():
    base = cfg(warmup_slots=500, measure_slots=500)
    rows = sweep(base, R_GRID, P_GRID)
    assert len(rows) == 95
    assert {(row.r, row.p) for row in rows} == {(r, p) for r in R_GRID for p in P_GRID}
    rev = {(row.r, row.p): row.stats for row in sweep(base, R_GRID[::-1], P_GRID[::-1])}
    for row in rows:
        assert rev[(row.r, row.p)].histogram == row.stats.histogram
    assert sweep(base, [], P_GRID) == []
    assert cell_seed(0, 0.5, 0.3) != cell_seed(0, 0.3, 0.5)


# ---- phy mode


def test_phy_mode_runs_and_conserves():
    config = cfg(mode="phy", J=3, r=1 / 8, p=0.4, warmup_slots=2000, measure_slots=60, phy=PhyConfig(snr_db=25))
    a = run(config)
    assert a.arrivals == a.departures + a.final_backlog
    assert sum(a.histogram.values()) == 60
    b = run(config)
    assert a.histogram == b.histogram and a.mean_total_delay == b.mean_total_delay


def test_phy_mode_outcomes_agree_with_abstract():
    phy = PhyConfig(snr_db=25)
    probs = calibrate_link_probs(phy, n_slots=150, rng=np.random.default_rng(4))
    n = 400
    config = SimConfig(J=2, r=0.5, p=0.6, probs=probs, mode="phy", warmup_slots=5000, measure_slots=n, seed=5, phy=phy)
    h = run(config).histogram
    singles = h["single_ok"] + h["single_fail"]
    pairs = h["pair_both"] + h["pair_one"] + h["pair_none"]
    assert singles > 50 and pairs > 50
    # Agresti-Coull intervals: both rates sit near 1, where the plain binomial SE collapses
    for got, tot, ref, n_ref in [
        (h["single_ok"], singles, probs.P0, 150),
        (h["pair_both"], pairs, probs.P1, 150),
    ]:
        a = (got + 2) / (tot + 4)
        b = (ref * n_ref + 2) / (n_ref + 4)
        se = math.sqrt(a * (1 - a) / (tot + 4) + b * (1 - b) / (n_ref + 4))
        assert abs(a - b) <= 3 * se
