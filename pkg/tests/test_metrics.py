import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asbitsim.events import EventTrain
from asbitsim.metrics import (CAPACITY_NOTE, CapacityParams, ErrorReport, SweepTable, capacity_bound,
                              capacity_from_n, capacity_heatmap, event_error_rate, NodeErrors, snr_buckets,
                              sweep_code_length, sweep_nodes, sweep_snr)
from asbitsim.netsim import ScenarioConfig


def train(bins, duration=0.3):
    return EventTrain(np.array(bins, dtype=np.int64), duration)


def test_perfect_detection():
    r = event_error_rate(train([1, 5, 9]), train([1, 5, 9]))
    assert r.eer == 0 and r.misses == 0 and r.false_detections == 0


def test_one_miss_in_three_hundred():
    truth = train(range(300))
    r = event_error_rate(truth, train(range(1, 300)))
    assert r.misses == 1 and r.false_detections == 0
    assert r.eer == pytest.approx(1 / 300)


def test_false_detection_without_truth_stays_finite():
    r = event_error_rate(train([]), train([3]))
    assert r.eer == 1.0 and r.eer_per_bin == pytest.approx(1 / 300)


def test_grid_mismatch_rejected():
    with pytest.raises(ValueError):
        event_error_rate(train([1]), EventTrain(np.array([1]), 0.3, 2e-3))
    with pytest.raises(ValueError):
        event_error_rate(train([1]), train([1], 0.4))


@settings(max_examples=80)
@given(st.sets(st.integers(0, 199)), st.sets(st.integers(0, 199)))
def test_eer_decomposition(truth_bins, det_bins):
    t, d = train(sorted(truth_bins), 0.2), train(sorted(det_bins), 0.2)
    r = event_error_rate(t, d)
    assert r.misses == len(truth_bins - det_bins)
    assert r.false_detections == len(det_bins - truth_bins)
    assert r.eer * max(1, len(truth_bins)) == pytest.approx(r.misses + r.false_detections)
    assert r.eer >= 0 and r.misses <= r.true_events


def test_error_report_pools_nodes():
    rep = ErrorReport.from_trains({0: train([1, 2]), 1: train([4, 5, 6, 7])},
                                  {0: train([1]), 1: train([4, 5, 6, 7, 9])})
    assert rep.true_events == 6 and rep.errors == 2
    assert rep.eer == pytest.approx(2 / 6)
    assert rep.mean_node_eer == pytest.approx((0.5 + 0.25) / 2)
    d = rep.to_dict()
    assert d["aggregate"]["eer"] == rep.eer and len(d["nodes"]) == 2


def test_capacity_paper_inputs():
    res = capacity_bound(CapacityParams.from_coding_gain(511, ebn0_db=7.0, eta_w=0.0))
    assert res.n == pytest.approx(1 + 511 / 10 ** 0.7)
    assert res.n == pytest.approx(102.96, abs=0.01)
    assert res.n_sparse == pytest.approx(res.n / 0.05)
    assert "169" in res.to_dict()["note"] and res.to_dict()["note"] == CAPACITY_NOTE


def test_sparsity_relation_exact():
    assert capacity_from_n(169, 0.05) == pytest.approx(3380)
    assert capacity_from_n(169, 1.0) == 169
    with pytest.raises(ValueError):
        capacity_from_n(169, 0.0)


def test_capacity_limit_to_one():
    res = capacity_bound(CapacityParams(ebn0_db=300.0, eta_w=0.0))
    assert res.n == pytest.approx(1.0)


def test_capacity_params_validation():
    with pytest.raises(ValueError):
        CapacityParams(utilization=0)
    with pytest.raises(ValueError):
        CapacityParams(utilization=1.5)
    with pytest.raises(ValueError):
        CapacityParams(s_w=0)
    with pytest.raises(ValueError):
        CapacityParams(eta_w=-1)


@settings(max_examples=60)
@given(lc=st.floats(7, 8191), ebn0=st.floats(-5, 20), s=st.floats(0.01, 100), eta=st.floats(0, 10),
       u=st.floats(0.001, 1.0))
def test_capacity_monotonicity(lc, ebn0, s, eta, u):
    p = CapacityParams.from_coding_gain(lc, ebn0_db=ebn0, s_w=s, eta_w=eta, utilization=u)
    n = capacity_bound(p).n
    assert capacity_bound(CapacityParams.from_coding_gain(lc * 1.5, ebn0_db=ebn0, s_w=s, eta_w=eta,
                                                          utilization=u)).n > n
    assert capacity_bound(CapacityParams.from_coding_gain(lc, ebn0_db=ebn0 + 1, s_w=s, eta_w=eta,
                                                          utilization=u)).n < n
    assert capacity_bound(CapacityParams.from_coding_gain(lc, ebn0_db=ebn0, s_w=s * 2, eta_w=eta,
                                                          utilization=u)).n >= n
    assert capacity_bound(CapacityParams.from_coding_gain(lc, ebn0_db=ebn0, s_w=s, eta_w=eta + 1,
                                                          utilization=u)).n < n
    res = capacity_bound(p)
    assert res.n_sparse * u == pytest.approx(res.n)


def test_sweep_table_write(tmp_path):
    t = SweepTable("demo", ["a", "b"], metadata={"seed": 3})
    t.add(1, 0.5)
    t.add(2, 0.25)
    with pytest.raises(ValueError):
        t.add(1)
    csv_path, meta_path = t.write(tmp_path / "out" / "demo")
    rows = list(csv.reader(csv_path.open()))
    assert rows == [["a", "b"], ["1", "0.5"], ["2", "0.25"]]
    meta = json.loads(meta_path.read_text())
    assert meta["kind"] == "demo" and meta["seed"] == 3
    assert list(t.where(a=2).column("b")) == [0.25]


SMALL = ScenarioConfig(n_nodes=6, n_targets=2, duration_s=0.02, target_rate_hz=100, background_rate_hz=100,
                       clock="divider", noise=False, write_iq=False)


def test_sweep_nodes_noise_free_is_error_free():
    t = sweep_nodes(SMALL, [2, 4, 6], rates=[0.0, 100.0])
    assert t.columns[:4] == ["clock", "receiver_mode", "background_rate_hz", "n_nodes"]
    assert len(t.rows) == 6
    assert np.all(t.column("eer") == 0)
    assert t.metadata["base_config"]["n_targets"] == 2


def test_sweep_nodes_parallel_matches_serial():
    a = sweep_nodes(SMALL, [2, 6], workers=1)
    b = sweep_nodes(SMALL, [2, 6], workers=2)
    assert a.rows == b.rows


def test_sweep_snr_recomputes_snr():
    base = ScenarioConfig(n_nodes=3, n_targets=1, duration_s=0.02, target_rate_hz=100, background_rate_hz=100,
                          clock="divider", write_iq=False, snr_db=1.7, noise_floor_dbm=-75.75)
    t = sweep_snr(base, [-75.75, -60.0])
    assert list(t.column("snr_db")) == pytest.approx([1.7, 1.7 - 15.75])
    # equal-power nodes: the recomputed average equals the nominal value
    assert list(t.column("avg_snr_db")) == pytest.approx(list(t.column("snr_db")), abs=1e-9)
    assert t.metadata["rssi_dbm"] == pytest.approx(-74.05)


def test_sweep_code_length_reports_timing():
    single = ScenarioConfig(n_nodes=1, n_targets=1, duration_s=0.02, target_rate_hz=100, clock="divider",
                            noise=False, write_iq=False)
    t = sweep_code_length(single, [127, 511])
    assert list(t.column("code_length")) == [127, 511]
    assert np.all(t.column("demod_ms_per_node") > 0)
    assert np.all(t.column("eer") == 0)


def test_heatmap_zero_rate_row():
    t = capacity_heatmap(SMALL, [4], [0.0, 100.0])
    zero = t.where(rate_hz=0.0)
    assert zero.column("events_per_second")[0] == 0 and zero.column("eer")[0] == 0
    busy = t.where(rate_hz=100.0)
    assert busy.column("events_per_second")[0] > 0


def test_sweep_nodes_clock_curves_and_modes():
    t = sweep_nodes(SMALL, [4], clocks=["divider", "oscillator"], modes={"divider": "discrete"})
    assert list(t.column("clock")) == ["divider", "oscillator"]
    assert list(t.column("receiver_mode")) == ["discrete", "continuous"]


def test_snr_buckets_oracle():
    # node i: rel SNR i dB, 10 true events, 8 - i misses
    nodes = tuple(NodeErrors(i, 10, 2 + i, 8 - i, 0, 100) for i in range(8))
    t = snr_buckets(ErrorReport(nodes), {i: float(i) for i in range(8)})
    assert list(t.column("n_nodes")) == [2, 2, 2, 2]
    assert list(t.column("errors")) == [15, 11, 7, 3]
    assert t.column("pooled_eer") == pytest.approx([0.75, 0.55, 0.35, 0.15])
    assert list(t.column("rel_snr_lo_db")) == [0, 2, 4, 6]


@settings(max_examples=40)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 5), st.floats(0, 20)), min_size=1, max_size=30),
       st.integers(1, 6))
def test_snr_buckets_conserve_nodes_and_errors(rows, k):
    nodes = tuple(NodeErrors(i, t, t - m if m <= t else 0, min(m, t), 1, 50) for i, (t, m, _) in enumerate(rows))
    rel = {i: r for i, (_, _, r) in enumerate(rows)}
    t = snr_buckets(ErrorReport(nodes), rel, k)
    assert sum(t.column("n_nodes")) == len(rows)
    assert sum(t.column("errors")) == sum(n.errors for n in nodes)
    assert np.all(np.diff(t.column("mean_rel_snr_db")) >= 0)
