import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asbitsim.events import EventTrain
from asbitsim.netsim import (ScenarioConfig, assign_near_far, augment_background, augment_population,
                             build_population, keyed_rng, load_spike_trains, poisson_events,
                             replicate_channels, run_scenario, save_spike_trains)
from asbitsim.phy import watts_to_dbm


def test_poisson_rate_and_bounds():
    tr = poisson_events(50, 20.0, seed=1)
    assert tr.count == pytest.approx(1000, rel=0.1)
    assert poisson_events(0, 1.0, seed=1).count == 0
    with pytest.raises(ValueError):
        poisson_events(1000, 1.0)
    with pytest.raises(ValueError):
        poisson_events(-1, 1.0)


@settings(max_examples=40)
@given(seed=st.integers(0, 2**31), lo=st.floats(0, 400), hi=st.floats(0, 400))
def test_poisson_rates_nest(seed, lo, hi):
    lo, hi = sorted((lo, hi))
    a = poisson_events(lo, 0.5, seed=seed)
    b = poisson_events(hi, 0.5, seed=seed)
    assert set(a.bins) <= set(b.bins)


def test_spike_file_csv_round_trip(tmp_path):
    trains = [("0", EventTrain(np.array([1, 4, 7]), 0.01)), ("1", EventTrain(np.array([2]), 0.01))]
    save_spike_trains(trains, tmp_path / "ev.csv")
    back = load_spike_trains(tmp_path / "ev.csv", 0.01)
    assert [c for c, _ in back] == ["0", "1"]
    assert all(a[1] == b[1] for a, b in zip(trains, back))


def test_spike_file_ndjson_and_inferred_duration(tmp_path):
    p = tmp_path / "ev.ndjson"
    p.write_text('{"channel": "b", "time_s": 0.0042}\n{"channel": "a", "time_s": 0.0001}\n')
    back = dict(load_spike_trains(p))
    assert back["a"].bins.tolist() == [0] and back["b"].bins.tolist() == [4]
    assert back["a"].n_bins == 5


@pytest.mark.parametrize("text,line", [
    ("chan,time\n0,0.1\n", ":1:"),
    ("channel,time_s\n0,0.001\n1,abc\n", ":3:"),
    ("channel,time_s\n0,0.001,9\n", ":2:"),
])
def test_spike_file_errors_name_the_line(tmp_path, text, line):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(ValueError, match=line):
        load_spike_trains(p)


def test_spike_file_time_outside_duration(tmp_path):
    p = tmp_path / "ev.csv"
    p.write_text("channel,time_s\n0,0.5\n")
    with pytest.raises(ValueError):
        load_spike_trains(p, duration_s=0.1)


def test_replicate_channels_layout():
    a, b = EventTrain(np.array([1]), 0.01), EventTrain(np.array([2]), 0.01)
    out = replicate_channels([a, b], 3)
    assert len(out) == 6 and out[2] == a and out[5] == b
    with pytest.raises(ValueError):
        replicate_channels([a], 0)


def test_near_far_uniform_and_keyed():
    rel = assign_near_far(range(2000), 20.0, seed=5)
    vals = np.array(list(rel.values()))
    assert vals.min() >= 0 and vals.max() <= 20
    assert abs(np.mean(vals) - 10) < 0.6
    assert assign_near_far(range(10), 20.0, 5) == {i: rel[i] for i in range(10)}
    assert set(assign_near_far(range(4), 0.0, 5).values()) == {0.0}


CFG = ScenarioConfig(n_nodes=12, n_targets=3, duration_s=0.02, target_rate_hz=100, background_rate_hz=100,
                     write_iq=False)


def test_population_nested_in_node_count():
    small = build_population(replace(CFG, n_nodes=6))
    big = build_population(CFG)
    for a, b in zip(small.nodes, big.nodes[:6]):
        assert a.code == b.code and a.tau_s == b.tau_s and a.phase_adc == b.phase_adc
        assert a.clock == b.clock
    for i in range(6):
        assert small.trains[i] == big.trains[i]
        assert np.array_equal(small.streams[i].f_clk, big.streams[i].f_clk)


def test_population_codes_distinct_and_clock_ranges():
    pop = build_population(replace(CFG, n_nodes=60))
    assert len({n.code.seed for n in pop.nodes}) == 60
    for s in pop.streams:
        nominal = s.node.clock.nominal_hz
        assert 28.5e6 <= nominal <= 33e6
        assert np.all(np.abs(s.f_clk - nominal) <= nominal * 1005e-6 * (1 + 1e-12))


def test_near_far_sets_node_rssi():
    cfg = replace(CFG, near_far_db=10.0)
    pop = build_population(cfg)
    for n in pop.nodes:
        snr = watts_to_dbm(n.amplitude ** 2) - cfg.noise_floor_dbm
        assert snr == pytest.approx(cfg.snr_db + pop.relative_snr_db[n.node_id] - 5.0)


def test_divider_population_shares_clock():
    pop = build_population(replace(CFG, clock="divider"))
    assert {float(f) for s in pop.streams for f in s.f_clk} == {915e6 / 32}


def test_packets_stay_inside_their_bins():
    pop = build_population(replace(CFG, n_nodes=40, code_length=511))
    for s in pop.streams:
        for i in range(len(s)):
            end = s.start_s[i] + 511 * 3 / s.f_clk[i]
            assert np.floor(s.start_s[i] / 1e-3 + 1e-9) == s.bins[i]
            assert end <= (s.bins[i] + 1) * 1e-3


def test_augment_background_cyclic_shift():
    pop = build_population(replace(CFG, n_nodes=5, n_targets=1))
    pool = pop.streams[1:]
    reps, source = augment_background(pool, 7, 100, 0.02, seed=3)
    assert [r.node.node_id for r in reps] == list(range(100, 107))
    for r in reps:
        src = next(p for p in pool if p.node.node_id == source[r.node.node_id])
        assert len(r) == len(src)
        assert r.node.code == src.node.code
        assert np.all(np.diff(r.start_s) >= 0)
        assert np.all((r.start_s >= 0) & (r.start_s < 0.02))
    with pytest.raises(ValueError):
        augment_background([], 1, 0, 0.02, 0)


def test_augment_population_count():
    pop = build_population(replace(CFG, n_nodes=5, n_targets=2))
    out, _ = augment_population(pop.streams[:2], pop.streams[2:], 11, 0.02, seed=0)
    assert len(out) == 11
    with pytest.raises(ValueError):
        augment_population(pop.streams[:2], pop.streams[2:], 4, 0.02, seed=0)


def test_replicate_background_mode():
    cfg = replace(CFG, background="replicate", pool_size=4, n_nodes=15)
    pop = build_population(cfg)
    assert pop.n_nodes == 15 and len(pop.source) == 15 - 3 - 4
    assert set(pop.source.values()) <= set(range(3, 7))


def test_scenario_config_json_round_trip(tmp_path):
    cfg = replace(CFG, near_far_db=3.0, nominal_range_hz=(29e6, 31e6))
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert ScenarioConfig.load(p) == cfg


@pytest.mark.parametrize("bad", [{"n_nodes": 2, "n_targets": 3}, {"clock": "quartz"}, {"duration_s": 0},
                                 {"near_far_db": -1}, {"workers": 0}, {"background": "other"}])
def test_scenario_config_validation(bad):
    with pytest.raises(ValueError):
        replace(CFG, **bad)


def test_scenario_config_rejects_unknown_and_bad_json(tmp_path):
    with pytest.raises(ValueError):
        ScenarioConfig.from_dict({"n_node": 3})
    p = tmp_path / "c.json"
    p.write_text("{")
    with pytest.raises(ValueError):
        ScenarioConfig.load(p)


def test_noise_free_scenario_is_error_free_and_writes_layout(tmp_path):
    cfg = replace(CFG, noise=False, write_iq=True, clock="divider")
    rep = run_scenario(cfg)
    assert rep.errors.eer == 0
    out = rep.write(tmp_path / "run")
    assert sorted(p.name for p in out.iterdir()) == ["config.json", "detections.ndjson", "errors.json",
                                                      "iq.bin", "iq.json", "truth.ndjson"]
    doc = json.loads((out / "errors.json").read_text())
    assert doc["aggregate"]["eer"] == 0 and doc["n_nodes"] == 12


def test_scenario_workers_do_not_change_results(tmp_path):
    a = run_scenario(replace(CFG, workers=1))
    b = run_scenario(replace(CFG, workers=3))
    for ra, rb in zip(a.reports, b.reports):
        assert ra.to_ndjson() == rb.to_ndjson()


def test_keyed_rng_independent_of_order():
    a = keyed_rng(7, 3, 1).random(4)
    keyed_rng(7, 2, 1).random(100)
    assert np.array_equal(a, keyed_rng(7, 3, 1).random(4))
