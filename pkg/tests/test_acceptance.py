"""Acceptance suite: one test per criterion.

Each test is tagged with ``@pytest.mark.criterion`` and leaves a short
``detail`` property; ``conftest.py`` prints one PASS/FAIL line per
criterion at the end of the run.  The desk-scale trend criteria read the
outputs of the bundled example configs, run through the CLI exactly as a
user would; the determinism criterion reruns the same configs with a
different worker count and compares the directories byte for byte.
"""

import csv
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asbitsim.cli import EXAMPLES_DIR, bundled_configs, load_scenario, main
from asbitsim.codes import GoldFamily, gold_code, ml_sequence, periodic_correlation, preferred_values
from asbitsim.metrics import CAPACITY_NOTE, CapacityParams, capacity_bound, capacity_from_n, event_error_rate
from asbitsim.netsim import ScenarioConfig, build_population, poisson_events, receiver_for, synthesize
from asbitsim.phy import (CarrierParams, FreeOscillator, NodeProfile, render_node_stream, residual_frequency,
                          superpose, synthesize_packet_iq)
from asbitsim.rx import ReceiverConfig, build_filter_bank, demodulate


# --- helpers -----------------------------------------------------------------

def read_table(path):
    def num(v):
        try:
            return float(v)
        except ValueError:
            return v

    with open(path, newline="") as fh:
        return [{k: num(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def fmt(x):
    return f"{x:.3g}"


@pytest.fixture(scope="session")
def bundled(tmp_path_factory):
    """Run a bundled example through the CLI once per (name, workers, flags)."""
    root = tmp_path_factory.mktemp("bundled")
    cache = {}

    def run(name, workers=1, *flags):
        key = (name, workers, flags)
        if key not in cache:
            doc = json.loads((EXAMPLES_DIR / f"{name}.json").read_text())
            out = root / f"{name}-w{workers}{''.join(f.strip('-') for f in flags)}"
            cmd = ["sweep", doc["kind"], name] if "kind" in doc else ["simulate", name]
            assert main([*cmd, "--out", str(out), "--workers", str(workers), *flags]) == 0
            cache[key] = out
        return cache[key]

    return run


# --- 1 -----------------------------------------------------------------------

@pytest.mark.criterion(1, "Gold families: three-valued cross-correlation, full-period autocorrelation")
def test_gold_family_correctness(record_property):
    t0 = time.perf_counter()
    seen = {}
    for m in (5, 7, 9, 13):
        fam = GoldFamily.default(m)
        a, b = ml_sequence(fam.first), ml_sequence(fam.second)
        period = (1 << m) - 1
        # direct integer sums at every lag
        cross = {periodic_correlation(a, b, lag) for lag in range(period)}
        t = 2 ** ((m + 1) // 2) + 1
        assert cross <= {-1, -t, t - 2} == preferred_values(m), (m, cross)
        assert periodic_correlation(a, a, 0) == periodic_correlation(b, b, 0) == period
        seen[m] = sorted(cross)
    elapsed = time.perf_counter() - t0
    assert seen[9] == [-33, -1, 31] and seen[13] == [-129, -1, 127]
    record_property("detail", f"m=9 {seen[9]}, m=13 {seen[13]}, {elapsed:.1f} s")
    assert elapsed < 10


# --- 2 -----------------------------------------------------------------------

FAMILY13 = GoldFamily.default(13)
_ROUND_TRIP = {"draws": 0, "errors": 0, "t0": None}


@settings(max_examples=100, deadline=None, derandomize=True)
@given(f_clk=st.floats(28.5e6, 33e6), phase=st.floats(0, 2 * math.pi), tau_frac=st.floats(0, 1),
       seed=st.integers(0, FAMILY13.family_size - 1), events_seed=st.integers(0, 2**31 - 1))
def _round_trip(f_clk, phase, tau_frac, seed, events_seed):
    code = gold_code(FAMILY13, seed, 511)
    tau = tau_frac * (1e-3 - 511 * 3 / f_clk)
    node = NodeProfile(0, code, FreeOscillator(f_clk, 0.0), tau_s=tau, phase_adc=phase)
    events = poisson_events(50, 6.0, seed=events_seed)
    stream = render_node_stream(node, events, CarrierParams(), np.random.default_rng(events_seed))
    y = superpose([stream], None, 6.0)
    report = demodulate(y, code, ReceiverConfig(drift_ppm=0.0), clock_hint=f_clk)
    e = event_error_rate(events, report.detected)
    _ROUND_TRIP["draws"] += 1
    _ROUND_TRIP["errors"] += e.errors
    assert e.eer == 0, (f_clk, phase, tau, seed, e)


@pytest.mark.criterion(2, "Noise-free single node, 50 Hz x 6 s, any clock and phase: EER = 0")
def test_round_trip_zero_error(record_property):
    t0 = time.perf_counter()
    _round_trip()
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{_ROUND_TRIP['draws']} draws, {_ROUND_TRIP['errors']} errors, {elapsed:.0f} s")
    assert _ROUND_TRIP["draws"] >= 100
    assert elapsed < 120


# --- 3 -----------------------------------------------------------------------

@pytest.mark.criterion(3, "Node-count trend (oscillator, 40 targets, 10/25/50 Hz backgrounds)")
def test_node_count_trend(bundled, record_property):
    rows = read_table(bundled("fig2e") / "nodes.csv")
    eer = {(r["background_rate_hz"], r["n_nodes"]): r["eer"] for r in rows}
    rates = sorted({r for r, _ in eer})
    ns = sorted({n for _, n in eer})
    curves = {r: [eer[r, n] for n in ns] for r in rates}
    record_property("detail", "; ".join(f"{r:g} Hz: " + " ".join(fmt(v) for v in curves[r]) for r in rates))
    assert rates == [10, 25, 50] and ns == [50, 100, 200, 400]
    for r in rates:
        assert all(np.diff(curves[r]) >= 0), f"EER not monotone in N at {r} Hz: {curves[r]}"
    assert all(eer[10, n] <= eer[50, n] for n in ns)
    assert 1e-4 <= eer[50, 200] <= 1e-1


# --- 4 -----------------------------------------------------------------------

@pytest.mark.criterion(4, "Divider advantage at N = 400 and bank sizes 3 vs 93")
def test_divider_advantage(bundled, record_property):
    rows = read_table(bundled("fig3c") / "nodes.csv")
    at400 = {r["clock"]: r["eer"] for r in rows if r["n_nodes"] == 400}
    base = load_scenario("fig3c")
    code = gold_code(FAMILY13, 2024, 511)
    osc = build_filter_bank(code, 30.7e6, receiver_for(replace(base, clock="oscillator")).drift_ppm)
    div = build_filter_bank(code, 915e6 / 32, receiver_for(replace(base, clock="divider")).drift_ppm)
    record_property("detail", f"EER divider {fmt(at400['divider'])} vs oscillator {fmt(at400['oscillator'])}; "
                              f"banks {len(div)} vs {len(osc)}")
    assert at400["divider"] <= at400["oscillator"]
    assert len(div) == 3 and len(osc) == 93


# --- 5 -----------------------------------------------------------------------

@pytest.mark.criterion(5, "EER non-increasing in SNR (-15..+5 dB), smaller N dominates")
def test_snr_monotone(bundled, record_property):
    rows = read_table(bundled("fig3e") / "snr.csv")
    curves = {}
    for r in sorted(rows, key=lambda r: r["snr_db"]):
        curves.setdefault(r["n_nodes"], []).append((r["snr_db"], r["eer"]))
    record_property("detail", "; ".join(f"N={n:g}: " + " ".join(fmt(e) for _, e in c) for n, c in curves.items()))
    assert sorted(curves) == [100, 400]
    snrs = [s for s, _ in curves[100]]
    assert len(snrs) == 6 and snrs[0] == -15 and snrs[-1] == 5
    for c in curves.values():
        assert all(np.diff([e for _, e in c]) <= 0)
    assert all(a[1] <= b[1] for a, b in zip(curves[100], curves[400]))


# --- 6 -----------------------------------------------------------------------

@pytest.mark.criterion(6, "Code-length optimum at 511, demod time increasing in L")
def test_code_length_optimum(bundled, record_property):
    rows = read_table(bundled("fig3f", 1, "--timing") / "codelen.csv")
    eer = {r["code_length"]: r["eer"] for r in rows}
    ms = [r["demod_ms_per_node"] for r in sorted(rows, key=lambda r: r["code_length"])]
    record_property("detail", "EER " + " ".join(f"L={int(k)}:{fmt(v)}" for k, v in sorted(eer.items()))
                    + "; ms/node " + " ".join(f"{v:.0f}" for v in ms))
    assert eer[511] < eer[127] and eer[511] < eer[4095]
    assert all(np.diff(ms) > 0)


# --- 7 -----------------------------------------------------------------------

@pytest.mark.criterion(7, "Capacity bound: sparsity scaling, monotonicity, documented 169 discrepancy")
def test_capacity_formula(capsys, record_property):
    assert capacity_from_n(169, 0.05) == 3380
    res = capacity_bound(CapacityParams())
    assert res.n_sparse == res.n / 0.05
    assert math.isclose(res.n_sparse * 0.05, res.n, rel_tol=1e-15)
    assert 102 < res.n < 104

    def n(**kw):
        lc = kw.pop("lc", 511)
        return capacity_bound(CapacityParams.from_coding_gain(lc, **kw)).n

    lcs, ss, ebs, etas = [63, 127, 511, 2047], [0.5, 1, 2], [3, 5, 7, 9], [0, 0.1, 0.5]
    for s in ss:
        for eta in etas:
            for eb in ebs:
                assert all(np.diff([n(lc=lc, s_w=s, eta_w=eta, ebn0_db=eb) for lc in lcs]) > 0)
            for lc in lcs:
                assert all(np.diff([n(lc=lc, s_w=s, eta_w=eta, ebn0_db=eb) for eb in ebs]) < 0)
    for lc in lcs:
        assert all(np.diff([n(lc=lc, s_w=s, eta_w=0.3) for s in ss]) > 0)
        assert all(np.diff([n(lc=lc, eta_w=eta) for eta in etas]) < 0)
    assert main(["capacity", "--utilization", "0.05", "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["note"] == CAPACITY_NOTE and "169" in out["note"] and "3380" in out["note"]
    record_property("detail", f"N = {res.n:.1f}, N_sparse = {res.n_sparse:.0f}; 169/0.05 = 3380")


# --- 8 -----------------------------------------------------------------------

@pytest.mark.criterion(8, "Near-far: per-node SER non-increasing across relative-SNR quartiles")
def test_near_far_quartiles(bundled, record_property):
    run = bundled("fig4d")
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["n_nodes"] == 500 and cfg["near_far_db"] == 20
    rows = read_table(run / "snr_buckets.csv")
    ser = [r["mean_node_eer"] for r in sorted(rows, key=lambda r: r["bucket"])]
    record_property("detail", "quartile SER " + " ".join(fmt(v) for v in ser))
    assert len(ser) == 4
    assert all(np.diff(ser) <= 0)


# --- 9 -----------------------------------------------------------------------

@pytest.mark.criterion(9, "Bundled examples reproduce byte-identically across worker counts")
def test_bundled_examples_deterministic(bundled, record_property):
    names = bundled_configs()
    differing = [n for n in names if tree(bundled(n, 1)) != tree(bundled(n, 2))]
    record_property("detail", f"{len(names) - len(differing)}/{len(names)} identical"
                    + (f"; differ: {differing}" if differing else ""))
    assert len(names) >= 6 and not differing


# --- 10 ----------------------------------------------------------------------

@pytest.mark.criterion(10, "Demodulating 1 s for one target with the 3-filter divider bank < 250 ms")
def test_divider_demod_speed(record_property):
    cfg = ScenarioConfig(n_nodes=50, n_targets=1, duration_s=1.0, clock="divider",
                         receiver=ReceiverConfig(mode="discrete"), write_iq=False)
    pop = build_population(cfg)
    iq = synthesize(cfg, pop)
    node = pop.nodes[0]
    rx = receiver_for(cfg)
    hint = node.clock.nominal(CarrierParams())
    assert len(build_filter_bank(node.code, hint, rx.drift_ppm, mode="discrete")) == 3
    best = math.inf
    for _ in range(3):
        t0 = time.perf_counter()
        report = demodulate(iq, node.code, rx, clock_hint=hint, slot_hint=node.tau_s)
        best = min(best, time.perf_counter() - t0)
    e = event_error_rate(pop.trains[0], report.detected)
    record_property("detail", f"{1e3 * best:.0f} ms, {e.errors} errors in {e.true_events} events")
    assert best < 0.25


# --- 11 ----------------------------------------------------------------------

@pytest.mark.criterion(11, "Spectral residual of a 31 MHz packet against 30 MHz f_dc is 1 MHz")
def test_spectral_residual(record_property):
    node = NodeProfile(0, gold_code(FAMILY13, 7, 511), FreeOscillator(31e6, 0.0))
    carrier = CarrierParams(f_dc=30e6)
    found = []
    for method in ("baseband", "rf"):
        iq = synthesize_packet_iq(node, carrier, phase=0.7, method=method)
        f = residual_frequency(iq, 30e6)
        found.append(f)
        assert abs(f - 1e6) <= 30e6 / iq.size
    record_property("detail", " / ".join(f"{f / 1e6:.4f} MHz" for f in found))
