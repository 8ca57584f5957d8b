"""Node populations, event sources and end-to-end scenarios.

Every random quantity of node ``i`` comes from its own generator keyed by
``(master_seed, i, purpose)``, so a node's code, clock, delay, phase and
events do not depend on how many other nodes exist or in which order they
are built.  Growing ``n_nodes`` only appends nodes; raising an event rate
only adds events (each bin compares one fixed uniform draw against
``rate * bin``).
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .codes import GoldFamily, SpreadingCode, gold_code
from .events import DEFAULT_BIN_S, EventTrain
from .metrics import ErrorReport, SweepTable, snr_buckets
from .phy import (DEFAULT_SAMPLE_RATE, CarrierParams, Divider, FreeOscillator, IqStream, NodeProfile,
                  PlacedStream, adc_quantize, amplitude_for_rssi, clock_trajectory, packet_duration,
                  render_node_stream, superpose)
from .rx import (CONTINUOUS, DemodReport, ReceiverConfig, build_filter_bank, combined_blocks, demodulate,
                 non_max_suppress, write_ndjson)

__all__ = [
    "EventTrain", "ScenarioConfig", "Population", "RunReport", "poisson_events", "load_spike_trains",
    "save_spike_trains", "replicate_channels", "augment_background", "assign_near_far",
    "build_population", "run_scenario", "calibrate_threshold",
]

# purpose tags for keyed generators
TAG_CODE = 1
TAG_CLOCK = 2
TAG_WALK = 3
TAG_PHASE = 4
TAG_TAU = 5
TAG_EVENTS = 6
TAG_NEAR_FAR = 7
TAG_NOISE = 8
TAG_AUGMENT = 9

GUARD_SAMPLES = 2


def keyed_rng(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), *map(int, key)])


def poisson_events(rate_hz: float, duration_s: float, bin_size_s: float = DEFAULT_BIN_S,
                   seed=None) -> EventTrain:
    """Bernoulli(rate * bin) occupancy per bin, at most one event per bin."""
    if rate_hz < 0:
        raise ValueError("rate must be non-negative")
    p = rate_hz * bin_size_s
    if p >= 1:
        raise ValueError(f"rate {rate_hz} Hz gives {p:g} events per bin; must be < 1")
    n_bins = int(round(duration_s / bin_size_s))
    u = np.random.default_rng(seed).random(n_bins)
    return EventTrain(np.flatnonzero(u < p), duration_s, bin_size_s)


# --- event files -------------------------------------------------------------

def _parse_event_rows(path: Path) -> list[tuple[int, str, float]]:
    text = path.read_text()
    rows: list[tuple[int, str, float]] = []
    stripped = text.lstrip()
    if not stripped:
        return rows
    if stripped.startswith("{"):
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rows.append((n, str(rec["channel"]), float(rec["time_s"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: malformed event record ({exc})") from exc
        return rows
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["channel", "time_s"]:
        raise ValueError(f"{path}:1: expected header 'channel,time_s'")
    for n, rec in enumerate(reader, 2):
        if not rec or not "".join(rec).strip():
            continue
        if len(rec) != 2:
            raise ValueError(f"{path}:{n}: expected 2 fields, got {len(rec)}")
        try:
            rows.append((n, rec[0].strip(), float(rec[1])))
        except ValueError as exc:
            raise ValueError(f"{path}:{n}: bad time value {rec[1]!r}") from exc
    return rows


def _channel_key(ch: str):
    return (0, int(ch), "") if ch.lstrip("-").isdigit() else (1, 0, ch)


def load_spike_trains(path: str | Path, duration_s: float | None = None,
                      bin_size_s: float = DEFAULT_BIN_S) -> list[tuple[str, EventTrain]]:
    """Read a ``channel,time_s`` CSV or NDJSON events file.

    Without ``duration_s`` the grid ends at the bin after the last event.
    Channels come back sorted (numerically when they are integers).
    """
    path = Path(path)
    rows = _parse_event_rows(path)
    if not rows:
        return []
    if duration_s is None:
        last = max(t for _, _, t in rows)
        duration_s = (math.floor(last / bin_size_s + 1e-9) + 1) * bin_size_s
    by_channel: dict[str, list[float]] = {}
    for n, ch, t in rows:
        if not 0 <= t < duration_s:
            raise ValueError(f"{path}:{n}: time {t} outside [0, {duration_s})")
        by_channel.setdefault(ch, []).append(t)
    return [(ch, EventTrain.from_times(by_channel[ch], duration_s, bin_size_s))
            for ch in sorted(by_channel, key=_channel_key)]


def save_spike_trains(trains: Sequence[tuple[str, EventTrain]], path: str | Path) -> None:
    """Write bin-start times as a ``channel,time_s`` CSV (or NDJSON for a
    ``.ndjson`` path)."""
    path = Path(path)
    # rounding drops float noise from bin * bin_size; loading bins with an epsilon
    records = [(str(ch), round(float(t), 12)) for ch, tr in trains for t in tr.times()]
    if path.suffix == ".ndjson":
        path.write_text("".join(json.dumps({"channel": c, "time_s": t}) + "\n" for c, t in records))
        return
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "time_s"])
        for c, t in records:
            w.writerow([c, repr(t)])


def replicate_channels(trains: Sequence[EventTrain], factor: int) -> list[EventTrain]:
    """``factor`` copies of every train, copy-major: replica ``r`` of train
    ``j`` lands at index ``r * len(trains) + j``.  Each copy becomes its own
    node (fresh id and code) when placed in a population."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    return [tr for _ in range(factor) for tr in trains]


# --- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    n_nodes: int = 78
    n_targets: int = 40
    duration_s: float = 1.0
    target_rate_hz: float = 50.0
    background_rate_hz: float = 50.0
    events_file: str | None = None
    clock: str = "oscillator"
    drift_ppm: float = 1005.0
    step_ppm: float = 100.0
    nominal_range_hz: tuple[float, float] = (28.5e6, 33e6)
    divider_ratio: int = 32
    snr_db: float = 1.7
    noise_floor_dbm: float = -75.75
    noise: bool = True
    near_far_db: float = 0.0
    gold_degree: int = 13
    code_length: int = 511
    background: str = "independent"
    pool_size: int = 38
    quant_bits: int | None = None
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE
    bin_size_s: float = DEFAULT_BIN_S
    clock_recovery: str = "calibrated"
    receiver: ReceiverConfig = field(default_factory=ReceiverConfig)
    master_seed: int = 0
    write_iq: bool = True
    workers: int = 1

    def __post_init__(self) -> None:
        if self.n_targets < 0 or self.n_nodes < self.n_targets:
            raise ValueError("need 0 <= n_targets <= n_nodes")
        if self.target_rate_hz < 0 or self.background_rate_hz < 0:
            raise ValueError("event rates must be non-negative")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.clock not in ("oscillator", "divider"):
            raise ValueError(f"clock must be 'oscillator' or 'divider', got {self.clock!r}")
        if self.background not in ("independent", "replicate"):
            raise ValueError(f"background must be 'independent' or 'replicate', got {self.background!r}")
        if self.clock_recovery not in ("calibrated", "search"):
            raise ValueError(f"clock_recovery must be 'calibrated' or 'search', got {self.clock_recovery!r}")
        if self.near_far_db < 0:
            raise ValueError("near_far_db must be non-negative")
        lo, hi = self.nominal_range_hz
        if not 0 < lo <= hi:
            raise ValueError("nominal_range_hz must be increasing and positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.background == "replicate" and self.n_nodes > self.n_targets + self.pool_size and self.pool_size < 1:
            raise ValueError("replication needs a non-empty pool")

    @property
    def family(self) -> GoldFamily:
        return GoldFamily.default(self.gold_degree)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["receiver"] = self.receiver.to_dict()
        d["nominal_range_hz"] = list(self.nominal_range_hz)
        return d

    def to_json(self, portable: bool = False) -> str:
        """JSON text; ``portable`` drops ``workers``, which never affects results."""
        d = self.to_dict()
        if portable:
            d.pop("workers")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        d = dict(d)
        if "receiver" in d:
            d["receiver"] = ReceiverConfig.from_dict(d["receiver"])
        if "nominal_range_hz" in d:
            d["nominal_range_hz"] = tuple(float(v) for v in d["nominal_range_hz"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ValueError(f"{path}: expected a JSON object")
        return cls.from_dict(data)


# --- population --------------------------------------------------------------

@dataclass
class Population:
    nodes: list[NodeProfile]
    trains: dict[int, EventTrain]
    streams: list[PlacedStream]
    targets: list[int]
    relative_snr_db: dict[int, float]
    source: dict[int, int] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def packet_count(self) -> int:
        return sum(len(s) for s in self.streams)

    def events_per_second(self) -> float:
        if not self.trains:
            return 0.0
        dur = next(iter(self.trains.values())).duration_s
        return sum(t.count for t in self.trains.values()) / dur


def _clock_model(cfg: ScenarioConfig, node_id: int):
    if cfg.clock == "divider":
        return Divider(cfg.divider_ratio)
    lo, hi = cfg.nominal_range_hz
    nominal = keyed_rng(cfg.master_seed, node_id, TAG_CLOCK).uniform(lo, hi)
    return FreeOscillator(float(nominal), cfg.drift_ppm, cfg.step_ppm)


def _code_seeds(cfg: ScenarioConfig, n: int) -> np.ndarray:
    """Distinct family members for nodes ``0..n-1``: a fixed shuffle of the
    non-reserved seeds, so node ``i`` keeps its code whatever ``n`` is."""
    period = cfg.family.period
    if n > period:
        raise ValueError(f"{n} nodes exceed the {period} distinct codes of degree {cfg.gold_degree}")
    return keyed_rng(cfg.master_seed, TAG_CODE).permutation(period)[:n]


def _max_packet_s(cfg: ScenarioConfig, carrier: CarrierParams) -> float:
    if cfg.clock == "divider":
        return packet_duration(cfg.code_length, carrier.f_tx / cfg.divider_ratio)
    return packet_duration(cfg.code_length, cfg.nominal_range_hz[0] * (1 - cfg.drift_ppm * 1e-6))


def assign_near_far(node_ids: Sequence[int], spread_db: float, seed: int) -> dict[int, float]:
    """Relative SNR in dB per node, uniform in ``[0, spread_db]``."""
    if spread_db < 0:
        raise ValueError("spread must be non-negative")
    return {int(i): float(keyed_rng(seed, i, TAG_NEAR_FAR).uniform(0.0, spread_db)) if spread_db else 0.0
            for i in node_ids}


def _make_node(cfg: ScenarioConfig, node_id: int, code_seed: int, rel_snr: float,
               carrier: CarrierParams) -> NodeProfile:
    code = gold_code(cfg.family, int(code_seed), cfg.code_length)
    snr = cfg.snr_db + rel_snr - cfg.near_far_db / 2.0
    amp = amplitude_for_rssi(cfg.noise_floor_dbm + snr)
    pk = _max_packet_s(cfg, carrier)
    guard = GUARD_SAMPLES / cfg.sample_rate_hz
    hi = cfg.bin_size_s - pk - guard
    if hi < guard:
        raise ValueError(f"a {cfg.code_length}-chip packet does not fit a {cfg.bin_size_s * 1e3:g} ms bin")
    tau = float(keyed_rng(cfg.master_seed, node_id, TAG_TAU).uniform(guard, hi))
    phase = float(keyed_rng(cfg.master_seed, node_id, TAG_PHASE).uniform(0.0, 2 * math.pi))
    return NodeProfile(node_id, code, _clock_model(cfg, node_id), a_bck=amp, tau_s=tau, phase_adc=phase)


def _node_events(cfg: ScenarioConfig, node_id: int, file_trains: list[EventTrain] | None) -> EventTrain:
    if file_trains:
        src = file_trains[node_id % len(file_trains)]
        return EventTrain(src.bins, cfg.duration_s, cfg.bin_size_s)
    rate = cfg.target_rate_hz if node_id < cfg.n_targets else cfg.background_rate_hz
    return poisson_events(rate, cfg.duration_s, cfg.bin_size_s,
                          seed=[cfg.master_seed, node_id, TAG_EVENTS])


def augment_background(pool: Sequence[PlacedStream], n_replicas: int, first_id: int, duration_s: float,
                       seed: int, bin_size_s: float = DEFAULT_BIN_S) -> tuple[list[PlacedStream], dict[int, int]]:
    """Replicate pool streams: each replica picks a pool member with
    replacement and shifts all its packets by one random offset, cyclically
    over the capture.  Returns the replicas and their source member ids."""
    if n_replicas < 0:
        raise ValueError("n_replicas must be non-negative")
    if n_replicas and not pool:
        raise ValueError("cannot replicate an empty pool")
    rng = keyed_rng(seed, TAG_AUGMENT)
    picks = rng.integers(0, len(pool), size=n_replicas)
    shifts = rng.uniform(0.0, duration_s, size=n_replicas)
    out, source = [], {}
    for r, (j, shift) in enumerate(zip(picks, shifts)):
        src = pool[int(j)]
        nid = first_id + r
        node = replace(src.node, node_id=nid)
        starts = np.mod(src.start_s + shift, duration_s)
        order = np.argsort(starts, kind="stable")
        starts = starts[order]
        bins = np.floor(starts / bin_size_s + 1e-9).astype(np.int64)
        out.append(PlacedStream(node, src.carrier, src.sample_rate, starts, src.f_clk[order], src.phase, bins))
        source[nid] = src.node.node_id
    return out, source


def augment_population(targets: Sequence[PlacedStream], pool: Sequence[PlacedStream], total_nodes: int,
                       duration_s: float, seed: int) -> tuple[list[PlacedStream], dict[int, int]]:
    """Targets and pool as they are plus enough pool replicas to reach ``total_nodes``."""
    base = len(targets) + len(pool)
    if total_nodes < base:
        raise ValueError(f"total_nodes {total_nodes} < targets + pool = {base}")
    first = max([s.node.node_id for s in (*targets, *pool)], default=-1) + 1
    replicas, source = augment_background(pool, total_nodes - base, first, duration_s, seed)
    return [*targets, *pool, *replicas], source


def build_population(cfg: ScenarioConfig, carrier: CarrierParams = CarrierParams()) -> Population:
    file_trains = None
    if cfg.events_file:
        file_trains = [tr for _, tr in load_spike_trains(cfg.events_file, cfg.duration_s, cfg.bin_size_s)]
    n_independent = cfg.n_nodes
    if cfg.background == "replicate":
        n_independent = min(cfg.n_nodes, cfg.n_targets + cfg.pool_size)
    ids = list(range(n_independent))
    seeds = _code_seeds(cfg, n_independent)
    rel = assign_near_far(range(cfg.n_nodes), cfg.near_far_db, cfg.master_seed)
    nodes, streams, trains = [], [], {}
    for i in ids:
        node = _make_node(cfg, i, seeds[i], rel[i], carrier)
        ev = _node_events(cfg, i, file_trains)
        st = render_node_stream(node, ev, carrier, keyed_rng(cfg.master_seed, i, TAG_WALK), cfg.sample_rate_hz)
        nodes.append(node)
        streams.append(st)
        trains[i] = ev
    source: dict[int, int] = {}
    if cfg.background == "replicate" and cfg.n_nodes > n_independent:
        streams, source = augment_population(streams[: cfg.n_targets], streams[cfg.n_targets :], cfg.n_nodes,
                                             cfg.duration_s, cfg.master_seed)
        for st in streams[n_independent:]:
            nid = st.node.node_id
            # near-far applies per replica identity
            scale = 10 ** ((rel[nid] - rel[source[nid]]) / 20.0)
            st.node = replace(st.node, a_bck=st.node.a_bck * scale)
            nodes.append(st.node)
            trains[nid] = EventTrain(np.unique(st.bins), cfg.duration_s, cfg.bin_size_s)
    return Population(nodes, trains, streams, list(range(cfg.n_targets)), rel, source)


# --- scenario ----------------------------------------------------------------

@dataclass
class RunReport:
    config: ScenarioConfig
    population: Population
    iq: IqStream
    reports: list[DemodReport]
    errors: ErrorReport
    demod_seconds: float = 0.0

    @property
    def demod_ms_per_node(self) -> float:
        return 1e3 * self.demod_seconds / max(1, len(self.reports))

    def truth_records(self) -> list[dict]:
        targets = set(self.population.targets)
        out = []
        for nid in sorted(self.population.trains):
            tr = self.population.trains[nid]
            for b in tr.bins:
                out.append({"node_id": nid, "bin_index": int(b), "time_s": float(b * tr.bin_size_s),
                            "target": nid in targets})
        return out

    def errors_document(self) -> dict:
        doc = self.errors.to_dict()
        doc["n_nodes"] = self.population.n_nodes
        doc["n_targets"] = len(self.population.targets)
        doc["packets"] = self.population.packet_count()
        doc["events_per_second"] = self.population.events_per_second()
        doc["relative_snr_db"] = {str(k): self.population.relative_snr_db[k] for k in self.population.targets}
        return doc

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(self.config.to_json(portable=True))
        (out / "truth.ndjson").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.truth_records()))
        if self.config.write_iq:
            self.iq.save(out / "iq")
        write_ndjson(self.reports, out / "detections.ndjson")
        (out / "errors.json").write_text(json.dumps(self.errors_document(), indent=2, sort_keys=True) + "\n")
        if self.config.near_far_db > 0:
            rel = {k: self.population.relative_snr_db[k] for k in self.population.targets}
            snr_buckets(self.errors, rel).write(out / "snr_buckets")
        return out


def receiver_for(cfg: ScenarioConfig) -> ReceiverConfig:
    """The configured receiver with the bank's drift span matched to the clock model."""
    drift = cfg.drift_ppm if cfg.clock == "oscillator" else 0.0
    return replace(cfg.receiver, drift_ppm=drift)


def synthesize(cfg: ScenarioConfig, pop: Population, carrier: CarrierParams = CarrierParams()) -> IqStream:
    floor = cfg.noise_floor_dbm if cfg.noise else None
    iq = superpose(pop.streams, floor, cfg.duration_s, cfg.sample_rate_hz,
                   seed=[cfg.master_seed, TAG_NOISE])
    iq.seed = cfg.master_seed
    iq.noise_floor_dbm = floor
    if cfg.quant_bits is not None:
        iq = adc_quantize(iq, cfg.quant_bits)
    return iq


def demodulate_targets(cfg: ScenarioConfig, pop: Population, iq: IqStream,
                       carrier: CarrierParams = CarrierParams(), targets: Sequence[int] | None = None
                       ) -> tuple[list[DemodReport], float]:
    rx_cfg = receiver_for(cfg)
    by_id = {n.node_id: n for n in pop.nodes}
    ids = list(pop.targets if targets is None else targets)

    def one(nid: int) -> DemodReport:
        node = by_id[nid]
        # a calibrated receiver knows each target's nominal clock and slot offset
        calibrated = cfg.clock_recovery == "calibrated"
        hint = node.clock.nominal(carrier) if calibrated else None
        slot = node.tau_s if calibrated else None
        return demodulate(iq, node.code, rx_cfg, node_id=nid, clock_hint=hint, slot_hint=slot,
                          carrier=carrier, bin_size_s=cfg.bin_size_s)

    t0 = time.perf_counter()
    if cfg.workers > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            reports = list(pool.map(one, ids))
    else:
        reports = [one(i) for i in ids]
    return reports, time.perf_counter() - t0


def run_scenario(cfg: ScenarioConfig, carrier: CarrierParams = CarrierParams()) -> RunReport:
    pop = build_population(cfg, carrier)
    iq = synthesize(cfg, pop, carrier)
    reports, secs = demodulate_targets(cfg, pop, iq, carrier)
    errors = ErrorReport.from_trains({t: pop.trains[t] for t in pop.targets},
                                     {r.node_id: r.detected for r in reports})
    return RunReport(cfg, pop, iq, reports, errors, secs)


def calibrate_threshold(cfg: ScenarioConfig, k_grid: Sequence[float], n_codes: int = 4,
                        duration_s: float | None = None, target_rate_hz: float = 0.1,
                        carrier: CarrierParams = CarrierParams()) -> SweepTable:
    """False-alarm rate against ``threshold_k`` on a noise-only capture.

    Runs the continuous detector of the first ``n_codes`` nodes' banks over
    pure noise at the configured floor and counts the peaks each ``k``
    would report.  ``recommended_k`` in the metadata is the smallest grid
    value whose rate per node is at most ``target_rate_hz``.
    """
    if n_codes < 1:
        raise ValueError("n_codes must be >= 1")
    ks = sorted(float(k) for k in k_grid)
    if not ks or ks[0] <= 0:
        raise ValueError("k_grid must hold positive values")
    dur = cfg.duration_s if duration_s is None else float(duration_s)
    iq = superpose([], cfg.noise_floor_dbm, dur, cfg.sample_rate_hz, seed=[cfg.master_seed, TAG_NOISE])
    rx_cfg = receiver_for(cfg)
    seeds = _code_seeds(cfg, n_codes)
    counts = np.zeros(len(ks), dtype=np.int64)
    peak_ratio = 0.0
    for i in range(n_codes):
        node = _make_node(cfg, i, seeds[i], 0.0, carrier)
        bank = build_filter_bank(node.code, node.clock.nominal(carrier), rx_cfg.drift_ppm,
                                 rx_cfg.n_clock_points, rx_cfg.n_phases, CONTINUOUS, carrier,
                                 cfg.sample_rate_hz, i)
        series = combined_blocks(iq, bank, rx_cfg.rank_tol)
        rms = series.rms()
        peak_ratio = max(peak_ratio, series.peak()[1] / rms)
        idx, val = series.above(ks[0] * rms)
        keep = non_max_suppress(idx, val, bank.length)
        for j, k in enumerate(ks):
            counts[j] += int(np.sum(val[keep] >= k * rms))
    rates = counts / (dur * n_codes)
    ok = [k for k, r in zip(ks, rates) if r <= target_rate_hz]
    table = SweepTable("threshold", ["threshold_k", "false_alarms", "false_alarm_rate_hz"],
                       metadata={"noise_floor_dbm": cfg.noise_floor_dbm, "duration_s": dur, "n_codes": n_codes,
                                 "target_rate_hz": target_rate_hz, "max_peak_over_rms": peak_ratio,
                                 "recommended_k": ok[0] if ok else None, "master_seed": cfg.master_seed})
    for k, c, r in zip(ks, counts, rates):
        table.add(k, int(c), float(r))
    return table
