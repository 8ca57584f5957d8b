"""Event error rates, the interference-limited capacity bound and sweeps.

A missed event and a false detection each count as one error.  The event
error rate (EER) divides the error count by the number of true events; the
per-bin variant divides by the number of bins observed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .events import EventTrain


@dataclass(frozen=True)
class NodeErrors:
    node_id: int
    true_events: int
    detected_events: int
    misses: int
    false_detections: int
    n_bins: int

    def __post_init__(self) -> None:
        if not 0 <= self.misses <= self.true_events:
            raise ValueError("misses must lie in [0, true_events]")
        if self.false_detections < 0:
            raise ValueError("false_detections must be non-negative")

    @property
    def errors(self) -> int:
        return self.misses + self.false_detections

    @property
    def eer(self) -> float:
        return self.errors / max(1, self.true_events)

    @property
    def eer_per_bin(self) -> float:
        return self.errors / max(1, self.n_bins)

    def to_dict(self) -> dict:
        return {**asdict(self), "errors": self.errors, "eer": self.eer, "eer_per_bin": self.eer_per_bin}


def event_error_rate(truth: EventTrain, detected: EventTrain, node_id: int = 0) -> NodeErrors:
    if not truth.same_grid(detected):
        raise ValueError("truth and detections must share the bin grid")
    hits = np.intersect1d(truth.bins, detected.bins, assume_unique=True).size
    return NodeErrors(node_id, truth.count, detected.count, truth.count - hits, detected.count - hits,
                      truth.n_bins)


@dataclass(frozen=True)
class ErrorReport:
    nodes: tuple[NodeErrors, ...]
    bin_size_s: float = 1e-3

    @property
    def true_events(self) -> int:
        return sum(n.true_events for n in self.nodes)

    @property
    def misses(self) -> int:
        return sum(n.misses for n in self.nodes)

    @property
    def false_detections(self) -> int:
        return sum(n.false_detections for n in self.nodes)

    @property
    def errors(self) -> int:
        return self.misses + self.false_detections

    @property
    def eer(self) -> float:
        """Pooled over nodes: total errors over total true events."""
        return self.errors / max(1, self.true_events)

    @property
    def eer_per_bin(self) -> float:
        return self.errors / max(1, sum(n.n_bins for n in self.nodes))

    @property
    def mean_node_eer(self) -> float:
        return float(np.mean([n.eer for n in self.nodes])) if self.nodes else 0.0

    def to_dict(self) -> dict:
        return {
            "bin_size_s": self.bin_size_s,
            "aggregate": {"true_events": self.true_events, "misses": self.misses,
                          "false_detections": self.false_detections, "errors": self.errors,
                          "eer": self.eer, "eer_per_bin": self.eer_per_bin,
                          "mean_node_eer": self.mean_node_eer},
            "nodes": [n.to_dict() for n in self.nodes],
        }

    @classmethod
    def from_trains(cls, truth: dict[int, EventTrain], detected: dict[int, EventTrain]) -> "ErrorReport":
        nodes = []
        bin_size = 1e-3
        for nid in sorted(truth):
            bin_size = truth[nid].bin_size_s
            nodes.append(event_error_rate(truth[nid], detected[nid], nid))
        return cls(tuple(nodes), bin_size)


CAPACITY_NOTE = (
    "The bound is evaluated exactly as N = 1 + (W/R)/(Eb/N0) - eta/S. With L_c = 511 "
    "and Eb/N0 = 7 dB it gives about 103 nodes; a figure of 169 nodes for the same inputs "
    "does not follow from this formula and is not reproduced. The sparse scaling "
    "N_sparse = N / utilization is applied exactly (169 / 0.05 = 3380)."
)


@dataclass(frozen=True)
class CapacityParams:
    w_hz: float = 10e6
    r_bps: float = 10e6 / 511
    ebn0_db: float = 7.0
    s_w: float = 1.0
    eta_w: float = 0.0
    utilization: float = 0.05

    def __post_init__(self) -> None:
        if self.w_hz <= 0 or self.r_bps <= 0 or self.s_w <= 0:
            raise ValueError("W, R and S must be positive")
        if self.eta_w < 0:
            raise ValueError("eta must be non-negative")
        if not 0 < self.utilization <= 1:
            raise ValueError("utilization must lie in (0, 1]")

    @property
    def coding_gain(self) -> float:
        return self.w_hz / self.r_bps

    @classmethod
    def from_coding_gain(cls, l_c: float, **kw) -> "CapacityParams":
        w = kw.pop("w_hz", 10e6)
        return cls(w_hz=w, r_bps=w / l_c, **kw)


@dataclass(frozen=True)
class CapacityResult:
    n: float
    n_sparse: float
    params: CapacityParams
    note: str = CAPACITY_NOTE

    def to_dict(self) -> dict:
        return {"n": self.n, "n_sparse": self.n_sparse, "coding_gain": self.params.coding_gain,
                "params": asdict(self.params), "note": self.note}


def capacity_from_n(n: float, utilization: float) -> float:
    if not 0 < utilization <= 1:
        raise ValueError("utilization must lie in (0, 1]")
    return n / utilization


def capacity_bound(params: CapacityParams) -> CapacityResult:
    """Interference-limited node count, plain and scaled by channel utilization."""
    ebn0 = 10.0 ** (params.ebn0_db / 10.0)
    n = 1.0 + params.coding_gain / ebn0 - params.eta_w / params.s_w
    return CapacityResult(n, capacity_from_n(n, params.utilization), params)


# --- sweep tables ------------------------------------------------------------

@dataclass
class SweepTable:
    """Rows of a parameter sweep with a JSON metadata block."""

    kind: str
    columns: list[str]
    rows: list[list] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} values, got {len(values)}")
        self.rows.append(list(values))

    def column(self, name: str) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([r[j] for r in self.rows])

    def where(self, **match) -> "SweepTable":
        idx = [self.columns.index(k) for k in match]
        rows = [r for r in self.rows if all(r[j] == v for j, v in zip(idx, match.values()))]
        return SweepTable(self.kind, list(self.columns), rows, dict(self.metadata))

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        csv_path, meta_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_fmt(v) for v in r])
        meta = {"kind": self.kind, "columns": self.columns, **self.metadata}
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return csv_path, meta_path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def snr_buckets(errors: ErrorReport, relative_snr_db: dict[int, float], n_buckets: int = 4) -> SweepTable:
    """Per-node error rates grouped into equal-count quantiles of assigned
    relative SNR (weakest bucket first)."""
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    nodes = [n for n in errors.nodes if n.node_id in relative_snr_db]
    rel = np.array([relative_snr_db[n.node_id] for n in nodes], dtype=np.float64)
    table = SweepTable("snr_buckets", ["bucket", "rel_snr_lo_db", "rel_snr_hi_db", "mean_rel_snr_db", "n_nodes",
                                       "true_events", "errors", "mean_node_eer", "pooled_eer"],
                       metadata={"n_buckets": n_buckets})
    if not nodes:
        return table
    edges = np.quantile(rel, np.linspace(0.0, 1.0, n_buckets + 1))
    which = np.clip(np.searchsorted(edges[1:-1], rel, side="right"), 0, n_buckets - 1)
    for b in range(n_buckets):
        members = [n for n, w in zip(nodes, which) if w == b]
        if not members:
            continue
        r = rel[which == b]
        true = sum(n.true_events for n in members)
        errs = sum(n.errors for n in members)
        table.add(b, float(r.min()), float(r.max()), float(r.mean()), len(members), true, errs,
                  float(np.mean([n.eer for n in members])), errs / max(1, true))
    return table


# --- sweeps ------------------------------------------------------------------
#
# Every cell reuses the base master seed, so cells are paired: node ``i`` has
# the same code, clock, events and noise realization in every cell it exists.

CELL_COLUMNS = ["true_events", "misses", "false_detections", "eer", "mean_node_eer", "eer_per_bin"]


def run_cell(cfg) -> dict:
    """Run one scenario and keep only its summary numbers."""
    from .netsim import run_scenario
    from .phy import watts_to_dbm

    rep = run_scenario(cfg)
    e = rep.errors
    rssi = [watts_to_dbm(n.amplitude ** 2) for n in rep.population.nodes]
    floor = cfg.noise_floor_dbm
    # dBm round trips leave float noise; 1e-9 dB is far below any meaningful SNR step
    avg_snr = round(float(np.mean(rssi) - floor), 9) if rssi else float("nan")
    return {"true_events": e.true_events, "misses": e.misses, "false_detections": e.false_detections,
            "eer": e.eer, "mean_node_eer": e.mean_node_eer, "eer_per_bin": e.eer_per_bin,
            "events_per_second": rep.population.events_per_second(),
            "demod_ms_per_node": rep.demod_ms_per_node, "avg_snr_db": avg_snr}


def run_cells(cfgs: Sequence, workers: int = 1, runner: Callable = run_cell) -> list[dict]:
    """Cells in order; ``workers > 1`` fans them out over processes."""
    cfgs = list(cfgs)
    if workers <= 1 or len(cfgs) <= 1:
        return [runner(c) for c in cfgs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=min(workers, len(cfgs))) as pool:
        return list(pool.map(runner, cfgs))


def _cell_cfg(base, **changes):
    # the scenario's own receiver work stays single-threaded inside a sweep cell
    return replace(base, write_iq=False, workers=1, **changes)


def _meta(base, **extra) -> dict:
    cfg = base.to_dict()
    cfg.pop("workers", None)
    return {"base_config": cfg, "master_seed": base.master_seed, **extra}


def sweep_nodes(base, n_grid: Iterable[int], rates: Iterable[float] | None = None,
                clocks: Iterable[str] | None = None, modes: dict[str, str] | None = None,
                workers: int = 1) -> SweepTable:
    """EER against total node count, one curve per (clock model, background
    event rate).  ``modes`` maps a clock model to the receiver mode used
    with it (e.g. ``{"divider": "discrete"}``)."""
    n_grid = [int(n) for n in n_grid]
    rates = [base.background_rate_hz] if rates is None else [float(r) for r in rates]
    clocks = [base.clock] if clocks is None else list(clocks)
    modes = dict(modes or {})
    cells = [(c, r, n) for c in clocks for r in rates for n in n_grid]

    def cfg(c, r, n):
        rx = replace(base.receiver, mode=modes.get(c, base.receiver.mode))
        return _cell_cfg(base, clock=c, receiver=rx, n_nodes=n, background_rate_hz=r)

    res = run_cells([cfg(*cell) for cell in cells], workers)
    table = SweepTable("nodes", ["clock", "receiver_mode", "background_rate_hz", "n_nodes", *CELL_COLUMNS,
                                 "events_per_second"],
                       metadata=_meta(base, n_grid=n_grid, rates=rates, clocks=clocks, modes=modes))
    for (c, r, n), res_c in zip(cells, res):
        table.add(c, modes.get(c, base.receiver.mode), r, n, *(res_c[k] for k in CELL_COLUMNS),
                  res_c["events_per_second"])
    return table


def sweep_snr(base, noise_floors: Iterable[float], n_grid: Iterable[int] | None = None,
              workers: int = 1) -> SweepTable:
    """EER against SNR by raising the noise floor under fixed node RSSI.

    Node RSSI stays at the base configuration's ``noise_floor + snr``; each
    cell injects noise at a new floor and reports the recomputed average
    SNR (mean node RSSI minus floor).  The noise realization is shared
    across cells, only its scale changes.
    """
    floors = [float(f) for f in noise_floors]
    n_grid = [base.n_nodes] if n_grid is None else [int(n) for n in n_grid]
    rssi = base.noise_floor_dbm + base.snr_db
    cells = [(n, f) for n in n_grid for f in floors]
    cfgs = [_cell_cfg(base, n_nodes=n, noise_floor_dbm=f, snr_db=rssi - f) for n, f in cells]
    res = run_cells(cfgs, workers)
    table = SweepTable("snr", ["n_nodes", "noise_floor_dbm", "snr_db", "avg_snr_db", *CELL_COLUMNS],
                       metadata=_meta(base, rssi_dbm=rssi, noise_floors=floors, n_grid=n_grid))
    for (n, f), c in zip(cells, res):
        table.add(n, f, rssi - f, c["avg_snr_db"], *(c[k] for k in CELL_COLUMNS))
    return table


def sweep_code_length(base, lengths: Iterable[int], workers: int = 1, timing: bool = True) -> SweepTable:
    """EER and receiver wall time per target against code length.

    ``demod_ms_per_node`` is wall-clock time, the one column that differs
    between otherwise identical runs; ``timing=False`` leaves it out.
    """
    lengths = [int(v) for v in lengths]
    res = run_cells([_cell_cfg(base, code_length=v) for v in lengths], workers)
    extra = ["demod_ms_per_node"] if timing else []
    table = SweepTable("codelen", ["code_length", *CELL_COLUMNS, *extra],
                       metadata=_meta(base, lengths=lengths, nondeterministic_columns=extra))
    for v, c in zip(lengths, res):
        table.add(v, *(c[k] for k in [*CELL_COLUMNS, *extra]))
    return table


def capacity_heatmap(base, n_grid: Iterable[int], rate_grid: Iterable[float], workers: int = 1) -> SweepTable:
    """EER over node count x per-node event rate (targets and background
    share the rate), with the aggregate event throughput of each cell."""
    n_grid = [int(n) for n in n_grid]
    rate_grid = [float(r) for r in rate_grid]
    cells = [(n, r) for n in n_grid for r in rate_grid]
    cfgs = [_cell_cfg(base, n_nodes=n, target_rate_hz=r, background_rate_hz=r) for n, r in cells]
    res = run_cells(cfgs, workers)
    table = SweepTable("heatmap", ["n_nodes", "rate_hz", "events_per_second", *CELL_COLUMNS],
                       metadata=_meta(base, n_grid=n_grid, rate_grid=rate_grid))
    for (n, r), c in zip(cells, res):
        table.add(n, r, c["events_per_second"], *(c[k] for k in CELL_COLUMNS))
    return table
