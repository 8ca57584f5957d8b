"""Matched-filter demodulation of aggregate backscatter captures.

For one filter the receiver correlates the real part of the capture with the
filter's ``i_ref`` and the imaginary part with ``q_ref`` and multiplies the
two correlations sample by sample; a bank sums those products over all its
filters.  The sum is a bilinear form in the capture window,

    c[tau] = I_tau^T B Q_tau,   B = sum_f i_f q_f^T,

so it is evaluated through a truncated factorization of ``B`` with one
overlap-save FFT pass per factor instead of one per filter.  The per-filter
path is kept (``method="direct"``) and the two agree to rounding.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view

from .codes import SpreadingCode
from .events import DEFAULT_BIN_S, EventTrain
from .phy import DEFAULT_SAMPLE_RATE, CarrierParams, IqStream, baseband_packet, packet_samples

CONTINUOUS = "continuous"
DISCRETE = "discrete"
_MODES = (CONTINUOUS, DISCRETE)


@dataclass(frozen=True, eq=False)
class MatchedFilter:
    """Real I and Q references for one (clock, phase) hypothesis.

    References are scaled so that ``|i|^2 + |q|^2 = 2``; away from a zero
    residual frequency each part then carries unit energy.
    """

    i_ref: np.ndarray = field(repr=False)
    q_ref: np.ndarray = field(repr=False)
    f_clk_hz: float
    phase: float
    phase_variant: int = 0

    @property
    def length(self) -> int:
        return int(self.i_ref.size)


def synthesize_matched_filter(code: SpreadingCode, f_clk: float, phase: float,
                              carrier: CarrierParams = CarrierParams(),
                              sample_rate: float = DEFAULT_SAMPLE_RATE,
                              phase_variant: int = 0) -> MatchedFilter:
    ref = baseband_packet(code.chips, f_clk, carrier.f_dc, phase, sample_rate)
    ref *= math.sqrt(2.0 / ref.size)
    i_ref = np.ascontiguousarray(ref.real)
    q_ref = np.ascontiguousarray(ref.imag)
    i_ref.setflags(write=False)
    q_ref.setflags(write=False)
    return MatchedFilter(i_ref, q_ref, float(f_clk), float(phase), phase_variant)


@dataclass(eq=False)
class FilterBank:
    target_id: int
    filters: list[MatchedFilter]
    mode: str = CONTINUOUS
    sample_rate: float = DEFAULT_SAMPLE_RATE
    _kernel: "LowRankKernel | None" = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not self.filters:
            raise ValueError("a filter bank needs at least one filter")
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")

    def __len__(self) -> int:
        return len(self.filters)

    @property
    def length(self) -> int:
        """Common window length: the longest reference."""
        return max(f.length for f in self.filters)

    @property
    def clock_points(self) -> np.ndarray:
        return np.unique([f.f_clk_hz for f in self.filters])

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """``(F, K)`` stacks of I and Q references, zero-padded to ``length``."""
        k = self.length
        iref = np.zeros((len(self), k))
        qref = np.zeros((len(self), k))
        for r, f in enumerate(self.filters):
            iref[r, : f.length] = f.i_ref
            qref[r, : f.length] = f.q_ref
        return iref, qref

    def kernel(self, rank_tol: float = 1e-6) -> "LowRankKernel":
        if self._kernel is None or self._kernel.rank_tol != rank_tol:
            self._kernel = LowRankKernel.from_bank(self, rank_tol)
        return self._kernel


def clock_grid(clock_hint: float, drift_ppm: float, n_clock_points: int) -> np.ndarray:
    if n_clock_points < 1:
        raise ValueError("n_clock_points must be >= 1")
    if drift_ppm < 0:
        raise ValueError("drift_ppm must be non-negative")
    if drift_ppm == 0 or n_clock_points == 1:
        return np.array([float(clock_hint)])
    d = drift_ppm * 1e-6
    return np.linspace(clock_hint * (1 - d), clock_hint * (1 + d), n_clock_points)


def build_filter_bank(code: SpreadingCode, clock_hint: float, drift_ppm: float = 1005.0,
                      n_clock_points: int = 31, n_phases: int = 3, mode: str = CONTINUOUS,
                      carrier: CarrierParams = CarrierParams(),
                      sample_rate: float = DEFAULT_SAMPLE_RATE, target_id: int = 0) -> FilterBank:
    """Filters on a uniform clock grid spanning ``clock_hint * (1 +/- drift)``
    times ``n_phases`` phases ``k * pi / n_phases``.  A zero drift collapses
    the grid to the hint."""
    if n_phases < 1:
        raise ValueError("n_phases must be >= 1")
    filters = []
    for f in clock_grid(clock_hint, drift_ppm, n_clock_points):
        for k in range(n_phases):
            filters.append(synthesize_matched_filter(code, float(f), k * math.pi / n_phases,
                                                     carrier, sample_rate, k))
    return FilterBank(target_id, filters, mode, sample_rate)


@dataclass(frozen=True, eq=False)
class LowRankKernel:
    """``B = sum_r p_r g_r^T`` truncated where singular values fall below
    ``rank_tol`` times the largest."""

    p: np.ndarray = field(repr=False)
    g: np.ndarray = field(repr=False)
    rank_tol: float
    singular_values: np.ndarray = field(repr=False)

    @property
    def rank(self) -> int:
        return int(self.p.shape[0])

    @property
    def length(self) -> int:
        return int(self.p.shape[1])

    @classmethod
    def from_bank(cls, bank: FilterBank, rank_tol: float = 1e-6) -> "LowRankKernel":
        iref, qref = bank.matrices()
        q1, r1 = np.linalg.qr(iref.T)
        q2, r2 = np.linalg.qr(qref.T)
        u, s, vt = np.linalg.svd(r1 @ r2.T)
        keep = max(1, int(np.sum(s > rank_tol * s[0]))) if s[0] > 0 else 1
        p = (q1 @ (u[:, :keep] * s[:keep])).T
        g = (q2 @ vt[:keep].T).T
        return cls(np.ascontiguousarray(p), np.ascontiguousarray(g), rank_tol, s)


def _fft_size(k: int) -> int:
    n = 1 << int(math.ceil(math.log2(8 * k)))
    return max(n, 1024)


BATCH_BLOCKS = 32


@dataclass
class BlockSeries:
    """A combined-output series stored as its non-zero blocks.

    Blocks of an all-zero input window are omitted, which keeps noise-free
    multi-second captures cheap.  ``sum_sq`` covers the whole series.
    """

    length: int
    starts: list[int] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    sum_sq: float = 0.0

    def append(self, start: int, vals: np.ndarray) -> None:
        self.starts.append(start)
        self.values.append(vals)
        self.sum_sq += float(np.dot(vals.astype(np.float64), vals.astype(np.float64)))

    def rms(self) -> float:
        return math.sqrt(self.sum_sq / self.length) if self.length else 0.0

    def dense(self) -> np.ndarray:
        out = np.zeros(self.length)
        for s, v in zip(self.starts, self.values):
            out[s : s + v.size] = v
        return out

    def peak(self) -> tuple[int, float]:
        best_i, best_v = -1, -math.inf
        for s, v in zip(self.starts, self.values):
            j = int(np.argmax(v))
            if v[j] > best_v:
                best_i, best_v = s + j, float(v[j])
        if best_i < 0 and self.length:
            return 0, 0.0
        return best_i, best_v

    def above(self, threshold: float) -> tuple[np.ndarray, np.ndarray]:
        idx, val = [], []
        for s, v in zip(self.starts, self.values):
            j = np.flatnonzero(v >= threshold)
            if j.size:
                idx.append(j + s)
                val.append(v[j].astype(np.float64))
        if not idx:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        return np.concatenate(idx), np.concatenate(val)

    @classmethod
    def from_array(cls, series: np.ndarray) -> "BlockSeries":
        series = np.asarray(series, dtype=np.float64)
        out = cls(series.size)
        if series.size:
            out.append(0, series)
        return out


def _as_samples(y: IqStream | np.ndarray) -> np.ndarray:
    x = y.samples if isinstance(y, IqStream) else np.asarray(y)
    return np.ascontiguousarray(x, dtype=np.complex64)


def _live_blocks(x: np.ndarray, n_blocks: int, hop: int, nfft: int) -> np.ndarray:
    """Indices of blocks whose ``nfft``-sample input window has a non-zero sample."""
    words = x.view(np.uint64)
    n_chunks = -(-words.size // hop)
    chunk_live = np.zeros(n_chunks + nfft // hop + 2, dtype=bool)
    step = max(1, (1 << 22) // hop)
    for c0 in range(0, n_chunks, step):
        c1 = min(n_chunks, c0 + step)
        seg = words[c0 * hop : c1 * hop]
        full = (c1 - c0) * hop == seg.size
        if full:
            chunk_live[c0:c1] = seg.reshape(c1 - c0, hop).any(axis=1)
        else:
            for c in range(c0, c1):
                chunk_live[c] = words[c * hop : (c + 1) * hop].any()
    span = -(-nfft // hop)
    live = np.zeros(n_blocks, dtype=bool)
    for d in range(span):
        live |= chunk_live[d : d + n_blocks]
    return np.flatnonzero(live)


def combined_blocks(y: IqStream | np.ndarray, bank: FilterBank, rank_tol: float = 1e-6,
                    nfft: int | None = None) -> BlockSeries:
    """Bank output for every lag, through the factorized kernel.

    Overlap-save in single precision, a batch of FFT blocks at a time.  Blocks
    whose input window is entirely zero are skipped (their output is zero).
    """
    x = _as_samples(y)
    kern = bank.kernel(rank_tol)
    k = kern.length
    if x.size < k:
        raise ValueError(f"capture of {x.size} samples is shorter than the {k}-sample packet")
    nfft = nfft or _fft_size(k)
    if nfft < k:
        raise ValueError("nfft must be at least the filter length")
    hop = nfft - k + 1
    n_valid = x.size - k + 1
    n_blocks = -(-n_valid // hop)
    # correlation with h is convolution with h reversed
    fp = sfft.rfft(kern.p[:, ::-1].astype(np.float32), nfft, axis=1)
    fg = sfft.rfft(kern.g[:, ::-1].astype(np.float32), nfft, axis=1)
    live = _live_blocks(x, n_blocks, hop, nfft)
    out = BlockSeries(n_valid)
    buf_re = np.zeros((BATCH_BLOCKS, nfft), dtype=np.float32)
    buf_im = np.zeros((BATCH_BLOCKS, nfft), dtype=np.float32)
    for b0 in range(0, live.size, BATCH_BLOCKS):
        rows = live[b0 : b0 + BATCH_BLOCKS]
        nb = rows.size
        for j, blk in enumerate(rows):
            seg = x[blk * hop : blk * hop + nfft]
            buf_re[j, : seg.size] = seg.real
            buf_im[j, : seg.size] = seg.imag
            buf_re[j, seg.size :] = 0.0
            buf_im[j, seg.size :] = 0.0
        fi = sfft.rfft(buf_re[:nb], nfft, axis=1)
        fq = sfft.rfft(buf_im[:nb], nfft, axis=1)
        acc = np.zeros((nb, hop), dtype=np.float32)
        for r in range(kern.rank):
            ci = sfft.irfft(fi * fp[r], nfft, axis=1)[:, k - 1 :]
            cq = sfft.irfft(fq * fg[r], nfft, axis=1)[:, k - 1 :]
            acc += ci * cq
        for j, blk in enumerate(rows):
            s = int(blk) * hop
            out.append(s, acc[j, : min(hop, n_valid - s)])
    return out


def combined_direct(y: IqStream | np.ndarray, bank: FilterBank) -> np.ndarray:
    """Per-filter reference implementation (one correlation pair per filter)."""
    x = _as_samples(y).astype(np.complex128)
    k = bank.length
    if x.size < k:
        raise ValueError(f"capture of {x.size} samples is shorter than the {k}-sample packet")
    n = x.size - k + 1
    iref, qref = bank.matrices()
    total = np.zeros(n)
    for i_ref, q_ref in zip(iref, qref):
        ci = np.correlate(x.real, i_ref, mode="valid")[:n]
        cq = np.correlate(x.imag, q_ref, mode="valid")[:n]
        total += ci * cq
    return total


def combined_output(y: IqStream | np.ndarray, bank: FilterBank, method: str = "lowrank",
                    rank_tol: float = 1e-6) -> np.ndarray:
    """Summed I x Q matched-filter products, one value per lag
    (``len(y) - bank.length + 1`` values)."""
    if method == "direct":
        return combined_direct(y, bank)
    if method != "lowrank":
        raise ValueError(f"unknown method {method!r}")
    return combined_blocks(y, bank, rank_tol).dense()


def per_filter_scores(y: IqStream | np.ndarray, bank: FilterBank, lags: Sequence[int]) -> np.ndarray:
    """``(len(lags), F)`` individual filter products at the given lags."""
    x = _as_samples(y)
    lags = np.asarray(lags, dtype=np.int64)
    k = bank.length
    if lags.size == 0:
        return np.zeros((0, len(bank)))
    if lags.min() < 0 or lags.max() > x.size - k:
        raise ValueError("lag outside the capture")
    iref, qref = bank.matrices()
    wi = sliding_window_view(x.real, k)[lags].astype(np.float64)
    wq = sliding_window_view(x.imag, k)[lags].astype(np.float64)
    return (wi @ iref.T) * (wq @ qref.T)


def scores_at(y: IqStream | np.ndarray, bank: FilterBank, lags: np.ndarray,
              rank_tol: float = 1e-6) -> np.ndarray:
    """Bank output at selected lags only (lags must be valid)."""
    x = _as_samples(y)
    kern = bank.kernel(rank_tol)
    lags = np.asarray(lags, dtype=np.int64)
    if lags.size == 0:
        return np.zeros(0)
    wi = sliding_window_view(x.real, kern.length)[lags].astype(np.float64)
    wq = sliding_window_view(x.imag, kern.length)[lags].astype(np.float64)
    return np.einsum("nr,nr->n", wi @ kern.p.T, wq @ kern.g.T)


@dataclass(eq=False)
class DemodReport:
    node_id: int
    detected: EventTrain
    scores: np.ndarray
    times_s: np.ndarray
    filter_index: np.ndarray
    threshold: float
    f_clk_hz: float | None = None
    tau_s: float | None = None
    mode: str = CONTINUOUS

    def __post_init__(self) -> None:
        if np.any(self.scores < self.threshold):
            raise ValueError("every detection must reach the threshold")

    @property
    def count(self) -> int:
        return self.detected.count

    def records(self) -> list[dict]:
        return [
            {"node_id": int(self.node_id), "bin_index": int(b), "time_s": float(t),
             "score": float(s), "filter_index": int(fi)}
            for b, t, s, fi in zip(self.detected.bins, self.times_s, self.scores, self.filter_index)
        ]

    def to_ndjson(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    @classmethod
    def empty(cls, node_id: int, duration_s: float, bin_size_s: float = DEFAULT_BIN_S,
              threshold: float = 0.0, mode: str = CONTINUOUS) -> "DemodReport":
        z = np.zeros(0)
        return cls(node_id, EventTrain.empty(duration_s, bin_size_s), z, z, np.zeros(0, dtype=np.int64),
                   threshold, None, None, mode)


def write_ndjson(reports: Sequence[DemodReport], path: str | Path) -> None:
    ordered = sorted(reports, key=lambda r: r.node_id)
    Path(path).write_text("".join(r.to_ndjson() for r in ordered))


def read_ndjson(path: str | Path) -> list[dict]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{n}: {exc}") from exc
    return out


def non_max_suppress(idx: np.ndarray, val: np.ndarray, separation: int) -> np.ndarray:
    """Greedy peak picking: repeatedly keep the highest remaining candidate
    and drop every candidate closer than ``separation`` samples to it.
    Returns kept positions into ``idx`` in increasing-lag order."""
    order = np.lexsort((idx, -val))
    kept_lags: list[int] = []
    kept: list[int] = []
    for j in order:
        lag = int(idx[j])
        p = bisect.bisect_left(kept_lags, lag)
        if p < len(kept_lags) and kept_lags[p] - lag < separation:
            continue
        if p > 0 and lag - kept_lags[p - 1] < separation:
            continue
        kept_lags.insert(p, lag)
        kept.append(int(j))
    kept_arr = np.array(kept, dtype=np.int64)
    return kept_arr[np.argsort(idx[kept_arr], kind="stable")] if kept_arr.size else kept_arr


def _bin_detections(lags: np.ndarray, scores: np.ndarray, sample_rate: float,
                    duration_s: float, bin_size_s: float) -> tuple[EventTrain, np.ndarray, np.ndarray, np.ndarray]:
    """Collapse detections onto the bin grid keeping the best score per bin."""
    times = lags / sample_rate
    n_bins = int(round(duration_s / bin_size_s))
    bins = np.floor(times / bin_size_s + 1e-9).astype(np.int64)
    ok = (bins >= 0) & (bins < n_bins)
    bins, times, scores, lags = bins[ok], times[ok], scores[ok], lags[ok]
    order = np.lexsort((-scores, bins))
    bins, times, scores, lags = bins[order], times[order], scores[order], lags[order]
    first = np.ones(bins.size, dtype=bool)
    first[1:] = bins[1:] != bins[:-1]
    return (EventTrain(bins[first], duration_s, bin_size_s), scores[first], times[first], lags[first])


def detect_events(series: np.ndarray | BlockSeries, threshold_k: float = 5.0, *,
                  separation: int, sample_rate: float = DEFAULT_SAMPLE_RATE,
                  duration_s: float | None = None, bin_size_s: float = DEFAULT_BIN_S,
                  rms: float | None = None, node_id: int = 0) -> tuple[DemodReport, np.ndarray]:
    """Continuous-mode detection.

    Threshold is ``threshold_k * rms`` (RMS of the series unless given).
    Candidates at or above it are thinned by :func:`non_max_suppress` with
    ``separation`` samples and binned.  Returns the report (``filter_index``
    left at -1) and the kept lags.
    """
    if not isinstance(series, BlockSeries):
        series = BlockSeries.from_array(series)
    if duration_s is None:
        duration_s = series.length / sample_rate
    level = series.rms() if rms is None else rms
    threshold = threshold_k * level
    if series.length == 0 or level <= 0:
        return DemodReport.empty(node_id, duration_s, bin_size_s, threshold), np.zeros(0, dtype=np.int64)
    idx, val = series.above(threshold)
    keep = non_max_suppress(idx, val, separation)
    train, scores, times, lags = _bin_detections(idx[keep], val[keep], sample_rate, duration_s, bin_size_s)
    report = DemodReport(node_id, train, scores, times, np.full(train.count, -1, dtype=np.int64), threshold)
    return report, lags


def slot_lags(tau_s: float, n_samples: int, k: int, sample_rate: float,
              bin_size_s: float = DEFAULT_BIN_S) -> np.ndarray:
    """Predicted packet-start lag of every bin (those that fit the capture)."""
    n_bins = int(math.ceil(n_samples / (bin_size_s * sample_rate)))
    lags = np.rint((np.arange(n_bins) * bin_size_s + tau_s) * sample_rate).astype(np.int64)
    return lags[(lags >= 0) & (lags <= n_samples - k)]


def detect_discrete(y: IqStream | np.ndarray, bank: FilterBank, tau_s: float, threshold: float, *,
                    sample_rate: float = DEFAULT_SAMPLE_RATE, duration_s: float | None = None,
                    bin_size_s: float = DEFAULT_BIN_S, slot_tolerance: int = 2,
                    rank_tol: float = 1e-6, node_id: int = 0) -> tuple[DemodReport, np.ndarray]:
    """Discrete-timing detection: score only the predicted slot of each bin
    (plus ``slot_tolerance`` samples either side)."""
    x = _as_samples(y)
    k = bank.length
    if duration_s is None:
        duration_s = x.size / sample_rate
    slots = slot_lags(tau_s, x.size, k, sample_rate, bin_size_s)
    offsets = np.arange(-slot_tolerance, slot_tolerance + 1)
    cand = slots[:, None] + offsets[None, :]
    valid = (cand >= 0) & (cand <= x.size - k)
    flat = np.where(valid, cand, 0).ravel()
    vals = scores_at(x, bank, flat, rank_tol).reshape(cand.shape)
    vals = np.where(valid, vals, -np.inf)
    best = np.argmax(vals, axis=1)
    rows = np.arange(slots.size)
    score = vals[rows, best]
    lag = cand[rows, best]
    hit = score >= threshold
    train, scores, times, lags = _bin_detections(lag[hit], score[hit], sample_rate, duration_s, bin_size_s)
    report = DemodReport(node_id, train, scores, times, np.full(train.count, -1, dtype=np.int64),
                         threshold, mode=DISCRETE)
    return report, lags


def recover_slot(y: IqStream | np.ndarray, bank: FilterBank, threshold_k: float = 5.0, *,
                 sample_rate: float = DEFAULT_SAMPLE_RATE, bin_size_s: float = DEFAULT_BIN_S,
                 rank_tol: float = 1e-6, series: BlockSeries | None = None) -> float | None:
    """Packet-start offset inside the bin grid, in seconds.

    Detects packets in continuous mode and returns the score-weighted circular
    mode of their lags modulo the bin length; ``None`` if nothing is detected.
    A precomputed combined ``series`` of ``y`` may be passed in.
    """
    if series is None:
        series = combined_blocks(y, bank, rank_tol)
    report, lags = detect_events(series, threshold_k, separation=bank.length, sample_rate=sample_rate,
                                 bin_size_s=bin_size_s)
    if lags.size == 0:
        return None
    period = bin_size_s * sample_rate
    phase = np.mod(lags.astype(np.float64), period)
    scores = report.scores
    # pick the detection whose +/-2-sample neighbourhood holds most score
    d = np.abs(phase[:, None] - phase[None, :])
    d = np.minimum(d, period - d)
    support = (d <= 2.0) @ scores
    centre = phase[int(np.argmax(support))]
    near = np.minimum(np.abs(phase - centre), period - np.abs(phase - centre)) <= 2.0
    diff = (phase[near] - centre + period / 2) % period - period / 2
    est = (centre + np.average(diff, weights=scores[near])) % period
    est = float(np.rint(est))
    if est >= period - 0.5:
        est = 0.0
    return est / sample_rate


@dataclass(frozen=True)
class ClockEstimate:
    f_clk_hz: float | None
    peak: float
    rms: float
    candidates: np.ndarray = field(repr=False)
    peaks: np.ndarray = field(repr=False)


def recover_clock(y: IqStream | np.ndarray, code: SpreadingCode, f_range: tuple[float, float] = (27e6, 33e6),
                  step: float = 50e3, presence_k: float = 12.0, n_phases: int = 3,
                  carrier: CarrierParams = CarrierParams(), sample_rate: float = DEFAULT_SAMPLE_RATE,
                  rank_tol: float = 1e-6) -> ClockEstimate:
    """Coarse clock search: one ``n_phases`` bank per grid frequency; the
    frequency with the largest peak wins if that peak is at least
    ``presence_k`` times its series RMS."""
    lo, hi = f_range
    if not 0 < lo <= hi:
        raise ValueError("need 0 < f_lo <= f_hi")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    cands = lo + step * np.arange(n)
    x = _as_samples(y)
    peaks = np.zeros(n)
    rmss = np.zeros(n)
    for j, f in enumerate(cands):
        bank = build_filter_bank(code, float(f), 0.0, 1, n_phases, CONTINUOUS, carrier, sample_rate)
        if x.size < bank.length:
            continue
        s = combined_blocks(x, bank, rank_tol)
        peaks[j] = s.peak()[1]
        rmss[j] = s.rms()
    best = int(np.argmax(peaks))
    present = rmss[best] > 0 and peaks[best] >= presence_k * rmss[best]
    return ClockEstimate(float(cands[best]) if present else None, float(peaks[best]), float(rmss[best]),
                         cands, peaks)


@dataclass(frozen=True)
class ReceiverConfig:
    threshold_k: float = 30.0
    mode: str = CONTINUOUS
    drift_ppm: float = 1005.0
    n_clock_points: int = 31
    n_phases: int = 3
    clock_search: tuple[float, float, float] = (27e6, 33e6, 50e3)
    presence_k: float = 12.0
    clip_s: float = 0.05
    slot_tolerance: int = 2
    rank_tol: float = 1e-2

    def __post_init__(self) -> None:
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.threshold_k <= 0:
            raise ValueError("threshold_k must be positive")

    def to_dict(self) -> dict:
        return {"threshold_k": self.threshold_k, "mode": self.mode, "drift_ppm": self.drift_ppm,
                "n_clock_points": self.n_clock_points, "n_phases": self.n_phases,
                "clock_search": list(self.clock_search), "presence_k": self.presence_k,
                "clip_s": self.clip_s, "slot_tolerance": self.slot_tolerance, "rank_tol": self.rank_tol}

    @classmethod
    def from_dict(cls, d: dict) -> "ReceiverConfig":
        d = dict(d)
        if "clock_search" in d:
            d["clock_search"] = tuple(float(v) for v in d["clock_search"])
        return cls(**d)


def attach_filter_index(report: DemodReport, lags: np.ndarray, y, bank: FilterBank) -> DemodReport:
    if lags.size:
        report.filter_index = np.argmax(per_filter_scores(y, bank, lags), axis=1).astype(np.int64)
    return report


def demodulate(y: IqStream, code: SpreadingCode, config: ReceiverConfig = ReceiverConfig(), *,
               node_id: int = 0, clock_hint: float | None = None, slot_hint: float | None = None,
               carrier: CarrierParams = CarrierParams(), bin_size_s: float = DEFAULT_BIN_S) -> DemodReport:
    """Full receive chain for one target.

    Without ``clock_hint`` the clock is searched on the first ``clip_s`` of
    the capture; an absent target yields an empty report.  Discrete mode
    takes its threshold from the clip's continuous-output RMS and, without
    ``slot_hint`` (packet offset inside the bin, seconds), recovers the
    slot on the same clip.
    """
    fs = y.sample_rate_hz
    duration = y.duration_s
    x = _as_samples(y)
    clip = x[: max(int(round(config.clip_s * fs)), 1)]
    if clock_hint is None:
        lo, hi, step = config.clock_search
        est = recover_clock(clip, code, (lo, hi), step, config.presence_k, config.n_phases, carrier, fs,
                            config.rank_tol)
        if est.f_clk_hz is None:
            return DemodReport.empty(node_id, duration, bin_size_s, mode=config.mode)
        clock_hint = est.f_clk_hz
    bank = build_filter_bank(code, clock_hint, config.drift_ppm, config.n_clock_points, config.n_phases,
                             config.mode, carrier, fs, node_id)
    if x.size < bank.length:
        return DemodReport.empty(node_id, duration, bin_size_s, mode=config.mode)
    if config.mode == CONTINUOUS:
        series = combined_blocks(x, bank, config.rank_tol)
        report, lags = detect_events(series, config.threshold_k, separation=bank.length, sample_rate=fs,
                                     duration_s=duration, bin_size_s=bin_size_s, node_id=node_id)
        report.f_clk_hz = float(clock_hint)
    else:
        if clip.size < bank.length:
            return DemodReport.empty(node_id, duration, bin_size_s, mode=config.mode)
        clip_series = combined_blocks(clip, bank, config.rank_tol)
        tau = slot_hint
        if tau is None:
            tau = recover_slot(clip, bank, config.threshold_k, sample_rate=fs, bin_size_s=bin_size_s,
                               rank_tol=config.rank_tol, series=clip_series)
        if tau is None:
            return DemodReport.empty(node_id, duration, bin_size_s, mode=config.mode)
        threshold = config.threshold_k * clip_series.rms()
        report, lags = detect_discrete(x, bank, tau, threshold, sample_rate=fs, duration_s=duration,
                                       bin_size_s=bin_size_s, slot_tolerance=config.slot_tolerance,
                                       rank_tol=config.rank_tol, node_id=node_id)
        report.f_clk_hz = float(clock_hint)
        report.tau_s = tau
    return attach_filter_index(report, lags, x, bank)
