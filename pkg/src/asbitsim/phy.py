"""Backscatter waveform synthesis, clock models, superposition and link budget.

Signal levels are in sqrt(W): a complex sample of magnitude ``a`` carries
``a**2`` W, so dBm figures convert with :func:`dbm_to_watts`.

The receive chain downconverts the backscatter sideband at ``f_tx + f_dc`` and
low-pass filters it to the ADC band.  What survives of the node's clock square
wave is its fundamental, so a packet sampled at the ADC is

    y[v] = A' * S(t_v) * exp(j * (2*pi*(f_clk - f_dc)*t_v - phi'))

with ``S`` the NRZ chip waveform at ``f_clk / 3`` symbols per second.
:func:`synthesize_packet_iq` computes this directly; ``method="rf"`` runs the
oversampled encode/mix/filter/decimate chain instead and is kept as a check.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

import numpy as np
from scipy import signal

from .codes import SpreadingCode
from .events import EventTrain

SPEED_OF_LIGHT = 299_792_458.0
CLOCKS_PER_SYMBOL = 3
DEFAULT_SAMPLE_RATE = 30e6
# encode needs at least this many samples per clock period
MIN_SAMPLES_PER_CLOCK = 4


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(watts: float) -> float:
    return 10.0 * math.log10(watts) + 30.0


def amplitude_for_rssi(rssi_dbm: float) -> float:
    """Baseband amplitude whose power equals ``rssi_dbm``."""
    return math.sqrt(dbm_to_watts(rssi_dbm))


def rssi_chain(p_tx_dbm: float, eta_db: float, eta_c_plus_c_db: float) -> float:
    """Received backscatter strength: the downlink and uplink both pay the
    wireless efficiency ``eta``; conversion efficiency and the extra uplink
    path loss enter once."""
    return p_tx_dbm + 2.0 * eta_db + eta_c_plus_c_db


def snr_of(rssi_dbm: float, noise_floor_dbm: float) -> float:
    return rssi_dbm - noise_floor_dbm


@dataclass(frozen=True)
class CarrierParams:
    f_tx: float = 915e6
    a_tx: float = 1.0
    f_dc: float = 30e6

    def __post_init__(self) -> None:
        if not self.f_tx > self.f_dc > 0:
            raise ValueError(f"need f_tx > f_dc > 0, got f_tx={self.f_tx}, f_dc={self.f_dc}")

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / self.f_tx


@dataclass(frozen=True)
class FreeOscillator:
    """On-chip relaxation oscillator: a fixed per-chip nominal frequency plus
    a per-packet offset that random-walks inside ``+/- drift_ppm``."""

    nominal_hz: float = 30e6
    drift_ppm: float = 1005.0
    step_ppm: float = 100.0

    def __post_init__(self) -> None:
        if self.nominal_hz <= 0 or self.drift_ppm < 0 or self.step_ppm < 0:
            raise ValueError("nominal_hz must be positive and ppm figures non-negative")

    def nominal(self, carrier: CarrierParams) -> float:
        return self.nominal_hz

    def bounds(self, carrier: CarrierParams) -> tuple[float, float]:
        d = self.drift_ppm * 1e-6
        return self.nominal_hz * (1 - d), self.nominal_hz * (1 + d)


@dataclass(frozen=True)
class Divider:
    """Clock derived from the downlink carrier by integer division."""

    ratio: int = 32

    def __post_init__(self) -> None:
        if int(self.ratio) != self.ratio or self.ratio < 1:
            raise ValueError(f"divider ratio must be a positive integer, got {self.ratio}")

    def nominal(self, carrier: CarrierParams) -> float:
        return carrier.f_tx / self.ratio

    def bounds(self, carrier: CarrierParams) -> tuple[float, float]:
        f = self.nominal(carrier)
        return f, f


ClockModel = Union[FreeOscillator, Divider]


def clock_trajectory(model: ClockModel, carrier: CarrierParams, n_packets: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Instantaneous clock frequency for each of ``n_packets`` packets.

    Oscillator offsets start uniformly inside the drift bound and take
    Gaussian steps of ``step_ppm``, reflected back into the bound.
    """
    if n_packets < 0:
        raise ValueError("n_packets must be non-negative")
    f0 = model.nominal(carrier)
    if isinstance(model, Divider) or model.drift_ppm == 0 or n_packets == 0:
        return np.full(n_packets, f0, dtype=np.float64)
    d = model.drift_ppm
    x = np.empty(n_packets, dtype=np.float64)
    x[0] = rng.uniform(-d, d)
    steps = rng.normal(0.0, model.step_ppm, size=n_packets - 1)
    for k in range(1, n_packets):
        v = x[k - 1] + steps[k - 1]
        # reflect into [-d, d]; a step is never larger than a few bounds
        while v > d or v < -d:
            v = 2 * d - v if v > d else -2 * d - v
        x[k] = v
    return f0 * (1.0 + x * 1e-6)


@dataclass(frozen=True)
class NodeProfile:
    node_id: int
    code: SpreadingCode
    clock: ClockModel
    a_bck: float = 1.0
    distance_m: float = 0.0
    tau_s: float = 0.0
    composite_gain: float = 1.0
    phase_adc: float = 0.0

    def __post_init__(self) -> None:
        if self.a_bck <= 0:
            raise ValueError("a_bck must be positive")
        if self.tau_s < 0:
            raise ValueError("tau_s must be non-negative")

    @property
    def amplitude(self) -> float:
        """A' = alpha' * G * A_bck, folded into one gain."""
        return self.composite_gain * self.a_bck

    def phase(self, carrier: CarrierParams) -> float:
        """phi' = 2*pi*D/lambda + phi_ADC, wrapped to [0, 2*pi)."""
        return (2 * math.pi * self.distance_m / carrier.wavelength_m + self.phase_adc) % (2 * math.pi)


def packet_samples(n_chips: int, f_clk: float, sample_rate: float) -> int:
    """Samples spanned by an ``n_chips`` packet at clock ``f_clk``."""
    return int(math.ceil(n_chips * CLOCKS_PER_SYMBOL * sample_rate / f_clk - 1e-9))


def packet_duration(n_chips: int, f_clk: float) -> float:
    return n_chips * CLOCKS_PER_SYMBOL / f_clk


def _check_clock(f_clk: float, sample_rate: float) -> None:
    if f_clk <= 0:
        raise ValueError("f_clk must be positive")
    if f_clk * MIN_SAMPLES_PER_CLOCK > sample_rate:
        raise ValueError(f"clock {f_clk:g} Hz undersampled at {sample_rate:g} Sa/s "
                         f"(need >= {MIN_SAMPLES_PER_CLOCK} samples per clock period)")


def bpsk_clock_encode(code: SpreadingCode | np.ndarray, f_clk: float, sample_rate: float) -> np.ndarray:
    """Chips multiplied by the node clock square wave, sampled at ``sample_rate``.

    Each symbol lasts ``3 / f_clk`` and spans three clock periods; the clock is
    ``sign(cos(2*pi*f_clk*t))``, so it is +1 at the start of the packet.
    """
    _check_clock(f_clk, sample_rate)
    chips = code.chips if isinstance(code, SpreadingCode) else np.asarray(code)
    n = packet_samples(chips.size, f_clk, sample_rate)
    k = np.arange(n, dtype=np.float64)
    sym = np.minimum((k * f_clk / (CLOCKS_PER_SYMBOL * sample_rate)).astype(np.int64), chips.size - 1)
    # position inside the clock period, in quarter periods
    quarter = np.floor(4.0 * np.mod(k * f_clk / sample_rate, 1.0)).astype(np.int64)
    clk = np.where((quarter == 1) | (quarter == 2), -1.0, 1.0)
    return chips[sym].astype(np.float64) * clk


def baseband_packet(chips: np.ndarray, f_clk: float, f_dc: float, phase: float,
                    sample_rate: float, amplitude: float = 1.0, n: int | None = None) -> np.ndarray:
    """Complex baseband samples of one packet (complex128)."""
    if n is None:
        n = packet_samples(chips.size, f_clk, sample_rate)
    k = np.arange(n, dtype=np.float64)
    sym = np.minimum((k * f_clk / (CLOCKS_PER_SYMBOL * sample_rate)).astype(np.int64), chips.size - 1)
    rot = np.exp(1j * (2 * math.pi * (f_clk - f_dc) * k / sample_rate - phase))
    return amplitude * chips[sym] * rot


def synthesize_packet_iq(node: NodeProfile, carrier: CarrierParams, phase: float | None = None,
                         sample_rate: float = DEFAULT_SAMPLE_RATE, f_clk: float | None = None,
                         method: str = "baseband", oversample: int = 16) -> np.ndarray:
    """One packet of ``node`` at the ADC rate.

    ``phase`` defaults to the node's phi'; ``f_clk`` to the clock nominal.
    """
    if phase is None:
        phase = node.phase(carrier)
    if f_clk is None:
        f_clk = node.clock.nominal(carrier)
    chips = node.code.chips
    if f_clk <= 0:
        raise ValueError("f_clk must be positive")
    n = packet_samples(chips.size, f_clk, sample_rate)
    if method == "baseband":
        return baseband_packet(chips, f_clk, carrier.f_dc, phase, sample_rate, node.amplitude, n)
    if method != "rf":
        raise ValueError(f"unknown synthesis method {method!r}")
    rf_rate = sample_rate * oversample
    x = bpsk_clock_encode(chips, f_clk, rf_rate)
    t = np.arange(x.size) / rf_rate
    mixed = x * np.exp(-1j * (2 * math.pi * carrier.f_dc * t + phase))
    taps = signal.firwin(16 * oversample + 1, 0.5 * sample_rate, fs=rf_rate)
    filtered = np.convolve(mixed, taps, mode="same")
    out = np.zeros(n, dtype=np.complex128)
    dec = filtered[::oversample][:n]
    out[: dec.size] = dec
    # the retained sideband of a unit square wave has amplitude 2/pi
    return out * (math.pi / 2) * node.amplitude


def residual_frequency(iq: np.ndarray, sample_rate: float) -> float:
    """Residual clock frequency of a BPSK packet.

    Squaring strips the +/-1 chips and leaves a tone at twice the residual;
    the returned value is half that tone's frequency, signed.
    """
    z = np.asarray(iq, dtype=np.complex128) ** 2
    n = 1 << int(math.ceil(math.log2(max(z.size, 2)))) + 2
    spec = np.abs(np.fft.fft(z, n))
    spec[0] = 0.0
    freqs = np.fft.fftfreq(n, 1.0 / sample_rate)
    return float(freqs[int(np.argmax(spec))] / 2.0)


@dataclass
class PlacedStream:
    """The packets one node puts on air: start time, clock and gain per packet.

    Waveforms are synthesized on demand; iterating yields ``(start_s, iq)``.
    """

    node: NodeProfile
    carrier: CarrierParams
    sample_rate: float
    start_s: np.ndarray
    f_clk: np.ndarray
    phase: float
    bins: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    code_override: SpreadingCode | None = None

    def __len__(self) -> int:
        return int(self.start_s.size)

    @property
    def code(self) -> SpreadingCode:
        return self.code_override if self.code_override is not None else self.node.code

    def waveform(self, i: int) -> np.ndarray:
        return baseband_packet(self.code.chips, float(self.f_clk[i]), self.carrier.f_dc, self.phase,
                               self.sample_rate, self.node.amplitude)

    def __iter__(self) -> Iterator[tuple[float, np.ndarray]]:
        for i in range(len(self)):
            yield float(self.start_s[i]), self.waveform(i)

    def energy(self) -> float:
        return float(sum(np.sum(np.abs(w) ** 2) for _, w in self))


def render_node_stream(node: NodeProfile, events: EventTrain, carrier: CarrierParams,
                       rng: np.random.Generator, sample_rate: float = DEFAULT_SAMPLE_RATE,
                       f_clk: np.ndarray | None = None) -> PlacedStream:
    """Place one packet at ``bin_start + tau`` for every event bin.

    ``f_clk`` overrides the per-packet clock trajectory (it is drawn from
    ``rng`` otherwise).
    """
    n = events.count
    if f_clk is None:
        f_clk = clock_trajectory(node.clock, carrier, n, rng)
    f_clk = np.asarray(f_clk, dtype=np.float64)
    if f_clk.shape != (n,):
        raise ValueError("need one clock frequency per event")
    if n:
        slowest = packet_duration(node.code.length, float(f_clk.min()))
        if slowest > events.bin_size_s:
            raise ValueError(f"packet of {slowest * 1e6:.1f} us does not fit a "
                             f"{events.bin_size_s * 1e3:g} ms bin")
        if node.tau_s + slowest > events.bin_size_s + 1e-12:
            raise ValueError(f"tau {node.tau_s} s pushes the packet past its bin")
    starts = events.times() + node.tau_s
    return PlacedStream(node, carrier, sample_rate, starts, f_clk, node.phase(carrier),
                        events.bins.copy())


@dataclass(eq=False)
class IqStream:
    samples: np.ndarray = field(repr=False)
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE
    quant_bits: int | None = None
    noise_floor_dbm: float | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.complex64)

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def clip(self, start_s: float, stop_s: float) -> "IqStream":
        a = max(0, int(round(start_s * self.sample_rate_hz)))
        b = min(self.samples.size, int(round(stop_s * self.sample_rate_hz)))
        return IqStream(self.samples[a:b], self.sample_rate_hz, self.quant_bits, self.noise_floor_dbm, self.seed)

    def mean_power_dbm(self) -> float:
        p = float(np.mean(np.abs(self.samples.astype(np.complex128)) ** 2))
        return watts_to_dbm(p) if p > 0 else -math.inf

    def metadata(self) -> dict:
        return {
            "sample_rate_hz": self.sample_rate_hz,
            "duration_s": self.duration_s,
            "n_samples": int(self.samples.size),
            "noise_floor_dbm": self.noise_floor_dbm,
            "quant_bits": self.quant_bits,
            "seed": self.seed,
            "format": "interleaved little-endian float32 I,Q",
        }

    def save(self, path: str | Path) -> tuple[Path, Path]:
        """Write ``<path>.bin`` samples and ``<path>.json`` sidecar."""
        path = Path(path)
        bin_path, json_path = path.with_suffix(".bin"), path.with_suffix(".json")
        bin_path.parent.mkdir(parents=True, exist_ok=True)
        self.samples.astype("<c8").tofile(bin_path)
        json_path.write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")
        return bin_path, json_path

    @classmethod
    def load(cls, path: str | Path) -> "IqStream":
        path = Path(path)
        bin_path, json_path = path.with_suffix(".bin"), path.with_suffix(".json")
        try:
            meta = json.loads(json_path.read_text())
            rate = float(meta["sample_rate_hz"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"bad IQ sidecar {json_path}: {exc}") from exc
        samples = np.fromfile(bin_path, dtype="<c8")
        if "n_samples" in meta and int(meta["n_samples"]) != samples.size:
            raise ValueError(f"{bin_path} holds {samples.size} samples, sidecar says {meta['n_samples']}")
        return cls(samples, rate, meta.get("quant_bits"), meta.get("noise_floor_dbm"), meta.get("seed"))


def superpose(streams: Iterable[PlacedStream], noise_floor_dbm: float | None, duration_s: float,
              sample_rate: float = DEFAULT_SAMPLE_RATE, seed: int | Sequence[int] | None = None,
              noise_scale: float = 1.0) -> IqStream:
    """Sum node streams into one IQ capture and add complex AWGN.

    Packets are added in (start sample, node id, packet index) order so the
    sum is bit-reproducible.  ``noise_floor_dbm=None`` disables noise.  Packet
    tails beyond ``duration_s`` wrap to the start of the capture.
    """
    n_total = int(round(duration_s * sample_rate))
    out = np.zeros(n_total, dtype=np.complex64)
    order = []
    streams = list(streams)
    for s_idx, st in enumerate(streams):
        if st.sample_rate != sample_rate:
            raise ValueError("all streams must share the sample rate")
        starts = np.rint(st.start_s * sample_rate).astype(np.int64)
        for i, s0 in enumerate(starts):
            order.append((int(s0), st.node.node_id, s_idx, i))
    order.sort()
    for s0, _, s_idx, i in order:
        w = streams[s_idx].waveform(i).astype(np.complex64)
        s0 %= n_total if n_total else 1
        end = s0 + w.size
        if end <= n_total:
            out[s0:end] += w
        else:
            head = n_total - s0
            out[s0:] += w[:head]
            out[: w.size - head] += w[head:]
    if noise_floor_dbm is not None and n_total:
        add_awgn(out, noise_floor_dbm, seed, noise_scale)
    return IqStream(out, sample_rate, None, noise_floor_dbm,
                    seed if seed is None or isinstance(seed, int) else list(seed))


NOISE_CHUNK = 1 << 22


def add_awgn(samples: np.ndarray, noise_floor_dbm: float, seed, scale: float = 1.0) -> None:
    """Add complex white Gaussian noise of total power ``noise_floor_dbm``
    in place, drawn in fixed-size chunks from one generator."""
    rng = np.random.default_rng(seed)
    sigma = np.float32(scale * math.sqrt(dbm_to_watts(noise_floor_dbm) / 2.0))
    for a in range(0, samples.size, NOISE_CHUNK):
        b = min(samples.size, a + NOISE_CHUNK)
        re = rng.standard_normal(b - a, dtype=np.float32)
        im = rng.standard_normal(b - a, dtype=np.float32)
        samples[a:b] += sigma * (re + 1j * im).astype(np.complex64)


def adc_quantize(stream: IqStream, bits: int) -> IqStream:
    """Round I and Q onto ``2**bits`` uniform levels spanning +/- max|sample|.

    The lattice includes both full-scale points, so quantizing an already
    quantized stream at the same depth returns it unchanged.
    """
    if not 4 <= bits <= 16:
        raise ValueError(f"bits must be in [4, 16], got {bits}")
    x = stream.samples
    if x.size == 0:
        return IqStream(x.copy(), stream.sample_rate_hz, bits, stream.noise_floor_dbm, stream.seed)
    fs = float(max(np.abs(x.real).max(), np.abs(x.imag).max()))
    if fs == 0.0:
        return IqStream(x.copy(), stream.sample_rate_hz, bits, stream.noise_floor_dbm, stream.seed)
    levels = (1 << bits) - 1

    def q(v: np.ndarray) -> np.ndarray:
        k = np.rint((v.astype(np.float64) + fs) * levels / (2.0 * fs))
        return (k * (2.0 * fs) / levels - fs).astype(np.float32)

    out = (q(x.real) + 1j * q(x.imag)).astype(np.complex64)
    return IqStream(out, stream.sample_rate_hz, bits, stream.noise_floor_dbm, stream.seed)


def quantizer_step(stream: IqStream) -> float:
    fs = float(max(np.abs(stream.samples.real).max(), np.abs(stream.samples.imag).max()))
    if stream.quant_bits is None:
        raise ValueError("stream is not quantized")
    return 2.0 * fs / ((1 << stream.quant_bits) - 1)
