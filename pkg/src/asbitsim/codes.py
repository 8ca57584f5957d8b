"""Maximal-length and Gold spreading sequences.

Bits follow the usual BPSK mapping 0 -> +1, 1 -> -1.  The LFSR convention is
the Fibonacci recurrence ``s[n] = XOR_{t in taps} s[n - t]`` with the initial
state loaded LSB-first into ``s[0..m-1]``.

A Gold family of degree ``m`` has ``2**m + 1`` members.  Seeds ``0 .. 2**m - 2``
select a cyclic shift of the second register; seed ``2**m - 1`` is the bare
first ML sequence and seed ``2**m`` the bare second one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class LfsrSpec:
    degree: int
    taps: tuple[int, ...]
    state0: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "taps", tuple(sorted(set(int(t) for t in self.taps))))
        if self.degree < 3:
            raise ValueError(f"LFSR degree must be >= 3, got {self.degree}")
        if not self.taps or max(self.taps) != self.degree or min(self.taps) < 1:
            raise ValueError(f"taps {self.taps} must lie in 1..{self.degree} and include {self.degree}")
        if not 0 <= self.state0 < (1 << self.degree):
            raise ValueError(f"state0 {self.state0} does not fit in {self.degree} bits")

    @property
    def period(self) -> int:
        return (1 << self.degree) - 1


@lru_cache(maxsize=64)
def _ml_bits(degree: int, taps: tuple[int, ...], state0: int) -> np.ndarray:
    if state0 == 0:
        raise ValueError("all-zero initial state is absorbing")
    n = (1 << degree) - 1
    bits = bytearray(n)
    for i in range(degree):
        bits[i] = (state0 >> i) & 1
    for k in range(degree, n):
        b = 0
        for t in taps:
            b ^= bits[k - t]
        bits[k] = b
    out = np.frombuffer(bytes(bits), dtype=np.uint8).copy()
    # a primitive recurrence returns to its initial state after exactly n steps
    # and never earlier; checking the first-return time is the primitivity test
    state = [int(b) for b in out[:degree]]
    reg = list(state)
    for step in range(1, n + 1):
        b = 0
        for t in taps:
            b ^= reg[degree - t]
        reg = reg[1:] + [b]
        if reg == state and step < n:
            raise ValueError(f"taps {taps} are not primitive: period {step} < {n}")
    if reg != state:
        raise ValueError(f"taps {taps} are not primitive for degree {degree}")
    out.setflags(write=False)
    return out


def ml_bits(spec: LfsrSpec) -> np.ndarray:
    """One period of the ML sequence as 0/1 bits (read-only array)."""
    return _ml_bits(spec.degree, spec.taps, spec.state0)


def ml_sequence(spec: LfsrSpec) -> np.ndarray:
    """One period (``2**m - 1`` chips) of the ML sequence as int8 +/-1 chips.

    Raises ``ValueError`` for a zero initial state or non-primitive taps.
    """
    return (1 - 2 * ml_bits(spec).astype(np.int8)).astype(np.int8)


def preferred_values(degree: int) -> set[int] | None:
    """The three cross-correlation values of a preferred pair, or None if
    no preferred pair exists (``degree % 4 == 0``)."""
    if degree % 4 == 0:
        return None
    t = 1 + 2 ** ((degree + 2) // 2)
    return {-1, -t, t - 2}


def cyclic_cross_correlation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All lags of ``sum_i a[i] * b[(i + lag) % L]`` as exact integers."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    fa = np.fft.rfft(a.astype(np.float64))
    fb = np.fft.rfft(b.astype(np.float64))
    return np.rint(np.fft.irfft(np.conj(fa) * fb, n=a.size)).astype(np.int64)


def periodic_correlation(a: np.ndarray, b: np.ndarray, lag: int) -> int:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return int(np.dot(a, np.roll(b, -(lag % a.size))))


def verify_preferred_pair(spec1: LfsrSpec, spec2: LfsrSpec) -> tuple[bool, set[int]]:
    """Check the three-valued cross-correlation property at every lag.

    Returns ``(ok, observed_values)``.
    """
    if spec1.degree != spec2.degree:
        raise ValueError(f"degree mismatch: {spec1.degree} vs {spec2.degree}")
    values = set(int(v) for v in np.unique(cyclic_cross_correlation(ml_sequence(spec1), ml_sequence(spec2))))
    allowed = preferred_values(spec1.degree)
    return (allowed is not None and values <= allowed), values


@dataclass(frozen=True)
class GoldFamily:
    first: LfsrSpec
    second: LfsrSpec

    def __post_init__(self) -> None:
        if self.first.degree != self.second.degree:
            raise ValueError("Gold family registers must have equal degree")

    @property
    def degree(self) -> int:
        return self.first.degree

    @property
    def period(self) -> int:
        return self.first.period

    @property
    def family_size(self) -> int:
        return (1 << self.degree) + 1

    @classmethod
    def default(cls, degree: int) -> "GoldFamily":
        try:
            taps1, taps2 = DEFAULT_PAIRS[degree]
        except KeyError:
            raise ValueError(f"no default preferred pair for degree {degree}; "
                             f"available: {sorted(DEFAULT_PAIRS)}") from None
        return cls(LfsrSpec(degree, taps1), LfsrSpec(degree, taps2))

    def descriptor(self) -> dict:
        return {
            "degree": self.degree,
            "taps1": list(self.first.taps),
            "taps2": list(self.second.taps),
            "state1": self.first.state0,
            "state2": self.second.state0,
        }


# Second register of each pair is the first decimated by 3, so every pair is
# preferred for odd m; tests re-verify all of them exhaustively.
DEFAULT_PAIRS: dict[int, tuple[tuple[int, ...], tuple[int, ...]]] = {
    5: ((5, 2), (5, 4, 3, 2)),
    7: ((7, 3), (7, 3, 2, 1)),
    9: ((9, 4), (9, 6, 4, 3)),
    13: ((13, 4, 3, 1), (13, 10, 9, 7, 5, 4)),
}


@dataclass(frozen=True, eq=False)
class SpreadingCode:
    chips: np.ndarray = field(repr=False)
    family: GoldFamily
    seed: int

    def __post_init__(self) -> None:
        chips = np.asarray(self.chips, dtype=np.int8)
        if chips.ndim != 1 or chips.size == 0:
            raise ValueError("chips must be a non-empty 1-D sequence")
        if not np.all(np.abs(chips) == 1):
            raise ValueError("chips must be +1/-1")
        chips = chips.copy()
        chips.setflags(write=False)
        object.__setattr__(self, "chips", chips)

    @property
    def length(self) -> int:
        return int(self.chips.size)

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SpreadingCode):
            return NotImplemented
        return (self.family == other.family and self.seed == other.seed
                and np.array_equal(self.chips, other.chips))

    def __hash__(self) -> int:
        return hash((self.family, self.seed, self.chips.tobytes()))

    def descriptor(self) -> dict:
        return {**self.family.descriptor(), "seed": self.seed, "length": self.length}


@lru_cache(maxsize=16)
def _family_sequences(family: GoldFamily) -> tuple[np.ndarray, np.ndarray]:
    return ml_sequence(family.first), ml_sequence(family.second)


def gold_code(family: GoldFamily, seed: int, length: int | None = None) -> SpreadingCode:
    """Gold code ``seed`` of ``family``, truncated to its first ``length`` chips."""
    period = family.period
    if length is None:
        length = period
    if not 1 <= length <= period:
        raise ValueError(f"length {length} outside 1..{period}")
    if not 0 <= seed <= period + 1:
        raise ValueError(f"seed {seed} outside 0..{period + 1}")
    a, b = _family_sequences(family)
    if seed == period:
        chips = a
    elif seed == period + 1:
        chips = b
    else:
        chips = a * np.roll(b, -seed)
    return SpreadingCode(chips[:length], family, int(seed))


def draw_puf_seed(rng: np.random.Generator, bits: int = 13,
                  previous: int | None = None, repeatability: float = 1.0) -> int:
    """Emulated PUF read-out: a uniformly random ``bits``-bit seed.

    With ``previous`` given, the previous value is returned with probability
    ``repeatability`` and a fresh read-out otherwise.
    """
    if previous is not None and rng.random() < repeatability:
        return previous
    return int(rng.integers(0, 1 << bits))


# --- serialization -----------------------------------------------------------

def code_to_text(code: SpreadingCode) -> str:
    return "".join("+" if c > 0 else "-" for c in code.chips)


def chips_from_text(text: str) -> np.ndarray:
    text = text.strip()
    bad = set(text) - {"+", "-"}
    if bad:
        raise ValueError(f"unexpected characters in code text: {sorted(bad)}")
    return np.array([1 if ch == "+" else -1 for ch in text], dtype=np.int8)


def family_from_descriptor(desc: dict) -> GoldFamily:
    m = int(desc["degree"])
    return GoldFamily(LfsrSpec(m, tuple(desc["taps1"]), int(desc.get("state1", 1))),
                      LfsrSpec(m, tuple(desc["taps2"]), int(desc.get("state2", 1))))


def code_from_descriptor(desc: dict) -> SpreadingCode:
    """Regenerate a code from its JSON descriptor."""
    return gold_code(family_from_descriptor(desc), int(desc["seed"]), int(desc["length"]))


def save_code(code: SpreadingCode, stem: str | Path) -> dict[str, Path]:
    """Write ``<stem>.txt`` (+/- text), ``<stem>.bin`` (packed bits, 1 = -1
    chip) and ``<stem>.json`` (descriptor)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = {"text": stem.with_suffix(".txt"), "binary": stem.with_suffix(".bin"),
             "descriptor": stem.with_suffix(".json")}
    paths["text"].write_text(code_to_text(code) + "\n")
    paths["binary"].write_bytes(np.packbits(code.chips < 0).tobytes())
    desc = {**code.descriptor(), "bit_order": "msb_first", "bit_one_means": -1}
    paths["descriptor"].write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")
    return paths


def load_code(descriptor_path: str | Path) -> SpreadingCode:
    """Load a code from its descriptor; the packed binary, when present, must
    agree with the regenerated chips."""
    descriptor_path = Path(descriptor_path)
    desc = json.loads(descriptor_path.read_text())
    code = code_from_descriptor(desc)
    bin_path = descriptor_path.with_suffix(".bin")
    if bin_path.exists():
        bits = np.unpackbits(np.frombuffer(bin_path.read_bytes(), dtype=np.uint8))[: code.length]
        if not np.array_equal(1 - 2 * bits.astype(np.int8), code.chips):
            raise ValueError(f"{bin_path} does not match descriptor {descriptor_path}")
    return code


def family_correlation_summary(family: GoldFamily, seeds: Iterable[int], length: int) -> dict:
    """Peak autocorrelation sidelobe and peak cross-correlation among the
    given (truncated) codes, using cyclic correlation over ``length`` chips."""
    codes = [gold_code(family, s, length).chips for s in seeds]
    auto = 0
    cross = 0
    for i, a in enumerate(codes):
        ac = np.abs(cyclic_cross_correlation(a, a))
        auto = max(auto, int(ac[1:].max()) if ac.size > 1 else 0)
        for b in codes[i + 1:]:
            cross = max(cross, int(np.abs(cyclic_cross_correlation(a, b)).max()))
    return {"length": length, "n_codes": len(codes), "peak": length,
            "max_auto_sidelobe": auto, "max_cross": cross}
