"""Sparse binary event trains on a fixed bin grid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_BIN_S = 1e-3


@dataclass(frozen=True, eq=False)
class EventTrain:
    """Indices of the 1-bins of a binary train.

    ``bins`` are strictly increasing and every ``bin * bin_size_s`` lies
    inside ``[0, duration_s)``.
    """

    bins: np.ndarray = field(repr=False)
    duration_s: float
    bin_size_s: float = DEFAULT_BIN_S

    def __post_init__(self) -> None:
        bins = np.asarray(self.bins, dtype=np.int64).reshape(-1)
        if self.bin_size_s <= 0 or self.duration_s < 0:
            raise ValueError("bin_size_s must be positive and duration_s non-negative")
        if bins.size:
            if np.any(np.diff(bins) <= 0):
                raise ValueError("event bins must be strictly increasing")
            if bins[0] < 0 or bins[-1] >= self.n_bins:
                raise ValueError(f"event bin outside [0, {self.n_bins})")
        bins = bins.copy()
        bins.setflags(write=False)
        object.__setattr__(self, "bins", bins)

    @property
    def n_bins(self) -> int:
        return int(round(self.duration_s / self.bin_size_s))

    @property
    def count(self) -> int:
        return int(self.bins.size)

    def __len__(self) -> int:
        return self.count

    def times(self) -> np.ndarray:
        """Bin start times in seconds."""
        return self.bins * self.bin_size_s

    def same_grid(self, other: "EventTrain") -> bool:
        return (np.isclose(self.bin_size_s, other.bin_size_s, rtol=0, atol=1e-15)
                and self.n_bins == other.n_bins)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventTrain):
            return NotImplemented
        return self.same_grid(other) and np.array_equal(self.bins, other.bins)

    def __hash__(self) -> int:
        return hash((self.n_bins, self.bin_size_s, self.bins.tobytes()))

    @classmethod
    def empty(cls, duration_s: float, bin_size_s: float = DEFAULT_BIN_S) -> "EventTrain":
        return cls(np.zeros(0, dtype=np.int64), duration_s, bin_size_s)

    @classmethod
    def from_times(cls, times_s, duration_s: float, bin_size_s: float = DEFAULT_BIN_S) -> "EventTrain":
        """Bin event timestamps; several events in one bin collapse to one."""
        t = np.asarray(times_s, dtype=np.float64).reshape(-1)
        if t.size and (t.min() < 0 or t.max() >= duration_s):
            raise ValueError(f"event time outside [0, {duration_s})")
        # small epsilon keeps exact bin-boundary timestamps in their own bin
        bins = np.floor(t / bin_size_s + 1e-9).astype(np.int64)
        return cls(np.unique(bins), duration_s, bin_size_s)
