"""Sparse Geiger-mode camera frames.

A frame lists the occupied bins of the signal and idler windows.  Bin
indices encode ``k_bin * n_lambda + lambda_bin`` within an arm.  Batches
store many frames in CSR form so that simulation, file I/O and
accumulation can work on whole arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np


@dataclass(frozen=True)
class CameraFrame:
    frame_index: int
    signal_events: tuple[int, ...] = ()
    idler_events: tuple[int, ...] = ()

    def __post_init__(self):
        s = tuple(int(b) for b in self.signal_events)
        i = tuple(int(b) for b in self.idler_events)
        for name, ev in (("signal", s), ("idler", i)):
            if any(b < 0 for b in ev):
                raise ValueError(f"negative {name} bin in frame {self.frame_index}")
            if any(a >= b for a, b in zip(ev, ev[1:])):
                raise ValueError(
                    f"{name} events of frame {self.frame_index} must be sorted and unique"
                )
        object.__setattr__(self, "signal_events", s)
        object.__setattr__(self, "idler_events", i)
        object.__setattr__(self, "frame_index", int(self.frame_index))


def _offsets(counts: np.ndarray) -> np.ndarray:
    out = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=out[1:])
    return out


class FrameBatch:
    """Consecutive frames in compressed-sparse-row layout."""

    __slots__ = ("frame_index", "signal_offsets", "signal_bins", "idler_offsets", "idler_bins")

    def __init__(self, frame_index, signal_offsets, signal_bins, idler_offsets, idler_bins):
        self.frame_index = np.asarray(frame_index, dtype=np.uint64)
        self.signal_offsets = np.asarray(signal_offsets, dtype=np.int64)
        self.signal_bins = np.asarray(signal_bins, dtype=np.uint32)
        self.idler_offsets = np.asarray(idler_offsets, dtype=np.int64)
        self.idler_bins = np.asarray(idler_bins, dtype=np.uint32)
        n = len(self.frame_index)
        if len(self.signal_offsets) != n + 1 or len(self.idler_offsets) != n + 1:
            raise ValueError("offset arrays must have n_frames + 1 entries")
        if self.signal_offsets[-1] != len(self.signal_bins) or self.idler_offsets[-1] != len(self.idler_bins):
            raise ValueError("offsets do not match event arrays")

    @classmethod
    def empty(cls) -> "FrameBatch":
        z = np.zeros(1, dtype=np.int64)
        return cls(np.zeros(0, np.uint64), z, np.zeros(0, np.uint32), z, np.zeros(0, np.uint32))

    @classmethod
    def from_counts(cls, frame_index, signal_counts, signal_bins, idler_counts, idler_bins):
        return cls(frame_index, _offsets(signal_counts), signal_bins, _offsets(idler_counts), idler_bins)

    @classmethod
    def from_frames(cls, frames: Iterable[CameraFrame]) -> "FrameBatch":
        frames = list(frames)
        if not frames:
            return cls.empty()
        s = [np.asarray(f.signal_events, dtype=np.uint32) for f in frames]
        i = [np.asarray(f.idler_events, dtype=np.uint32) for f in frames]
        return cls.from_counts(
            [f.frame_index for f in frames],
            [len(a) for a in s],
            np.concatenate(s),
            [len(a) for a in i],
            np.concatenate(i),
        )

    @classmethod
    def concatenate(cls, batches: Iterable["FrameBatch"]) -> "FrameBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls.empty()
        return cls.from_counts(
            np.concatenate([b.frame_index for b in batches]),
            np.concatenate([b.signal_counts for b in batches]),
            np.concatenate([b.signal_bins for b in batches]),
            np.concatenate([b.idler_counts for b in batches]),
            np.concatenate([b.idler_bins for b in batches]),
        )

    def __len__(self) -> int:
        return len(self.frame_index)

    @property
    def signal_counts(self) -> np.ndarray:
        return np.diff(self.signal_offsets)

    @property
    def idler_counts(self) -> np.ndarray:
        return np.diff(self.idler_offsets)

    def frame(self, i: int) -> CameraFrame:
        so, io = self.signal_offsets, self.idler_offsets
        return CameraFrame(
            int(self.frame_index[i]),
            tuple(self.signal_bins[so[i] : so[i + 1]].tolist()),
            tuple(self.idler_bins[io[i] : io[i + 1]].tolist()),
        )

    def __iter__(self) -> Iterator[CameraFrame]:
        for i in range(len(self)):
            yield self.frame(i)

    def slice(self, start: int, stop: int) -> "FrameBatch":
        so, io = self.signal_offsets, self.idler_offsets
        return FrameBatch(
            self.frame_index[start:stop],
            so[start : stop + 1] - so[start],
            self.signal_bins[so[start] : so[stop]],
            io[start : stop + 1] - io[start],
            self.idler_bins[io[start] : io[stop]],
        )

    def equals(self, other: "FrameBatch") -> bool:
        return all(
            np.array_equal(getattr(self, name), getattr(other, name)) for name in self.__slots__
        )

    def __eq__(self, other):
        if not isinstance(other, FrameBatch):
            return NotImplemented
        return self.equals(other)

    def __repr__(self):
        return (
            f"FrameBatch(n_frames={len(self)}, signal_events={len(self.signal_bins)}, "
            f"idler_events={len(self.idler_bins)})"
        )
