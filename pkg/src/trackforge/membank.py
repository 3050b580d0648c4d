"""Long/short-term memory for propagation.

The first frame is pinned forever. Every ``gap``-th frame goes into a FIFO of
at most ``capacity`` long-term entries, and the previous frame is always
available as the single short-term entry.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MemoryEntry:
    frame_index: int
    keys: dict[int, np.ndarray] = field(default_factory=dict)
    vis_values: dict[int, np.ndarray] = field(default_factory=dict)
    id_values: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.frame_index < 0:
            raise ValueError(f"negative frame index {self.frame_index}")
        for scale, k in self.keys.items():
            v = self.vis_values[scale]
            i = self.id_values[scale]
            if not (k.shape[0] == v.shape[0] == i.shape[0]):
                raise ValueError(f"row mismatch at scale {scale}")

    def rows(self, scale: int) -> int:
        return self.keys[scale].shape[0]


@dataclass(frozen=True)
class MemoryView:
    """Concatenated memory rows per scale, in gather order."""

    frame_indices: tuple[int, ...]
    keys: dict[int, np.ndarray]
    vis_values: dict[int, np.ndarray]
    id_values: dict[int, np.ndarray]


def should_store(frame_index: int, gap: int) -> bool:
    """Long-term writes happen on positive multiples of ``gap``."""
    return frame_index >= 1 and frame_index % gap == 0


class MemoryBank:
    def __init__(self, capacity: int, gap: int) -> None:
        if capacity < 1 or gap < 1:
            raise ValueError("capacity and gap must be >= 1")
        self.capacity = capacity
        self.gap = gap
        self.initial: MemoryEntry | None = None
        self.long_term: deque[MemoryEntry] = deque()
        self.short_term: MemoryEntry | None = None
        self.last_store_index: int | None = None
        self.stored = 0
        self.evicted = 0

    def initialize(self, entry: MemoryEntry) -> None:
        self.initial = entry
        self.long_term.clear()
        self.short_term = None
        self.last_store_index = entry.frame_index
        self.stored = 0
        self.evicted = 0

    def store(self, entry: MemoryEntry) -> MemoryEntry | None:
        """Append a long-term entry, returning the evicted entry if any."""
        if self.initial is None:
            raise RuntimeError("memory bank not initialized")
        if self.last_store_index is not None and entry.frame_index <= self.last_store_index:
            raise ValueError(
                f"out-of-order store: frame {entry.frame_index} after {self.last_store_index}"
            )
        self.long_term.append(entry)
        self.last_store_index = entry.frame_index
        self.stored += 1
        if len(self.long_term) > self.capacity:
            self.evicted += 1
            return self.long_term.popleft()
        return None

    def update_short_term(self, entry: MemoryEntry) -> None:
        self.short_term = entry

    def observe(self, entry: MemoryEntry) -> None:
        """Record a processed frame: long-term write when scheduled, always short-term."""
        if should_store(entry.frame_index, self.gap):
            self.store(entry)
        self.update_short_term(entry)

    def entries(self) -> list[MemoryEntry]:
        """Initial, long-term oldest→newest, then short-term; each frame index once."""
        if self.initial is None:
            raise RuntimeError("memory bank is empty")
        out = [self.initial, *self.long_term]
        seen = {e.frame_index for e in out}
        if self.short_term is not None and self.short_term.frame_index not in seen:
            out.append(self.short_term)
        return out

    def frame_indices(self) -> tuple[int, ...]:
        return tuple(e.frame_index for e in self.entries())

    def gather(self) -> MemoryView:
        entries = self.entries()
        scales = sorted(entries[0].keys, reverse=True)

        def cat(attr: str) -> dict[int, np.ndarray]:
            return {s: np.concatenate([getattr(e, attr)[s] for e in entries], axis=0) for s in scales}

        return MemoryView(
            frame_indices=tuple(e.frame_index for e in entries),
            keys=cat("keys"),
            vis_values=cat("vis_values"),
            id_values=cat("id_values"),
        )

    def __len__(self) -> int:
        return len(self.entries()) if self.initial is not None else 0


def simulate_schedule(num_frames: int, gap: int, capacity: int):
    """Drive a bank with placeholder entries; yields ``(frame, bank)`` after each frame."""
    bank = MemoryBank(capacity, gap)
    bank.initialize(MemoryEntry(0))
    yield 0, bank
    for t in range(1, num_frames):
        bank.observe(MemoryEntry(t))
        yield t, bank
