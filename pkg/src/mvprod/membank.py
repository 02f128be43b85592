"""Category-keyed FIFO queues of key embeddings used as negatives.

One bank per instance side. Entries are appended per category and
drawn oldest-first by the categories of the incoming batch; drawing
removes entries (a true dequeue, not a peek). When a category cannot
cover its requested multiplicity the shortfall comes from the largest
remaining buffers. Entries whose instance id matches a current batch
anchor are skipped so a positive never doubles as its own negative.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


class BankEmptyError(RuntimeError):
    """Drawing from a bank with no entries (warm-up not done)."""


@dataclass
class QueueEntry:
    embedding: np.ndarray
    instance_id: int
    path: tuple[int, int]  # (level-1 id, level-2 id)
    step: int


class MultiQueue:
    def __init__(self, side: str, category_ids, capacity: int, key_fn=None):
        """`key_fn` maps an entry to its queue key; the default keys by
        level-2 category. A single-queue ablation passes one pseudo id
        and a constant key_fn."""
        if capacity < 1:
            raise ValueError(f"queue capacity must be >= 1, got {capacity}")
        ids = list(category_ids)
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate category ids")
        if not ids:
            raise ValueError("at least one category id required")
        self.side = side
        self.capacity = capacity
        self._key_fn = key_fn or (lambda entry: entry.path[1])
        self._buffers: dict[int, deque[QueueEntry]] = {c: deque() for c in ids}
        self.total_enqueued = 0
        self.total_drawn = 0
        self.total_evicted = 0

    @property
    def category_ids(self):
        return list(self._buffers)

    def total(self) -> int:
        return sum(len(b) for b in self._buffers.values())

    def enqueue(self, entries) -> None:
        """Append in input order; overfull buffers evict their oldest."""
        for entry in entries:
            key = self._key_fn(entry)
            buf = self._buffers.get(key)
            if buf is None:
                raise ValueError(f"unknown category {key} for bank side {self.side}")
            buf.append(entry)
            self.total_enqueued += 1
            while len(buf) > self.capacity:
                buf.popleft()
                self.total_evicted += 1

    def _pop_oldest_eligible(self, buf: deque, anchor_ids) -> QueueEntry | None:
        for idx, entry in enumerate(buf):
            if entry.instance_id not in anchor_ids:
                del buf[idx]
                return entry
        return None

    def draw(self, categories, anchor_ids=()) -> list[QueueEntry]:
        """Dequeue one negative per requested category occurrence.

        `categories` lists the batch's queue keys with multiplicity.
        Per-category requests take that buffer's oldest entries; any
        shortfall is filled from whichever buffer is currently largest
        (ties to the smallest id). Anchor-id entries are skipped in
        place. Returns fewer than len(categories) only when the bank
        runs out of eligible entries.
        """
        if self.total() == 0:
            raise BankEmptyError(f"bank {self.side} is empty; warm-up not done")
        anchor_ids = set(anchor_ids)
        drawn: list[QueueEntry] = []

        # Primary pass: serve each category from its own buffer.
        shortfall = 0
        for key in categories:
            buf = self._buffers.get(key)
            if buf is None:
                raise ValueError(f"unknown category {key} for bank side {self.side}")
            entry = self._pop_oldest_eligible(buf, anchor_ids)
            if entry is None:
                shortfall += 1
            else:
                drawn.append(entry)

        # Fallback: drain the largest remaining buffers.
        while shortfall > 0:
            candidates = [(len(b), c) for c, b in self._buffers.items() if len(b) > 0]
            if not candidates:
                break
            candidates.sort(key=lambda t: (-t[0], t[1]))
            entry = None
            for _, cid in candidates:
                entry = self._pop_oldest_eligible(self._buffers[cid], anchor_ids)
                if entry is not None:
                    break
            if entry is None:
                break  # everything left is an anchor
            drawn.append(entry)
            shortfall -= 1

        self.total_drawn += len(drawn)
        return drawn

    def fill_report(self) -> dict:
        per_category = {c: len(b) for c, b in self._buffers.items()}
        return {
            "side": self.side,
            "per_category": per_category,
            "total": sum(per_category.values()),
            "capacity_per_queue": self.capacity,
            "enqueued": self.total_enqueued,
            "drawn": self.total_drawn,
            "evicted": self.total_evicted,
        }

    def entries_in_order(self) -> list[QueueEntry]:
        """FIFO snapshot per ascending category id, for serialization."""
        out: list[QueueEntry] = []
        for cid in sorted(self._buffers):
            out.extend(self._buffers[cid])
        return out
