"""Bounded-memory summaries for high-cardinality columns.

Two sketches: a register-based cardinality estimator (distinct counts) and a
replace-minimum frequent-items sketch (heavy hitters). Both hash values
through their canonical byte encoding with a fixed keyed 64-bit hash, so
results are reproducible across runs and platforms for a given seed.
"""

from __future__ import annotations

import hashlib
import heapq
import math

from .model import Value, canonical_bytes

__all__ = ["hash64", "CardinalityEstimator", "FrequentItemsSketch"]


def hash64(value: Value, seed: int = 0) -> int:
    """Keyed 64-bit hash of a value's canonical encoding (blake2b, 8-byte digest)."""
    key = (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "big")
    digest = hashlib.blake2b(canonical_bytes(value), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "big")


def _alpha(m: int) -> float:
    # Bias-correction constant for the harmonic-mean estimator.
    if m == 16:
        return 0.673
    if m == 32:
        return 0.697
    if m == 64:
        return 0.709
    return 0.7213 / (1.0 + 1.079 / m)


class CardinalityEstimator:
    """Probabilistic distinct counter over 2**precision six-bit registers.

    precision p is clamped to [4, 16] by validation; the estimate applies the
    standard small-range linear-counting correction. Inserting a duplicate
    never changes state, and the reported estimate never decreases.
    """

    __slots__ = ("precision", "seed", "_m", "_registers", "_peak")

    REGISTER_MAX = 63  # six bits

    def __init__(self, precision: int = 14, seed: int = 0):
        if not isinstance(precision, int) or not 4 <= precision <= 16:
            raise ValueError(f"precision must be an int in [4, 16], got {precision!r}")
        self.precision = precision
        self.seed = seed
        self._m = 1 << precision
        self._registers = bytearray(self._m)
        self._peak = 0.0

    def add(self, value: Value) -> None:
        h = hash64(value, self.seed)
        idx = h >> (64 - self.precision)
        rest = h & ((1 << (64 - self.precision)) - 1)
        # Leading-zero run length within the remaining 64-p bits, plus one.
        rho = (64 - self.precision) - rest.bit_length() + 1
        if rho > self.REGISTER_MAX:
            rho = self.REGISTER_MAX
        if rho > self._registers[idx]:
            self._registers[idx] = rho

    def estimate(self) -> float:
        m = self._m
        inv_sum = 0.0
        zeros = 0
        for r in self._registers:
            inv_sum += 2.0 ** -r
            if r == 0:
                zeros += 1
        raw = _alpha(m) * m * m / inv_sum
        if raw <= 2.5 * m and zeros > 0:
            est = m * math.log(m / zeros)
        else:
            est = raw
        # The raw estimator can dip when crossing the linear-counting handoff;
        # clamp to the high-water mark so the estimate is non-decreasing.
        if est < self._peak:
            est = self._peak
        else:
            self._peak = est
        return est


class FrequentItemsSketch:
    """Replace-minimum frequent-items sketch with fixed capacity.

    Tracks at most `capacity` items as (count, error) pairs. Counts never
    undercount: true_count <= count <= true_count + error, and the counts of
    tracked items always sum to the number of insertions. Every item whose
    true frequency exceeds n/capacity is guaranteed to be tracked.
    """

    __slots__ = ("capacity", "_items", "_heap", "total")

    def __init__(self, capacity: int = 256):
        if not isinstance(capacity, int) or capacity < 1:
            raise ValueError(f"capacity must be an int >= 1, got {capacity!r}")
        self.capacity = capacity
        # canonical key -> [count, error, value]
        self._items: dict[bytes, list] = {}
        # (count, key) min-heap with lazy invalidation on increment.
        self._heap: list[tuple[int, bytes]] = []
        self.total = 0

    def add(self, value: Value) -> None:
        key = canonical_bytes(value)
        self.total += 1
        entry = self._items.get(key)
        if entry is not None:
            entry[0] += 1
            heapq.heappush(self._heap, (entry[0], key))
            if len(self._heap) > 8 * self.capacity + 64:
                self._compact()
            return
        if len(self._items) < self.capacity:
            self._items[key] = [1, 0, value]
            heapq.heappush(self._heap, (1, key))
            return
        # Evict the current minimum; the newcomer inherits its count as error.
        while True:
            count, min_key = self._heap[0]
            live = self._items.get(min_key)
            if live is not None and live[0] == count:
                break
            heapq.heappop(self._heap)  # stale entry
        heapq.heappop(self._heap)
        min_count = self._items.pop(min_key)[0]
        self._items[key] = [min_count + 1, min_count, value]
        heapq.heappush(self._heap, (min_count + 1, key))
        if len(self._heap) > 8 * self.capacity + 64:
            self._compact()

    def _compact(self) -> None:
        # Drop stale heap entries so memory stays O(capacity).
        self._heap = [(entry[0], key) for key, entry in self._items.items()]
        heapq.heapify(self._heap)

    def query(self, phi: float, n: int | None = None) -> list[tuple[Value, int, int]]:
        """Items whose upper-bound count reaches phi * n.

        Returns (value, count_lo, count_hi) triples, count_hi descending with
        canonical-encoding ties, where count_lo = count - error is a lower
        bound and count_hi = count an upper bound on the true frequency.
        """
        if not 0.0 < phi <= 1.0:
            raise ValueError(f"phi must be in (0, 1], got {phi!r}")
        if n is None:
            n = self.total
        cut = phi * n
        out = [(entry[2], entry[0] - entry[1], entry[0])
               for key, entry in self._items.items() if entry[0] >= cut]
        out.sort(key=lambda item: (-item[2], canonical_bytes(item[0])))
        return out
