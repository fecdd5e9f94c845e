"""Event-time windowing: watermarks, pane assignment, and pane lifecycle.

Panes are half-open [start, end). A single watermark tracks max(event_time)
minus a bounded delay; a pane closes once watermark >= end + allowed_lateness.
Elements older than watermark - allowed_lateness are discarded and counted.

For tumbling and sliding specs the store materializes empty panes between the
first and last observed event times, so downstream consumers see silence as
zero-volume windows. Session panes are built per key by gap extension and are
never empty.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum

from .model import (
    TS_MAX,
    TS_MIN,
    StreamElement,
    Value,
    WindowInstance,
    WindowSpec,
    canonical_bytes,
    sort_key,
)

__all__ = [
    "Watermark", "RouteOutcome", "PaneStore",
    "assign_tumbling", "assign_sliding",
]


def _minus_clamped(dt: datetime, td: timedelta) -> datetime:
    try:
        return dt - td
    except OverflowError:
        return TS_MIN


def _plus_clamped(dt: datetime, td: timedelta) -> datetime:
    try:
        out = dt + td
    except OverflowError:
        return TS_MAX
    return min(out, TS_MAX)


@dataclass
class Watermark:
    """Monotone event-time low watermark with bounded out-of-orderness."""

    delay: timedelta = timedelta(0)
    value: datetime = TS_MIN

    def __post_init__(self) -> None:
        if self.delay < timedelta(0):
            raise ValueError("watermark delay must be >= 0")

    def observe(self, event_time: datetime) -> None:
        candidate = _minus_clamped(event_time, self.delay)
        if candidate > self.value:
            self.value = candidate


class RouteOutcome(str, Enum):
    ASSIGNED = "assigned"
    LATE = "late"
    DISCARDED = "discarded"


def assign_tumbling(t: datetime, spec: WindowSpec) -> tuple[datetime, datetime]:
    """The unique tumbling pane [start, start+duration) containing t."""
    periods = (t - spec.origin) // spec.duration
    start = spec.origin + periods * spec.duration
    return start, start + spec.duration


def assign_sliding(t: datetime, spec: WindowSpec) -> list[tuple[datetime, datetime]]:
    """All sliding panes containing t, earliest start first.

    Starts lie on the slide grid anchored at origin; s is included when
    s <= t < s + duration.
    """
    periods = (t - spec.origin) // spec.slide
    latest = spec.origin + periods * spec.slide
    out = []
    start = latest
    floor = t - spec.duration
    while start > floor:
        out.append((start, start + spec.duration))
        start -= spec.slide
    out.reverse()
    return out


@dataclass
class _Session:
    key: Value
    min_t: datetime
    max_t: datetime
    elements: list[StreamElement]
    token: int  # invalidated on merge/extension for lazy heap entries


class PaneStore:
    """Open panes for one window spec, indexed by (key, start).

    key_by optionally partitions the stream before windowing (sessions are
    per key; grid panes are usually unkeyed). Keyed grid stores do not
    materialize empty panes since the key universe is unknown.
    """

    def __init__(self, spec: WindowSpec, key_by: str | None = None):
        self.spec = spec
        self.key_by = key_by
        self.discarded = 0
        self.late_accepted = 0
        self.assigned = 0
        # Grid state: start -> {canonical key -> (key value, [elements])}
        self._grid: dict[datetime, dict[bytes, tuple[Value, list[StreamElement]]]] = {}
        self._min_start: datetime | None = None
        self._max_start: datetime | None = None
        self._cursor: datetime | None = None
        # Session state: canonical key -> sessions
        self._sessions: dict[bytes, list[_Session]] = {}
        self._session_heap: list[tuple[datetime, int, bytes, int]] = []
        self._token_seq = 0

    # -- routing ------------------------------------------------------------

    def route(self, e: StreamElement, wm: Watermark) -> RouteOutcome:
        """Assign an element to its panes, or discard it as too late.

        On time (event_time >= watermark) assigns normally; within
        allowed_lateness assigns to still-open panes flagged late; older
        elements are dropped and counted in `discarded`.
        """
        t = e.event_time
        if t >= wm.value:
            outcome = RouteOutcome.ASSIGNED
        elif t >= _minus_clamped(wm.value, self.spec.allowed_lateness):
            outcome = RouteOutcome.LATE
            self.late_accepted += 1
        else:
            self.discarded += 1
            return RouteOutcome.DISCARDED
        self.assigned += 1
        key = e.attrs.get(self.key_by) if self.key_by is not None else None
        if self.spec.kind == "session":
            self.update_session(key, e)
        else:
            self._add_grid(key, e)
        return outcome

    def _add_grid(self, key: Value, e: StreamElement) -> None:
        if self.spec.kind == "tumbling":
            starts = [assign_tumbling(e.event_time, self.spec)[0]]
        else:
            starts = [s for s, _ in assign_sliding(e.event_time, self.spec)]
        key_enc = canonical_bytes(key)
        for start in starts:
            by_key = self._grid.get(start)
            if by_key is None:
                by_key = {}
                self._grid[start] = by_key
                if self._min_start is None or start < self._min_start:
                    self._min_start = start
                if self._max_start is None or start > self._max_start:
                    self._max_start = start
            slot = by_key.get(key_enc)
            if slot is None:
                by_key[key_enc] = (key, [e])
            else:
                slot[1].append(e)

    def update_session(self, key: Value, e: StreamElement) -> str:
        """Fold an element into the per-key session set.

        Returns the action taken: "open" (new session), "extend" (joined
        one), or "merge" (bridged two or more).
        """
        gap = self.spec.gap
        key_enc = canonical_bytes(key)
        sessions = self._sessions.setdefault(key_enc, [])
        t = e.event_time
        touching = [s for s in sessions
                    if _minus_clamped(s.min_t, gap) <= t <= _plus_clamped(s.max_t, gap)]
        if not touching:
            action = "open"
            merged = _Session(key, t, t, [e], self._next_token())
            sessions.append(merged)
        else:
            action = "extend" if len(touching) == 1 else "merge"
            merged = touching[0]
            merged.token = self._next_token()
            merged.min_t = min(merged.min_t, t)
            merged.max_t = max(merged.max_t, t)
            merged.elements.append(e)
            for other in touching[1:]:
                merged.min_t = min(merged.min_t, other.min_t)
                merged.max_t = max(merged.max_t, other.max_t)
                merged.elements.extend(other.elements)
                sessions.remove(other)
        close_at = _plus_clamped(merged.max_t, gap + self.spec.allowed_lateness)
        heapq.heappush(self._session_heap,
                       (close_at, merged.token, key_enc, merged.token))
        return action

    def _next_token(self) -> int:
        self._token_seq += 1
        return self._token_seq

    # -- closing ------------------------------------------------------------

    def close_ready(self, wm_value: datetime) -> list[WindowInstance]:
        """Emit every pane with end + allowed_lateness <= watermark, in
        (end, key) order. Each pane is emitted exactly once."""
        if self.spec.kind == "session":
            out = self._close_sessions(wm_value)
        else:
            out = self._close_grid(wm_value)
        out.sort(key=lambda w: (w.end, sort_key(w.key), w.start))
        return out

    def flush(self) -> list[WindowInstance]:
        """Close every remaining pane (end-of-stream: watermark jumps to +inf)."""
        return self.close_ready(TS_MAX)

    def _close_grid(self, wm_value: datetime) -> list[WindowInstance]:
        if self._max_start is None:
            return []
        duration = self.spec.duration
        threshold = _minus_clamped(wm_value, duration + self.spec.allowed_lateness)
        cursor = self._cursor if self._cursor is not None else self._min_start
        out: list[WindowInstance] = []
        step = self.spec.step
        while cursor <= self._max_start and cursor <= threshold:
            by_key = self._grid.pop(cursor, None)
            end = cursor + duration
            if by_key:
                for key_enc in sorted(by_key):
                    key, elements = by_key[key_enc]
                    elements.sort(key=lambda e: (e.event_time, e.arrival_seq))
                    out.append(WindowInstance(cursor, end, key, tuple(elements)))
            elif self.key_by is None:
                out.append(WindowInstance(cursor, end, None, ()))
            cursor += step
        if out:
            self._cursor = cursor
        return out

    def _close_sessions(self, wm_value: datetime) -> list[WindowInstance]:
        out: list[WindowInstance] = []
        heap = self._session_heap
        while heap and heap[0][0] <= wm_value:
            close_at, _, key_enc, token = heapq.heappop(heap)
            sessions = self._sessions.get(key_enc)
            if not sessions:
                continue
            live = next((s for s in sessions if s.token == token), None)
            if live is None:
                continue  # stale entry for a merged/extended session
            sessions.remove(live)
            if not sessions:
                del self._sessions[key_enc]
            live.elements.sort(key=lambda e: (e.event_time, e.arrival_seq))
            end = _plus_clamped(live.max_t, self.spec.gap)
            out.append(WindowInstance(live.min_t, end, live.key, tuple(live.elements)))
        return out

    def open_pane_count(self) -> int:
        if self.spec.kind == "session":
            return sum(len(s) for s in self._sessions.values())
        return sum(len(by_key) for by_key in self._grid.values())
