"""Builders shared across the test modules."""

from __future__ import annotations

from datetime import datetime, timedelta

from streamqc.model import StreamElement, Value, WindowInstance, ts

T0 = ts(2015, 5, 7, 11, 0, 0)


def at(seconds: float) -> datetime:
    """Timestamp `seconds` after the shared test origin."""
    return T0 + timedelta(seconds=seconds)


def elem(t: datetime, seq: int = 0, **attrs: Value) -> StreamElement:
    return StreamElement(event_time=t, arrival_seq=seq, attrs=attrs)


def elems(values, column: str = "x", start: datetime | None = None,
          step_s: float = 1.0) -> list[StreamElement]:
    """One element per value, event times step_s apart, seq in list order."""
    start = start if start is not None else T0
    return [elem(start + timedelta(seconds=i * step_s), i, **{column: v})
            for i, v in enumerate(values)]


def win(elements, start: datetime | None = None, end: datetime | None = None,
        key: Value = None) -> WindowInstance:
    """Window around the given elements; bounds default to a snug fit."""
    ordered = sorted(elements, key=lambda e: (e.event_time, e.arrival_seq))
    if start is None:
        start = ordered[0].event_time if ordered else T0
    if end is None:
        end = (ordered[-1].event_time + timedelta(seconds=1)) if ordered else at(60)
    return WindowInstance(start=start, end=end, key=key, elements=tuple(ordered))


def values_win(values, column: str = "x", **kwargs) -> WindowInstance:
    return win(elems(values, column=column), **kwargs)
