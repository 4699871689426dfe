"""Preemptible-instance availability traces.

File format: one JSON object per line, e.g.
``{"at": 120.0, "kind": "allocate", "instance_id": "s01n002"}``.
Events are non-decreasing in time and alternate allocate/preempt per
instance, starting with allocate.  Files use the ``.trace.jsonl`` suffix.
"""
from __future__ import annotations

import enum
import json
import random
from dataclasses import dataclass
from typing import Iterable


class TraceError(ValueError):
    pass


class TraceEventKind(enum.Enum):
    ALLOCATE = "allocate"
    PREEMPT = "preempt"


@dataclass(frozen=True)
class TraceEvent:
    at: float
    kind: TraceEventKind
    instance_id: str


@dataclass(frozen=True)
class TraceSummary:
    avg_instances: float
    allocations: int
    preemptions: int
    duration: float


def parse_trace(lines: Iterable[str]) -> list[TraceEvent]:
    events: list[TraceEvent] = []
    last_at = 0.0
    last_kind: dict[str, TraceEventKind] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"line {lineno}: invalid JSON: {exc}") from exc
        try:
            at = float(record["at"])
            kind = TraceEventKind(record["kind"])
            instance_id = str(record["instance_id"])
        except (KeyError, ValueError) as exc:
            raise TraceError(f"line {lineno}: bad event {record!r}: {exc}") from exc
        if at < 0:
            raise TraceError(f"line {lineno}: negative timestamp {at}")
        if at < last_at:
            raise TraceError(f"line {lineno}: time regression {at} < {last_at}")
        expected = (
            TraceEventKind.ALLOCATE
            if last_kind.get(instance_id) in (None, TraceEventKind.PREEMPT)
            else TraceEventKind.PREEMPT
        )
        if kind is not expected:
            raise TraceError(
                f"line {lineno}: {instance_id} expected {expected.value}, got {kind.value}"
            )
        last_kind[instance_id] = kind
        last_at = at
        events.append(TraceEvent(at=at, kind=kind, instance_id=instance_id))
    return events


def serialize_trace(events: Iterable[TraceEvent]) -> str:
    lines = [
        json.dumps(
            {"at": e.at, "kind": e.kind.value, "instance_id": e.instance_id},
            sort_keys=True,
        )
        for e in events
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def load_trace(path: str) -> list[TraceEvent]:
    with open(path) as fh:
        return parse_trace(fh)


def save_trace(events: Iterable[TraceEvent], path: str) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_trace(events))


def summarize(events: list[TraceEvent]) -> TraceSummary:
    """Availability statistics: time-averaged concurrency, event counts, span."""
    if not events:
        return TraceSummary(avg_instances=0.0, allocations=0, preemptions=0, duration=0.0)
    duration = events[-1].at
    allocations = sum(1 for e in events if e.kind is TraceEventKind.ALLOCATE)
    preemptions = len(events) - allocations
    integral = 0.0
    alive = 0
    prev_at = 0.0
    for event in events:
        integral += alive * (event.at - prev_at)
        alive += 1 if event.kind is TraceEventKind.ALLOCATE else -1
        prev_at = event.at
    avg = integral / duration if duration > 0 else 0.0
    return TraceSummary(
        avg_instances=avg, allocations=allocations, preemptions=preemptions,
        duration=duration,
    )


@dataclass
class SynthesisParams:
    mean_up: float
    mean_down: float
    max_instances: int
    duration: float
    replacement_prob: float = 0.0


def synthesize(params: SynthesisParams, seed: int) -> list[TraceEvent]:
    """Renewal-process churn over ``max_instances`` slots.

    Slots come up at t=0 and alternate exponential up/down periods.  On each
    preemption a fresh instance id replaces the old one immediately with
    ``replacement_prob`` (availability spikes), otherwise after the down
    period.
    """
    if params.mean_up <= 0 or params.mean_down <= 0:
        raise ValueError("mean_up and mean_down must be positive")
    if not 0.0 <= params.replacement_prob <= 1.0:
        raise ValueError("replacement_prob must lie in [0, 1]")
    rng = random.Random(seed)
    raw: list[tuple[float, int, int, TraceEventKind, str]] = []
    for slot in range(params.max_instances):
        t = 0.0
        seq = 0
        session = 0
        while t < params.duration:
            instance_id = f"s{slot:02d}n{session:03d}"
            raw.append((t, slot, seq, TraceEventKind.ALLOCATE, instance_id))
            seq += 1
            session += 1
            up = rng.expovariate(1.0 / params.mean_up)
            t += up
            if t >= params.duration:
                break
            raw.append((t, slot, seq, TraceEventKind.PREEMPT, instance_id))
            seq += 1
            if rng.random() >= params.replacement_prob:
                t += rng.expovariate(1.0 / params.mean_down)
    raw.sort(key=lambda item: (item[0], item[1], item[2]))
    return [TraceEvent(at=at, kind=kind, instance_id=iid) for at, _, _, kind, iid in raw]


# Bundled synthetic segments shaped to the (availability, churn) quadrants
# of the reference spot trace: A = (high, high), B = (low, high),
# C = (high, low).  Times are seconds; each spans about an hour.

def _events(table: list[tuple[float, str, str]]) -> list[TraceEvent]:
    return [
        TraceEvent(at=at, kind=TraceEventKind(kind), instance_id=iid)
        for at, kind, iid in sorted(table, key=lambda row: row[0])
    ]


_SEGMENT_A = [
    # five long-lived instances
    (0.0, "allocate", "a01"), (0.0, "allocate", "a02"), (0.0, "allocate", "a03"),
    (0.0, "allocate", "a04"), (0.0, "allocate", "a05"),
    # churn slot 1: back-to-back replacement spikes
    (0.0, "allocate", "a06"), (1800.0, "preempt", "a06"),
    (1800.0, "allocate", "a07"), (2700.0, "preempt", "a07"),
    (2700.0, "allocate", "a08"), (3300.0, "preempt", "a08"),
    (3300.0, "allocate", "a09"), (3600.0, "preempt", "a09"),
    # churn slot 2: replacements with one gap
    (600.0, "allocate", "a10"), (1000.0, "preempt", "a10"),
    (1000.0, "allocate", "a11"), (1600.0, "preempt", "a11"),
    (1600.0, "allocate", "a12"), (2200.0, "preempt", "a12"),
    (2900.0, "allocate", "a13"), (3208.0, "preempt", "a13"),
]

_SEGMENT_B = [
    (0.0, "allocate", "b01"), (0.0, "allocate", "b02"), (0.0, "allocate", "b03"),
    (0.0, "allocate", "b04"), (900.0, "preempt", "b04"),
    (900.0, "allocate", "b05"), (1500.0, "preempt", "b05"),
    (2000.0, "allocate", "b06"), (2600.0, "preempt", "b06"),
    (2600.0, "allocate", "b07"), (3000.0, "preempt", "b07"),
    (0.0, "allocate", "b08"), (1300.0, "preempt", "b08"),
    (1700.0, "allocate", "b09"), (2500.0, "preempt", "b09"),
    (2500.0, "allocate", "b10"), (3588.0, "preempt", "b10"),
]

_SEGMENT_C = [
    (0.0, "allocate", "c01"), (0.0, "allocate", "c02"), (0.0, "allocate", "c03"),
    (0.0, "allocate", "c04"), (0.0, "allocate", "c05"),
    (0.0, "allocate", "c06"), (3600.0, "preempt", "c06"),
    (0.0, "allocate", "c07"), (216.0, "preempt", "c07"),
]

_SEGMENTS = {"a": _SEGMENT_A, "b": _SEGMENT_B, "c": _SEGMENT_C}


def builtin_segment(name: str) -> list[TraceEvent]:
    key = name.lower()
    if key not in _SEGMENTS:
        raise TraceError(f"unknown builtin segment {name!r}; have {sorted(_SEGMENTS)}")
    return _events(_SEGMENTS[key])


def resolve_trace(spec: str) -> list[TraceEvent]:
    """Load a trace from a path, or ``builtin:<name>``, or ``none`` (empty)."""
    if spec == "none":
        return []
    if spec.startswith("builtin:"):
        return builtin_segment(spec.split(":", 1)[1])
    return load_trace(spec)
