import json

import pytest
from hypothesis import given, settings, strategies as st

from spotrl.traces import (
    SynthesisParams,
    TraceError,
    TraceEvent,
    TraceEventKind,
    builtin_segment,
    parse_trace,
    serialize_trace,
    summarize,
    synthesize,
)

from oracles import sweep_line_summary


def lines(*rows):
    return [json.dumps(r) for r in rows]


def test_parse_minimal_trace():
    events = parse_trace(lines(
        {"at": 0.0, "kind": "allocate", "instance_id": "i1"},
        {"at": 100.0, "kind": "preempt", "instance_id": "i1"},
    ))
    assert len(events) == 2
    assert summarize(events).avg_instances == pytest.approx(1.0)


def test_parse_rejects_preempt_before_allocate():
    with pytest.raises(TraceError, match="line 1.*expected allocate"):
        parse_trace(lines({"at": 0.0, "kind": "preempt", "instance_id": "i1"}))


def test_parse_rejects_double_allocate():
    with pytest.raises(TraceError, match="line 2.*expected preempt"):
        parse_trace(lines(
            {"at": 0.0, "kind": "allocate", "instance_id": "i1"},
            {"at": 5.0, "kind": "allocate", "instance_id": "i1"},
        ))


def test_parse_rejects_time_regression():
    with pytest.raises(TraceError, match="line 2.*regression"):
        parse_trace(lines(
            {"at": 10.0, "kind": "allocate", "instance_id": "i1"},
            {"at": 5.0, "kind": "allocate", "instance_id": "i2"},
        ))


def test_parse_rejects_bad_json_with_line_number():
    with pytest.raises(TraceError, match="line 1.*invalid JSON"):
        parse_trace(["{oops"])


def test_parse_rejects_unknown_kind():
    with pytest.raises(TraceError, match="line 1"):
        parse_trace(lines({"at": 0.0, "kind": "evict", "instance_id": "i1"}))


@st.composite
def valid_traces(draw):
    slots = draw(st.integers(1, 5))
    rows = []
    t = 0.0
    for _ in range(draw(st.integers(0, 30))):
        t += draw(st.floats(0.0, 50.0, allow_nan=False))
        slot = draw(st.integers(0, slots - 1))
        rows.append((t, slot))
    events = []
    sessions = [0] * slots
    up = [False] * slots
    for t, slot in rows:
        if up[slot]:
            events.append(TraceEvent(t, TraceEventKind.PREEMPT,
                                     f"s{slot}n{sessions[slot]}"))
            sessions[slot] += 1
            up[slot] = False
        else:
            events.append(TraceEvent(t, TraceEventKind.ALLOCATE,
                                     f"s{slot}n{sessions[slot]}"))
            up[slot] = True
    return events


@given(valid_traces())
@settings(max_examples=100, deadline=None)
def test_round_trip_identity(events):
    assert parse_trace(serialize_trace(events).splitlines()) == events


@given(valid_traces())
@settings(max_examples=100, deadline=None)
def test_summary_matches_sweep_line_oracle(events):
    got = summarize(events)
    raw = [json.loads(line) for line in serialize_trace(events).splitlines()]
    expected = sweep_line_summary(raw)
    assert got.allocations == expected["allocations"]
    assert got.preemptions == expected["preemptions"]
    assert got.duration == pytest.approx(expected["duration"])
    assert got.avg_instances == pytest.approx(expected["avg_instances"])


def test_summarize_empty_trace():
    summary = summarize([])
    assert (summary.avg_instances, summary.allocations, summary.preemptions,
            summary.duration) == (0.0, 0, 0, 0.0)


def test_summarize_hand_integral():
    events = parse_trace(lines(
        {"at": 0.0, "kind": "allocate", "instance_id": "a"},
        {"at": 10.0, "kind": "allocate", "instance_id": "b"},
        {"at": 30.0, "kind": "preempt", "instance_id": "a"},
        {"at": 40.0, "kind": "preempt", "instance_id": "b"},
    ))
    # 1 instance for 10s, 2 for 20s, 1 for 10s over 40s
    assert summarize(events).avg_instances == pytest.approx(60.0 / 40.0)


def test_builtin_segment_shapes():
    a = summarize(builtin_segment("a"))
    assert a.avg_instances == pytest.approx(6.53, abs=0.01)
    assert (a.allocations, a.preemptions) == (13, 8)
    b = summarize(builtin_segment("b"))
    assert b.avg_instances < 5.0 and b.preemptions >= 7
    c = summarize(builtin_segment("c"))
    assert c.avg_instances == pytest.approx(6.06, abs=0.01)
    assert c.preemptions <= 2


def test_builtin_segments_parse_cleanly():
    for name in "abc":
        events = builtin_segment(name)
        assert parse_trace(serialize_trace(events).splitlines()) == events


def test_builtin_unknown_name():
    with pytest.raises(TraceError, match="unknown builtin"):
        builtin_segment("z")


def test_synthesize_deterministic():
    params = SynthesisParams(mean_up=300, mean_down=120, max_instances=4,
                             duration=4000)
    assert synthesize(params, 42) == synthesize(params, 42)
    assert synthesize(params, 42) != synthesize(params, 43)


def test_synthesize_output_parses():
    params = SynthesisParams(mean_up=200, mean_down=100, max_instances=3,
                             duration=2000, replacement_prob=0.5)
    events = synthesize(params, 7)
    assert parse_trace(serialize_trace(events).splitlines()) == events


def test_full_replacement_never_drops_for_long():
    params = SynthesisParams(mean_up=100, mean_down=1000, max_instances=5,
                             duration=3000, replacement_prob=1.0)
    events = synthesize(params, 11)
    preempts = [e for e in events if e.kind is TraceEventKind.PREEMPT]
    allocs = [e for e in events if e.kind is TraceEventKind.ALLOCATE]
    for p in preempts:
        assert any(a.at == p.at for a in allocs), "preemption without a spike"


def test_no_replacement_monotone_attrition():
    params = SynthesisParams(mean_up=100, mean_down=1e12, max_instances=6,
                             duration=5000, replacement_prob=0.0)
    events = synthesize(params, 5)
    alive = 0
    peak = 0
    for e in events:
        alive += 1 if e.kind is TraceEventKind.ALLOCATE else -1
        peak = max(peak, alive)
        assert alive <= peak  # never recovers
    assert alive < 6


def test_synthesize_matches_renewal_theory():
    mean_up, mean_down, p = 300.0, 150.0, 0.4
    params = SynthesisParams(mean_up=mean_up, mean_down=mean_down,
                             max_instances=8, duration=2_000_000.0,
                             replacement_prob=p)
    summary = summarize(synthesize(params, 123))
    expected = 8 * mean_up / (mean_up + (1 - p) * mean_down)
    assert summary.avg_instances == pytest.approx(expected, rel=0.10)


def test_synthesize_validates_params():
    with pytest.raises(ValueError):
        synthesize(SynthesisParams(mean_up=0, mean_down=1, max_instances=1,
                                   duration=10), 0)
    with pytest.raises(ValueError):
        synthesize(SynthesisParams(mean_up=1, mean_down=1, max_instances=1,
                                   duration=10, replacement_prob=1.5), 0)
