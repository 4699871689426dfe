"""Append-only event log for oracle re-derivation and determinism checks."""
from __future__ import annotations

import json


class EventLog:
    def __init__(self) -> None:
        self.records: list[dict] = []

    def emit(self, t: float, event_type: str, **payload) -> None:
        record = {"t": t, "type": event_type}
        record.update(payload)
        self.records.append(record)

    def of_type(self, *kinds: str) -> list[dict]:
        wanted = set(kinds)
        return [r for r in self.records if r["type"] in wanted]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)
