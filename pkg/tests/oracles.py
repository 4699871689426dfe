"""Independent re-implementations used as test oracles.

Everything here is deliberately written as direct, line-by-line translations
of the algorithm pseudocode or as brute-force re-derivations from raw event
logs, sharing no code with the package under test.
"""
from __future__ import annotations

import math
from collections import defaultdict

MUST_WAIT = "MUST_WAIT"


def alg2_select_instance(loads: list[tuple[str, int]], theta: int):
    """Literal SelectInstance: loads is [(instance_id, m_pending)]."""
    if not loads:
        raise RuntimeError("no active instances")
    candidates = []
    for instance_id, m_pending in loads:
        if m_pending < theta:
            candidates.append(instance_id)
    if candidates:
        best_id, best = None, None
        for instance_id, m_pending in loads:
            if best is None or m_pending < best or (
                m_pending == best and instance_id < best_id
            ):
                best_id, best = instance_id, m_pending
        return best_id
    return MUST_WAIT


def alg2_continuous_lb(state: dict, plateau):
    """Literal ContinuousLB body, one iteration.

    ``state`` maps instance_id -> {"pending": [req ids in order],
    "executing": [(req_id, tokens)]}.  ``plateau`` is the batching plateau or
    None when the profile is not ready yet.  Returns None or a dict order.
    """
    ids = sorted(state)
    m_pending = {i: len(state[i]["pending"]) for i in ids}
    m_exec = {i: len(state[i]["executing"]) for i in ids}
    zero_pending = [i for i in ids if m_pending[i] == 0]
    some_pending = [i for i in ids if m_pending[i] > 0]
    if zero_pending and some_pending:
        i = min(zero_pending)
        j = None
        for k in some_pending:
            if j is None or m_pending[k] > m_pending[j] or (
                m_pending[k] == m_pending[j] and k < j
            ):
                j = k
        return {
            "kind": "pending",
            "from": j,
            "to": i,
            "request_ids": [state[j]["pending"][0]],
        }
    idle = [i for i in ids if m_exec[i] == 0]
    if idle:
        j = None
        for k in ids:
            if j is None or m_exec[k] > m_exec[j] or (
                m_exec[k] == m_exec[j] and k < j
            ):
                j = k
        if m_exec[j] == 0:
            return None
        if plateau is None:
            return None
        r = max(m_exec[j] - plateau, 0)
        if r == 0:
            return None
        i = min(idle)
        movers = sorted(state[j]["executing"], key=lambda item: (item[1], item[0]))
        return {
            "kind": "executing",
            "from": j,
            "to": i,
            "request_ids": [req_id for req_id, _ in movers[:r]],
        }
    return None


def sweep_line_summary(events: list[dict]) -> dict:
    """Trace statistics recomputed by an explicit sweep over raw dicts.

    ``events`` are the parsed-JSON forms: {"at", "kind", "instance_id"}.
    """
    if not events:
        return {"avg_instances": 0.0, "allocations": 0, "preemptions": 0,
                "duration": 0.0}
    duration = events[-1]["at"]
    allocations = sum(1 for e in events if e["kind"] == "allocate")
    preemptions = sum(1 for e in events if e["kind"] == "preempt")
    area = 0.0
    alive: set[str] = set()
    t = 0.0
    for e in events:
        area += len(alive) * (e["at"] - t)
        t = e["at"]
        if e["kind"] == "allocate":
            alive.add(e["instance_id"])
        else:
            alive.remove(e["instance_id"])
    return {
        "avg_instances": area / duration if duration > 0 else 0.0,
        "allocations": allocations,
        "preemptions": preemptions,
        "duration": duration,
    }


def integrate_activity_from_log(records: list[dict]) -> float:
    """Preemptible instance-seconds re-derived from the raw event log."""
    opened: dict[str, float] = {}
    total = 0.0
    last_t = 0.0
    for r in records:
        last_t = max(last_t, r["t"])
        if r["type"] == "instance_registered":
            opened[r["instance_id"]] = r["t"]
        elif r["type"] == "preempt":
            start = opened.pop(r["instance_id"])
            total += r["t"] - start
    for start in opened.values():
        total += last_t - start
    return total


def censored_lognormal_mean(mu: float, sigma: float, lo: float, hi: float) -> float:
    """E[min(max(X, lo), hi)] for X ~ LogNormal(mu, sigma)."""

    def phi(x: float) -> float:
        return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))

    a = (math.log(lo) - mu) / sigma
    b = (math.log(hi) - mu) / sigma
    mean_mid = math.exp(mu + sigma**2 / 2) * (phi(b - sigma) - phi(a - sigma))
    return lo * phi(a) + mean_mid + hi * (1.0 - phi(b))


# -- event log audits --------------------------------------------------------

def audit_requests(records: list[dict]) -> dict[str, dict]:
    """Replay the log into per-request facts, enforcing ownership and
    append-only token growth along the way."""
    requests: dict[str, dict] = {}
    owner: dict[str, str] = {}
    for r in records:
        kind = r["type"]
        if kind == "request_created":
            rid = r["request_id"]
            assert rid not in requests, f"duplicate request {rid}"
            requests[rid] = {
                "target": r["target_len"], "tokens": 0, "complete": False,
                "legs": [], "owners": 0,
            }
        elif kind == "route":
            rid = r["request_id"]
            assert rid not in owner, (
                f"{rid} routed while owned by {owner.get(rid)} at t={r['t']}"
            )
            assert not requests[rid]["complete"], f"{rid} routed after completion"
            owner[rid] = r["instance_id"]
            requests[rid]["legs"].append([r["instance_id"], 0])
        elif kind == "tokens":
            rid = r["request_id"]
            assert owner.get(rid) == r["instance_id"], (
                f"tokens for {rid} from non-owner {r['instance_id']}"
            )
            req = requests[rid]
            req["tokens"] += r["count"]
            assert req["tokens"] == r["total"], f"token count drift for {rid}"
            assert req["tokens"] <= req["target"], f"{rid} overshot"
            req["legs"][-1][1] += r["count"]
        elif kind == "migrate_out":
            rid = r["request_id"]
            assert owner.pop(rid) == r["instance_id"]
            req = requests[rid]
            if r["kept_tokens"] != req["tokens"]:
                # recompute policy: progress discarded on preemption
                assert r["reason"] == "preempt" and r["kept_tokens"] == 0, r
                req["tokens"] = 0
                req["legs"] = []
        elif kind == "complete":
            rid = r["request_id"]
            assert owner.pop(rid) == r["instance_id"]
            req = requests[rid]
            assert not req["complete"], f"{rid} completed twice"
            req["complete"] = True
            assert r["length"] == req["target"], (
                f"{rid} completed at {r['length']} != target {req['target']}"
            )
    return requests


def assert_token_conservation(records: list[dict]) -> int:
    """Every request ends Complete with exactly target_len tokens, summed
    consistently over its route legs.  Returns the request count."""
    requests = audit_requests(records)
    for rid, req in requests.items():
        assert req["complete"], f"{rid} never completed"
        assert req["tokens"] == req["target"], (
            f"{rid}: {req['tokens']} != {req['target']}"
        )
        assert sum(tok for _, tok in req["legs"]) == req["target"], rid
    return len(requests)


def assert_version_gating(records: list[dict]) -> int:
    """No token was emitted by a remote instance that had not completed a
    pull for the version current at the step's start.  Returns the number of
    remote token events checked."""
    current_version = 0
    instance_version: dict[str, int] = {}
    checked = 0
    for r in records:
        kind = r["type"]
        if kind == "step_start":
            current_version = r["version"]
        elif kind == "pull_done":
            instance_version[r["instance_id"]] = r["version"]
        elif kind == "preempt":
            instance_version.pop(r["instance_id"], None)
        elif kind == "tokens" and not r["instance_id"].startswith("local"):
            checked += 1
            assert r["version"] == current_version, (
                f"token event at stale step version on {r['instance_id']}"
            )
            assert instance_version.get(r["instance_id"]) == current_version, (
                f"{r['instance_id']} emitted tokens without pulling "
                f"version {current_version}"
            )
    return checked


def assert_stats_closure(records: list[dict]) -> None:
    """step_end token counters equal the sum of the step's target lengths."""
    step_targets = defaultdict(int)
    step = 0
    for r in records:
        if r["type"] == "step_start":
            step = r["version"]
        elif r["type"] == "request_created":
            step_targets[step] += r["target_len"]
        elif r["type"] == "step_end":
            assert r["tokens_trained"] == step_targets[step], (
                f"step {step}: trained {r['tokens_trained']} != "
                f"sum targets {step_targets[step]}"
            )
            assert r["tokens_generated"] == r["tokens_trained"]
